"""Shared domain vocabulary: identifiers, paths, packets and the two table kinds."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

# Distinguished broadcast destination. Deliberately not a legal node label.
BROADCAST = "*"

# Packet kinds on the wire. Everything the simulator transmits is one of these.
MCSTART = "MCSTART"
MCJOIN = "MCJOIN"
RREQ = "RREQ"
RREP = "RREP"
RERR = "RERR"
HELLO = "HELLO"
FRIEND = "FRIEND"
DATA = "DATA"

PACKET_KINDS = (MCSTART, MCJOIN, RREQ, RREP, RERR, HELLO, FRIEND, DATA)
CONTROL_KINDS = (MCSTART, MCJOIN, RREQ, RREP, RERR, HELLO, FRIEND)

Path = tuple  # alias for a hop list: tuple[str, ...] of node labels, owner first


class MalformedPath(ValueError):
    """Raised for empty paths, unknown labels or repeated hops."""


@dataclass(frozen=True, order=True)
class NodeId:
    label: str
    index: int


@dataclass(frozen=True, order=True)
class MachineId:
    """Identity of a machine: hosting node label plus a per-node ordinal."""

    node: str
    ordinal: int

    def __str__(self) -> str:
        return f"{self.node}#{self.ordinal}"


def parse_path(text: str, known_labels=None) -> tuple[str, ...]:
    """Parse a dash-separated hop list like ``N1-N2-N4`` into a label tuple.

    ``known_labels``, when given, restricts hops to that label set.
    """
    if not isinstance(text, str) or not text.strip():
        raise MalformedPath("empty path")
    hops = tuple(part.strip() for part in text.split("-"))
    if any(not hop for hop in hops):
        raise MalformedPath(f"blank hop in {text!r}")
    if known_labels is not None:
        for hop in hops:
            if hop not in known_labels:
                raise MalformedPath(f"unknown label {hop!r} in {text!r}")
    if len(set(hops)) != len(hops):
        raise MalformedPath(f"repeated hop in {text!r}")
    return hops


def format_path(path) -> str:
    """Inverse of parse_path: join hop labels with dashes."""
    if not path:
        raise MalformedPath("empty path")
    return "-".join(path)


def path_is_valid(path, adjacency) -> bool:
    """True when every consecutive hop pair is an edge in ``adjacency``."""
    if not path or len(set(path)) != len(path):
        return False
    for a, b in zip(path, path[1:]):
        if b not in adjacency.get(a, ()):
            return False
    return True


@dataclass
class PacketEnvelope:
    """One simulated transmission unit, control or data.

    ``hop_trace`` lists the nodes that have transmitted the packet so far,
    origin first; forwarding appends exactly one entry and never revisits a
    node. ``route`` is the planned source route for unicast legs. ``control``
    carries kind-specific payload objects and ``inner`` a wrapped envelope
    (FRIEND relay only).
    """

    packet_id: int
    kind: str
    op_code: str
    src: str
    dst: str
    cid: str | None = None
    origin_machine: MachineId | None = None
    hop_trace: tuple[str, ...] = ()
    payload_bytes: int = 0
    payload: bytes | None = None
    seq: int | None = None
    route: tuple[str, ...] | None = None
    control: object = None
    inner: "PacketEnvelope | None" = None
    send_ref: int | None = None

    def __post_init__(self):
        if self.kind not in PACKET_KINDS:
            raise ValueError(f"unknown packet kind {self.kind!r}")
        if not self.hop_trace:
            self.hop_trace = (self.src,)
        if self.hop_trace[0] != self.src:
            raise ValueError("hop_trace must begin at src")
        if len(set(self.hop_trace)) != len(self.hop_trace):
            raise ValueError("hop_trace revisits a node")
        if self.kind in (MCSTART, MCJOIN, RREQ) and self.cid is None:
            raise ValueError(f"{self.kind} requires a cid")
        if self.kind == DATA and self.cid is not None and self.seq is None:
            raise ValueError("community DATA requires a seq")

    def forwarded_by(self, label: str) -> "PacketEnvelope":
        """Copy of this envelope with ``label`` appended to the hop trace."""
        if label in self.hop_trace:
            raise ValueError(f"{label} already in hop trace")
        return replace(self, hop_trace=self.hop_trace + (label,))


@dataclass
class CommunityTable:
    """Per-member routing table: machine id to source-routed path.

    Every path starts at the owner; the owner itself is never a row key.
    """

    owner: str
    cid: str
    rows: dict = field(default_factory=dict)  # MachineId -> tuple of labels

    def add_row(self, mid: MachineId, path) -> None:
        if mid.node == self.owner:
            raise ValueError("owner never appears as a row key")
        if path[0] != self.owner:
            raise ValueError(f"path {path} does not start at owner {self.owner}")
        self.rows[mid] = tuple(path)

    def remove_row(self, mid: MachineId) -> None:
        self.rows.pop(mid, None)

    def row_for_node(self, label: str):
        """(mid, path) for the member hosted on ``label``, or None."""
        for mid in self.rows:
            if mid.node == label:
                return mid, self.rows[mid]
        return None

    def sorted_rows(self):
        return sorted(self.rows.items(), key=lambda kv: (kv[0].node, kv[0].ordinal))


@dataclass
class SocietyTable:
    """Network-wide registry of live communities: cid to culture name."""

    rows: dict = field(default_factory=dict)  # cid -> culture name

    def register(self, cid: str, culture: str) -> None:
        if cid in self.rows:
            raise ValueError(f"cid {cid} already registered")
        self.rows[cid] = culture

    def lookup(self, cid: str) -> str | None:
        return self.rows.get(cid)


def society_lookup(table: SocietyTable, cid: str) -> str | None:
    """Culture name registered for ``cid``, or None when not found."""
    return table.lookup(cid)


def table_digest(table) -> str:
    """Deterministic sha256 digest over canonically ordered table rows."""
    if isinstance(table, CommunityTable):
        lines = [f"CT|{table.owner}|{table.cid}"]
        lines += [
            f"{mid}|{table.cid}|{format_path(path)}"
            for mid, path in table.sorted_rows()
        ]
    elif isinstance(table, SocietyTable):
        lines = ["ST"]
        lines += [f"{cid}|{table.rows[cid]}" for cid in sorted(table.rows)]
    else:
        raise TypeError(f"not a table: {type(table).__name__}")
    blob = "\n".join(lines).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
