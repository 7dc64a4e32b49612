"""Event-queue infrastructure: topology, clock, metrics and per-node runtime state.

Simulation time is fixed point: integers counting micro-units, with
``TIME_SCALE`` micro-units per scenario time unit. No float ever enters event
ordering, so identical inputs replay bit-identically on any platform.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from collections import deque
from dataclasses import dataclass, field

from .core import NodeId, table_digest

TIME_SCALE = 1000  # micro-units per scenario time unit

# Event actions
DELIVER = "DELIVER"
TIMER = "TIMER"
SCENARIO = "SCENARIO"


def to_micro(units) -> int:
    """Scenario time units (int or float) to integer micro-units."""
    return int(round(units * TIME_SCALE))


class CausalityError(AssertionError):
    pass


@dataclass(frozen=True)
class Event:
    time: int
    seq: int
    action: str  # DELIVER | TIMER | SCENARIO
    data: tuple

    def sort_key(self):
        return (self.time, self.seq)


class EventQueue:
    """Min-heap of events popped in (time, seq) order; seq is insertion order."""

    def __init__(self):
        self._heap: list[tuple[int, int, Event]] = []
        self._seq = 0
        self.now = 0

    def push(self, time: int, action: str, data: tuple) -> Event:
        if time < self.now:
            raise CausalityError(f"scheduling at {time} before now {self.now}")
        ev = Event(time, self._seq, action, data)
        self._seq += 1
        heapq.heappush(self._heap, (time, ev.seq, ev))
        return ev

    def pop(self) -> Event:
        time, _, ev = heapq.heappop(self._heap)
        self.now = time
        return ev

    def peek_time(self):
        return self._heap[0][0] if self._heap else None

    def __len__(self):
        return len(self._heap)


class Topology:
    """Nodes plus an undirected edge set, optionally derived from geometry."""

    def __init__(self, labels, attrs=None, positions=None, radius=None):
        self.nodes: dict[str, NodeId] = {
            label: NodeId(label, i) for i, label in enumerate(labels)
        }
        self.attrs: dict[str, dict] = {label: dict((attrs or {}).get(label, {})) for label in labels}
        self.adjacency: dict[str, set] = {label: set() for label in labels}
        self.positions = positions
        self.radius = radius
        if positions is not None:
            if radius is None:
                raise ValueError("geometry requires a radius")
            for a, b in self.geometric_edges(positions, radius):
                self.add_edge(a, b)

    @staticmethod
    def geometric_edges(positions, radius):
        """All unordered pairs within ``radius`` (inclusive), sorted."""
        labels = sorted(positions)
        edges = []
        for i, a in enumerate(labels):
            ax, ay = positions[a]
            for b in labels[i + 1 :]:
                bx, by = positions[b]
                if math.dist((ax, ay), (bx, by)) <= radius:
                    edges.append((a, b))
        return edges

    def add_edge(self, a: str, b: str) -> None:
        if a == b:
            raise ValueError("self-edges are not allowed")
        if a not in self.nodes or b not in self.nodes:
            raise ValueError(f"unknown endpoint in edge {a}-{b}")
        self.adjacency[a].add(b)
        self.adjacency[b].add(a)

    def remove_edge(self, a: str, b: str) -> None:
        self.adjacency[a].discard(b)
        self.adjacency[b].discard(a)

    def has_edge(self, a: str, b: str) -> bool:
        return b in self.adjacency.get(a, ())

    def neighbors(self, label: str):
        """Neighbor labels sorted by node index (deterministic fan-out order)."""
        return sorted(self.adjacency[label], key=lambda l: self.nodes[l].index)

    def edges(self):
        seen = set()
        for a in sorted(self.adjacency):
            for b in self.adjacency[a]:
                e = tuple(sorted((a, b)))
                if e not in seen:
                    seen.add(e)
                    yield e

    def index(self, label: str) -> int:
        return self.nodes[label].index


@dataclass
class LinkModel:
    """Per-hop link behavior resolved from PHYSICAL and MAC art parameters."""

    delay_micro: int = TIME_SCALE  # per-hop propagation delay
    loss_p: float = 0.0
    contention_micro: int = 0  # uniform extra delay drawn in [0, contention_micro]

    def __post_init__(self):
        if self.delay_micro <= 0:
            raise ValueError("per-hop delay must be positive")
        if not 0.0 <= self.loss_p <= 1.0:
            raise ValueError("loss probability outside [0,1]")


# Named physical/MAC presets; simulator conventions, selectable per art name.
PHYSICAL_PRESETS = {
    "FreeSpace": {"delay": 1, "loss": 0.0},
    "Free space": {"delay": 1, "loss": 0.0},
    "TwoRay": {"delay": 2, "loss": 0.01},
    "Two-Ray": {"delay": 2, "loss": 0.01},
}
MAC_PRESETS = {
    "CSMA": {"contention": 1},
    "MACA": {"contention": 1},
    "TSMA": {"contention": 1},
    "802.11": {"contention": 2},
}


class MetricsReport:
    """Counters for one run. All counters only ever increase."""

    DROP_REASONS = (
        "DELIVERY_TIMEOUT",
        "QUEUE_OVERFLOW",
        "NO_FRIEND",
        "NOT_IN_COMMUNITY",
        "UNKNOWN_CID",
        "NO_MACHINE",
    )

    def __init__(self):
        self.broadcast_tx = 0
        self.unicast_tx = 0
        self.control_tx = {kind: 0 for kind in ("MCSTART", "MCJOIN", "RREQ", "RREP", "RERR", "HELLO", "FRIEND")}
        self.data_tx = 0
        self.delivered = 0
        self.dropped: dict[str, int] = {}
        self.rejected_ops = 0
        self.stale_replies = 0
        self.control_rejected = 0
        self.members_dropped = 0
        self.bytes_delivered = 0
        self.data_sends = 0
        self.in_flight_at_end = 0
        self.channel_lost = 0
        self.community_formation_times: dict[str, int] = {}

    def total_tx(self) -> int:
        return self.broadcast_tx + self.unicast_tx

    def count_tx(self, kind: str, broadcast: bool) -> None:
        if broadcast:
            self.broadcast_tx += 1
        else:
            self.unicast_tx += 1
        if kind == "DATA":
            self.data_tx += 1
        else:
            self.control_tx[kind] += 1

    def drop(self, reason: str) -> None:
        self.dropped[reason] = self.dropped.get(reason, 0) + 1

    def as_dict(self) -> dict:
        return {
            "broadcast_tx": self.broadcast_tx,
            "unicast_tx": self.unicast_tx,
            "total_tx": self.total_tx(),
            "control_tx": {k: v for k, v in sorted(self.control_tx.items())},
            "data_tx": self.data_tx,
            "data_sends": self.data_sends,
            "delivered": self.delivered,
            "dropped": {k: v for k, v in sorted(self.dropped.items())},
            "in_flight_at_end": self.in_flight_at_end,
            "rejected_ops": self.rejected_ops,
            "stale_replies": self.stale_replies,
            "control_rejected": self.control_rejected,
            "members_dropped": self.members_dropped,
            "channel_lost": self.channel_lost,
            "bytes_delivered": self.bytes_delivered,
            "community_formation_times": {
                k: v for k, v in sorted(self.community_formation_times.items())
            },
        }


class TraceLog:
    """Line-oriented event log, bit-exact for golden comparisons.

    Format: ``t=<int> node=<label> ev=<NAME> [pkt=<id>] [k=v]...`` with the
    extra keys emitted in sorted order.
    """

    def __init__(self):
        self.lines: list[str] = []

    def emit(self, t: int, node: str, ev: str, pkt=None, **kv) -> None:
        parts = [f"t={t}", f"node={node}", f"ev={ev}"]
        if pkt is not None:
            parts.append(f"pkt={pkt}")
        parts += [f"{k}={kv[k]}" for k in sorted(kv)]
        self.lines.append(" ".join(parts))

    def text(self) -> str:
        return "\n".join(self.lines) + ("\n" if self.lines else "")

    def count(self, ev: str, **match) -> int:
        """Number of trace lines with event ``ev`` matching all k=v filters."""
        needle = f"ev={ev}"
        hits = 0
        for line in self.lines:
            fields = dict(f.split("=", 1) for f in line.split(" "))
            if fields.get("ev") != ev:
                continue
            if all(fields.get(k) == str(v) for k, v in match.items()):
                hits += 1
        return hits


@dataclass
class NeighborEntry:
    last_hello: int
    cids: tuple = ()


class Node:
    """Runtime state of one simulated node."""

    def __init__(self, node_id: NodeId, attrs=None):
        self.id = node_id
        self.label = node_id.label
        self.index = node_id.index
        self.attrs = dict(attrs or {})
        self.machines: dict[str, object] = {}  # cid -> MachineInstance
        self.pending: dict[str, object] = {}  # culture name -> MachineInstance (no cid yet)
        self.next_ordinal = 0
        self.tables: dict[str, object] = {}  # cid -> CommunityTable
        self.neighbor_set: dict[str, NeighborEntry] = {}
        self.seen_packets: set[int] = set()
        self.flood_pending: dict[int, list] = {}  # packet_id -> [(sender_index, env)]
        self.rreq_seen: set[tuple] = set()
        self.next_rreq_id = 0
        self.pending_rreqs: dict[int, dict] = {}
        self.data_queue: dict[str, deque] = {}  # cid -> queued sends awaiting repair
        self.join_replies_seen: set[str] = set()  # cids this node already late-joined via
        self.selfish = False

    def machine_for(self, cid: str):
        return self.machines.get(cid)

    def is_member(self, cid: str) -> bool:
        return cid in self.machines and cid in self.tables

    def member_cids(self):
        return tuple(sorted(self.machines))


def state_digest(nodes, society) -> str:
    """Digest of all community tables, the society table and neighbor sets."""
    h = hashlib.sha256()
    for label in sorted(nodes):
        node = nodes[label]
        h.update(f"node:{label}\n".encode())
        for cid in sorted(node.tables):
            h.update(table_digest(node.tables[cid]).encode())
            h.update(b"\n")
        for neigh in sorted(node.neighbor_set):
            entry = node.neighbor_set[neigh]
            h.update(f"nb:{neigh}:{entry.last_hello}\n".encode())
    h.update(table_digest(society).encode())
    return h.hexdigest()
