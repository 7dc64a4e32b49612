"""Scenario files: one JSON document describing topology, services and script.

The canonical text encoding is JSON with sorted keys and two-space indent;
loading, re-emitting and re-loading a scenario yields an equivalent document.
Validation is total: every problem is reported with a field path instead of
stopping at the first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .engine import MAC_PRESETS, PHYSICAL_PRESETS
from .fabric import ArtDef, ArtRegistry, CultureDef, FabricError

STEP_OPS = (
    "start_service",
    "late_join",
    "send",
    "ftp_request",
    "add_edge",
    "remove_edge",
    "adversary",
)

PARAM_DEFAULTS = {
    "join_window": 10,
    "rreq_timeout": 20,
    "deliver_timeout": 20,
    "hello_interval": 5,
    "chunk_size": 1024,
    "data_queue_limit": 64,
}

ADVERSARY_BEHAVIORS = ("UNDECLARED_OP", "BOGUS_RREP", "SELFISH")


class ScenarioError(Exception):
    pass


def build_art_def(art: dict) -> "ArtDef":
    """One scenario art entry to an ArtDef, presets merged under overrides."""
    params = {}
    if art["layer"] == "PHYSICAL":
        params.update(PHYSICAL_PRESETS.get(art["name"], {}))
    elif art["layer"] == "MAC":
        params.update(MAC_PRESETS.get(art["name"], {}))
    params.update(art.get("params", {}))
    return ArtDef(
        name=art["name"],
        layer=art["layer"],
        op_codes=frozenset(art.get("op_codes", ())),
        params=params,
        need_tag=art.get("need_tag"),
    )


class ParseError(ScenarioError):
    pass


class ValidationError(ScenarioError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class Scenario:
    name: str
    nodes: list
    edges: list = field(default_factory=list)
    geometry: dict | None = None
    arts: list = field(default_factory=list)
    cultures: list = field(default_factory=list)
    interests: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)
    end_time: float = 100
    comment: str = ""

    def labels(self):
        return [n["label"] for n in self.nodes]

    def art_defs(self):
        """ArtDefs with preset parameters merged under declared overrides."""
        return [build_art_def(art) for art in self.arts]

    def culture_defs(self):
        return [
            CultureDef(
                name=c["name"],
                slots=dict(c["slots"]),
                requires=tuple(c.get("requires", ())),
            )
            for c in self.cultures
        ]

    def resolved_params(self) -> dict:
        merged = dict(PARAM_DEFAULTS)
        merged.update(self.params)
        from .engine import to_micro

        return {
            "join_window_micro": to_micro(merged["join_window"]),
            "rreq_timeout_micro": to_micro(merged["rreq_timeout"]),
            "deliver_timeout_micro": to_micro(merged["deliver_timeout"]),
            "hello_interval_micro": to_micro(merged["hello_interval"]),
            "chunk_size": int(merged["chunk_size"]),
            "data_queue_limit": int(merged["data_queue_limit"]),
        }

    def with_send_count(self, k: int, gap: float = 10.0) -> "Scenario":
        """Variant keeping the first k mirrored sends, repeating the last as needed.

        Used by compare mode; hello beacons are disabled so the two modes
        carry an identical comparable workload.
        """
        mirrored = [s for s in self.steps if s["op"] == "send" and s.get("mirror", True)]
        other = [s for s in self.steps if not (s["op"] == "send" and s.get("mirror", True))]
        sends = [dict(s) for s in mirrored[:k]]
        while len(sends) < k:
            if not mirrored:
                raise ScenarioError("cannot extend a workload with no mirrored sends")
            extension = dict(mirrored[-1])
            extension["time"] = (sends[-1] if sends else mirrored[-1])["time"] + gap
            sends.append(extension)
        steps = sorted(other + sends, key=lambda s: s["time"])
        end_time = max([self.end_time] + [s["time"] + gap for s in sends])
        params = dict(self.params)
        params["hello_interval"] = 0
        return replace(self, steps=steps, params=params, end_time=end_time)

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "nodes": self.nodes,
            "arts": self.arts,
            "cultures": self.cultures,
            "interests": self.interests,
            "files": self.files,
            "params": self.params,
            "steps": self.steps,
            "end_time": self.end_time,
        }
        if self.geometry is not None:
            out["geometry"] = self.geometry
        else:
            out["edges"] = [list(e) for e in self.edges]
        if self.comment:
            out["comment"] = self.comment
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_scenario(path) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    return loads_scenario(text)


def loads_scenario(text: str) -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ParseError("scenario document must be a JSON object")
    return validate(raw)


def validate(raw: dict) -> Scenario:
    """Check every field and either return a Scenario or raise with all errors."""
    errors: list[str] = []

    def err(path, message):
        errors.append(f"{path}: {message}")

    nodes = raw.get("nodes") or []
    labels = []
    if not isinstance(nodes, list) or not nodes:
        err("nodes", "at least one node is required")
        nodes = []
    for i, node in enumerate(nodes):
        label = node.get("label") if isinstance(node, dict) else None
        if not label or not isinstance(label, str) or "-" in label or label == "*":
            err(f"nodes[{i}]", "node needs a label without dashes")
        elif label in labels:
            err(f"nodes[{i}]", f"duplicate label {label!r}")
        else:
            labels.append(label)
    label_set = set(labels)

    geometry = raw.get("geometry")
    edges = []
    if geometry is not None:
        if raw.get("edges"):
            err("edges", "give either explicit edges or geometry, not both")
        positions = geometry.get("positions", {})
        if set(positions) != label_set:
            err("geometry.positions", "positions must cover exactly the node labels")
        if not isinstance(geometry.get("radius"), (int, float)) or geometry.get("radius", 0) <= 0:
            err("geometry.radius", "radius must be a positive number")
    else:
        for i, edge in enumerate(raw.get("edges") or []):
            if not isinstance(edge, (list, tuple)) or len(edge) != 2:
                err(f"edges[{i}]", "an edge is a pair of labels")
                continue
            a, b = edge
            if a == b:
                err(f"edges[{i}]", "self-edges are not allowed")
            elif a not in label_set or b not in label_set:
                err(f"edges[{i}]", f"unknown endpoint in {a}-{b}")
            else:
                edges.append((a, b))

    arts = raw.get("arts") or []
    cultures = raw.get("cultures") or []
    registry = ArtRegistry()
    culture_names = set()
    for i, art in enumerate(arts):
        try:
            registry.register_art(build_art_def(art))
        except (FabricError, KeyError, TypeError) as exc:
            err(f"arts[{i}]", str(exc))
    for i, culture in enumerate(cultures):
        name = culture.get("name") if isinstance(culture, dict) else None
        if not name:
            err(f"cultures[{i}]", "culture needs a name")
            continue
        try:
            registry.register_culture(
                CultureDef(
                    name=name,
                    slots=dict(culture.get("slots", {})),
                    requires=tuple(culture.get("requires", ())),
                )
            )
            culture_names.add(name)
        except FabricError as exc:
            err(f"cultures[{i}]", str(exc))

    interests = raw.get("interests") or {}
    for label, wanted in interests.items():
        if label not in label_set:
            err(f"interests.{label}", "unknown node")
        for culture in wanted:
            if culture not in culture_names:
                err(f"interests.{label}", f"unknown culture {culture!r}")

    files = raw.get("files") or []
    for i, entry in enumerate(files):
        if entry.get("node") not in label_set:
            err(f"files[{i}]", "file must live on a known node")
        if not isinstance(entry.get("bytes"), int) or entry["bytes"] < 0:
            err(f"files[{i}]", "bytes must be a non-negative integer")
        if not entry.get("name"):
            err(f"files[{i}]", "file needs a name")

    params = raw.get("params") or {}
    for key, value in params.items():
        if key not in PARAM_DEFAULTS:
            err(f"params.{key}", "unknown parameter")
        elif not isinstance(value, (int, float)) or value < 0:
            err(f"params.{key}", "parameter must be a non-negative number")

    end_time = raw.get("end_time")
    if not isinstance(end_time, (int, float)) or end_time <= 0:
        err("end_time", "a positive end_time is required")
        end_time = 0

    steps = raw.get("steps") or []
    adversary_nodes = set()
    for i, step in enumerate(steps):
        where = f"steps[{i}]"
        op = step.get("op")
        if op not in STEP_OPS:
            err(where, f"unknown op {op!r}")
            continue
        t = step.get("time")
        if not isinstance(t, (int, float)) or t < 0:
            err(where, "step needs a non-negative time")
        elif end_time and t > end_time:
            err(where, f"step time {t} exceeds end_time {end_time}")
        if op == "start_service":
            if step.get("node") not in label_set:
                err(where, "unknown node")
            if step.get("culture") not in culture_names:
                err(where, f"unknown culture {step.get('culture')!r}")
        elif op == "late_join":
            if step.get("node") not in label_set:
                err(where, "unknown node")
            if not step.get("cid"):
                err(where, "late_join needs a cid")
        elif op == "send":
            for end in ("src", "dst"):
                if step.get(end) not in label_set:
                    err(where, f"unknown {end}")
            if not step.get("cid") or not step.get("op_code"):
                err(where, "send needs cid and op_code")
            if not isinstance(step.get("bytes", 0), int) or step.get("bytes", 0) < 0:
                err(where, "bytes must be a non-negative integer")
        elif op == "ftp_request":
            for end in ("src", "dst"):
                if step.get(end) not in label_set:
                    err(where, f"unknown {end}")
            if not step.get("cid") or not step.get("file"):
                err(where, "ftp_request needs cid and file")
        elif op in ("add_edge", "remove_edge"):
            if step.get("a") not in label_set or step.get("b") not in label_set:
                err(where, "unknown endpoint")
        elif op == "adversary":
            if step.get("node") not in label_set:
                err(where, "unknown node")
            else:
                adversary_nodes.add(step["node"])
            if step.get("behavior") not in ADVERSARY_BEHAVIORS:
                err(where, f"unknown behavior {step.get('behavior')!r}")
    for label in sorted(adversary_nodes):
        if interests.get(label):
            err(f"interests.{label}", "adversary nodes never join communities")

    if errors:
        raise ValidationError(errors)

    return Scenario(
        name=raw.get("name", "scenario"),
        nodes=nodes,
        edges=edges,
        geometry=geometry,
        arts=arts,
        cultures=cultures,
        interests=interests,
        files=files,
        params=params,
        steps=steps,
        end_time=end_time,
        comment=raw.get("comment", ""),
    )
