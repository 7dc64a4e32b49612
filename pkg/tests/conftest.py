"""Shared test helpers: scenario builders, graph generators and BFS oracles."""

from __future__ import annotations

import random
from collections import deque
from pathlib import Path

import pytest

from hamanet import validate

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"

STD_ARTS = [
    {"name": "FreeSpace", "layer": "PHYSICAL"},
    {"name": "CSMA", "layer": "MAC", "params": {"contention": 0}},
    {"name": "DSDV", "layer": "ROUTING"},
    {"name": "TCP-abstract", "layer": "TRANSPORT"},
    {
        "name": "FTP",
        "layer": "APPLICATION",
        "op_codes": ["FILE_REQ", "FILE_CHUNK", "FILE_ACK", "FILE_FAIL", "PING"],
    },
]

STD_CULTURE = {
    "name": "svc",
    "slots": {
        "PHYSICAL": "FreeSpace",
        "MAC": "CSMA",
        "ROUTING": "DSDV",
        "TRANSPORT": "TCP-abstract",
        "APPLICATION": "FTP",
    },
}


def make_scenario(
    labels,
    edges,
    interests=None,
    steps=None,
    params=None,
    arts=None,
    cultures=None,
    files=None,
    end_time=100,
    name="test",
):
    merged_params = {"hello_interval": 0}
    merged_params.update(params or {})
    return validate(
        {
            "name": name,
            "nodes": [{"label": l} for l in labels],
            "edges": [list(e) for e in edges],
            "arts": arts or STD_ARTS,
            "cultures": cultures or [STD_CULTURE],
            "interests": interests if interests is not None else {},
            "files": files or [],
            "params": merged_params,
            "steps": steps or [],
            "end_time": end_time,
        }
    )


def formation_scenario(labels, edges, si=None, culture="svc", **kwargs):
    """All nodes interested, one service start at t=0."""
    si = si or labels[0]
    interests = {l: [culture] for l in labels if l != si}
    steps = [{"time": 0, "op": "start_service", "node": si, "culture": culture}]
    steps += kwargs.pop("extra_steps", [])
    return make_scenario(labels, edges, interests=interests, steps=steps, **kwargs)


def adjacency_of(labels, edges):
    adj = {l: set() for l in labels}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    return adj


def bfs_dist(adj, src):
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def graph_diameter(adj):
    return max(max(bfs_dist(adj, l).values()) for l in adj)


def random_connected_graph(rng: random.Random, n: int, extra_p: float = 0.2):
    """Random connected labeled graph: a random tree plus extra edges."""
    labels = [f"N{i}" for i in range(1, n + 1)]
    order = labels[:]
    rng.shuffle(order)
    edges = set()
    for i in range(1, n):
        edges.add(tuple(sorted((order[i], order[rng.randrange(i)]))))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < extra_p:
                edges.add(tuple(sorted((labels[i], labels[j]))))
    return labels, sorted(edges)


def trace_events(trace, ev, **match):
    """Trace lines for event ``ev`` whose k=v fields match all filters."""
    hits = []
    for line in trace:
        fields = dict(part.split("=", 1) for part in line.split(" "))
        if fields.get("ev") != ev:
            continue
        if all(fields.get(k) == str(v) for k, v in match.items()):
            hits.append(fields)
    return hits


@pytest.fixture
def table4_scenario():
    return formation_scenario(
        ["N1", "N2", "N3", "N4"],
        [("N1", "N2"), ("N1", "N3"), ("N2", "N4")],
        end_time=60,
    )
