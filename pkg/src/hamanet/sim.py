"""Run orchestration: scenario wiring, the event loop, transmission and reports.

One Simulation owns one run. All randomness flows from a single seeded
generator with a fixed draw order: for every point-to-point transmission one
loss draw then one contention draw, and for every adversary emission one
target draw. Identical (scenario, seed, mode) inputs replay to bit-identical
reports and traces.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .community import CommunityManager, CommunityError
from .core import BROADCAST, DATA, HELLO, MachineId, PacketEnvelope, format_path
from .engine import (
    DELIVER,
    SCENARIO,
    TIMER,
    EventQueue,
    LinkModel,
    MetricsReport,
    Node,
    TIME_SCALE,
    Topology,
    TraceLog,
    state_digest,
    to_micro,
)
from .fabric import ArtRegistry, DuplicatePending
from .routing import Router
from .services import ServiceError, ServiceLayer

MODES = ("hamanet", "baseline")

TRANSPORT_DEFAULTS = {"window": 4, "retransmit_limit": 8, "retransmit_timeout": 30}


@dataclass
class AdversaryProfile:
    node: str
    behavior: str  # UNDECLARED_OP | BOGUS_RREP | SELFISH
    rate: float = 1.0
    count: int = 0
    start: int = 0
    cid: str | None = None
    op_code: str = "UNDECLARED_OP"
    emitted: int = 0

    def active(self, now: int) -> bool:
        return now >= self.start


class Simulation:
    def __init__(self, scenario, seed: int, mode: str = "hamanet"):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.scenario = scenario
        self.seed = seed
        self.mode = mode
        self.rng = random.Random(seed)
        self.queue = EventQueue()
        self.metrics = MetricsReport()
        self.trace = TraceLog()
        self.violations: list[str] = []

        labels = [n["label"] for n in scenario.nodes]
        attrs = {n["label"]: {k: v for k, v in n.items() if k != "label"} for n in scenario.nodes}
        if scenario.geometry:
            self.topology = Topology(
                labels,
                attrs,
                positions=scenario.geometry["positions"],
                radius=scenario.geometry["radius"],
            )
        else:
            self.topology = Topology(labels, attrs)
            for a, b in scenario.edges:
                self.topology.add_edge(a, b)
        self.nodes: dict[str, Node] = {
            label: Node(self.topology.nodes[label], attrs[label]) for label in labels
        }

        self.registry = ArtRegistry()
        for art in scenario.art_defs():
            self.registry.register_art(art)
        for culture in scenario.culture_defs():
            self.registry.register_culture(culture)

        self.interests = {label: tuple(v) for label, v in scenario.interests.items()}
        self.params = scenario.resolved_params()
        self.end_micro = to_micro(scenario.end_time)

        self.router = Router(self)
        self.community = CommunityManager(self)
        self.services = ServiceLayer(self)

        self.adversaries: dict[str, AdversaryProfile] = {}
        self.sends: dict[int, dict] = {}
        self._next_send = 1
        self._next_pid = 1
        self._next_seq = 0
        self.files = {
            (f["node"], f["name"]): _file_bytes(seed, f["name"], f["bytes"])
            for f in scenario.files
        }

        for step in scenario.steps:
            self.queue.push(to_micro(step["time"]), SCENARIO, (step,))
        if self.mode == "hamanet" and self.params["hello_interval_micro"] > 0:
            first = self.params["hello_interval_micro"]
            for label in labels:
                self.queue.push(first, TIMER, ("HELLO_TICK", label))

    # -- identity helpers -------------------------------------------------------

    def next_packet_id(self) -> int:
        pid = self._next_pid
        self._next_pid += 1
        return pid

    def next_data_seq(self) -> int:
        seq = self._next_seq
        self._next_seq += 1
        return seq

    def instantiate_machine(self, label: str, culture_name: str):
        """Create a pending machine on a node; ordinals grow per node."""
        node = self.nodes[label]
        self.registry.culture(culture_name)
        if culture_name in node.pending:
            raise DuplicatePending(f"{label} already has a pending {culture_name} machine")
        machine = self.registry.instantiate(culture_name, label, node.next_ordinal)
        node.next_ordinal += 1
        node.pending[culture_name] = machine
        return machine

    def file_content(self, label: str, name: str):
        return self.files.get((label, name))

    # -- send accounting ----------------------------------------------------------

    def new_send(self, origin: str | None = None) -> int:
        ref = self._next_send
        self._next_send += 1
        self.sends[ref] = {"state": "PENDING", "origin": origin}
        self.metrics.data_sends += 1
        deadline = self.queue.now + self.params["deliver_timeout_micro"]
        self.queue.push(deadline, TIMER, ("SEND_DEADLINE", ref))
        return ref

    def mark_send(self, ref, outcome: str) -> bool:
        """Resolve a send exactly once. True when this call resolved it."""
        if ref is None:
            return False
        record = self.sends.get(ref)
        if record is None or record["state"] != "PENDING":
            return False
        record["state"] = outcome
        if outcome == "DELIVERED":
            self.metrics.delivered += 1
        else:
            self.metrics.drop(outcome)
        return True

    def on_send_deadline(self, ref: int) -> None:
        record = self.sends.get(ref)
        if record is None or record["state"] != "PENDING":
            return
        record["state"] = "DELIVERY_TIMEOUT"
        self.metrics.drop("DELIVERY_TIMEOUT")
        self.trace.emit(
            self.queue.now, record["origin"] or "?", "DROP", reason="DELIVERY_TIMEOUT"
        )

    # -- link layer -----------------------------------------------------------------

    def link_model(self, cid: str | None) -> LinkModel:
        culture_name = self.culture_for_cid(cid) if cid else None
        if culture_name is None:
            return LinkModel(TIME_SCALE, 0.0, 0)
        physical = self.registry.culture_art(culture_name, "PHYSICAL").params
        mac = self.registry.culture_art(culture_name, "MAC").params
        return LinkModel(
            delay_micro=to_micro(physical.get("delay", 1)),
            loss_p=float(physical.get("loss", 0.0)),
            contention_micro=to_micro(mac.get("contention", 0)),
        )

    def culture_for_cid(self, cid: str) -> str | None:
        initiator = self.community.initiators.get(cid)
        if initiator is not None:
            return initiator.culture
        community = self.community.communities.get(cid)
        if community is not None:
            return community.culture
        return self.community.society.lookup(cid)

    def transport_params(self, culture_name: str) -> dict:
        params = dict(TRANSPORT_DEFAULTS)
        params["chunk_size"] = self.params["chunk_size"]
        params.update(self.registry.culture_art(culture_name, "TRANSPORT").params)
        return params

    def transmit(self, node, dst: str, pkt: PacketEnvelope) -> None:
        """One point-to-point transmission; a missing edge surfaces as a link break."""
        src = node.label
        if not self.topology.has_edge(src, dst):
            self.trace.emit(self.queue.now, src, "DROP", pkt.packet_id, reason="LINK_BREAK", to=dst)
            self.router.link_break(src, dst)
            return
        model = self.link_model(pkt.cid)
        self.metrics.count_tx(pkt.kind, broadcast=False)
        self.trace.emit(self.queue.now, src, f"{pkt.kind}_TX", pkt.packet_id, to=dst)
        lost = self.rng.random() < model.loss_p  # draw 1: loss
        extra = self.rng.randrange(model.contention_micro + 1)  # draw 2: contention
        if lost:
            self.metrics.channel_lost += 1
            self.trace.emit(self.queue.now, src, "DROP", pkt.packet_id, reason="CHANNEL_LOSS", to=dst)
            return
        self.queue.push(self.queue.now + model.delay_micro + extra, DELIVER, (pkt, dst, src))

    def broadcast(self, node, pkt: PacketEnvelope) -> None:
        """One broadcast transmission reaching every current neighbor."""
        src = node.label
        model = self.link_model(pkt.cid)
        self.metrics.count_tx(pkt.kind, broadcast=True)
        self.trace.emit(self.queue.now, src, f"{pkt.kind}_TX", pkt.packet_id, to=BROADCAST)
        for neighbor in self.topology.neighbors(src):
            lost = self.rng.random() < model.loss_p
            extra = self.rng.randrange(model.contention_micro + 1)
            if lost:
                self.metrics.channel_lost += 1
                self.trace.emit(
                    self.queue.now, src, "DROP", pkt.packet_id, reason="CHANNEL_LOSS", to=neighbor
                )
                continue
            self.queue.push(self.queue.now + model.delay_micro + extra, DELIVER, (pkt, neighbor, src))

    # -- event dispatch -----------------------------------------------------------------

    def run_until(self, until_micro: int) -> None:
        """Drain events up to and including ``until_micro``."""
        horizon = min(until_micro, self.end_micro)
        while len(self.queue) and self.queue.peek_time() <= horizon:
            event = self.queue.pop()
            if event.action == DELIVER:
                self.on_deliver(*event.data)
            elif event.action == TIMER:
                self.on_timer(*event.data)
            elif event.action == SCENARIO:
                self.run_step(event.data[0])

    def run(self):
        self.run_until(self.end_micro)
        self.queue.now = self.end_micro
        self._finalize()
        return self

    def on_deliver(self, pkt: PacketEnvelope, label: str, sender: str) -> None:
        node = self.nodes[label]
        self.trace.emit(self.queue.now, label, f"{pkt.kind}_RX", pkt.packet_id, sender=sender)
        if pkt.kind == HELLO:
            self.router.handle_hello(node, pkt)
        elif pkt.dst == BROADCAST:
            self.router.handle_flood_rx(node, pkt, sender)
        else:
            self.router.handle_unicast_rx(node, pkt)

    def on_timer(self, name: str, *args) -> None:
        if name == "FLOOD_COMMIT":
            self.router.on_flood_commit(*args)
        elif name == "JOIN_WINDOW":
            self.community.on_join_window(*args)
        elif name == "RREQ_TIMEOUT":
            self.router.on_rreq_timeout(*args)
        elif name == "SEND_DEADLINE":
            self.on_send_deadline(*args)
        elif name == "HELLO_TICK":
            self.router.on_hello_tick(*args)
        elif name == "RETRANSMIT":
            self.services.on_retransmit(*args)
        elif name == "SESSION_CHECK":
            self.services.on_session_check(*args)
        elif name == "TABLE_WAIT":
            self.community.on_table_wait(*args)
        elif name == "ADV_TICK":
            self.on_adversary_tick(*args)
        else:
            raise ValueError(f"unknown timer {name!r}")

    # -- scenario steps --------------------------------------------------------------------

    def run_step(self, step: dict) -> None:
        op = step["op"]
        if self.mode == "baseline":
            if op == "send" and step.get("mirror", True):
                self.services.flood_send(step["src"], step.get("bytes", 0), target=step["dst"])
            return
        try:
            if op == "start_service":
                self.community.start_service(step["node"], step["culture"])
            elif op == "late_join":
                self.community.late_join(step["node"], step["cid"])
            elif op == "send":
                self._step_send(step)
            elif op == "ftp_request":
                machine = self.nodes[step["src"]].machine_for(step["cid"])
                holder = self.nodes[step["dst"]].machine_for(step["cid"])
                if machine is None or holder is None:
                    self.trace.emit(self.queue.now, step["src"], "STEP_ERROR", err="NotAMember")
                    return
                self.services.ftp_request(machine, holder.mid, step["file"])
            elif op == "add_edge":
                self.topology.add_edge(step["a"], step["b"])
                self.trace.emit(self.queue.now, step["a"], "EDGE_ADDED", peer=step["b"])
            elif op == "remove_edge":
                self.topology.remove_edge(step["a"], step["b"])
                self.trace.emit(self.queue.now, step["a"], "EDGE_REMOVED", peer=step["b"])
            elif op == "adversary":
                self.inject_adversary(
                    AdversaryProfile(
                        node=step["node"],
                        behavior=step["behavior"],
                        rate=step.get("rate", 1.0),
                        count=step.get("count", 0),
                        start=self.queue.now,
                        cid=step.get("cid"),
                        op_code=step.get("op_code", "UNDECLARED_OP"),
                    )
                )
            else:
                raise ValueError(f"unknown step op {op!r}")
        except (CommunityError, ServiceError) as exc:
            self.trace.emit(
                self.queue.now, step.get("node", step.get("src", "?")), "STEP_ERROR",
                err=type(exc).__name__,
            )

    def _step_send(self, step: dict) -> None:
        machine = self.nodes[step["src"]].machine_for(step["cid"])
        if machine is None:
            ref = self.new_send(step["src"])
            self.mark_send(ref, "NOT_IN_COMMUNITY")
            self.trace.emit(self.queue.now, step["src"], "DROP", reason="NOT_IN_COMMUNITY")
            return
        self.router.send_data(
            machine, step["dst"], step["op_code"], payload_bytes=step.get("bytes", 0)
        )

    # -- adversary ------------------------------------------------------------------------------

    def inject_adversary(self, profile: AdversaryProfile) -> None:
        self.adversaries[profile.node] = profile
        self.trace.emit(self.queue.now, profile.node, "ADVERSARY", behavior=profile.behavior)
        if profile.behavior == "SELFISH":
            self.nodes[profile.node].selfish = True
        elif profile.behavior == "UNDECLARED_OP":
            self.queue.push(self.queue.now, TIMER, ("ADV_TICK", profile.node))

    def on_adversary_tick(self, label: str) -> None:
        profile = self.adversaries[label]
        if profile.emitted >= profile.count:
            return
        node = self.nodes[label]
        neighbors = self.topology.neighbors(label)
        member_neighbors = [
            n for n in neighbors if profile.cid and self.nodes[n].machine_for(profile.cid)
        ]
        pool = member_neighbors or neighbors
        if pool:
            target = self.rng.choice(pool)  # draw: adversary target
            pkt = PacketEnvelope(
                packet_id=self.next_packet_id(),
                kind=DATA,
                op_code=profile.op_code,
                src=label,
                dst=target,
                cid=profile.cid,
                origin_machine=MachineId(label, 0),
                seq=profile.emitted,
                route=(label, target),
                payload_bytes=8,
            )
            self.transmit(node, target, pkt)
        profile.emitted += 1
        if profile.emitted < profile.count:
            interval = max(1, int(round(TIME_SCALE / profile.rate)))
            nxt = self.queue.now + interval
            if nxt <= self.end_micro:
                self.queue.push(nxt, TIMER, ("ADV_TICK", label))

    # -- reporting ---------------------------------------------------------------------------------

    def snapshot(self) -> str:
        """Deterministic digest of all tables and neighbor sets."""
        return state_digest(self.nodes, self.community.society)

    def _finalize(self) -> None:
        in_flight = sum(1 for rec in self.sends.values() if rec["state"] == "PENDING")
        self.metrics.in_flight_at_end = in_flight
        dropped_total = sum(self.metrics.dropped.values())
        if self.metrics.delivered + dropped_total + in_flight != self.metrics.data_sends:
            self.violations.append(
                "send conservation: delivered + dropped + in-flight != sends"
            )
        if self.metrics.total_tx() != self.metrics.data_tx + sum(
            self.metrics.control_tx.values()
        ):
            self.violations.append("tx partition: broadcast+unicast != control+data")

    def report(self) -> dict:
        communities = []
        for cid in sorted(self.community.communities):
            state = self.community.communities[cid]
            tables = {}
            for label in sorted(self.nodes):
                table = self.nodes[label].tables.get(cid)
                if table is None:
                    continue
                tables[label] = [
                    {"mid": mid.node, "cid": cid, "path": format_path(path)}
                    for mid, path in table.sorted_rows()
                ]
            communities.append(
                {
                    "cid": cid,
                    "culture": state.culture,
                    "si": state.si,
                    "formed_at": state.formed_at,
                    "members": sorted(str(m) for m in state.members),
                    "tables": tables,
                }
            )
        return {
            "scenario": self.scenario.name,
            "seed": self.seed,
            "mode": self.mode,
            "end_time": self.scenario.end_time,
            "metrics": self.metrics.as_dict(),
            "society": [
                {"cid": cid, "culture": culture}
                for cid, culture in sorted(self.community.society.rows.items())
            ],
            "communities": communities,
            "sessions": self.services.report_sessions(),
            "state_digest": self.snapshot(),
            "violations": list(self.violations),
        }

    # -- baseline flood reaction (mode == "baseline") ------------------------------------------------

    def react_baseline_flood(self, node, pkt: PacketEnvelope) -> None:
        if pkt.control and pkt.control.get("target") == node.label:
            if self.mark_send(pkt.send_ref, "DELIVERED"):
                self.metrics.bytes_delivered += pkt.payload_bytes
                self.trace.emit(self.queue.now, node.label, "DELIVERED", pkt.packet_id)
        self.router.forward_flood(node, pkt)


@dataclass
class RunResult:
    report: dict
    trace: list = field(default_factory=list)
    sim: Simulation | None = None

    @property
    def metrics(self) -> dict:
        return self.report["metrics"]

    def trace_text(self) -> str:
        return "\n".join(self.trace) + ("\n" if self.trace else "")


def run(scenario, seed: int, mode: str = "hamanet") -> RunResult:
    """Execute one run to quiescence or the scenario end time."""
    sim = Simulation(scenario, seed, mode)
    sim.run()
    return RunResult(report=sim.report(), trace=list(sim.trace.lines), sim=sim)


def _file_bytes(seed: int, name: str, size: int) -> bytes:
    rng = random.Random(f"file:{seed}:{name}")
    return rng.randbytes(size)
