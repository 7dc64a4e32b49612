"""Community lifecycle: service start, join collection, table build and spread.

A Service Initiator floods one MCSTART, collects MCJOIN replies during a
configurable join window, then forms the community: it freezes the member
set, registers the community in the society table, and multicasts each
member's rebased table along the union tree of its recorded paths. Later
arrivals join an existing community with a broadcast MCJOIN answered by the
first member reached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import (
    MCJOIN,
    MCSTART,
    RREP,
    BROADCAST,
    CommunityTable,
    MachineId,
    PacketEnvelope,
    SocietyTable,
    path_is_valid,
)
from .engine import TIMER


class CommunityError(Exception):
    pass


class PrerequisiteUnmet(CommunityError):
    pass


class NoSuchCommunity(CommunityError):
    pass


@dataclass
class ServiceInitiator:
    """Join-window bookkeeping for one community being formed."""

    node: str
    cid: str
    culture: str
    joiners: dict = field(default_factory=dict)  # MachineId -> path SI->joiner
    join_deadline: int = 0


@dataclass
class CommunityState:
    cid: str
    culture: str
    si: str
    si_mid: MachineId
    members: set = field(default_factory=set)  # MachineId, SI included
    formed_at: int = 0


def splice_paths(root_to_a, root_to_b, adjacency):
    """Path a->b derived from two root-relative paths.

    Reverses the path to ``a`` and appends the path to ``b`` past their last
    common prefix node, then erases any loop and greedily shortcuts across
    edges of the current topology. The result is a valid simple walk, not
    necessarily globally shortest.
    """
    limit = min(len(root_to_a), len(root_to_b))
    common = 0
    while common < limit and root_to_a[common] == root_to_b[common]:
        common += 1
    walk = tuple(reversed(root_to_a[common - 1 :])) + tuple(root_to_b[common:])
    # loop erasure: a repeated node cuts out the cycle between its visits
    erased: list[str] = []
    seen_at: dict[str, int] = {}
    for hop in walk:
        if hop in seen_at:
            del erased[seen_at[hop] + 1 :]
            for gone in list(seen_at):
                if seen_at[gone] > seen_at[hop]:
                    del seen_at[gone]
        else:
            seen_at[hop] = len(erased)
            erased.append(hop)
    # greedy shortcut: always jump to the farthest reachable hop ahead
    out = [erased[0]]
    i = 0
    while i < len(erased) - 1:
        j = i + 1
        for k in range(len(erased) - 1, i, -1):
            if erased[k] in adjacency.get(erased[i], ()):
                j = k
                break
        out.append(erased[j])
        i = j
    return tuple(out)


class CommunityManager:
    """Owns the society table, CID minting and every community's lifecycle."""

    def __init__(self, sim):
        self.sim = sim
        self.society = SocietyTable()
        self.communities: dict[str, CommunityState] = {}
        self.initiators: dict[str, ServiceInitiator] = {}
        self._next_cid = 1

    def mint_cid(self) -> str:
        cid = f"C{self._next_cid}"
        self._next_cid += 1
        return cid

    # -- service start -----------------------------------------------------

    def start_service(self, label: str, culture_name: str) -> str:
        """Mint a CID, flood one MCSTART and open the join window."""
        sim = self.sim
        node = sim.nodes[label]
        culture = sim.registry.culture(culture_name)
        for attr in culture.requires:
            if not node.attrs.get(attr):
                raise PrerequisiteUnmet(
                    f"culture {culture_name!r} requires node attribute {attr!r}"
                )
        machine = node.pending.pop(culture_name, None)
        if machine is None:
            machine = sim.instantiate_machine(label, culture_name)
            node.pending.pop(culture_name, None)
        cid = self.mint_cid()
        machine.join(cid)
        node.machines[cid] = machine
        node.tables[cid] = CommunityTable(owner=label, cid=cid)
        deadline = sim.queue.now + sim.params["join_window_micro"]
        self.initiators[cid] = ServiceInitiator(
            node=label, cid=cid, culture=culture_name, join_deadline=deadline
        )
        pkt = PacketEnvelope(
            packet_id=sim.next_packet_id(),
            kind=MCSTART,
            op_code="SERVICE_START",
            src=label,
            dst=BROADCAST,
            cid=cid,
            origin_machine=machine.mid,
            control=culture_name,
        )
        sim.router.start_flood(node, pkt)
        sim.queue.push(deadline, TIMER, ("JOIN_WINDOW", cid))
        return cid

    def react_mcstart(self, node, pkt) -> None:
        """An MCSTART copy was accepted at ``node``: maybe join, always forward."""
        sim = self.sim
        culture_name = pkt.control
        interested = culture_name in sim.interests.get(node.label, ())
        if interested and pkt.cid not in node.machines:
            machine = node.pending.pop(culture_name, None)
            if machine is None:
                machine = sim.instantiate_machine(node.label, culture_name)
                node.pending.pop(culture_name, None)
            machine.join(pkt.cid)
            node.machines[pkt.cid] = machine
            route = (node.label,) + tuple(reversed(pkt.hop_trace))
            join = PacketEnvelope(
                packet_id=sim.next_packet_id(),
                kind=MCJOIN,
                op_code="JOIN",
                src=node.label,
                dst=route[-1],
                cid=pkt.cid,
                origin_machine=machine.mid,
                route=route,
            )
            sim.router.send_unicast(node, join)
            self._watch_for_table(node.label, pkt.cid)
        sim.router.forward_flood(node, pkt)

    def _watch_for_table(self, label: str, cid: str, attempt: int = 1) -> None:
        # lossy links can eat a join or a table packet; a joiner that is
        # still table-less after the window re-registers with a broadcast
        # MCJOIN, the same path any latecomer uses
        sim = self.sim
        wait = 2 * sim.params["join_window_micro"]
        when = sim.queue.now + wait
        if when <= sim.end_micro:
            sim.queue.push(when, TIMER, ("TABLE_WAIT", label, cid, attempt))

    def on_table_wait(self, label: str, cid: str, attempt: int) -> None:
        sim = self.sim
        node = sim.nodes[label]
        if node.is_member(cid) or cid not in node.machines:
            return
        if attempt > 3:
            sim.trace.emit(sim.queue.now, label, "JOIN_ABANDONED", cid=cid)
            return
        if self.society.lookup(cid) is not None:
            pkt = PacketEnvelope(
                packet_id=sim.next_packet_id(),
                kind=MCJOIN,
                op_code="LATE_JOIN",
                src=label,
                dst=BROADCAST,
                cid=cid,
                origin_machine=node.machines[cid].mid,
            )
            sim.router.start_flood(node, pkt)
        self._watch_for_table(label, cid, attempt + 1)

    # -- join handling at the SI --------------------------------------------

    def handle_mcjoin(self, node, pkt) -> None:
        """Unicast MCJOIN arrived: record the joiner's reverse-trace path."""
        sim = self.sim
        si = self.initiators.get(pkt.cid)
        if si is None or si.node != node.label:
            sim.metrics.control_rejected += 1
            sim.trace.emit(
                sim.queue.now, node.label, "DROP", pkt.packet_id, reason="UNKNOWN_CID"
            )
            return
        if pkt.cid in self.communities:
            # join window already closed; admit like a late joiner
            self.react_late_mcjoin(node, pkt)
            return
        path = tuple(reversed(pkt.hop_trace + (node.label,)))
        mid = pkt.origin_machine
        si.joiners[mid] = path
        sim.trace.emit(sim.queue.now, node.label, "JOIN_RX", pkt.packet_id, cid=pkt.cid, mid=str(mid))

    def on_join_window(self, cid: str) -> None:
        """Close the window: freeze members, register the community, spread tables."""
        sim = self.sim
        si = self.initiators[cid]
        node = sim.nodes[si.node]
        table = node.tables[cid]
        si_mid = node.machines[cid].mid
        reachable = {}
        for mid, path in sorted(si.joiners.items()):
            if path_is_valid(path, sim.topology.adjacency):
                reachable[mid] = path
            else:
                sim.metrics.members_dropped += 1
                sim.trace.emit(sim.queue.now, si.node, "MEMBER_UNREACHABLE", cid=cid, mid=str(mid))
        for mid, path in reachable.items():
            table.add_row(mid, path)
        community = CommunityState(
            cid=cid,
            culture=si.culture,
            si=si.node,
            si_mid=si_mid,
            members={si_mid} | set(reachable),
            formed_at=sim.queue.now,
        )
        self.communities[cid] = community
        self.society.register(cid, si.culture)
        sim.metrics.community_formation_times[cid] = sim.queue.now
        sim.trace.emit(
            sim.queue.now, si.node, "FORMED", cid=cid, members=len(community.members)
        )
        self.disseminate_tables(community)

    # -- table dissemination -------------------------------------------------

    def disseminate_tables(self, community: CommunityState) -> None:
        """Multicast rebased member tables along the union tree of SI paths.

        Every member's table message travels its recorded path; transmissions
        on shared path prefixes are shared, so the cost is one unicast per
        tree edge.
        """
        sim = self.sim
        si_node = sim.nodes[community.si]
        table = si_node.tables[community.cid]
        paths = {mid: path for mid, path in table.sorted_rows()}
        if not paths:
            return
        adjacency = sim.topology.adjacency
        member_tables: dict[str, list] = {}
        for mid, path in paths.items():
            rows = [(community.si_mid, tuple(reversed(path)))]
            for other, other_path in paths.items():
                if other == mid:
                    continue
                rows.append((other, splice_paths(path, other_path, adjacency)))
            member_tables[mid.node] = rows
        children: dict[str, set] = {}
        for path in paths.values():
            for a, b in zip(path, path[1:]):
                children.setdefault(a, set()).add(b)
        plan = {
            "cid": community.cid,
            "tables": member_tables,
            "children": {
                a: sorted(bs, key=sim.topology.index) for a, bs in children.items()
            },
        }
        for child in plan["children"].get(community.si, ()):
            self._send_dissem(si_node, child, plan)

    def _send_dissem(self, node, child: str, plan: dict) -> None:
        sim = self.sim
        pkt = PacketEnvelope(
            packet_id=sim.next_packet_id(),
            kind=RREP,
            op_code="TABLE_DISSEM",
            src=node.label,
            dst=child,
            cid=plan["cid"],
            route=(node.label, child),
            control=plan,
        )
        sim.router.send_unicast(node, pkt)

    def handle_table_dissem(self, node, pkt) -> None:
        """A dissemination packet landed: install my table, relay to children."""
        sim = self.sim
        plan = pkt.control
        cid = plan["cid"]
        rows = plan["tables"].get(node.label)
        if rows is not None and cid in node.machines:
            table = CommunityTable(owner=node.label, cid=cid)
            for mid, path in rows:
                table.add_row(mid, path)
            node.tables[cid] = table
            sim.trace.emit(sim.queue.now, node.label, "TABLE_RX", pkt.packet_id, cid=cid)
        for child in plan["children"].get(node.label, ()):
            self._send_dissem(node, child, plan)

    # -- late join -----------------------------------------------------------

    def late_join(self, label: str, cid: str) -> bool:
        """Broadcast MCJOIN into an existing community. False when a no-op."""
        sim = self.sim
        node = sim.nodes[label]
        if self.society.lookup(cid) is None:
            raise NoSuchCommunity(cid)
        if node.is_member(cid):
            return False
        culture_name = self.society.lookup(cid)
        machine = node.machines.get(cid)
        if machine is None:
            machine = node.pending.pop(culture_name, None)
            if machine is None:
                machine = sim.instantiate_machine(label, culture_name)
                node.pending.pop(culture_name, None)
            machine.join(cid)
            node.machines[cid] = machine
        pkt = PacketEnvelope(
            packet_id=sim.next_packet_id(),
            kind=MCJOIN,
            op_code="LATE_JOIN",
            src=label,
            dst=BROADCAST,
            cid=cid,
            origin_machine=machine.mid,
        )
        sim.router.start_flood(node, pkt)
        self._watch_for_table(label, cid)
        return True

    def react_late_mcjoin(self, node, pkt) -> None:
        """Broadcast MCJOIN copy accepted: members answer, the rest forward."""
        sim = self.sim
        if node.is_member(pkt.cid):
            table = node.tables[pkt.cid]
            snapshot = [(node.machines[pkt.cid].mid, None)] + [
                (mid, path) for mid, path in table.sorted_rows()
            ]
            route = (node.label,) + tuple(reversed(pkt.hop_trace))
            reply = PacketEnvelope(
                packet_id=sim.next_packet_id(),
                kind=RREP,
                op_code="JOIN_TABLE",
                src=node.label,
                dst=route[-1],
                cid=pkt.cid,
                route=route,
                control={"joiner": pkt.origin_machine, "rows": snapshot},
            )
            sim.router.send_unicast(node, reply)
            self._admit_and_update(node, pkt)
        else:
            sim.router.forward_flood(node, pkt)

    def _admit_and_update(self, member_node, pkt) -> None:
        """Responder-side bookkeeping: add the joiner, update the other members."""
        sim = self.sim
        cid = pkt.cid
        joiner_mid = pkt.origin_machine
        table = member_node.tables[cid]
        if table.row_for_node(joiner_mid.node) is not None:
            return
        path_to_joiner = tuple(reversed(pkt.hop_trace + (member_node.label,)))
        if not path_is_valid(path_to_joiner, sim.topology.adjacency):
            return
        community = self.communities[cid]
        community.members.add(joiner_mid)
        existing = list(table.sorted_rows())
        table.add_row(joiner_mid, path_to_joiner)
        sim.trace.emit(
            sim.queue.now, member_node.label, "MEMBER_ADDED", cid=cid, mid=str(joiner_mid)
        )
        me_to_joiner = path_to_joiner
        for mid, path in existing:
            rebased = splice_paths(path, me_to_joiner, sim.topology.adjacency)
            update = PacketEnvelope(
                packet_id=sim.next_packet_id(),
                kind=RREP,
                op_code="TABLE_UPDATE",
                src=member_node.label,
                dst=mid.node,
                cid=cid,
                route=path,
                control={"row": (joiner_mid, rebased)},
            )
            sim.router.send_unicast(member_node, update)

    def handle_join_table(self, node, pkt) -> None:
        """First member reply reaches the late joiner; later replies are dups."""
        sim = self.sim
        cid = pkt.cid
        if cid not in node.machines or pkt.control["joiner"] != node.machines[cid].mid:
            sim.metrics.control_rejected += 1
            sim.trace.emit(sim.queue.now, node.label, "DROP", pkt.packet_id, reason="UNKNOWN_CID")
            return
        if node.is_member(cid):
            sim.trace.emit(sim.queue.now, node.label, "DUP_JOIN_REPLY", pkt.packet_id, cid=cid)
            return
        adjacency = sim.topology.adjacency
        travel = pkt.hop_trace + (node.label,)  # responder ... me
        responder_to_me = travel
        table = CommunityTable(owner=node.label, cid=cid)
        for mid, path in pkt.control["rows"]:
            if mid.node == node.label:
                continue
            if path is None:  # the responder's own entry
                table.add_row(mid, tuple(reversed(travel)))
            else:
                table.add_row(mid, splice_paths(responder_to_me, path, adjacency))
        node.tables[cid] = table
        sim.trace.emit(sim.queue.now, node.label, "TABLE_RX", pkt.packet_id, cid=cid)

    def handle_table_update(self, node, pkt) -> None:
        sim = self.sim
        cid = pkt.cid
        table = node.tables.get(cid)
        if table is None:
            return
        mid, path = pkt.control["row"]
        if (
            table.row_for_node(mid.node) is None
            and path
            and path[0] == node.label
            and path_is_valid(path, sim.topology.adjacency)
        ):
            table.add_row(mid, path)
            self.communities[cid].members.add(mid)
            sim.trace.emit(sim.queue.now, node.label, "MEMBER_ADDED", cid=cid, mid=str(mid))
