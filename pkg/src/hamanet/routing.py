"""Intra-community delivery: table lookup, RREQ repair, RERR, HELLO, friend relay.

Floods (MCSTART, RREQ, broadcast MCJOIN, FRIEND) are duplicate-suppressed per
packet id: each node transmits a given flood packet at most once. When several
copies of one flood packet arrive in the same time step, the copy from the
lowest-index neighbor wins as the recorded parent; the choice is committed by
a same-time timer that runs after all deliveries already queued for that
instant, so the rule is exact, not an artifact of arrival order.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .community import splice_paths
from .core import (
    DATA,
    FRIEND,
    HELLO,
    MCJOIN,
    MCSTART,
    RERR,
    RREP,
    RREQ,
    BROADCAST,
    MachineId,
    PacketEnvelope,
    path_is_valid,
)
from .engine import NeighborEntry, TIMER


class RoutingError(Exception):
    pass


class NotAMember(RoutingError):
    pass


ANY_MEMBER = "ANY_MEMBER"


@dataclass
class RouteRequest:
    rreq_id: int
    cid: str
    origin: str
    target: object = ANY_MEMBER  # MachineId or ANY_MEMBER


@dataclass
class RouteReply:
    rreq_id: int
    responder: object  # MachineId
    rows: list = field(default_factory=list)  # [(MachineId, responder-relative path)]


class Router:
    def __init__(self, sim):
        self.sim = sim

    # -- flood machinery -----------------------------------------------------

    def start_flood(self, node, pkt: PacketEnvelope) -> None:
        node.seen_packets.add(pkt.packet_id)
        self.sim.broadcast(node, pkt)

    def handle_flood_rx(self, node, pkt: PacketEnvelope, sender: str) -> None:
        sim = self.sim
        pid = pkt.packet_id
        if pid in node.flood_pending:
            node.flood_pending[pid].append((sim.topology.index(sender), pkt))
            return
        if pid in node.seen_packets:
            sim.trace.emit(sim.queue.now, node.label, "DUP_RX", pid)
            return
        node.seen_packets.add(pid)
        node.flood_pending[pid] = [(sim.topology.index(sender), pkt)]
        sim.queue.push(sim.queue.now, TIMER, ("FLOOD_COMMIT", node.label, pid))

    def on_flood_commit(self, label: str, pid: int) -> None:
        sim = self.sim
        node = sim.nodes[label]
        candidates = node.flood_pending.pop(pid, None)
        if not candidates:
            return
        candidates.sort(key=lambda c: c[0])
        pkt = candidates[0][1]
        if pkt.kind == MCSTART:
            sim.community.react_mcstart(node, pkt)
        elif pkt.kind == RREQ:
            self.react_rreq(node, pkt)
        elif pkt.kind == MCJOIN:
            sim.community.react_late_mcjoin(node, pkt)
        elif pkt.kind == FRIEND:
            self.react_friend_flood(node, pkt)
        elif pkt.kind == DATA:
            sim.react_baseline_flood(node, pkt)

    def forward_flood(self, node, pkt: PacketEnvelope) -> None:
        sim = self.sim
        if node.selfish:
            sim.trace.emit(sim.queue.now, node.label, "DROP", pkt.packet_id, reason="SELFISH")
            return
        sim.broadcast(node, pkt.forwarded_by(node.label))

    # -- table lookup and data sending ----------------------------------------

    def lookup_path(self, label: str, cid: str, dest) -> tuple | None:
        """Stored path from ``label`` to ``dest`` (MachineId or node label)."""
        node = self.sim.nodes[label]
        if not node.is_member(cid):
            raise NotAMember(f"{label} is not a member of {cid}")
        dest_label = dest if isinstance(dest, str) else dest.node
        row = node.tables[cid].row_for_node(dest_label)
        return row[1] if row else None

    def send_data(
        self,
        machine,
        dest,
        op_code: str,
        payload: bytes | None = None,
        payload_bytes: int | None = None,
        seq: int | None = None,
        control=None,
    ):
        """Source-route a DATA packet; on a route miss flood one RREQ and queue.

        Returns the send reference used for delivery accounting.
        """
        sim = self.sim
        node = sim.nodes[machine.node]
        cid = machine.cid
        size = payload_bytes if payload_bytes is not None else len(payload or b"")
        send_ref = sim.new_send(node.label)
        if cid is None or not node.is_member(cid):
            sim.mark_send(send_ref, "NOT_IN_COMMUNITY")
            sim.trace.emit(sim.queue.now, node.label, "DROP", reason="NOT_IN_COMMUNITY")
            return send_ref
        dest_label = dest if isinstance(dest, str) else dest.node
        pkt = PacketEnvelope(
            packet_id=sim.next_packet_id(),
            kind=DATA,
            op_code=op_code,
            src=node.label,
            dst=dest_label,
            cid=cid,
            origin_machine=machine.mid,
            payload=payload,
            payload_bytes=size,
            seq=seq if seq is not None else sim.next_data_seq(),
            control=control,
            send_ref=send_ref,
        )
        if dest_label == node.label:
            self.deliver_data(node, pkt)
            return send_ref
        path = self.lookup_path(node.label, cid, dest_label)
        if path is not None:
            pkt.route = path
            self.send_unicast(node, pkt)
        else:
            self._queue_for_repair(node, cid, dest_label, pkt)
        return send_ref

    def _queue_for_repair(self, node, cid: str, dest_label: str, pkt) -> None:
        sim = self.sim
        queue = node.data_queue.setdefault(cid, deque())
        if len(queue) >= sim.params["data_queue_limit"]:
            sim.mark_send(pkt.send_ref, "QUEUE_OVERFLOW")
            sim.trace.emit(sim.queue.now, node.label, "DROP", pkt.packet_id, reason="QUEUE_OVERFLOW")
            return
        queue.append((dest_label, pkt))
        if not any(
            p["cid"] == cid and p["dest"] == dest_label
            for p in node.pending_rreqs.values()
        ):
            self._issue_rreq(node, cid, dest_label)

    def _issue_rreq(self, node, cid: str, dest_label: str) -> None:
        sim = self.sim
        rreq_id = node.next_rreq_id
        node.next_rreq_id += 1
        request = RouteRequest(rreq_id=rreq_id, cid=cid, origin=node.label, target=dest_label)
        node.pending_rreqs[rreq_id] = {"cid": cid, "dest": dest_label, "at": sim.queue.now}
        node.rreq_seen.add((node.label, rreq_id))
        pkt = PacketEnvelope(
            packet_id=sim.next_packet_id(),
            kind=RREQ,
            op_code="ROUTE_REQUEST",
            src=node.label,
            dst=BROADCAST,
            cid=cid,
            control=request,
        )
        self.start_flood(node, pkt)
        sim.queue.push(
            sim.queue.now + sim.params["rreq_timeout_micro"],
            TIMER,
            ("RREQ_TIMEOUT", node.label, rreq_id),
        )

    # -- RREQ / RREP ----------------------------------------------------------

    def react_rreq(self, node, pkt: PacketEnvelope) -> None:
        """RREQ copy accepted: members answer with their table, everyone forwards."""
        sim = self.sim
        request = pkt.control
        key = (request.origin, request.rreq_id)
        if key in node.rreq_seen:
            sim.trace.emit(sim.queue.now, node.label, "DUP_RX", pkt.packet_id)
            return
        node.rreq_seen.add(key)
        profile = sim.adversaries.get(node.label)
        if profile is not None and profile.behavior == "BOGUS_RREP" and profile.active(sim.queue.now):
            self._send_bogus_rrep(node, pkt)
        elif node.is_member(request.cid):
            table = node.tables[request.cid]
            reply = RouteReply(
                rreq_id=request.rreq_id,
                responder=node.machines[request.cid].mid,
                rows=[(mid, path) for mid, path in table.sorted_rows()],
            )
            route = (node.label,) + tuple(reversed(pkt.hop_trace))
            rrep = PacketEnvelope(
                packet_id=sim.next_packet_id(),
                kind=RREP,
                op_code="ROUTE_REPLY",
                src=node.label,
                dst=request.origin,
                cid=request.cid,
                route=route,
                control=reply,
            )
            self.send_unicast(node, rrep)
        self.forward_flood(node, pkt)

    def _send_bogus_rrep(self, node, pkt: PacketEnvelope) -> None:
        """Adversary reply: fabricated table under a never-requested id and cid."""
        sim = self.sim
        request = pkt.control
        fake_rows = [(MachineId(node.label, 0), (request.origin, node.label))]
        reply = RouteReply(
            rreq_id=request.rreq_id + 1_000_000,
            responder=MachineId(node.label, 0),
            rows=fake_rows,
        )
        route = (node.label,) + tuple(reversed(pkt.hop_trace))
        rrep = PacketEnvelope(
            packet_id=sim.next_packet_id(),
            kind=RREP,
            op_code="ROUTE_REPLY",
            src=node.label,
            dst=request.origin,
            cid="C999999",
            route=route,
            control=reply,
        )
        self.send_unicast(node, rrep)

    def handle_rrep(self, node, pkt: PacketEnvelope) -> None:
        """Merge a table snapshot at the flood origin; flush repaired sends once."""
        sim = self.sim
        reply = pkt.control
        pending = node.pending_rreqs.get(reply.rreq_id)
        if pending is None or pending["cid"] != pkt.cid:
            sim.metrics.stale_replies += 1
            sim.trace.emit(sim.queue.now, node.label, "DROP", pkt.packet_id, reason="STALE_REPLY")
            return
        cid = pkt.cid
        table = node.tables[cid]
        adjacency = sim.topology.adjacency
        travel = pkt.hop_trace + (node.label,)  # responder ... me
        self._merge_row(node, table, reply.responder, tuple(reversed(travel)))
        for mid, responder_path in reply.rows:
            if mid.node == node.label:
                continue
            candidate = splice_paths(travel, responder_path, adjacency)
            self._merge_row(node, table, mid, candidate)
        self._flush_repaired(node, cid)

    def _merge_row(self, node, table, mid, candidate) -> None:
        """Install ``candidate`` when valid and better: fewer hops, then lower labels."""
        sim = self.sim
        if mid.node == node.label:
            return
        if not path_is_valid(candidate, sim.topology.adjacency):
            return
        current = table.rows.get(mid)
        if current is None or (len(candidate), candidate) < (len(current), current):
            table.rows.pop(mid, None)
            table.add_row(mid, candidate)
            sim.trace.emit(
                sim.queue.now, node.label, "ROW_INSTALLED",
                cid=table.cid, mid=str(mid), path="-".join(candidate),
            )

    def _flush_repaired(self, node, cid: str) -> None:
        queue = node.data_queue.get(cid)
        if not queue:
            return
        table = node.tables[cid]
        keep = deque()
        while queue:
            dest_label, pkt = queue.popleft()
            row = table.row_for_node(dest_label)
            if row is None:
                keep.append((dest_label, pkt))
                continue
            pkt.route = row[1]
            self.send_unicast(node, pkt)
        node.data_queue[cid] = keep

    def on_rreq_timeout(self, label: str, rreq_id: int) -> None:
        sim = self.sim
        node = sim.nodes[label]
        pending = node.pending_rreqs.pop(rreq_id, None)
        if pending is None:
            return
        cid, dest = pending["cid"], pending["dest"]
        queue = node.data_queue.get(cid)
        if not queue:
            return
        keep = deque()
        while queue:
            dest_label, pkt = queue.popleft()
            if dest_label == dest:
                sim.mark_send(pkt.send_ref, "DELIVERY_TIMEOUT")
                sim.trace.emit(
                    sim.queue.now, label, "DROP", pkt.packet_id, reason="DELIVERY_TIMEOUT"
                )
            else:
                keep.append((dest_label, pkt))
        node.data_queue[cid] = keep

    # -- unicast forwarding ----------------------------------------------------

    def send_unicast(self, node, pkt: PacketEnvelope) -> None:
        """First transmission of a source-routed packet from its origin."""
        self._relay(node, pkt)

    def handle_unicast_rx(self, node, pkt: PacketEnvelope) -> None:
        if pkt.route and pkt.route[-1] == node.label:
            self._consume(node, pkt)
        else:
            if node.selfish:
                self.sim.trace.emit(
                    self.sim.queue.now, node.label, "DROP", pkt.packet_id, reason="SELFISH"
                )
                return
            self._relay(node, pkt.forwarded_by(node.label))

    def _relay(self, node, pkt: PacketEnvelope) -> None:
        sim = self.sim
        route = pkt.route
        pos = route.index(node.label)
        next_hop = route[pos + 1]
        outgoing = pkt
        if pkt.kind == DATA and pkt.cid is not None and not node.is_member(pkt.cid):
            # non-member relays carry community data inside a friend envelope
            outgoing = self._wrap_friend(node, pkt)
        elif pkt.kind == FRIEND and pkt.inner is not None and node.is_member(pkt.inner.cid):
            outgoing = self._unwrap_friend(node, pkt)
        sim.transmit(node, next_hop, outgoing)

    def _wrap_friend(self, node, data_pkt: PacketEnvelope) -> PacketEnvelope:
        # wrapper keeps the data packet's origin and trace so the walk stays
        # contiguous across wrap/unwrap boundaries
        sim = self.sim
        return PacketEnvelope(
            packet_id=sim.next_packet_id(),
            kind=FRIEND,
            op_code="FRIEND_RELAY",
            src=data_pkt.src,
            dst=data_pkt.dst,
            cid=data_pkt.cid,
            route=data_pkt.route,
            hop_trace=data_pkt.hop_trace,
            inner=data_pkt,
            payload_bytes=data_pkt.payload_bytes,
        )

    def _unwrap_friend(self, node, friend_pkt: PacketEnvelope) -> PacketEnvelope:
        inner = friend_pkt.inner
        if inner.src == friend_pkt.hop_trace[0]:
            inner.hop_trace = friend_pkt.hop_trace
        return inner

    def _consume(self, node, pkt: PacketEnvelope) -> None:
        sim = self.sim
        if pkt.kind == MCJOIN:
            sim.community.handle_mcjoin(node, pkt)
        elif pkt.kind == RREP:
            if pkt.op_code == "ROUTE_REPLY":
                self.handle_rrep(node, pkt)
            elif pkt.op_code == "TABLE_DISSEM":
                sim.community.handle_table_dissem(node, pkt)
            elif pkt.op_code == "JOIN_TABLE":
                sim.community.handle_join_table(node, pkt)
            elif pkt.op_code == "TABLE_UPDATE":
                sim.community.handle_table_update(node, pkt)
        elif pkt.kind == RERR:
            self.handle_rerr(node, pkt)
        elif pkt.kind == FRIEND:
            self._deliver_friend(node, pkt)
        elif pkt.kind == DATA:
            self.deliver_data(node, pkt)

    # -- data delivery ----------------------------------------------------------

    def deliver_data(self, node, pkt: PacketEnvelope) -> None:
        sim = self.sim
        machine = node.machine_for(pkt.cid) if pkt.cid else None
        if machine is None:
            sim.mark_send(pkt.send_ref, "NO_MACHINE")
            sim.trace.emit(sim.queue.now, node.label, "DROP", pkt.packet_id, reason="NO_MACHINE")
            return
        if pkt.op_code not in machine.accepted_ops:
            sim.metrics.rejected_ops += 1
            sim.trace.emit(
                sim.queue.now, node.label, "REJECTED_OP",
                pkt.packet_id, cid=pkt.cid, op=pkt.op_code,
            )
            return
        delivered_now = sim.mark_send(pkt.send_ref, "DELIVERED")
        if delivered_now:
            sim.metrics.bytes_delivered += pkt.payload_bytes
        sim.trace.emit(
            sim.queue.now, node.label, "DELIVERED",
            pkt.packet_id, cid=pkt.cid, mid=str(machine.mid), op=pkt.op_code,
        )
        sim.services.on_data(machine, pkt)

    # -- friend relay -------------------------------------------------------------

    def send_friend_packet(self, node, inner: PacketEnvelope) -> None:
        """Hand a wrapped packet to a reachable host when no table route exists.

        An adjacent member of the packet's community gets it directly;
        otherwise the wrapper is flooded with duplicate suppression. With no
        neighbors at all the packet is dropped and counted.
        """
        sim = self.sim
        neighbors = self._known_neighbors(node)
        if not neighbors:
            sim.mark_send(inner.send_ref, "NO_FRIEND")
            sim.trace.emit(sim.queue.now, node.label, "DROP", inner.packet_id, reason="NO_FRIEND")
            return
        member_neighbors = [
            n for n in neighbors if sim.nodes[n].is_member(inner.cid)
        ]
        pid = sim.next_packet_id()
        if member_neighbors:
            target = member_neighbors[0]
            pkt = PacketEnvelope(
                packet_id=pid,
                kind=FRIEND,
                op_code="FRIEND_RELAY",
                src=node.label,
                dst=target,
                cid=inner.cid,
                route=(node.label, target),
                inner=inner,
                payload_bytes=inner.payload_bytes,
            )
            sim.transmit(node, target, pkt)
        else:
            pkt = PacketEnvelope(
                packet_id=pid,
                kind=FRIEND,
                op_code="FRIEND_RELAY",
                src=node.label,
                dst=BROADCAST,
                cid=inner.cid,
                inner=inner,
                payload_bytes=inner.payload_bytes,
            )
            self.start_flood(node, pkt)

    def react_friend_flood(self, node, pkt: PacketEnvelope) -> None:
        """Flooded friend wrapper: members absorb it, friends relay it onward."""
        sim = self.sim
        if node.is_member(pkt.cid):
            self._deliver_friend(node, pkt)
            return
        neighbors = self._known_neighbors(node)
        member_neighbors = [n for n in neighbors if sim.nodes[n].is_member(pkt.cid)]
        if member_neighbors:
            if node.selfish:
                sim.trace.emit(sim.queue.now, node.label, "DROP", pkt.packet_id, reason="SELFISH")
                return
            target = member_neighbors[0]
            handoff = PacketEnvelope(
                packet_id=pkt.packet_id,
                kind=FRIEND,
                op_code="FRIEND_RELAY",
                src=pkt.src,
                dst=target,
                cid=pkt.cid,
                route=(node.label, target),
                hop_trace=pkt.hop_trace + (node.label,),
                inner=pkt.inner,
                payload_bytes=pkt.payload_bytes,
            )
            sim.transmit(node, target, handoff)
        else:
            self.forward_flood(node, pkt)

    def _deliver_friend(self, node, pkt: PacketEnvelope) -> None:
        """A member received a friend wrapper: deliver or route the inner packet."""
        inner = pkt.inner
        if inner.dst == node.label:
            self.deliver_data(node, inner)
            return
        # relay toward the destination member; the relaying member re-originates
        inner.src = node.label
        inner.hop_trace = (node.label,)
        row = node.tables[pkt.cid].row_for_node(inner.dst) if node.is_member(pkt.cid) else None
        if row is not None:
            inner.route = row[1]
            self.send_unicast(node, inner)
        else:
            self._queue_for_repair(node, pkt.cid, inner.dst, inner)

    def _known_neighbors(self, node) -> list:
        """Neighbor labels by index: heard HELLOs when running, else adjacency."""
        sim = self.sim
        if sim.params["hello_interval_micro"] > 0:
            return sorted(node.neighbor_set, key=sim.topology.index)
        return sim.topology.neighbors(node.label)

    # -- link failure ---------------------------------------------------------------

    def link_break(self, a: str, b: str) -> None:
        """Invalidate paths using edge (a, b) at both endpoints and notify origins."""
        sim = self.sim
        edge = frozenset((a, b))
        for label in (a, b):
            node = sim.nodes.get(label)
            if node is None:
                continue
            for cid in sorted(node.tables):
                table = node.tables[cid]
                broken = [
                    mid
                    for mid, path in table.sorted_rows()
                    if any(frozenset(pair) == edge for pair in zip(path, path[1:]))
                ]
                if not broken:
                    continue
                for mid in broken:
                    table.remove_row(mid)
                sim.trace.emit(
                    sim.queue.now, label, "LINK_BREAK",
                    cid=cid, edge=f"{min(a, b)}-{max(a, b)}", invalidated=len(broken),
                )
                for mid, path in table.sorted_rows():
                    rerr = PacketEnvelope(
                        packet_id=sim.next_packet_id(),
                        kind=RERR,
                        op_code="ROUTE_ERROR",
                        src=label,
                        dst=mid.node,
                        cid=cid,
                        route=path,
                        control={"edge": tuple(sorted((a, b)))},
                    )
                    self.send_unicast(node, rerr)

    def handle_rerr(self, node, pkt: PacketEnvelope) -> None:
        sim = self.sim
        edge = frozenset(pkt.control["edge"])
        table = node.tables.get(pkt.cid)
        if table is None:
            return
        broken = [
            mid
            for mid, path in table.sorted_rows()
            if any(frozenset(pair) == edge for pair in zip(path, path[1:]))
        ]
        for mid in broken:
            table.remove_row(mid)
        if broken:
            sim.trace.emit(
                sim.queue.now, node.label, "ROW_INVALIDATED",
                pkt.packet_id, cid=pkt.cid, count=len(broken),
            )

    # -- hello beacons -----------------------------------------------------------------

    def on_hello_tick(self, label: str) -> None:
        sim = self.sim
        interval = sim.params["hello_interval_micro"]
        if interval <= 0:
            return
        node = sim.nodes[label]
        now = sim.queue.now
        for neighbor in sorted(node.neighbor_set, key=sim.topology.index):
            if now - node.neighbor_set[neighbor].last_hello > 2 * interval:
                del node.neighbor_set[neighbor]
                sim.trace.emit(now, label, "NEIGHBOR_EXPIRED", peer=neighbor)
                self.link_break(label, neighbor)
        pkt = PacketEnvelope(
            packet_id=sim.next_packet_id(),
            kind=HELLO,
            op_code="HELLO",
            src=label,
            dst=BROADCAST,
            control=node.member_cids(),
        )
        sim.broadcast(node, pkt)
        next_tick = now + interval
        if next_tick <= sim.end_micro:
            sim.queue.push(next_tick, TIMER, ("HELLO_TICK", label))

    def handle_hello(self, node, pkt: PacketEnvelope) -> None:
        node.neighbor_set[pkt.src] = NeighborEntry(self.sim.queue.now, pkt.control)
