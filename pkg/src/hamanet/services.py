"""Application services riding on communities: file transfer and the flooding baseline.

The file transfer service streams a file in fixed-size chunks under an
abstract reliable transport: a send window, per-chunk acks, and bounded
retransmission. The flooding baseline delivers every payload by network-wide
broadcast and exists purely as the overhead comparator.
"""

from __future__ import annotations

import hashlib
import math

from .core import BROADCAST, DATA, PacketEnvelope
from .engine import TIMER, to_micro

FTP_OPS = ("FILE_REQ", "FILE_CHUNK", "FILE_ACK", "FILE_FAIL")

REQUESTED = "REQUESTED"
STREAMING = "STREAMING"
COMPLETE = "COMPLETE"
FAILED = "FAILED"


class ServiceError(Exception):
    pass


class NoSuchFile(ServiceError):
    pass


class ServiceLayer:
    """Per-run application state machine registry, driven by delivered DATA."""

    def __init__(self, sim):
        self.sim = sim
        self.sessions: dict[int, dict] = {}
        self._next_sid = 1

    # -- file transfer ---------------------------------------------------------

    def ftp_request(self, src_machine, dst_mid, file_name: str) -> int:
        """Start a transfer pulling ``file_name`` from the machine at ``dst_mid``."""
        sim = self.sim
        cid = src_machine.cid
        if cid is None or dst_mid.node not in sim.nodes:
            raise ServiceError("transfer endpoints must share a community")
        holder_machine = sim.nodes[dst_mid.node].machine_for(cid)
        if holder_machine is None or holder_machine.mid != dst_mid:
            raise ServiceError("transfer endpoints must share a community")
        transport = sim.transport_params(src_machine.culture)
        sid = self._next_sid
        self._next_sid += 1
        self.sessions[sid] = {
            "sid": sid,
            "file": file_name,
            "cid": cid,
            "requester": src_machine.mid,
            "holder": dst_mid,
            "state": REQUESTED,
            "reason": None,
            "total": None,
            "chunks": {},
            "delivered_upto": 0,
            "in_order_seqs": [],
            "content": None,
            "req_attempts": 0,
            "sent": set(),
            "acked": set(),
            "attempts": {},
            "retransmissions": 0,
            "last_activity": sim.queue.now,
            "transport": transport,
        }
        self._send_req(sid)
        sim.queue.push(
            sim.queue.now + to_micro(transport["retransmit_timeout"]),
            TIMER,
            ("SESSION_CHECK", sid),
        )
        return sid

    def _send_req(self, sid: int) -> None:
        sess = self.sessions[sid]
        machine = self._machine(sess["requester"], sess["cid"])
        self.sim.router.send_data(
            machine,
            sess["holder"],
            "FILE_REQ",
            payload_bytes=32,
            control={"sid": sid, "file": sess["file"]},
        )

    def on_data(self, machine, pkt: PacketEnvelope) -> None:
        if not isinstance(pkt.control, dict) or "sid" not in pkt.control:
            return  # plain data send reusing a service op code, no session attached
        if pkt.op_code == "FILE_REQ":
            self._on_file_req(machine, pkt)
        elif pkt.op_code == "FILE_CHUNK":
            self._on_file_chunk(machine, pkt)
        elif pkt.op_code == "FILE_ACK":
            self._on_file_ack(machine, pkt)
        elif pkt.op_code == "FILE_FAIL":
            self._on_file_fail(machine, pkt)

    def _on_file_req(self, machine, pkt) -> None:
        sim = self.sim
        sid = pkt.control["sid"]
        sess = self.sessions.get(sid)
        if sess is None or sess["state"] in (COMPLETE, FAILED):
            return
        if sess["sent"]:
            return  # duplicate request, chunks already in flight
        content = sim.file_content(machine.node, sess["file"])
        if content is None:
            sim.router.send_data(
                machine,
                sess["requester"],
                "FILE_FAIL",
                payload_bytes=16,
                control={"sid": sid, "reason": "NoSuchFile"},
            )
            return
        chunk_size = sess["transport"]["chunk_size"]
        total = max(1, math.ceil(len(content) / chunk_size))
        sess["total"] = total
        sess["holder_content"] = content
        sess["state"] = STREAMING
        window = sess["transport"]["window"]
        for seq in range(min(window, total)):
            self._send_chunk(sid, seq)

    def _chunk_bytes(self, sess, seq: int) -> bytes:
        size = sess["transport"]["chunk_size"]
        return sess["holder_content"][seq * size : (seq + 1) * size]

    def _send_chunk(self, sid: int, seq: int) -> None:
        sim = self.sim
        sess = self.sessions[sid]
        machine = self._machine(sess["holder"], sess["cid"])
        payload = self._chunk_bytes(sess, seq)
        sess["sent"].add(seq)
        sess["attempts"].setdefault(seq, 0)
        sim.router.send_data(
            machine,
            sess["requester"],
            "FILE_CHUNK",
            payload=payload,
            seq=seq,
            control={"sid": sid, "seq": seq, "total": sess["total"]},
        )
        sim.queue.push(
            sim.queue.now + to_micro(sess["transport"]["retransmit_timeout"]),
            TIMER,
            ("RETRANSMIT", sid, seq),
        )

    def on_retransmit(self, sid: int, seq: int) -> None:
        sim = self.sim
        sess = self.sessions.get(sid)
        if sess is None or sess["state"] in (COMPLETE, FAILED):
            return
        if seq in sess["acked"]:
            return
        sess["attempts"][seq] += 1
        if sess["attempts"][seq] > sess["transport"]["retransmit_limit"]:
            self._fail(sid, "TransferFailed")
            machine = self._machine(sess["holder"], sess["cid"])
            sim.router.send_data(
                machine,
                sess["requester"],
                "FILE_FAIL",
                payload_bytes=16,
                control={"sid": sid, "reason": "TransferFailed"},
            )
            return
        sess["retransmissions"] += 1
        payload = self._chunk_bytes(sess, seq)
        machine = self._machine(sess["holder"], sess["cid"])
        sim.router.send_data(
            machine,
            sess["requester"],
            "FILE_CHUNK",
            payload=payload,
            seq=seq,
            control={"sid": sid, "seq": seq, "total": sess["total"]},
        )
        sim.queue.push(
            sim.queue.now + to_micro(sess["transport"]["retransmit_timeout"]),
            TIMER,
            ("RETRANSMIT", sid, seq),
        )

    def _on_file_chunk(self, machine, pkt) -> None:
        sim = self.sim
        ctrl = pkt.control
        sess = self.sessions.get(ctrl["sid"])
        if sess is None or sess["state"] == FAILED:
            return
        seq = ctrl["seq"]
        sess["total"] = ctrl["total"]
        sess["last_activity"] = sim.queue.now
        if seq not in sess["chunks"]:
            sess["chunks"][seq] = pkt.payload or b""
            # hand chunks up in order; later arrivals stay buffered
            while sess["delivered_upto"] in sess["chunks"]:
                sess["in_order_seqs"].append(sess["delivered_upto"])
                sess["delivered_upto"] += 1
        sim.router.send_data(
            machine,
            sess["holder"],
            "FILE_ACK",
            payload_bytes=8,
            seq=seq,
            control={"sid": ctrl["sid"], "seq": seq},
        )
        if sess["state"] != COMPLETE and len(sess["chunks"]) == sess["total"]:
            sess["content"] = b"".join(sess["chunks"][i] for i in range(sess["total"]))
            sess["state"] = COMPLETE
            sim.trace.emit(
                sim.queue.now, machine.node, "SESSION_COMPLETE",
                bytes=len(sess["content"]), sid=sess["sid"],
            )

    def _on_file_ack(self, machine, pkt) -> None:
        sess = self.sessions.get(pkt.control["sid"])
        if sess is None or sess["state"] in (COMPLETE, FAILED):
            return
        sess["acked"].add(pkt.control["seq"])
        sess["last_activity"] = self.sim.queue.now
        total = sess["total"]
        window = sess["transport"]["window"]
        next_seq = len(sess["sent"])
        while next_seq < total and len(sess["sent"]) - len(sess["acked"]) < window:
            self._send_chunk(sess["sid"], next_seq)
            next_seq += 1

    def _on_file_fail(self, machine, pkt) -> None:
        sid = pkt.control["sid"]
        sess = self.sessions.get(sid)
        if sess is None or sess["state"] in (COMPLETE, FAILED):
            return
        self._fail(sid, pkt.control["reason"])

    def on_session_check(self, sid: int) -> None:
        """Requester-side liveness: re-ask for the file, give up when stalled."""
        sim = self.sim
        sess = self.sessions.get(sid)
        if sess is None or sess["state"] in (COMPLETE, FAILED):
            return
        timeout = to_micro(sess["transport"]["retransmit_timeout"])
        limit = sess["transport"]["retransmit_limit"]
        if sess["total"] is None:
            sess["req_attempts"] += 1
            if sess["req_attempts"] > limit:
                self._fail(sid, "TransferFailed")
                return
            self._send_req(sid)
        elif sim.queue.now - sess["last_activity"] > timeout * (limit + 2):
            self._fail(sid, "TransferFailed")
            return
        sim.queue.push(sim.queue.now + timeout, TIMER, ("SESSION_CHECK", sid))

    def _fail(self, sid: int, reason: str) -> None:
        sess = self.sessions[sid]
        if sess["state"] in (COMPLETE, FAILED):
            return
        sess["state"] = FAILED
        sess["reason"] = reason
        self.sim.trace.emit(
            self.sim.queue.now, sess["requester"].node, "SESSION_FAILED",
            reason=reason, sid=sid,
        )

    def _machine(self, mid, cid):
        return self.sim.nodes[mid.node].machines[cid]

    # -- flooding baseline -------------------------------------------------------

    def flood_send(self, src_label: str, payload_bytes: int, target: str | None = None) -> int:
        """Baseline data delivery: flood the payload network-wide."""
        sim = self.sim
        ref = sim.new_send(src_label)
        pkt = PacketEnvelope(
            packet_id=sim.next_packet_id(),
            kind=DATA,
            op_code="FLOOD",
            src=src_label,
            dst=BROADCAST,
            payload_bytes=payload_bytes,
            control={"target": target},
            send_ref=ref,
        )
        node = sim.nodes[src_label]
        if target == src_label:
            if sim.mark_send(ref, "DELIVERED"):
                sim.metrics.bytes_delivered += payload_bytes
                sim.trace.emit(sim.queue.now, src_label, "DELIVERED", pkt.packet_id)
        sim.router.start_flood(node, pkt)
        return ref

    def report_sessions(self) -> list:
        out = []
        for sid in sorted(self.sessions):
            sess = self.sessions[sid]
            entry = {
                "sid": sid,
                "file": sess["file"],
                "cid": sess["cid"],
                "requester": str(sess["requester"]),
                "holder": str(sess["holder"]),
                "state": sess["state"],
                "reason": sess["reason"],
                "total_chunks": sess["total"],
                "chunks_received": len(sess["chunks"]),
                "retransmissions": sess["retransmissions"],
            }
            if sess["content"] is not None:
                entry["bytes"] = len(sess["content"])
                entry["content_sha256"] = hashlib.sha256(sess["content"]).hexdigest()
            out.append(entry)
        return out


def compare_overhead(scenario, seed: int, messages: int | None = None) -> dict:
    """Run the same workload in both modes and report the crossover point.

    The crossover K is the smallest prefix length k of the mirrored send
    workload at which the community mode's total transmissions drop below the
    baseline's, found by running both modes for every k up to ``messages``.
    """
    from .sim import run

    sends = [s for s in scenario.steps if s["op"] == "send" and s.get("mirror", True)]
    k_max = messages if messages is not None else len(sends)
    per_k = []
    last_ham = last_base = None
    for k in range(k_max + 1):
        variant = scenario.with_send_count(k)
        last_ham = run(variant, seed, mode="hamanet")
        last_base = run(variant, seed, mode="baseline")
        per_k.append(
            {
                "k": k,
                "hamanet_tx": last_ham.report["metrics"]["total_tx"],
                "baseline_tx": last_base.report["metrics"]["total_tx"],
            }
        )
    crossover = None
    for entry in per_k:
        if entry["k"] >= 1 and entry["hamanet_tx"] < entry["baseline_tx"]:
            crossover = entry["k"]
            break
    return {
        "mode": "compare",
        "scenario": scenario.name,
        "seed": seed,
        "messages": k_max,
        "crossover": crossover,
        "per_k": per_k,
        "hamanet": last_ham.report,
        "baseline": last_base.report,
    }
