"""Identifier, path and table primitives."""

import hashlib
import random

import pytest

from hamanet import (
    CommunityTable,
    MachineId,
    MalformedPath,
    PacketEnvelope,
    SocietyTable,
    format_path,
    parse_path,
    society_lookup,
    table_digest,
)


class TestParsePath:
    def test_multi_hop(self):
        assert parse_path("N1-N2-N4") == ("N1", "N2", "N4")

    def test_single_hop(self):
        assert parse_path("N1") == ("N1",)

    def test_repeated_hop_rejected(self):
        with pytest.raises(MalformedPath):
            parse_path("N1-N2-N1")

    def test_empty_rejected(self):
        with pytest.raises(MalformedPath):
            parse_path("")
        with pytest.raises(MalformedPath):
            parse_path("N1--N2")

    def test_unknown_label_rejected(self):
        with pytest.raises(MalformedPath):
            parse_path("N1-N7", known_labels={"N1", "N2"})


class TestFormatPath:
    def test_format(self):
        assert format_path(("N1", "N2", "N4")) == "N1-N2-N4"
        assert format_path(("N3",)) == "N3"

    def test_round_trip_random(self):
        rng = random.Random(99)
        for _ in range(200):
            n = rng.randint(1, 12)
            hops = rng.sample([f"N{i}" for i in range(1, 30)], n)
            path = tuple(hops)
            assert parse_path(format_path(path)) == path


TABLE4_ROWS = [
    (MachineId("N2", 0), ("N1", "N2")),
    (MachineId("N3", 0), ("N1", "N3")),
    (MachineId("N4", 0), ("N1", "N2", "N4")),
]


def build_table(rows):
    table = CommunityTable(owner="N1", cid="C1")
    for mid, path in rows:
        table.add_row(mid, path)
    return table


class TestCommunityTable:
    def test_owner_not_a_row(self):
        table = CommunityTable(owner="N1", cid="C1")
        with pytest.raises(ValueError):
            table.add_row(MachineId("N1", 0), ("N1",))

    def test_path_must_start_at_owner(self):
        table = CommunityTable(owner="N1", cid="C1")
        with pytest.raises(ValueError):
            table.add_row(MachineId("N2", 0), ("N2", "N1"))

    def test_row_for_node(self):
        table = build_table(TABLE4_ROWS)
        mid, path = table.row_for_node("N4")
        assert mid == MachineId("N4", 0)
        assert path == ("N1", "N2", "N4")
        assert table.row_for_node("N9") is None


class TestTableDigest:
    def test_empty_tables(self):
        assert table_digest(CommunityTable("N1", "C1")) == table_digest(
            CommunityTable("N1", "C1")
        )
        assert table_digest(SocietyTable()) == table_digest(SocietyTable())

    def test_insertion_order_independent(self):
        # oracle: digest is sha256 over the canonically sorted row encoding
        canonical = "\n".join(
            ["CT|N1|C1", "N2#0|C1|N1-N2", "N3#0|C1|N1-N3", "N4#0|C1|N1-N2-N4"]
        ).encode()
        expected = hashlib.sha256(canonical).hexdigest()
        rng = random.Random(5)
        for _ in range(10):
            rows = TABLE4_ROWS[:]
            rng.shuffle(rows)
            assert table_digest(build_table(rows)) == expected

    def test_any_added_row_changes_digest(self):
        table = build_table(TABLE4_ROWS)
        before = table_digest(table)
        table.add_row(MachineId("N5", 0), ("N1", "N3", "N5"))
        assert table_digest(table) != before

    def test_society_digest(self):
        a = SocietyTable()
        a.register("C1", "File service")
        a.register("C2", "Name Service")
        b = SocietyTable()
        b.register("C2", "Name Service")
        b.register("C1", "File service")
        assert table_digest(a) == table_digest(b)


class TestSocietyTable:
    def test_lookup(self):
        table = SocietyTable()
        table.register("C1", "File service")
        table.register("C2", "Name Service")
        assert society_lookup(table, "C1") == "File service"
        assert society_lookup(table, "C2") == "Name Service"
        assert society_lookup(table, "C9") is None

    def test_no_cid_reuse(self):
        table = SocietyTable()
        table.register("C1", "File service")
        with pytest.raises(ValueError):
            table.register("C1", "Name Service")


class TestPacketEnvelope:
    def test_hop_trace_starts_at_src(self):
        pkt = PacketEnvelope(1, "DATA", "PING", src="N1", dst="N2")
        assert pkt.hop_trace == ("N1",)
        with pytest.raises(ValueError):
            PacketEnvelope(2, "DATA", "PING", src="N1", dst="N2", hop_trace=("N2",))

    def test_forwarding_appends_one_hop(self):
        pkt = PacketEnvelope(1, "RREP", "X", src="N1", dst="N3")
        fwd = pkt.forwarded_by("N2")
        assert fwd.hop_trace == ("N1", "N2")
        assert pkt.hop_trace == ("N1",)

    def test_no_hop_revisit(self):
        pkt = PacketEnvelope(1, "RREP", "X", src="N1", dst="N3")
        with pytest.raises(ValueError):
            pkt.forwarded_by("N1")

    def test_flood_kinds_need_cid(self):
        for kind in ("MCSTART", "MCJOIN", "RREQ"):
            with pytest.raises(ValueError):
                PacketEnvelope(1, kind, "X", src="N1", dst="*")

    def test_community_data_needs_seq(self):
        with pytest.raises(ValueError):
            PacketEnvelope(1, "DATA", "PING", src="N1", dst="N2", cid="C1")
