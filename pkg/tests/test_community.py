"""Community lifecycle: start, joins, table construction, dissemination, late join."""

import pytest

from hamanet import run
from hamanet.community import NoSuchCommunity, PrerequisiteUnmet, splice_paths
from hamanet.sim import Simulation

from conftest import (
    STD_ARTS,
    adjacency_of,
    bfs_dist,
    formation_scenario,
    make_scenario,
    trace_events,
)

TABLE4_EDGES = [("N1", "N2"), ("N1", "N3"), ("N2", "N4")]


def run_table4(seed=7):
    scn = formation_scenario(["N1", "N2", "N3", "N4"], TABLE4_EDGES, end_time=60)
    return run(scn, seed)


class TestStartService:
    def test_si_table_matches_reference_rows(self):
        rep = run_table4().report
        rows = rep["communities"][0]["tables"]["N1"]
        assert rows == [
            {"mid": "N2", "cid": "C1", "path": "N1-N2"},
            {"mid": "N3", "cid": "C1", "path": "N1-N3"},
            {"mid": "N4", "cid": "C1", "path": "N1-N2-N4"},
        ]

    def test_society_row_registered(self):
        rep = run_table4().report
        assert rep["society"] == [{"cid": "C1", "culture": "svc"}]

    def test_isolated_start_forms_community_of_one(self):
        scn = make_scenario(
            ["N1"],
            [],
            steps=[{"time": 0, "op": "start_service", "node": "N1", "culture": "svc"}],
            end_time=30,
        )
        rep = run(scn, 1).report
        community = rep["communities"][0]
        assert community["members"] == ["N1#0"]
        assert rep["metrics"]["control_tx"]["MCJOIN"] == 0

    def test_cids_minted_in_start_order(self):
        scn = make_scenario(
            ["N1", "N2"],
            [("N1", "N2")],
            steps=[
                {"time": 0, "op": "start_service", "node": "N1", "culture": "svc"},
                {"time": 1, "op": "start_service", "node": "N2", "culture": "svc"},
            ],
            end_time=40,
        )
        rep = run(scn, 1).report
        assert [c["cid"] for c in rep["communities"]] == ["C1", "C2"]
        sis = {c["cid"]: c["si"] for c in rep["communities"]}
        assert sis == {"C1": "N1", "C2": "N2"}

    def test_prerequisite_unmet(self):
        scn = formation_scenario(["N1", "N2"], [("N1", "N2")])
        sim = Simulation(scn, seed=1)
        sim.registry.cultures["svc"] = sim.registry.cultures["svc"].__class__(
            name="svc", slots=sim.registry.cultures["svc"].slots, requires=("gateway",)
        )
        with pytest.raises(PrerequisiteUnmet):
            sim.community.start_service("N1", "svc")

    def test_gateway_attribute_satisfies_prerequisite(self):
        cultures = [
            {
                "name": "gated",
                "slots": dict(
                    PHYSICAL="FreeSpace",
                    MAC="CSMA",
                    ROUTING="DSDV",
                    TRANSPORT="TCP-abstract",
                    APPLICATION="FTP",
                ),
                "requires": ["gateway"],
            }
        ]
        scn = make_scenario(
            ["N1", "N2"],
            [("N1", "N2")],
            cultures=cultures,
            interests={"N2": ["gated"]},
            steps=[{"time": 0, "op": "start_service", "node": "N1", "culture": "gated"}],
            end_time=40,
        )
        scn.nodes[0]["gateway"] = True
        rep = run(scn, 1).report
        assert rep["society"] == [{"cid": "C1", "culture": "gated"}]


class TestFlooding:
    def test_every_node_forwards_once(self):
        result = run_table4()
        assert result.metrics["control_tx"]["MCSTART"] == 4
        assert result.metrics["broadcast_tx"] == 4

    def test_duplicate_suppression(self):
        # triangle: N2 and N3 both forward, each sees the other's copy once
        scn = formation_scenario(
            ["N1", "N2", "N3"], [("N1", "N2"), ("N1", "N3"), ("N2", "N3")], end_time=40
        )
        result = run(scn, 1)
        assert result.metrics["control_tx"]["MCSTART"] == 3
        assert trace_events(result.trace, "DUP_RX")

    def test_uninterested_node_forwards_but_never_joins(self):
        scn = make_scenario(
            ["N1", "N2", "N3"],
            [("N1", "N2"), ("N2", "N3")],
            interests={"N3": ["svc"]},
            steps=[{"time": 0, "op": "start_service", "node": "N1", "culture": "svc"}],
            end_time=40,
        )
        result = run(scn, 1)
        assert result.metrics["control_tx"]["MCSTART"] == 3
        members = result.report["communities"][0]["members"]
        assert members == ["N1#0", "N3#0"]

    def test_same_time_copies_lowest_index_parent_wins(self):
        # N4 hears the start flood from N2 and N3 simultaneously; N2 has the
        # lower node index so the recorded path goes through N2
        scn = formation_scenario(
            ["N1", "N2", "N3", "N4"],
            [("N1", "N2"), ("N1", "N3"), ("N2", "N4"), ("N3", "N4")],
            end_time=60,
        )
        rows = run(scn, 1).report["communities"][0]["tables"]["N1"]
        n4 = next(r for r in rows if r["mid"] == "N4")
        assert n4["path"] == "N1-N2-N4"


class TestDissemination:
    def test_tree_multicast_transmission_count(self):
        # union of the SI paths is the three-edge tree, so three table packets
        result = run_table4()
        assert result.metrics["control_tx"]["RREP"] == 3
        assert len(trace_events(result.trace, "TABLE_RX")) == 3

    def test_community_of_one_sends_nothing(self):
        scn = make_scenario(
            ["N1", "N2"],
            [("N1", "N2")],
            steps=[{"time": 0, "op": "start_service", "node": "N1", "culture": "svc"}],
            end_time=30,
        )
        result = run(scn, 1)
        assert result.metrics["control_tx"]["RREP"] == 0

    def test_member_table_rebase(self):
        # reverse of the SI path, exactly as the rebase rule prescribes
        tables = run_table4().report["communities"][0]["tables"]
        n4_to_n1 = next(r for r in tables["N4"] if r["mid"] == "N1")
        assert n4_to_n1["path"] == "N4-N2-N1"

    def test_table_agreement_every_pair(self):
        tables = run_table4().report["communities"][0]["tables"]
        labels = sorted(tables)
        assert labels == ["N1", "N2", "N3", "N4"]
        for a in labels:
            mids = {row["mid"] for row in tables[a]}
            assert mids == set(labels) - {a}

    def test_all_paths_valid_in_topology(self):
        tables = run_table4().report["communities"][0]["tables"]
        adj = adjacency_of(["N1", "N2", "N3", "N4"], TABLE4_EDGES)
        for owner, rows in tables.items():
            for row in rows:
                hops = row["path"].split("-")
                assert hops[0] == owner
                assert all(b in adj[a] for a, b in zip(hops, hops[1:]))


class TestSplicePaths:
    ADJ = adjacency_of(
        ["N1", "N2", "N3", "N4", "N5"],
        [("N1", "N2"), ("N2", "N4"), ("N1", "N3"), ("N3", "N5"), ("N4", "N5")],
    )

    def test_divergence_splice(self):
        # root-relative paths N1->N4 and N1->N5 diverge right after N1
        path = splice_paths(("N1", "N2", "N4"), ("N1", "N3", "N5"), self.ADJ)
        assert path[0] == "N4" and path[-1] == "N5"
        assert all(b in self.ADJ[a] for a, b in zip(path, path[1:]))

    def test_shortcut_uses_direct_edge(self):
        # N4 and N5 are adjacent: the spliced walk collapses to one hop
        path = splice_paths(("N1", "N2", "N4"), ("N1", "N3", "N5"), self.ADJ)
        assert path == ("N4", "N5")

    def test_common_prefix_spliced_out(self):
        adj = adjacency_of(
            ["N1", "N2", "N3", "N4"], [("N1", "N2"), ("N2", "N3"), ("N2", "N4")]
        )
        path = splice_paths(("N1", "N2", "N3"), ("N1", "N2", "N4"), adj)
        assert path == ("N3", "N2", "N4")

    def test_no_repeated_nodes(self):
        path = splice_paths(("N1", "N2", "N4"), ("N1", "N2", "N4"), self.ADJ)
        assert len(set(path)) == len(path)


class TestJoinHandling:
    def test_foreign_cid_rejected(self):
        scn = formation_scenario(["N1", "N2"], [("N1", "N2")], end_time=40)
        sim = Simulation(scn, seed=1)
        sim.run_until(5000)
        from hamanet.core import MachineId, PacketEnvelope

        bogus = PacketEnvelope(
            packet_id=999,
            kind="MCJOIN",
            op_code="JOIN",
            src="N2",
            dst="N1",
            cid="C9",
            origin_machine=MachineId("N2", 0),
            route=("N2", "N1"),
        )
        before = sim.metrics.control_rejected
        sim.community.handle_mcjoin(sim.nodes["N1"], bogus)
        assert sim.metrics.control_rejected == before + 1

    def test_join_after_window_admits_late(self):
        # joiner two hops out, window shorter than the round trip
        scn = make_scenario(
            ["N1", "N2", "N3"],
            [("N1", "N2"), ("N2", "N3")],
            interests={"N2": ["svc"], "N3": ["svc"]},
            params={"join_window": 3},
            steps=[{"time": 0, "op": "start_service", "node": "N1", "culture": "svc"}],
            end_time=50,
        )
        rep = run(scn, 1).report
        community = rep["communities"][0]
        assert "N3#0" in community["members"]
        assert {r["mid"] for r in community["tables"]["N1"]} == {"N2", "N3"}


class TestLateJoin:
    def scenario(self):
        return make_scenario(
            ["N1", "N2", "N3", "N4", "N5"],
            [("N1", "N2"), ("N1", "N3"), ("N2", "N4"), ("N4", "N5")],
            interests={l: ["svc"] for l in ("N2", "N3", "N4")},
            steps=[
                {"time": 0, "op": "start_service", "node": "N1", "culture": "svc"},
                {"time": 20, "op": "late_join", "node": "N5", "cid": "C1"},
            ],
            end_time=60,
        )

    def test_all_tables_gain_the_new_member(self):
        rep = run(self.scenario(), 1).report
        community = rep["communities"][0]
        assert "N5#0" in community["members"]
        for owner in ("N1", "N2", "N3", "N4"):
            assert any(r["mid"] == "N5" for r in community["tables"][owner]), owner
        n5_rows = {r["mid"] for r in community["tables"]["N5"]}
        assert n5_rows == {"N1", "N2", "N3", "N4"}

    def test_late_join_by_member_is_noop(self):
        scn = formation_scenario(["N1", "N2"], [("N1", "N2")], end_time=60)
        sim = Simulation(scn, seed=1)
        sim.run_until(15000)
        tx_before = sim.metrics.total_tx()
        assert sim.community.late_join("N2", "C1") is False
        assert sim.metrics.total_tx() == tx_before

    def test_unknown_community_raises(self):
        scn = formation_scenario(["N1", "N2"], [("N1", "N2")], end_time=60)
        sim = Simulation(scn, seed=1)
        sim.run_until(15000)
        with pytest.raises(NoSuchCommunity):
            sim.community.late_join("N2", "C9")
