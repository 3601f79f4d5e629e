from __future__ import annotations

from fractions import Fraction

import pytest

from miniquic import checks
from miniquic.scenarios import (
    EXPECTED_RTTS,
    SCENARIO_NAMES,
    InvalidScenario,
    Scenario,
    rtt_comparison,
    run_scenario,
    run_transfer,
)
from miniquic.simnet import SimConfig


def run(name: str, seed: int = 0, **overrides):
    return run_scenario(Scenario(name, SimConfig(seed=seed), overrides=overrides))


class TestValidation:
    def test_unknown_name(self):
        with pytest.raises(InvalidScenario) as info:
            Scenario("warp")
        assert info.value.field == "name"

    def test_unknown_option(self):
        with pytest.raises(InvalidScenario):
            Scenario("fec", overrides={"colour": "red"})

    @pytest.mark.parametrize("key", ["fec_group", "rate_bytes_per_ms", "budget_us"])
    def test_non_positive(self, key):
        with pytest.raises(InvalidScenario):
            Scenario("fec", overrides={key: 0})

    def test_bool_coercion(self):
        assert Scenario("hol", overrides={"drop": "no"}).option("drop") is False

    def test_sim_overrides(self):
        sc = Scenario("fec", SimConfig(delay=100), overrides={"jitter_us": "40", "reorder": "0.1"})
        assert (sc.sim_config().jitter, sc.sim_config().reorder_rate) == (40, 0.1)


class TestEveryScenario:
    @pytest.mark.parametrize("name", SCENARIO_NAMES)
    @pytest.mark.parametrize("seed", [0, 5])
    def test_passes(self, name, seed):
        result = run(name, seed)
        assert result.passed, result.failures
        assert checks.datagram_size_violations(result.trace) == []


class TestHandshakes:
    def test_fresh(self):
        assert run("handshake_fresh").result.rtts_to_first_data == 1

    def test_repeat(self):
        assert run("handshake_repeat").result.rtts_to_first_data == 0

    @pytest.mark.parametrize("rtt", [2, 20_000, 50_000, 300_000])
    def test_table(self, rtt):
        assert dict(rtt_comparison(rtt)) == {k: Fraction(v) for k, v in EXPECTED_RTTS.items()}

    def test_odd_rtt_rejected(self):
        with pytest.raises(ValueError):
            rtt_comparison(3)


class TestHol:
    def test_other_stream_unaffected(self):
        r = run("hol")
        assert r.details["other_stream_unaffected"]
        assert r.details["quic_other_stream_delay"] == 0
        assert r.details["tcp_other_stream_delay"] >= r.details["tcp_rto"]

    def test_without_drop(self):
        assert run("hol", drop=False).passed


class TestMigration:
    def test_cid_survives_rebind(self):
        r = run("migration")
        assert r.details["completed"] and r.details["path_changes"] == 1
        assert r.result.handshakes_after_migration == 0
        assert r.details["tcp_session_lost"]

    def test_zero_length_stalls(self):
        r = run("migration", zero_length_cid=True)
        assert r.passed, r.failures
        assert r.details["demux_failures"] >= 1
        assert not r.details["completed"]


class TestFec:
    def test_single_drop_per_group(self):
        r = run("fec")
        assert r.result.retransmissions == 0
        assert r.result.fec_recoveries == len(r.details["dropped"])

    def test_double_drop_retransmitted(self):
        r = run("fec", fec_drops=2)
        assert r.passed, r.failures
        assert r.result.retransmissions >= 2 and r.result.fec_recoveries == 0
        (group,) = r.details["dropped"]
        assert set(map(int, r.details["lost_groups"])) == {group}

    @pytest.mark.parametrize("size", [2, 3, 8])
    def test_group_sizes(self, size):
        r = run("fec", fec_group=size)
        assert r.passed, r.failures
        assert r.result.retransmissions == 0


class TestFlowControl:
    def test_paced_never_blocks(self):
        r = run("flowcontrol")
        assert r.passed and r.details["blocked_frames"] == 0

    def test_hostile_closed_with_flow_error(self):
        r = run("flowcontrol", hostile=True)
        assert r.passed, r.failures
        assert r.details["close_codes"] == [0x03]
        assert r.result.flow_violations == 1


class TestReliability:
    @pytest.mark.parametrize("seed", range(5))
    def test_lossy_transfer(self, seed):
        sim = SimConfig(seed=seed, loss_rate=0.2, reorder_rate=0.1, dup_rate=0.1, jitter=5_000)
        bed, transfer, done = run_transfer(sim, streams=3, size=32 * 1024)
        assert done and bed.intact(transfer)
        assert checks.all_violations(bed.trace) == []


class TestDeterminism:
    @pytest.mark.parametrize("name", ["hol", "fec", "migration"])
    def test_identical_traces(self, name):
        assert run(name, 3).trace.to_csv() == run(name, 3).trace.to_csv()

    def test_seed_changes_trace(self):
        assert run("fec", 1).trace.to_csv() != run("fec", 2).trace.to_csv()
