from __future__ import annotations

from hypothesis import given
from hypothesis import strategies as st

from miniquic import checks
from miniquic.trace import Trace, TraceRow, format_detail, parse_detail, read_csv


def sent(entity, pn, space="APPLICATION", form="short", size=100, eliciting=1, in_flight=0, cwnd=10_000, probe=0):
    return TraceRow(
        0, entity, "packet_sent",
        format_detail(space=space, form=form, pn=pn, size=size, eliciting=eliciting, in_flight=in_flight, cwnd=cwnd, probe=probe),
    )


class TestCsv:
    def test_seed_header_and_roundtrip(self):
        t = Trace(seed=7)
        t.record(1, "a", "x", format_detail(k=1))
        t.record(2, "b", "y", "")
        text = t.to_csv()
        assert text.startswith("# seed=7")
        assert read_csv(text) == list(t)

    def test_disabled(self):
        t = Trace(enabled=False)
        t.record(1, "a", "x")
        assert len(t) == 0

    @given(st.dictionaries(st.from_regex(r"[a-z_]{1,8}", fullmatch=True), st.integers()))
    def test_detail_roundtrip(self, fields):
        assert parse_detail(format_detail(**fields)) == {k: str(v) for k, v in fields.items()}


class TestChecks:
    def test_pn_reuse(self):
        rows = [sent("c", 0), sent("c", 1), sent("c", 1)]
        assert len(checks.packet_number_violations(rows)) == 1

    def test_spaces_separate(self):
        rows = [sent("c", 0, "INITIAL"), sent("c", 0), sent("s", 0)]
        assert checks.packet_number_violations(rows) == []

    def test_oversize(self):
        assert checks.datagram_size_violations([sent("c", 0, size=1393)])
        assert not checks.datagram_size_violations([sent("c", 0, size=1392)])

    def test_window_ignores_probes(self):
        assert checks.window_violations([sent("c", 0, in_flight=20_000)])
        assert not checks.window_violations([sent("c", 0, in_flight=20_000, probe=1)])

    def test_credit_regression(self):
        rows = [
            TraceRow(0, "s", "credit_issued", format_detail(scope="conn", limit=10)),
            TraceRow(1, "s", "credit_issued", format_detail(scope="conn", limit=9)),
        ]
        assert checks.credit_monotonicity_violations(rows)

    def test_long_after_established(self):
        rows = [TraceRow(0, "c", "handshake_complete", ""), sent("c", 5, form="long")]
        assert checks.long_header_after_established(rows)
