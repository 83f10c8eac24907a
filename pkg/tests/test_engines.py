import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speedlab.engines import (AccountingMode, AdaptivePolicy, EngineError, EngineKind, Sample,
                              aggregate_discard, compute_speed, resample_speeds, run_adaptive_multi,
                              run_single_stream)
from speedlab.harness import Cell, run_once
from speedlab.transport import Counters, Direction

import oracles


class FakeProvider:
    """Each connection moves ``rate`` bytes/s; can fail after ``fail_at`` s."""

    def __init__(self, rate=1e6, fail_at=None, srtt=0.001, sender_extra=0):
        self.t = 0.0
        self.rate = rate
        self.fail_at = fail_at
        self.srtt = srtt
        self.extra = sender_extra
        self.opened = []
        self.closed = False

    def now(self):
        return self.t

    def open(self, direction):
        self.opened.append(self.t)
        return len(self.opened) - 1

    def advance(self, until):
        if self.fail_at is not None and until > self.fail_at:
            raise ConnectionResetError("peer went away")
        self.t = until

    def snapshot(self, conns):
        out = []
        for c in conns:
            b = int(self.rate * (self.t - self.opened[c]))
            out.append(Counters(self.t, b + self.extra, b, b, self.srtt))
        return out

    def close(self, conns):
        self.closed = True


def test_aggregate_examples():
    assert aggregate_discard([100] * 20) == 100
    assert aggregate_discard(range(1, 21)) == 12
    assert aggregate_discard([0] * 5 + [100] * 15) == 100


def test_aggregate_needs_twenty():
    with pytest.raises(ValueError):
        aggregate_discard([1] * 19)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1e10, allow_nan=False), min_size=20, max_size=20))
def test_aggregate_matches_oracle_and_dominates_trimmed_mean(v):
    got = aggregate_discard(v)
    assert got == pytest.approx(oracles.discard_mean(v), rel=1e-12, abs=1e-6)
    # dropping the 5 lowest of the remaining 18 can only raise their mean
    top_trimmed = sorted(v)[:18]
    assert got >= np.mean(top_trimmed) - 1e-9 * max(1.0, max(v))


def test_aggregate_can_fall_below_plain_mean():
    # the two dropped maxima may carry the whole mean
    v = [0.0] * 19 + [1.0]
    assert aggregate_discard(v) == 0.0 < np.mean(v)


def test_compute_speed():
    assert compute_speed(125e6, 10) == 100e6
    assert compute_speed(1_048_576, 10) == pytest.approx(838_860.8)
    with pytest.raises(ValueError):
        compute_speed(1, 0)
    c = Counters(0, 5000, 5000, 5000, 0.01)
    assert compute_speed(c, 1, AccountingMode.SENDER_APP) == compute_speed(c, 1)


def test_resample_constant_rate():
    s = [Sample(0.25 * k, 1000 * k, 32000) for k in range(1, 15)]
    assert np.allclose(resample_speeds(s, 3.5), 1000 * 8 / 0.25)


def test_single_stream_fake():
    p = FakeProvider(rate=1e6)
    r = run_single_stream(p, "down")
    assert r.engine is EngineKind.SINGLE_STREAM
    assert len(r.samples) == 40 and r.duration_s == 10
    assert r.reported_bits_per_s == r.average_bits_per_s == pytest.approx(8e6)
    assert r.conn_count_trace == [(0.0, 1)]
    assert p.closed


def test_failure_keeps_partial_samples():
    p = FakeProvider(fail_at=2.0)
    with pytest.raises(EngineError) as ei:
        run_single_stream(p, "down")
    assert len(ei.value.samples) == 8
    assert p.closed


def test_adaptive_stays_single_when_flat_and_near():
    r = run_adaptive_multi(FakeProvider(rate=1e6, srtt=0.001), "down")
    assert r.final_conn_count == 1
    assert r.duration_s == 3.5


def test_adaptive_ramps_on_rtt_to_cap():
    r = run_adaptive_multi(FakeProvider(rate=1e6, srtt=0.05), "down")
    counts = [n for _, n in r.conn_count_trace]
    assert counts == sorted(counts) and counts[-1] == 8
    assert AdaptivePolicy().min_s <= r.duration_s <= AdaptivePolicy().max_s


def test_adaptive_ramp_disabled():
    r = run_adaptive_multi(FakeProvider(srtt=0.05), "down", AdaptivePolicy(ramp_enabled=False))
    assert r.final_conn_count == 1


def test_download_ignores_sender_accounting():
    r = run_single_stream(FakeProvider(sender_extra=10**6), "down", AccountingMode.SENDER_APP)
    assert r.accounting is AccountingMode.RECEIVER_ACKED


def test_upload_sender_accounting_counts_writes():
    app = run_single_stream(FakeProvider(sender_extra=10**6), "up", AccountingMode.SENDER_APP)
    ack = run_single_stream(FakeProvider(sender_extra=10**6), "up", AccountingMode.RECEIVER_ACKED)
    assert app.reported_bits_per_s - ack.reported_bits_per_s == pytest.approx(0.8e6)


def test_parse_names():
    assert AccountingMode.parse("SenderApp") is AccountingMode.SENDER_APP
    assert AccountingMode.parse("receiver_acked") is AccountingMode.RECEIVER_ACKED
    assert EngineKind.parse("adaptive") is EngineKind.ADAPTIVE_MULTI
    with pytest.raises(ValueError):
        EngineKind.parse("triple")


# --- on the simulated link --------------------------------------------------------------

def cell(engine, rtt=0.0, cap=100e6, direction="down", acct="acked", loss=0.0):
    return Cell(engine, direction, cap, rtt, loss, "bbr", 0, acct)


def test_sim_single_zero_delay_saturates():
    r = run_once(cell("single"), 1)
    assert r.reported_bits_per_s / 100e6 >= 0.95


def test_sim_single_200ms_degrades():
    r = run_once(cell("single", rtt=200), 1)
    assert r.reported_bits_per_s / 100e6 <= 0.90


def test_sim_upload_accounting_at_half_mbps():
    app = run_once(cell("single", 10, 0.5e6, "up", "app"), 1)
    ack = run_once(cell("single", 10, 0.5e6, "up", "acked"), 1)
    assert app.reported_bits_per_s > 0.5e6 >= ack.reported_bits_per_s
    assert app.reported_bits_per_s - ack.reported_bits_per_s <= (1 << 20) * 8 / 10


def test_sim_adaptive_zero_and_high_rtt():
    r0 = run_once(cell("adaptive", 0), 1)
    assert r0.final_conn_count == 1 and r0.duration_s <= 5
    r150 = run_once(cell("adaptive", 150), 1)
    assert 2 <= r150.final_conn_count <= 8
    assert all(n >= 1 for _, n in r150.conn_count_trace)


def test_sim_adaptive_beats_single_at_500ms():
    a = run_once(cell("adaptive", 500), 1)
    s = run_once(cell("single", 500), 1)
    assert a.reported_bits_per_s >= s.reported_bits_per_s


def test_samples_monotone():
    r = run_once(cell("adaptive", 50), 3)
    t = [s.t_offset_s for s in r.samples]
    b = [s.bytes_cum for s in r.samples]
    assert all(x < y for x, y in zip(t, t[1:])) and b == sorted(b)
