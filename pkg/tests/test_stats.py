import math
import random
from datetime import datetime, timedelta, timezone
from zoneinfo import ZoneInfo

import pytest
from hypothesis import given, strategies as st

from speedlab.stats import (Observation, RelDiffClass, StatsError, analysis_consistency,
                            analysis_paired_ttest, analysis_reldiff_classes, analysis_server_rank,
                            analysis_time_of_day, classify, consistency_ratio, is_peak,
                            load_observations, nominal_speed, normalize, pair_observations,
                            paired_t_test, peak_offpeak_split, percentile_nearest_rank, rank_servers,
                            rel_diff, student_t_cdf, welch_t_test, write_observations)

import oracles

UTC = timezone.utc
T0 = datetime(2024, 3, 1, 12, 0, tzinfo=UTC)


# --- percentiles ------------------------------------------------------------------------

def test_nominal_speed_examples():
    assert nominal_speed(range(10, 201, 10)) == 190
    assert nominal_speed([42]) == 42
    assert nominal_speed([7.5] * 13) == 7.5
    with pytest.raises(StatsError):
        nominal_speed([])


@given(st.lists(st.floats(0.001, 1e10), min_size=1, max_size=300),
       st.sampled_from([0.5, 0.9, 0.95, 0.99, 1.0]))
def test_percentile_oracle_and_membership(series, q):
    got = percentile_nearest_rank(series, q)
    assert got == oracles.nearest_rank(series, q)
    assert got in series


@given(st.lists(st.floats(1.0, 1e10), min_size=1, max_size=300))
def test_at_most_five_percent_above_nominal(series):
    s95 = nominal_speed(series)
    above = sum(normalize(x, s95) > 1 for x in series)
    assert above <= math.floor(0.05 * len(series))


def test_normalize():
    assert normalize(200, 200) == 1.0
    assert normalize(50, 200) == 0.25
    with pytest.raises(StatsError):
        normalize(1, 0)


# --- relative difference and classes ----------------------------------------------------

def test_rel_diff_examples():
    assert rel_diff(100, 100) == 0
    assert rel_diff(100, 95) == pytest.approx(0.05)
    assert rel_diff(75, 100) == pytest.approx(-0.25)
    with pytest.raises(StatsError):
        rel_diff(0, 1)


def test_rel_diff_antisymmetry_and_scale_10k():
    rng = random.Random(8)
    for _ in range(10_000):
        a = 10 ** rng.uniform(-3, 10)
        b = 10 ** rng.uniform(-3, 10)
        k = 10 ** rng.uniform(-6, 6)
        d = rel_diff(a, b)
        assert -1 <= d <= 1
        assert rel_diff(b, a) == -d
        assert rel_diff(k * a, k * b) == pytest.approx(d, abs=1e-12)


def test_classify_boundaries():
    C = RelDiffClass
    assert classify(0.05) is C.ADAPTIVE_HIGHER_LOW
    assert classify(0.0500001) is C.ADAPTIVE_HIGHER_MEDIUM
    assert classify(0.25) is C.ADAPTIVE_HIGHER_MEDIUM
    assert classify(1.0) is C.ADAPTIVE_HIGHER_HIGH
    assert classify(-0.05) is C.SINGLE_HIGHER_LOW
    assert classify(-0.25) is C.SINGLE_HIGHER_MEDIUM
    assert classify(-0.2500001) is C.SINGLE_HIGHER_HIGH
    assert classify(0) is C.EQUAL
    assert classify(1e-300) is C.ADAPTIVE_HIGHER_LOW
    for bad in (1.0001, -2, float("nan")):
        with pytest.raises(StatsError):
            classify(bad)


def test_classify_total_on_grid():
    seen = set()
    for i in range(-10_000, 10_001):
        seen.add(classify(i / 10_000))
    assert seen == set(RelDiffClass)


# --- t distribution and tests ------------------------------------------------------------

def test_cdf_examples():
    assert abs(student_t_cdf(1, 1) - 0.75) < 1e-10
    assert student_t_cdf(0, 3.3) == 0.5
    assert student_t_cdf(2.776, 4) == pytest.approx(0.975, abs=1e-4)
    with pytest.raises(StatsError):
        student_t_cdf(1, 0)


@pytest.mark.parametrize("df", [1, 2, 4])
def test_cdf_closed_forms(df):
    for t in (-30, -2.5, -0.3, 0.01, 1, 3.7, 50):
        assert abs(student_t_cdf(t, df) - oracles.t_cdf_closed(t, df)) < 1e-10


def test_cdf_quadrature():
    for t, df in [(0.5, 3), (-1.7, 7.5), (2.2, 29), (4.0, 120)]:
        assert abs(student_t_cdf(t, df) - float(oracles.t_cdf_quad(t, df))) < 1e-10


def _random_diffs(rng):
    n = rng.randint(2, 40)
    mu = rng.uniform(-2, 2)
    return [rng.gauss(mu, rng.uniform(0.1, 3)) for _ in range(n)]


def test_paired_oracle_1000():
    rng = random.Random(2024)
    for _ in range(1000):
        d = _random_diffs(rng)
        r = paired_t_test(d)
        t, df = oracles.paired_t_direct(d)
        assert r.df == df
        assert abs(r.t_stat - t) <= 1e-9 * max(1.0, abs(t))
        assert abs(r.p_two_sided - oracles.t_two_sided_quad(t, df)) <= 1e-8
        assert r.reject_at_alpha == (r.p_two_sided < 0.01)


def test_welch_oracle():
    rng = random.Random(5)
    for _ in range(200):
        a = _random_diffs(rng)
        b = _random_diffs(rng)
        r = welch_t_test(a, b)
        t, df = oracles.welch_direct(a, b)
        assert abs(r.t_stat - t) <= 1e-9 * max(1.0, abs(t))
        assert r.df == pytest.approx(df, rel=1e-9)
        assert abs(r.p_two_sided - oracles.t_two_sided_quad(t, df)) <= 1e-8


def test_paired_examples():
    r = paired_t_test([2, -2])
    assert r.t_stat == 0 and r.p_two_sided == 1 and not r.reject_at_alpha
    r = paired_t_test([1, 2, 3, 4, 5])
    assert r.t_stat == pytest.approx(4.2426, abs=1e-4) and r.df == 4
    assert r.p_two_sided == pytest.approx(0.0132, abs=1e-4) and r.small_sample
    rng = random.Random(1)
    r = paired_t_test([1 + rng.uniform(-1e-3, 1e-3) for _ in range(100)])
    assert r.reject_at_alpha and not r.small_sample
    with pytest.raises(StatsError):
        paired_t_test([1])


def test_degenerate_variance_flags():
    r = paired_t_test([3.0] * 10)
    assert r.degenerate_variance and r.p_two_sided == 0 and r.reject_at_alpha
    r = paired_t_test([0.0] * 10)
    assert r.degenerate_variance and r.p_two_sided == 1 and not r.reject_at_alpha
    r = welch_t_test([4, 4, 4], [4, 4])
    assert r.degenerate_variance and r.p_two_sided == 1


def test_welch_examples():
    r = welch_t_test(range(1, 31), range(1, 31))
    assert r.t_stat == 0 and r.p_two_sided == 1
    assert welch_t_test(range(1, 31), range(11, 41)).reject_at_alpha


# --- consistency -------------------------------------------------------------------------

def test_consistency_ratio():
    ref = [3.0, 8.0, 1.0, 9.0, 4.0]
    assert consistency_ratio(ref, ref) == 1.0
    assert consistency_ratio([2 * x for x in ref], ref) == 2.0
    with pytest.raises(StatsError):
        consistency_ratio([1.0], [0.0, 0.0])
    with pytest.raises(StatsError):
        consistency_ratio([], ref)


# --- server ranking ----------------------------------------------------------------------

def _obs(hh, srv, speed, k=0, tool="adaptive", direction="down", ts=None):
    return Observation(hh, srv, ts or T0 + timedelta(minutes=k), direction, tool, speed)


def _household(hh, speeds, n=10, scale=1.0, jitter=0.0, rng=None):
    out = []
    for srv, s in speeds.items():
        for k in range(n):
            j = 1 + (rng.uniform(-jitter, jitter) if rng else 0)
            out.append(_obs(hh, srv, scale * s * j, k))
    return out


def test_one_server_no_delta_no_bottom3():
    res = rank_servers(_household("h", {"a": 1.0}))
    assert res.delta == {} and res.bottom3 == {}


def test_weak_server_always_bottom3():
    obs = []
    for i in range(12):
        obs += _household(f"h{i}", {"x": 0.9, "a": 1.0, "b": 1.0, "c": 1.0, "d": 1.0})
    res = rank_servers(obs, direction="down")
    assert res.bottom3_fraction("x") == 1.0
    assert all(r[-1][0] == "x" for r in res.per_household.values())


def test_delta_and_ties():
    res = rank_servers(_household("h", {"b": 0.99, "a": 0.99, "c": 0.91}), direction="down")
    assert [r[0] for r in res.per_household["h"]] == ["a", "b", "c"]
    assert res.delta["h"] == pytest.approx(0.99 / 0.99 - 0.91 / 0.99)


def test_min_tests_filter():
    obs = _household("h", {"a": 1.0, "b": 0.8}) + _household("h", {"c": 0.5}, n=9)
    res = rank_servers(obs, direction="down")
    assert [r[0] for r in res.per_household["h"]] == ["a", "b"]


@given(st.floats(1e-3, 1e6))
def test_ranking_scale_invariant(k):
    rng = random.Random(3)
    speeds = {f"s{i}": rng.uniform(50, 100) for i in range(5)}
    base = _household("h", speeds, jitter=0.1, rng=random.Random(4))
    scaled = _household("h", speeds, scale=k, jitter=0.1, rng=random.Random(4))
    order = lambda obs: [r[0] for r in rank_servers(obs, direction="down").per_household["h"]]
    assert order(base) == order(scaled)


# --- time of day -------------------------------------------------------------------------

def test_peak_boundaries():
    tz = ZoneInfo("America/New_York")
    day = datetime(2024, 6, 3, tzinfo=tz)
    assert is_peak(day.replace(hour=19))
    assert is_peak(day.replace(hour=22, minute=59, second=59))
    assert not is_peak(day.replace(hour=23))
    assert not is_peak(day.replace(hour=3))
    # 23:30 UTC is 19:30 in New York in June
    assert is_peak(datetime(2024, 6, 3, 23, 30, tzinfo=UTC), "America/New_York")


def test_naive_timestamp_rejected():
    with pytest.raises(StatsError, match="timezone"):
        peak_offpeak_split([_obs("h", "s", 1.0, ts=datetime(2024, 1, 1, 20))])


def test_time_of_day_needs_30_each():
    obs = [_obs("h", "s", 100.0 + k % 3, tool="single", ts=T0.replace(hour=20) + timedelta(seconds=k))
           for k in range(29)]
    obs += [_obs("h", "s", 120.0 + k % 3, tool="single", ts=T0.replace(hour=9) + timedelta(seconds=k))
            for k in range(40)]
    (row,) = analysis_time_of_day(obs)
    assert row["tested"] == 0 and row["n_peak"] == 29
    obs.append(_obs("h", "s", 100.0, tool="single", ts=T0.replace(hour=21)))
    (row,) = analysis_time_of_day(obs)
    assert row["tested"] == 1 and row["reject"] == 1


# --- pairing and analyses ----------------------------------------------------------------

def _paired_fixture():
    # h1: adaptive 100 vs single {100, 95, 80, 60} -> Equal, AH-Low, AH-Medium, AH-High
    obs = []
    for k, s in enumerate([100, 95, 80, 60]):
        t = T0 + timedelta(hours=k)
        obs.append(_obs("h1", "s", 100.0, tool="adaptive", ts=t))
        obs.append(_obs("h1", "s", float(s), tool="single", ts=t + timedelta(seconds=40)))
    # an unmatched single test far away in time
    obs.append(_obs("h1", "s", 50.0, tool="single", ts=T0 + timedelta(days=2)))
    return obs


def test_pairing_window():
    pairs = pair_observations(_paired_fixture())
    assert len(pairs) == 4
    assert all(p.adaptive.household_id == p.single.household_id == "h1" for p in pairs)
    assert all(p.adaptive.direction == p.single.direction for p in pairs)


def test_reldiff_classes_fixture():
    (row,) = analysis_reldiff_classes(_paired_fixture())
    assert row["n_pairs"] == 4
    for name in ("Equal", "AdaptiveHigher-Low", "AdaptiveHigher-Medium", "AdaptiveHigher-High"):
        assert row[name] == 0.25
    assert sum(row[c.value] for c in RelDiffClass) == pytest.approx(1.0)


def test_paired_ttest_rows():
    rows = analysis_paired_ttest(_paired_fixture())
    assert rows[0]["n_pairs"] == 4 and rows[0]["enough_pairs"] == 0
    assert rows[0]["mean_diff_bps"] == pytest.approx(100 - (100 + 95 + 80 + 60) / 4)


def test_server_rank_and_consistency_rows():
    obs = []
    for i in range(3):
        obs += _household(f"h{i}", {"x": 0.9, "a": 1.0, "b": 1.0})
    rows = analysis_server_rank(obs)
    b3 = {r["server_id"]: r["value"] for r in rows if r["kind"] == "bottom3"}
    assert b3 == {"a": 1.0, "b": 1.0, "x": 1.0}
    obs += [_obs("h0", "s", 2.0, k, tool="single") for k in range(5)]
    (row,) = analysis_consistency(obs)
    assert row["ct_adaptive"] == pytest.approx(0.5)


# --- CSV input ---------------------------------------------------------------------------

def test_load_roundtrip_and_aliases(tmp_path):
    p = tmp_path / "o.csv"
    obs = _paired_fixture()
    write_observations(p, obs)
    assert load_observations(p) == obs
    p.write_text("household_id,server_id,timestamp_iso8601,direction,tool,speed_bps\n"
                 "h,s,2024-01-01T20:00:00Z,down,Ookla,5\n"
                 "h,s,2024-01-01T20:00:10Z,down,ndt7,4\n")
    assert [o.tool for o in load_observations(p)] == ["adaptive", "single"]


def test_missing_column_named(tmp_path):
    p = tmp_path / "o.csv"
    p.write_text("household_id,server_id,direction,tool,speed_bps\n")
    with pytest.raises(StatsError, match="timestamp_iso8601"):
        load_observations(p)


def test_tier_splits_household(tmp_path):
    p = tmp_path / "o.csv"
    obs = [_obs("h", "s", 100.0, 0), _obs("h", "s", 900.0, 1)]
    write_observations(p, obs, tiers=["basic", "gig"])
    assert sorted({o.household_id for o in load_observations(p)}) == ["h#basic", "h#gig"]
