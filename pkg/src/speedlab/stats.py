"""Statistics over paired speed-test observations.

Conventions: the *adaptive* tool plays the first role and the *single*-stream
tool the second, so ``rel_diff > 0`` means the adaptive tool reported more.
"""
from __future__ import annotations

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from statistics import median
from zoneinfo import ZoneInfo

from scipy import special

ALPHA = 0.01
MIN_PAIRED = 30
MIN_TOD_TESTS = 30
MIN_SERVER_TESTS = 10
PEAK_START_H = 19
PEAK_END_H = 23
TIER_THRESHOLDS = {"down": 500e6, "up": 50e6}

TOOL_ALIASES = {
    "adaptive": "adaptive", "adaptivemulti": "adaptive", "ookla": "adaptive", "multi": "adaptive",
    "single": "single", "singlestream": "single", "ndt7": "single", "ndt": "single",
}
EXTERNAL_COLUMNS = ("household_id", "server_id", "timestamp_iso8601", "direction", "tool",
                    "speed_bps")


class StatsError(ValueError):
    pass


# --- percentiles and normalization --------------------------------------------------

def percentile_nearest_rank(series, q):
    """Sorted element at 1-based rank ceil(q*n)."""
    vals = sorted(float(x) for x in series)
    if not vals:
        raise StatsError("percentile of an empty series")
    if not 0 < q <= 1:
        raise StatsError(f"quantile must be in (0, 1], got {q}")
    rank = max(1, math.ceil(Fraction(str(q)) * len(vals)))
    return vals[rank - 1]


def nominal_speed(series):
    return percentile_nearest_rank(series, 0.95)


def normalize(s_i, s95):
    if not s95 > 0:
        raise StatsError(f"nominal speed must be positive, got {s95}")
    return s_i / s95


@dataclass(frozen=True)
class NominalSpeed:
    household_id: str
    direction: str
    tool: str
    s95: float


# --- relative difference --------------------------------------------------------------

def rel_diff(s_adaptive, s_single):
    """(a - s) / max(a, s), in [-1, 1]."""
    if not (s_adaptive > 0 and s_single > 0):
        raise StatsError(f"speeds must be positive, got {s_adaptive}, {s_single}")
    return (s_adaptive - s_single) / max(s_adaptive, s_single)


class RelDiffClass(enum.Enum):
    ADAPTIVE_HIGHER_LOW = "AdaptiveHigher-Low"
    ADAPTIVE_HIGHER_MEDIUM = "AdaptiveHigher-Medium"
    ADAPTIVE_HIGHER_HIGH = "AdaptiveHigher-High"
    SINGLE_HIGHER_LOW = "SingleHigher-Low"
    SINGLE_HIGHER_MEDIUM = "SingleHigher-Medium"
    SINGLE_HIGHER_HIGH = "SingleHigher-High"
    EQUAL = "Equal"


def classify(delta):
    if not -1.0 <= delta <= 1.0 or delta != delta:
        raise StatsError(f"relative difference must lie in [-1, 1], got {delta}")
    if delta == 0:
        return RelDiffClass.EQUAL
    if delta > 0:
        if delta <= 0.05:
            return RelDiffClass.ADAPTIVE_HIGHER_LOW
        if delta <= 0.25:
            return RelDiffClass.ADAPTIVE_HIGHER_MEDIUM
        return RelDiffClass.ADAPTIVE_HIGHER_HIGH
    if delta >= -0.05:
        return RelDiffClass.SINGLE_HIGHER_LOW
    if delta >= -0.25:
        return RelDiffClass.SINGLE_HIGHER_MEDIUM
    return RelDiffClass.SINGLE_HIGHER_HIGH


# --- t tests ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StatResult:
    t_stat: float
    df: float
    p_two_sided: float
    reject_at_alpha: bool
    alpha: float
    n: int = 0
    degenerate_variance: bool = False
    small_sample: bool = False


def student_t_cdf(t, df):
    """Student-t CDF through the regularized incomplete beta function."""
    if not df > 0:
        raise StatsError(f"degrees of freedom must be positive, got {df}")
    if t == 0:
        return 0.5
    tail = 0.5 * special.betainc(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


def _two_sided_p(t, df):
    if math.isinf(t):
        return 0.0
    return float(min(1.0, special.betainc(df / 2.0, 0.5, df / (df + t * t))))


def _result(mean, se, df, n, alpha, small):
    if se == 0:
        p = 1.0 if mean == 0 else 0.0
        t = 0.0 if mean == 0 else math.copysign(math.inf, mean)
        return StatResult(t, df, p, p < alpha, alpha, n, True, small)
    t = mean / se
    p = _two_sided_p(t, df)
    return StatResult(t, df, p, p < alpha, alpha, n, False, small)


def _mean_var(xs):
    n = len(xs)
    m = math.fsum(xs) / n
    return m, math.fsum((x - m) ** 2 for x in xs) / (n - 1)


def paired_t_test(diffs, alpha=ALPHA):
    d = [float(x) for x in diffs]
    n = len(d)
    if n < 2:
        raise StatsError(f"paired t-test needs at least 2 differences, got {n}")
    m, v = _mean_var(d)
    return _result(m, math.sqrt(v / n), n - 1, n, alpha, n < MIN_PAIRED)


def welch_t_test(sample_a, sample_b, alpha=ALPHA):
    a = [float(x) for x in sample_a]
    b = [float(x) for x in sample_b]
    if len(a) < 2 or len(b) < 2:
        raise StatsError("Welch test needs at least 2 values per sample")
    ma, va = _mean_var(a)
    mb, vb = _mean_var(b)
    qa, qb = va / len(a), vb / len(b)
    se = math.sqrt(qa + qb)
    if se == 0:
        df = float(len(a) + len(b) - 2)
    else:
        df = (qa + qb) ** 2 / (qa ** 2 / (len(a) - 1) + qb ** 2 / (len(b) - 1))
    small = min(len(a), len(b)) < MIN_TOD_TESTS
    return _result(ma - mb, se, df, len(a) + len(b), alpha, small)


def consistency_ratio(series_test, series_ref):
    if not series_test or not series_ref:
        raise StatsError("consistency ratio needs two non-empty series")
    ref = percentile_nearest_rank(series_ref, 0.90)
    if ref == 0:
        raise StatsError("reference series has a zero 90th percentile")
    return percentile_nearest_rank(series_test, 0.90) / ref


# --- observations ----------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    household_id: str
    server_id: str
    timestamp: datetime
    direction: str
    tool: str
    speed_bps: float


@dataclass(frozen=True)
class Pair:
    household_id: str
    direction: str
    timestamp: datetime
    adaptive: Observation
    single: Observation

    @property
    def delta(self):
        return rel_diff(self.adaptive.speed_bps, self.single.speed_bps)


def parse_timestamp(text):
    try:
        return datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError:
        raise StatsError(f"bad ISO-8601 timestamp {text!r}") from None


def load_observations(path):
    """Read the external observation CSV.

    An optional ``tier`` column splits a household into distinct households,
    one per tier value.
    """
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        cols = rd.fieldnames or []
        for c in EXTERNAL_COLUMNS:
            if c not in cols:
                raise StatsError(f"{path}: missing column '{c}'")
        out = []
        for i, row in enumerate(rd, start=2):
            try:
                tool = TOOL_ALIASES[row["tool"].strip().lower().replace("-", "").replace("_", "")]
            except KeyError:
                raise StatsError(f"{path}:{i}: unknown tool {row['tool']!r}") from None
            direction = row["direction"].strip().lower()
            if direction not in ("down", "up"):
                raise StatsError(f"{path}:{i}: direction must be down or up, got {direction!r}")
            try:
                speed = float(row["speed_bps"])
            except ValueError:
                raise StatsError(f"{path}:{i}: speed_bps is not a number") from None
            hh = row["household_id"]
            if row.get("tier"):
                hh = f"{hh}#{row['tier']}"
            out.append(Observation(hh, row["server_id"], parse_timestamp(row["timestamp_iso8601"]),
                                   direction, tool, speed))
    return out


def write_observations(path, observations, tiers=None):
    cols = list(EXTERNAL_COLUMNS) + (["tier"] if tiers is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i, o in enumerate(observations):
            row = [o.household_id, o.server_id, o.timestamp.isoformat(), o.direction, o.tool,
                   repr(float(o.speed_bps))]
            if tiers is not None:
                row.append(tiers[i])
            w.writerow(row)


def _cmp_time(ts):
    # naive timestamps only pair with naive ones; compare on a common footing
    return ts.timestamp() if ts.tzinfo else ts.replace(tzinfo=timezone.utc).timestamp()


def pair_observations(observations, window_s=900.0):
    """Greedy nearest-in-time pairing of adaptive and single tests."""
    groups = defaultdict(lambda: {"adaptive": [], "single": []})
    for o in observations:
        groups[(o.household_id, o.direction)][o.tool].append(o)
    pairs = []
    for (hh, direction), g in sorted(groups.items()):
        singles = sorted(g["single"], key=lambda o: _cmp_time(o.timestamp))
        used = [False] * len(singles)
        st = [_cmp_time(o.timestamp) for o in singles]
        for a in sorted(g["adaptive"], key=lambda o: _cmp_time(o.timestamp)):
            ta = _cmp_time(a.timestamp)
            best, best_d = -1, window_s
            for j, t in enumerate(st):
                if not used[j] and abs(t - ta) <= best_d:
                    best, best_d = j, abs(t - ta)
            if best >= 0:
                used[best] = True
                pairs.append(Pair(hh, direction, min(a.timestamp, singles[best].timestamp,
                                                     key=_cmp_time), a, singles[best]))
    return pairs


def nominal_speeds(observations):
    by = defaultdict(list)
    for o in observations:
        by[(o.household_id, o.direction, o.tool)].append(o.speed_bps)
    return {k: nominal_speed(v) for k, v in by.items()}


def speed_tier(nominals, household_id, direction):
    """'high' or 'low' from the larger of the two tools' nominal speeds."""
    s = max(nominals.get((household_id, direction, t), 0.0) for t in ("adaptive", "single"))
    return "high" if s > TIER_THRESHOLDS[direction] else "low"


# --- server ranking ----------------------------------------------------------------

@dataclass
class ServerRanking:
    # household -> [(server_id, median normalized speed, n tests)] best first
    per_household: dict = field(default_factory=dict)
    # server -> (bottom-3 count, households considered)
    bottom3: dict = field(default_factory=dict)
    # household -> best median minus worst median
    delta: dict = field(default_factory=dict)

    def bottom3_fraction(self, server_id):
        hit, total = self.bottom3.get(server_id, (0, 0))
        return hit / total if total else float("nan")


def rank_servers(observations, tool="adaptive", min_tests=MIN_SERVER_TESTS, direction=None):
    """Rank each household's servers by median normalized speed.

    Bottom-3 fractions count only households with at least 3 qualifying
    servers, over the households where that server qualifies.
    """
    obs = [o for o in observations if o.tool == tool
           and (direction is None or o.direction == direction)]
    noms = nominal_speeds(obs)
    by = defaultdict(lambda: defaultdict(list))
    for o in obs:
        key = (o.household_id, o.direction)
        by[key][o.server_id].append(normalize(o.speed_bps, noms[(o.household_id, o.direction, tool)]))
    res = ServerRanking()
    counts = defaultdict(lambda: [0, 0])
    for key in sorted(by):
        ranked = [(sid, median(v), len(v)) for sid, v in by[key].items() if len(v) >= min_tests]
        ranked.sort(key=lambda r: (-r[1], r[0]))
        name = key[0] if direction is not None else f"{key[0]}/{key[1]}"
        res.per_household[name] = ranked
        if len(ranked) >= 2:
            res.delta[name] = ranked[0][1] - ranked[-1][1]
        if len(ranked) >= 3:
            bottom = {r[0] for r in ranked[-3:]}
            for sid, _, _ in ranked:
                counts[sid][1] += 1
                if sid in bottom:
                    counts[sid][0] += 1
    res.bottom3 = {k: tuple(v) for k, v in sorted(counts.items())}
    return res


# --- time of day -------------------------------------------------------------------

def is_peak(ts, local_tz=None):
    if ts.tzinfo is None:
        raise StatsError(f"timestamp {ts.isoformat()} has no timezone; time-of-day analysis "
                         "needs timezone-aware timestamps")
    if local_tz is not None:
        ts = ts.astimezone(ZoneInfo(local_tz) if isinstance(local_tz, str) else local_tz)
    return PEAK_START_H <= ts.hour < PEAK_END_H


def peak_offpeak_split(observations, local_tz=None):
    peak, off = [], []
    for o in observations:
        (peak if is_peak(o.timestamp, local_tz) else off).append(o)
    return peak, off


# --- analyses: each returns a list of row dicts -------------------------------------

def analysis_paired_ttest(observations, alpha=ALPHA, min_pairs=MIN_PAIRED, window_s=900.0):
    rows = []
    groups = defaultdict(list)
    for p in pair_observations(observations, window_s):
        groups[(p.household_id, p.direction)].append(p)
    for (hh, d), ps in sorted(groups.items()):
        if len(ps) < 2:
            continue
        a = [p.adaptive.speed_bps for p in ps]
        s = [p.single.speed_bps for p in ps]
        r = paired_t_test([x - y for x, y in zip(a, s)], alpha)
        ma, ms = math.fsum(a) / len(a), math.fsum(s) / len(s)
        rel = (ma - ms) / max(ma, ms)
        rows.append({
            "household_id": hh, "direction": d, "n_pairs": len(ps),
            "mean_adaptive_bps": ma, "mean_single_bps": ms, "mean_diff_bps": ma - ms,
            "diff_rel_max_mean": rel, "t_stat": r.t_stat, "df": r.df, "p_value": r.p_two_sided,
            "reject": int(r.reject_at_alpha), "degenerate": int(r.degenerate_variance),
            "enough_pairs": int(len(ps) >= min_pairs),
        })
    return rows


def analysis_reldiff_classes(observations, window_s=900.0):
    noms = nominal_speeds(observations)
    groups = defaultdict(list)
    for p in pair_observations(observations, window_s):
        groups[(p.household_id, p.direction)].append(p)
    rows = []
    for (hh, d), ps in sorted(groups.items()):
        counts = {c: 0 for c in RelDiffClass}
        for p in ps:
            counts[classify(p.delta)] += 1
        row = {"household_id": hh, "direction": d, "tier": speed_tier(noms, hh, d),
               "n_pairs": len(ps)}
        for c in RelDiffClass:
            row[c.value] = counts[c] / len(ps)
        rows.append(row)
    return rows


def analysis_server_rank(observations, tool="adaptive", min_tests=MIN_SERVER_TESTS):
    rows = []
    for d in ("down", "up"):
        res = rank_servers(observations, tool, min_tests, direction=d)
        for hh, ranked in res.per_household.items():
            for i, (sid, med, n) in enumerate(ranked, start=1):
                rows.append({"kind": "rank", "direction": d, "household_id": hh,
                             "server_id": sid, "rank": i, "n_tests": n,
                             "median_normalized": med, "value": ""})
            if hh in res.delta:
                rows.append({"kind": "delta", "direction": d, "household_id": hh,
                             "server_id": "", "rank": "", "n_tests": "",
                             "median_normalized": "", "value": res.delta[hh]})
        for sid, (hit, total) in res.bottom3.items():
            rows.append({"kind": "bottom3", "direction": d, "household_id": "",
                         "server_id": sid, "rank": "", "n_tests": total,
                         "median_normalized": "", "value": hit / total})
    return rows


def analysis_time_of_day(observations, alpha=ALPHA, min_tests=MIN_TOD_TESTS, local_tz=None):
    groups = defaultdict(list)
    for o in observations:
        groups[(o.household_id, o.direction, o.tool)].append(o)
    rows = []
    for (hh, d, tool), obs in sorted(groups.items()):
        peak, off = peak_offpeak_split(obs, local_tz)
        row = {"household_id": hh, "direction": d, "tool": tool, "n_peak": len(peak),
               "n_offpeak": len(off), "mean_peak_bps": "", "mean_offpeak_bps": "",
               "t_stat": "", "df": "", "p_value": "", "reject": "", "tested": 0}
        if len(peak) >= min_tests and len(off) >= min_tests:
            r = welch_t_test([o.speed_bps for o in peak], [o.speed_bps for o in off], alpha)
            row.update(mean_peak_bps=math.fsum(o.speed_bps for o in peak) / len(peak),
                       mean_offpeak_bps=math.fsum(o.speed_bps for o in off) / len(off),
                       t_stat=r.t_stat, df=r.df, p_value=r.p_two_sided,
                       reject=int(r.reject_at_alpha), tested=1)
        rows.append(row)
    return rows


def analysis_consistency(observations):
    groups = defaultdict(lambda: {"adaptive": [], "single": []})
    for o in observations:
        groups[(o.household_id, o.direction)][o.tool].append(o.speed_bps)
    noms = nominal_speeds(observations)
    rows = []
    for (hh, d), g in sorted(groups.items()):
        if not g["adaptive"] or not g["single"]:
            continue
        rows.append({"household_id": hh, "direction": d, "tier": speed_tier(noms, hh, d),
                     "ct_adaptive": consistency_ratio(g["adaptive"], g["single"]),
                     "ct_single": 1.0})
    return rows


ANALYSES = {
    "paired-ttest": analysis_paired_ttest,
    "reldiff-classes": analysis_reldiff_classes,
    "server-rank": analysis_server_rank,
    "time-of-day": analysis_time_of_day,
    "consistency": analysis_consistency,
}


def summarize(name, rows):
    """A few human-readable lines for an analysis table."""
    lines = [f"analysis: {name}", f"rows: {len(rows)}"]
    if name == "paired-ttest":
        for d in ("down", "up"):
            sub = [r for r in rows if r["direction"] == d and r["enough_pairs"]]
            rej = [r for r in sub if r["reject"]]
            if sub:
                lines.append(f"{d}: reject H0 for {len(rej)}/{len(sub)} households")
                w5 = sum(abs(r["diff_rel_max_mean"]) <= 0.05 for r in rej)
                w10 = sum(abs(r["diff_rel_max_mean"]) <= 0.10 for r in rej)
                lines.append(f"{d}: of those, mean difference within 5% for {w5}, within 10% for {w10}")
    elif name == "reldiff-classes":
        for d in ("down", "up"):
            sub = [r for r in rows if r["direction"] == d]
            if sub:
                parts = [f"{c.value}={median(r[c.value] for r in sub):.3f}" for c in RelDiffClass]
                lines.append(f"{d}: median fractions " + " ".join(parts))
    elif name == "server-rank":
        for r in rows:
            if r["kind"] == "bottom3":
                lines.append(f"{r['direction']}: server {r['server_id']} bottom-3 in "
                             f"{r['value']:.1%} of {r['n_tests']} households")
    elif name == "time-of-day":
        for d in ("down", "up"):
            for tool in ("single", "adaptive"):
                sub = [r for r in rows if r["direction"] == d and r["tool"] == tool and r["tested"]]
                if sub:
                    rej = sum(r["reject"] for r in sub)
                    lines.append(f"{d}/{tool}: reject H0 for {rej}/{len(sub)} households")
    elif name == "consistency":
        for d in ("down", "up"):
            sub = [r["ct_adaptive"] for r in rows if r["direction"] == d]
            if sub:
                lines.append(f"{d}: median adaptive/single 90th-percentile ratio {median(sub):.3f}")
    return lines
