"""Experiment orchestration: condition sweeps, paired tests, synthetic households.

An experiment config is a JSON document::

    {
      "name": "latency-download",
      "repetitions": 10,            # runs per cell, seeds base_seed + i
      "base_seed": 1,
      "mode": "axis",               # "axis": one swept parameter at a time
                                    # "product": full cartesian grid
      "base":   {"capacity_bps": 1e8, "rtt_ms": 10, "loss": 0, "cca": "bbr",
                 "cross": 0, "direction": "down", "accounting": "acked"},
      "series": {"engine": ["single", "adaptive"]},   # crossed with every point
      "sweep":  {"rtt_ms": [0, 50, 100]},
      "policy": {"max_conns": 8}    # optional adaptive-engine overrides
    }

Every parameter missing from ``base`` takes the default in ``DEFAULTS``.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import re
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from statistics import median
from zoneinfo import ZoneInfo

import jsonschema
import numpy as np
from scipy import stats as sps

from .emulink import LinkSpec
from .engines import AccountingMode, AdaptivePolicy, EngineError, EngineKind, run_engine
from .stats import Observation
from .transport import CongestionAlgo, Direction, SimNetwork, SimProvider

BACKGROUND_LEAD_S = 3.0
DEFAULT_IDLE_GAP_S = 5.0
DOWN_SEND_BUFFER = 4 << 20
UP_SEND_BUFFER = 1 << 20

AXES = ("engine", "direction", "capacity_bps", "rtt_ms", "loss", "cca", "cross", "accounting")
DEFAULTS = {"engine": "single", "direction": "down", "capacity_bps": 100e6, "rtt_ms": 10.0,
            "loss": 0.0, "cca": "bbr", "cross": 0, "accounting": "acked"}
RUN_COLUMNS = ("cell_id", "engine", "direction", "capacity_bps", "rtt_ms", "loss", "cca", "cross",
               "accounting", "rep", "seed", "reported_bps", "average_bps", "duration_s",
               "conn_max", "error")
SUMMARY_COLUMNS = ("cell_id", "engine", "direction", "capacity_bps", "rtt_ms", "loss", "cca",
                   "cross", "accounting", "n", "n_error", "median_reported_bps",
                   "median_accuracy", "mean_accuracy", "ci95_low", "ci95_high",
                   "median_duration_s", "max_conn")


class ConfigError(ValueError):
    pass


def accuracy(reported_bits_per_s, capacity_bits_per_s):
    if not capacity_bits_per_s > 0:
        raise ValueError(f"capacity must be positive, got {capacity_bits_per_s!r}")
    return reported_bits_per_s / capacity_bits_per_s


# --- config ----------------------------------------------------------------------------

_value = {
    "engine": {"type": "string", "enum": ["single", "adaptive", "SingleStream", "AdaptiveMulti"]},
    "direction": {"type": "string", "enum": ["down", "up"]},
    "capacity_bps": {"type": "number", "exclusiveMinimum": 0},
    "rtt_ms": {"type": "number", "minimum": 0},
    "loss": {"type": "number", "minimum": 0, "maximum": 1},
    "cca": {"type": "string", "enum": ["bbr", "cubic"]},
    "cross": {"type": "integer", "minimum": 0, "maximum": 16},
    "accounting": {"type": "string", "enum": ["app", "acked", "SenderApp", "ReceiverAcked"]},
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "repetitions": {"type": "integer", "minimum": 1},
        "base_seed": {"type": "integer", "minimum": 0},
        "mode": {"enum": ["axis", "product"]},
        "workers": {"type": "integer", "minimum": 1},
        "base": {"type": "object", "additionalProperties": False, "properties": _value},
        "series": {"type": "object", "additionalProperties": False,
                   "properties": {k: {"type": "array", "minItems": 1, "items": v}
                                  for k, v in _value.items()}},
        "sweep": {"type": "object", "additionalProperties": False,
                  "properties": {k: {"type": "array", "minItems": 1, "items": v}
                                 for k, v in _value.items()}},
        "policy": {"type": "object", "additionalProperties": False, "properties": {
            "max_conns": {"type": "integer", "minimum": 1},
            "ramp_interval_s": {"type": "number", "exclusiveMinimum": 0},
            "growth_threshold": {"type": "number", "minimum": 0},
            "rtt_trigger_s": {"type": "number", "minimum": 0},
            "min_s": {"type": "number", "exclusiveMinimum": 0},
            "max_s": {"type": "number", "exclusiveMinimum": 0},
            "cv_threshold": {"type": "number", "exclusiveMinimum": 0},
            "cv_window": {"type": "integer", "minimum": 2},
            "cv_window_rtts": {"type": "number", "minimum": 0},
            "ramp_enabled": {"type": "boolean"},
        }},
    },
}


@dataclass(frozen=True)
class Cell:
    engine: str
    direction: str
    capacity_bps: float
    rtt_ms: float
    loss: float
    cca: str
    cross: int
    accounting: str

    @property
    def key(self):
        return (self.engine, self.direction, self.capacity_bps, self.rtt_ms, self.loss, self.cca,
                self.cross, self.accounting)

    @property
    def cell_id(self):
        return (f"{self.engine}-{self.direction}-{_num(self.capacity_bps)}bps-{_num(self.rtt_ms)}ms"
                f"-loss{_num(self.loss)}-{self.cca}-x{self.cross}-{self.accounting}")


def _num(x):
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def _canon(axis, v):
    if axis == "engine":
        return "single" if EngineKind.parse(v) is EngineKind.SINGLE_STREAM else "adaptive"
    if axis == "accounting":
        return "app" if AccountingMode.parse(
            {"app": "SenderApp", "acked": "ReceiverAcked"}.get(v, v)) is AccountingMode.SENDER_APP \
            else "acked"
    if axis in ("capacity_bps", "rtt_ms", "loss"):
        return float(v)
    if axis == "cross":
        return int(v)
    return str(v)


@dataclass
class ExperimentSpec:
    cells: list
    repetitions: int = 10
    base_seed: int = 1
    name: str = "experiment"
    policy: AdaptivePolicy = field(default_factory=AdaptivePolicy)
    workers: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not self.cells:
            raise ConfigError("experiment grid is empty")

    @classmethod
    def from_dict(cls, doc):
        try:
            jsonschema.validate(doc, CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            raise _schema_message(e) from None
        base = dict(DEFAULTS)
        base.update(doc.get("base", {}))
        series = doc.get("series", {})
        sweep = doc.get("sweep", {})
        if "sweep" in doc and not sweep:
            raise ConfigError("field 'sweep': grid is empty (no swept parameter)")
        ser_axes = list(series)
        ser_points = [dict(zip(ser_axes, vals))
                      for vals in itertools.product(*(series[a] for a in ser_axes))] or [{}]
        if doc.get("mode", "axis") == "product":
            sw_axes = list(sweep)
            sw_points = [dict(zip(sw_axes, vals))
                         for vals in itertools.product(*(sweep[a] for a in sw_axes))] or [{}]
        else:
            sw_points = [{a: v} for a, vals in sweep.items() for v in vals] or [{}]
        cells = set()
        for s in ser_points:
            for w in sw_points:
                p = dict(base)
                p.update(s)
                p.update(w)
                cells.add(Cell(**{a: _canon(a, p[a]) for a in AXES}))
        try:
            policy = AdaptivePolicy(**doc.get("policy", {}))
        except ValueError as e:
            raise ConfigError(f"field 'policy': {e}") from None
        return cls(sorted(cells, key=lambda c: c.key), doc.get("repetitions", 10), doc.get("base_seed", 1),
                   doc.get("name", "experiment"), policy, doc.get("workers", 1))

    @classmethod
    def from_json(cls, text, source="<config>"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
        try:
            return cls.from_dict(doc)
        except ConfigError as e:
            path = getattr(e, "path", None)
            line = _line_of(text, path) if path else None
            where = f"{source}:{line}" if line else source
            raise ConfigError(f"{where}: {e}") from None

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read(), str(path))


def _schema_message(e):
    path = [str(p) for p in e.absolute_path]
    field_name = ".".join(path) if path else "<root>"
    err = ConfigError(f"field '{field_name}': {e.message}")
    err.path = [p for p in e.absolute_path if isinstance(p, str)]
    return err


def _line_of(text, path):
    """Line of the last key of ``path`` found in order in the JSON text."""
    pos, line = 0, None
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if not m:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


# --- running ---------------------------------------------------------------------------

def build_network(capacity_bps, rtt_ms, loss, seed, queue_bytes=None):
    """Symmetric access link; both directions get the same shaping."""
    down = LinkSpec.from_rtt(capacity_bps, rtt_ms / 1000.0, loss_prob=loss, seed=seed * 2,
                             queue_bytes=queue_bytes)
    up = replace(down, seed=seed * 2 + 1)
    return SimNetwork(down, up)


def _send_buffer(direction):
    return DOWN_SEND_BUFFER if direction is Direction.DOWN else UP_SEND_BUFFER


def start_background(net, n, cca, direction, seed, lead_s=BACKGROUND_LEAD_S):
    """Open ``n`` long-lived flows and let them settle for ``lead_s``."""
    flows = [net.open(cca, direction, seed=seed * 1000 + 900 + j,
                      send_buffer_bytes=_send_buffer(direction)) for j in range(n)]
    if n:
        net.run_until(net.now + lead_s)
    return flows


def run_once(cell: Cell, seed, policy=None):
    """One engine run on a fresh simulated link; returns the SpeedReport."""
    direction = Direction.parse(cell.direction)
    cca = CongestionAlgo.parse(cell.cca)
    net = build_network(cell.capacity_bps, cell.rtt_ms, cell.loss, seed)
    start_background(net, cell.cross, cca, direction, seed)
    prov = SimProvider(net, cca, seed, DOWN_SEND_BUFFER, UP_SEND_BUFFER)
    acct = AccountingMode.SENDER_APP if cell.accounting == "app" else AccountingMode.RECEIVER_ACKED
    return run_engine(cell.engine, prov, direction, acct, policy)


def _run_row(args):
    cell, rep, seed, policy = args
    row = {"cell_id": cell.cell_id, "engine": cell.engine, "direction": cell.direction,
           "capacity_bps": _num(cell.capacity_bps), "rtt_ms": _num(cell.rtt_ms),
           "loss": _num(cell.loss), "cca": cell.cca, "cross": str(cell.cross),
           "accounting": cell.accounting, "rep": str(rep), "seed": str(seed),
           "reported_bps": "", "average_bps": "", "duration_s": "", "conn_max": "", "error": ""}
    try:
        r = run_once(cell, seed, policy)
    except (EngineError, ValueError, RuntimeError) as e:
        row["error"] = f"{type(e).__name__}: {e}".replace("\n", " ")
        return row
    row.update(reported_bps=repr(float(r.reported_bits_per_s)),
               average_bps=repr(float(r.average_bits_per_s)),
               duration_s=repr(float(r.duration_s)),
               conn_max=str(max(n for _, n in r.conn_count_trace)))
    return row


def run_matrix(spec: ExperimentSpec, workers=None, progress=None):
    """Run every cell ``repetitions`` times; rows sorted by cell then rep."""
    jobs = [(cell, i, spec.base_seed + i, spec.policy)
            for cell in spec.cells for i in range(spec.repetitions)]
    workers = workers or spec.workers
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_run_row, jobs, chunksize=1))
    else:
        rows = []
        for j in jobs:
            rows.append(_run_row(j))
            if progress:
                progress(len(rows), len(jobs))
    return rows


def t_interval(values, level=0.95):
    """Student-t confidence interval on the mean (df = n - 1)."""
    n = len(values)
    m = float(np.mean(values))
    if n < 2:
        return m, float("nan"), float("nan")
    half = float(sps.t.ppf(0.5 + level / 2, n - 1)) * float(np.std(values, ddof=1)) / math.sqrt(n)
    return m, m - half, m + half


def summarize_rows(rows):
    out = []
    for cid, grp in itertools.groupby(rows, key=lambda r: r["cell_id"]):
        grp = list(grp)
        ok = [r for r in grp if not r["error"]]
        first = grp[0]
        s = {k: first[k] for k in RUN_COLUMNS[:9]}
        s.update(n=str(len(ok)), n_error=str(len(grp) - len(ok)))
        if ok:
            cap = float(first["capacity_bps"])
            rep = [float(r["reported_bps"]) for r in ok]
            acc = [accuracy(x, cap) for x in rep]
            m, lo, hi = t_interval(acc)
            s.update(median_reported_bps=repr(median(rep)), median_accuracy=repr(median(acc)),
                     mean_accuracy=repr(m), ci95_low=repr(lo), ci95_high=repr(hi),
                     median_duration_s=repr(median(float(r["duration_s"]) for r in ok)),
                     max_conn=str(max(int(r["conn_max"]) for r in ok)))
        else:
            s.update({k: "" for k in SUMMARY_COLUMNS[11:]})
        out.append(s)
    return out


def rows_to_csv(rows, columns=RUN_COLUMNS):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- paired tests ------------------------------------------------------------------------

@dataclass
class PairedRecord:
    household_id: str
    server_id: str
    timestamp: datetime
    direction: Direction
    report_a: object  # adaptive engine
    report_b: object  # single-stream engine
    gap_s: float
    order: str = "adaptive-first"
    error: str = ""
    warnings: list = field(default_factory=list)
    background_pre_a_bps: float = float("nan")
    background_pre_b_bps: float = float("nan")

    @property
    def ok(self):
        return not self.error


def _bg_goodput(net, flows, direction, window_s=1.0):
    if not flows:
        return float("nan")
    b0 = sum(f.bytes_received for f in flows)
    net.run_until(net.now + window_s)
    return (sum(f.bytes_received for f in flows) - b0) * 8.0 / window_s


def run_paired(net: SimNetwork, direction="down", cca="bbr", idle_gap_s=DEFAULT_IDLE_GAP_S,
               order="adaptive-first", background=(), seed=0, household_id="h0",
               server_id="s0", timestamp=None, policy=None):
    """Adaptive and single-stream tests back to back on one network.

    ``background`` are already running flows; their goodput is sampled for
    one second before each test.
    """
    direction = Direction.parse(direction)
    cca = CongestionAlgo.parse(cca)
    if order not in ("adaptive-first", "single-first"):
        raise ValueError(f"order must be adaptive-first or single-first, got {order!r}")
    rec = PairedRecord(household_id, server_id, timestamp or datetime.fromtimestamp(
        net.now, timezone.utc), direction, None, None, idle_gap_s, order)
    if idle_gap_s <= 0:
        msg = "idle gap is 0: the second test may see the first one's queue"
        rec.warnings.append(msg)
        warnings.warn(msg, stacklevel=2)
    engines = [EngineKind.ADAPTIVE_MULTI, EngineKind.SINGLE_STREAM]
    if order == "single-first":
        engines.reverse()
    results = {}
    for i, eng in enumerate(engines):
        if i == 1 and idle_gap_s > 0:
            net.run_until(net.now + max(0.0, idle_gap_s - (1.0 if background else 0.0)))
        pre = _bg_goodput(net, list(background), direction)
        if eng is EngineKind.ADAPTIVE_MULTI:
            rec.background_pre_a_bps = pre
        else:
            rec.background_pre_b_bps = pre
        prov = SimProvider(net, cca, seed * 10 + i, DOWN_SEND_BUFFER, UP_SEND_BUFFER)
        try:
            results[eng] = run_engine(eng, prov, direction, AccountingMode.RECEIVER_ACKED, policy)
        except EngineError as e:
            rec.error = f"{eng.value}: {e}"
            return rec
    rec.report_a = results[EngineKind.ADAPTIVE_MULTI]
    rec.report_b = results[EngineKind.SINGLE_STREAM]
    return rec


def paired_observations(records):
    """Flatten successful PairedRecords to Observations (failed pairs are dropped)."""
    out = []
    for r in records:
        if not r.ok:
            continue
        d = r.direction.value
        out.append(Observation(r.household_id, r.server_id, r.timestamp, d, "adaptive",
                               r.report_a.reported_bits_per_s))
        out.append(Observation(r.household_id, r.server_id, r.timestamp, d, "single",
                               r.report_b.reported_bits_per_s))
    return out


# --- synthetic households --------------------------------------------------------------

@dataclass(frozen=True)
class Household:
    """A simulated household: access link, server latency map and busy hours.

    ``peak_cross`` background flows run during peak hours (19:00-23:00 local),
    ``offpeak_cross`` otherwise.
    """
    household_id: str
    down_bps: float
    up_bps: float
    rtt_ms: float
    servers: dict  # server_id -> extra RTT in ms
    peak_cross: int = 0
    offpeak_cross: int = 0
    tz: str = "UTC"
    cca: str = "bbr"

    def network(self, server_id, seed, loss=0.0):
        rtt = self.rtt_ms + self.servers[server_id]
        down = LinkSpec.from_rtt(self.down_bps, rtt / 1000.0, loss_prob=loss, seed=seed * 2)
        up = LinkSpec.from_rtt(self.up_bps, rtt / 1000.0, loss_prob=loss, seed=seed * 2 + 1)
        return SimNetwork(down, up)


def simulate_household(h: Household, tests, direction="down", seed=0, idle_gap_s=DEFAULT_IDLE_GAP_S,
                       start=None, policy=None):
    """``tests`` paired tests on the emulated link, spread over the day.

    Returns PairedRecords with local timezone-aware timestamps.
    """
    rng = np.random.default_rng([seed, 7])
    tz = ZoneInfo(h.tz)
    start = start or datetime(2024, 3, 1, tzinfo=tz)
    dirn = Direction.parse(direction)
    out = []
    sids = sorted(h.servers)
    for i in range(tests):
        day = i // 24
        hour = int(rng.integers(0, 24))
        ts = (start + timedelta(days=day, hours=hour, minutes=int(rng.integers(0, 60))))
        sid = sids[int(rng.integers(0, len(sids)))]
        s = seed * 100_000 + i
        net = h.network(sid, s)
        n_bg = h.peak_cross if 19 <= ts.hour < 23 else h.offpeak_cross
        bg = start_background(net, n_bg, CongestionAlgo.parse(h.cca), dirn, s)
        order = "adaptive-first" if rng.random() < 0.5 else "single-first"
        out.append(run_paired(net, dirn, h.cca, idle_gap_s, order, bg, s, h.household_id, sid,
                              ts, policy))
    return out


@dataclass(frozen=True)
class SyntheticTruth:
    degraded: frozenset      # households with a single-stream-only peak-hour drop
    weak_server: str | None  # server that under-performs everywhere


def generate_observations(n_households=30, n_degraded=10, tests_peak=40, tests_offpeak=40,
                          servers=6, weak_server_factor=1.0, peak_drop=0.15, noise_cv=0.05,
                          seed=0, direction="down", tz="America/Chicago", single_servers=2,
                          tests_per_server_min=10):
    """Statistical household model with known ground truth.

    Each household has a nominal speed; every test draws the tool's speed as
    nominal * server factor * peak factor * lognormal noise. Degraded
    households lose ``peak_drop`` of their single-stream speed in peak hours.
    With ``weak_server_factor`` < 1, server ``srv0`` scales adaptive speeds by
    that factor in every household.

    Returns (observations, truth).
    """
    rng = np.random.default_rng(seed)
    zone = ZoneInfo(tz)
    start = datetime(2024, 3, 1, tzinfo=zone)
    sigma = math.sqrt(math.log1p(noise_cv ** 2))
    degraded = frozenset(f"hh{i:03d}" for i in rng.choice(n_households, n_degraded, replace=False))
    obs = []
    for i in range(n_households):
        hh = f"hh{i:03d}"
        nominal = float(rng.choice([100e6, 200e6, 300e6, 500e6, 940e6]))
        srv = [f"srv{j}" for j in range(servers)]
        # each server gets at least tests_per_server_min adaptive tests
        n_tests = tests_peak + tests_offpeak
        plan = list(np.repeat(np.arange(servers), tests_per_server_min))
        plan += list(rng.integers(0, servers, max(0, n_tests - len(plan))))
        rng.shuffle(plan)
        for k in range(n_tests):
            peak = k < tests_peak
            day = int(rng.integers(0, 60))
            hour = int(rng.integers(19, 23)) if peak else int(rng.choice(
                [h for h in range(24) if not 19 <= h < 23]))
            ts = start + timedelta(days=day, hours=hour, minutes=int(rng.integers(0, 60)),
                                   seconds=int(rng.integers(0, 60)))
            s_idx = int(plan[k]) if k < len(plan) else int(rng.integers(0, servers))
            f_srv = weak_server_factor if s_idx == 0 else 1.0
            a = nominal * f_srv * float(rng.lognormal(0.0, sigma))
            f_peak = (1.0 - peak_drop) if (peak and hh in degraded) else 1.0
            b = nominal * f_peak * float(rng.lognormal(0.0, sigma))
            obs.append(Observation(hh, srv[s_idx], ts, direction, "adaptive", a))
            obs.append(Observation(hh, f"ref{k % single_servers}", ts + timedelta(seconds=40),
                                   direction, "single", b))
    obs.sort(key=lambda o: (o.household_id, o.timestamp, o.tool))
    return obs, SyntheticTruth(degraded, "srv0" if weak_server_factor < 1 else None)
