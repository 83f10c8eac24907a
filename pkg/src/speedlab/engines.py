"""The two speed-test client designs.

Both engines talk to a *provider*, anything with::

    now() -> seconds
    open(direction) -> connection handle
    advance(until_s)            # let traffic flow until the given time
    snapshot(conns) -> [Counters]   # one consistent read of every connection
    close(conns)

:class:`speedlab.transport.SimProvider` runs on virtual time and
:class:`speedlab.wire.SocketProvider` on real sockets.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .transport import Direction

SAMPLE_INTERVAL_S = 0.25
SINGLE_STREAM_DURATION_S = 10.0
DISCARD_BUCKETS = 20
DISCARD_TOP = 2
DISCARD_BOTTOM = 5


class AccountingMode(enum.Enum):
    SENDER_APP = "SenderApp"
    RECEIVER_ACKED = "ReceiverAcked"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        v = str(value).replace("-", "_").lower()
        for m in cls:
            if v in (m.value.lower(), m.name.lower(), m.name.lower().replace("_", "")):
                return m
        raise ValueError(f"unknown accounting mode {value!r} (expected SenderApp or ReceiverAcked)")


class EngineKind(enum.Enum):
    SINGLE_STREAM = "SingleStream"
    ADAPTIVE_MULTI = "AdaptiveMulti"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        v = str(value).replace("-", "").replace("_", "").lower()
        aliases = {"singlestream": cls.SINGLE_STREAM, "single": cls.SINGLE_STREAM,
                   "adaptivemulti": cls.ADAPTIVE_MULTI, "adaptive": cls.ADAPTIVE_MULTI}
        if v not in aliases:
            raise ValueError(f"unknown engine {value!r} (expected single or adaptive)")
        return aliases[v]


class EngineError(RuntimeError):
    """A test failed part-way; ``samples`` holds what was collected."""

    def __init__(self, msg, samples=None, conn_count_trace=None):
        super().__init__(msg)
        self.samples = list(samples or [])
        self.conn_count_trace = list(conn_count_trace or [])


@dataclass(frozen=True)
class Sample:
    t_offset_s: float
    bytes_cum: int
    inst_speed_bits_per_s: float


@dataclass
class SpeedReport:
    engine: EngineKind
    direction: Direction
    reported_bits_per_s: float
    average_bits_per_s: float
    duration_s: float
    samples: list
    conn_count_trace: list
    accounting: AccountingMode
    srtt_s: float = float("nan")
    # SenderApp minus ReceiverAcked bytes at the end, for the accounting bound
    unacked_bytes: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def final_conn_count(self):
        return self.conn_count_trace[-1][1]


@dataclass(frozen=True)
class AdaptivePolicy:
    max_conns: int = 8
    ramp_interval_s: float = 0.75
    growth_threshold: float = 0.05
    rtt_trigger_s: float = 0.020
    min_s: float = 3.5
    max_s: float = 16.0
    cv_threshold: float = 0.02
    cv_window: int = 10
    # the stability window also spans this many smoothed RTTs
    cv_window_rtts: float = 20.0
    ramp_enabled: bool = True

    def __post_init__(self):
        if not 1 <= self.max_conns:
            raise ValueError("max_conns must be >= 1")
        if not 0 < self.min_s <= self.max_s:
            raise ValueError("need 0 < min_s <= max_s")


def compute_speed(nbytes, duration_s, accounting=AccountingMode.RECEIVER_ACKED):
    """bits/s for ``nbytes``; ``nbytes`` may be a Counters-like object."""
    if not duration_s > 0:
        raise ValueError(f"duration must be positive, got {duration_s!r}")
    if not isinstance(nbytes, (int, float, np.integer, np.floating)):
        nbytes = counter_bytes(nbytes, AccountingMode.parse(accounting), Direction.UP)
    return nbytes * 8.0 / duration_s


def counter_bytes(c, accounting, direction):
    if direction is Direction.DOWN:
        return c.bytes_received
    if accounting is AccountingMode.SENDER_APP:
        return c.bytes_written_app
    return c.bytes_acked


def aggregate_discard(values):
    """Mean after dropping the 2 largest and 5 smallest of exactly 20 values."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.shape != (DISCARD_BUCKETS,):
        raise ValueError(f"aggregate_discard needs exactly {DISCARD_BUCKETS} samples, got {v.size}")
    return float(v[DISCARD_BOTTOM:DISCARD_BUCKETS - DISCARD_TOP].mean())


def resample_speeds(samples, duration_s, buckets=DISCARD_BUCKETS):
    """Per-bucket speeds over ``buckets`` equal slices of [0, duration_s].

    The cumulative byte curve is interpolated linearly between samples.
    """
    if len(samples) < 2 or not duration_s > 0:
        raise ValueError(f"cannot resample {len(samples)} samples into {buckets} buckets")
    t = np.array([0.0] + [s.t_offset_s for s in samples])
    b = np.array([0.0] + [float(s.bytes_cum) for s in samples])
    edges = np.linspace(0.0, duration_s, buckets + 1)
    cum = np.interp(edges, t, b)
    return np.diff(cum) * 8.0 / (duration_s / buckets)


class _Sampler:
    def __init__(self, provider, direction, accounting):
        self.p = provider
        self.direction = direction
        self.accounting = accounting
        self.samples = []
        self.trace = []
        self.conns = []
        self.last = None
        self.t0 = None

    def start(self, n=1):
        self.t0 = self.p.now()
        try:
            for _ in range(n):
                self.conns.append(self.p.open(self.direction))
        except Exception as e:
            raise EngineError(f"could not open connection: {e}") from e
        self.trace.append((0.0, len(self.conns)))

    def add_conn(self, t_off):
        try:
            self.conns.append(self.p.open(self.direction))
        except Exception as e:
            raise self.fail(e)
        self.trace.append((t_off, len(self.conns)))

    def tick(self, k):
        t_off = k * SAMPLE_INTERVAL_S
        try:
            self.p.advance(self.t0 + t_off)
            snaps = self.p.snapshot(self.conns)
        except Exception as e:
            raise self.fail(e)
        self.last = snaps
        total = sum(counter_bytes(c, self.accounting, self.direction) for c in snaps)
        prev = self.samples[-1].bytes_cum if self.samples else 0
        total = max(total, prev)
        self.samples.append(Sample(t_off, int(total), (total - prev) * 8.0 / SAMPLE_INTERVAL_S))
        return t_off

    def srtt(self):
        vals = [c.srtt_s for c in self.last or () if c.srtt_s and c.srtt_s > 0]
        return float(max(vals)) if vals else float("nan")

    def unacked(self):
        if not self.last or self.direction is Direction.DOWN:
            return 0
        return sum(c.bytes_written_app - c.bytes_acked for c in self.last)

    def fail(self, e):
        self.close()
        return EngineError(f"connection failed: {e}", self.samples, self.trace)

    def close(self):
        try:
            self.p.close(self.conns)
        except Exception:
            pass


def _effective_accounting(direction, accounting):
    # the receiver measures downloads, so only uploads can be misaccounted
    if direction is Direction.DOWN:
        return AccountingMode.RECEIVER_ACKED
    return AccountingMode.parse(accounting)


def run_single_stream(provider, direction=Direction.DOWN,
                      accounting=AccountingMode.RECEIVER_ACKED,
                      duration_s=SINGLE_STREAM_DURATION_S) -> SpeedReport:
    """One connection for a fixed duration; speed = bytes / test time."""
    direction = Direction.parse(direction)
    accounting = _effective_accounting(direction, accounting)
    s = _Sampler(provider, direction, accounting)
    s.start()
    n = int(round(duration_s / SAMPLE_INTERVAL_S))
    for k in range(1, n + 1):
        s.tick(k)
    s.close()
    speed = compute_speed(s.samples[-1].bytes_cum, duration_s)
    rep = SpeedReport(EngineKind.SINGLE_STREAM, direction, speed, speed, duration_s, s.samples,
                      s.trace, accounting, s.srtt(), s.unacked())
    assert rep.reported_bits_per_s == rep.average_bits_per_s
    return rep


def _stable(samples, policy, since_k, srtt):
    need = policy.cv_window
    if srtt == srtt and srtt > 0:
        need = max(need, int(math.ceil(policy.cv_window_rtts * srtt / SAMPLE_INTERVAL_S)))
    if len(samples) - since_k < need:
        return False
    w = np.array([x.inst_speed_bits_per_s for x in samples[-need:]])
    m = w.mean()
    return m > 0 and w.std() / m < policy.cv_threshold


def run_adaptive_multi(provider, direction=Direction.DOWN, policy: AdaptivePolicy | None = None,
                       accounting=AccountingMode.RECEIVER_ACKED) -> SpeedReport:
    """Multi-connection test that ramps up and stops once throughput settles."""
    policy = policy or AdaptivePolicy()
    direction = Direction.parse(direction)
    accounting = _effective_accounting(direction, accounting)
    s = _Sampler(provider, direction, accounting)
    s.start()
    ramp_every = max(1, int(round(policy.ramp_interval_s / SAMPLE_INTERVAL_S)))
    max_k = int(round(policy.max_s / SAMPLE_INTERVAL_S))
    min_k = int(math.ceil(policy.min_s / SAMPLE_INTERVAL_S - 1e-9))
    last_ma = None
    changed_at = 0  # sample count when the connection count last changed
    k = 0
    while True:
        k += 1
        t_off = s.tick(k)
        srtt = s.srtt()
        if policy.ramp_enabled and k % ramp_every == 0 and len(s.conns) < policy.max_conns:
            ma = np.mean([x.inst_speed_bits_per_s for x in s.samples[-2:]])
            grew = last_ma is not None and ma > last_ma * (1 + policy.growth_threshold)
            if grew or srtt >= policy.rtt_trigger_s:
                s.add_conn(t_off)
                changed_at = k
            last_ma = ma
        if k >= max_k:
            break
        if k >= min_k and changed_at < k and _stable(s.samples, policy, changed_at, srtt):
            break
    s.close()
    duration = k * SAMPLE_INTERVAL_S
    buckets = resample_speeds(s.samples, duration)
    reported = aggregate_discard(buckets)
    average = compute_speed(s.samples[-1].bytes_cum, duration)
    return SpeedReport(EngineKind.ADAPTIVE_MULTI, direction, reported, average, duration,
                       s.samples, s.trace, accounting, srtt, s.unacked())


def run_engine(engine, provider, direction=Direction.DOWN,
               accounting=AccountingMode.RECEIVER_ACKED, policy=None) -> SpeedReport:
    engine = EngineKind.parse(engine)
    if engine is EngineKind.SINGLE_STREAM:
        return run_single_stream(provider, direction, accounting)
    return run_adaptive_multi(provider, direction, policy, accounting)
