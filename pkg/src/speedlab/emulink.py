"""Deterministic bottleneck link: rate-limited drop-tail FIFO, propagation
delay, and i.i.d. random loss.

All event arithmetic runs on integer nanoseconds. The per-segment kernels are
compiled with numba so the transport simulator can drive millions of segments
through the same code the Python-level API uses.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba
import numpy as np

DEFAULT_MSS = 1460
NS_PER_S = 1_000_000_000
# Floor for the BDP-sized default queue so zero-RTT links still buffer a burst.
MIN_QUEUE_SEGMENTS = 10

ADMITTED = 0
DROPPED_QUEUE = 1
DROPPED_LOSS = 2

LINK_DT = np.dtype([
    ("cap_bps", np.int64),
    ("owd_ns", np.int64),
    ("loss", np.float64),
    ("queue_bytes", np.int64),
    ("mss", np.int64),
    ("clock_ns", np.int64),
    ("busy_ns", np.int64),       # transmitter free from this instant
    ("backlog", np.int64),       # bytes admitted and not yet serialized
    ("head_q", np.int64),        # first ring entry still serializing
    ("head_d", np.int64),        # first ring entry not yet delivered
    ("tail", np.int64),
    ("ack_head", np.int64),
    ("ack_tail", np.int64),
    ("enq_count", np.int64),
    ("enq_bytes", np.int64),
    ("deliv_count", np.int64),
    ("deliv_bytes", np.int64),
    ("dropq_count", np.int64),
    ("dropq_bytes", np.int64),
    ("loss_count", np.int64),
    ("loss_bytes", np.int64),
])

RING_DT = np.dtype([
    ("flow", np.int64),
    ("payload", np.int64),
    ("seq", np.int64),
    ("xmit", np.int64),
    ("enq_ns", np.int64),
    ("finish_ns", np.int64),
])

ACK_DT = np.dtype([
    ("flow", np.int64),
    ("seq", np.int64),
    ("xmit", np.int64),
    ("cum", np.int64),
    ("payload", np.int64),
    ("sent_ns", np.int64),
    ("t_ns", np.int64),
])


class LinkError(ValueError):
    pass


class TimeOrderError(LinkError):
    pass


def s_to_ns(t: float) -> int:
    return int(round(t * NS_PER_S))


def default_queue_bytes(capacity_bits_per_s, rtt_s, mss=DEFAULT_MSS):
    """Bandwidth-delay product in bytes, floored at a few segments."""
    bdp = int(capacity_bits_per_s / 8 * rtt_s)
    return max(bdp, MIN_QUEUE_SEGMENTS * mss)


@dataclass(frozen=True)
class LinkSpec:
    capacity_bits_per_s: float
    one_way_delay_s: float = 0.0
    loss_prob: float = 0.0
    queue_bytes: int | None = None
    seed: int = 0
    mss: int = DEFAULT_MSS

    def __post_init__(self):
        if not (self.capacity_bits_per_s > 0) or math.isinf(self.capacity_bits_per_s):
            raise LinkError(f"capacity_bits_per_s must be positive, got {self.capacity_bits_per_s!r}")
        if not (self.one_way_delay_s >= 0) or math.isinf(self.one_way_delay_s):
            raise LinkError(f"one_way_delay_s must be non-negative, got {self.one_way_delay_s!r}")
        if not (0.0 <= self.loss_prob <= 1.0):
            raise LinkError(f"loss_prob must lie in [0, 1], got {self.loss_prob!r}")
        if not (isinstance(self.mss, int) and self.mss > 0):
            raise LinkError(f"mss must be a positive integer, got {self.mss!r}")
        if self.queue_bytes is not None:
            if not isinstance(self.queue_bytes, (int, np.integer)) or self.queue_bytes < self.mss:
                raise LinkError(
                    f"queue_bytes must be an integer >= one segment ({self.mss}), got {self.queue_bytes!r}")
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= self.seed < 2**64):
            raise LinkError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    @classmethod
    def from_rtt(cls, capacity_bits_per_s, rtt_s, **kw):
        return cls(capacity_bits_per_s=capacity_bits_per_s, one_way_delay_s=rtt_s / 2, **kw)

    @property
    def rtt_s(self):
        return 2 * self.one_way_delay_s

    @property
    def effective_queue_bytes(self):
        if self.queue_bytes is not None:
            return int(self.queue_bytes)
        return default_queue_bytes(self.capacity_bits_per_s, self.rtt_s, self.mss)


@dataclass(frozen=True)
class Segment:
    flow_id: int
    payload_bytes: int
    seq: int
    enqueue_time_s: float = 0.0


class EventKind(enum.Enum):
    DELIVERED = "Delivered"
    DROPPED_QUEUE = "Dropped_Queue"
    DROPPED_LOSS = "Dropped_Loss"
    ACK_DELIVERED = "AckDelivered"


@dataclass(frozen=True)
class LinkEvent:
    kind: EventKind
    segment: Segment
    time_ns: int

    @property
    def time_s(self):
        return self.time_ns / NS_PER_S


@numba.njit(cache=True)
def serialization_ns(payload, cap_bps):
    return (payload * 8 * 1_000_000_000 + cap_bps - 1) // cap_bps


@numba.njit(cache=True)
def _drain_serialized(p, ring, now):
    mask = ring.shape[0] - 1
    while p.head_q < p.tail and ring[p.head_q & mask].finish_ns <= now:
        p.backlog -= ring[p.head_q & mask].payload
        p.head_q += 1


@numba.njit(cache=True)
def link_enqueue_kernel(p, ring, rng, flow, seq, xmit, payload, now):
    """Offer one segment at ``now``; returns ADMITTED or a drop code."""
    p.enq_count += 1
    p.enq_bytes += payload
    # Loss is drawn for every offered segment, before the queue, like netem.
    if rng.random() < p.loss:
        p.loss_count += 1
        p.loss_bytes += payload
        return DROPPED_LOSS
    _drain_serialized(p, ring, now)
    if p.backlog + payload > p.queue_bytes:
        p.dropq_count += 1
        p.dropq_bytes += payload
        return DROPPED_QUEUE
    size = ring.shape[0]
    if p.tail - p.head_d >= size:
        raise RuntimeError("link ring overflow")
    start = now if now > p.busy_ns else p.busy_ns
    finish = start + serialization_ns(payload, p.cap_bps)
    p.busy_ns = finish
    p.backlog += payload
    e = ring[p.tail & (size - 1)]
    e.flow = flow
    e.payload = payload
    e.seq = seq
    e.xmit = xmit
    e.enq_ns = now
    e.finish_ns = finish
    p.tail += 1
    return ADMITTED


@numba.njit(cache=True)
def link_ack_kernel(p, acks, flow, seq, xmit, cum, payload, sent_ns, now):
    """Schedule an ACK on this link as a pure delay (no rate limit, no loss)."""
    size = acks.shape[0]
    if p.ack_tail - p.ack_head >= size:
        raise RuntimeError("ack ring overflow")
    a = acks[p.ack_tail & (size - 1)]
    a.flow = flow
    a.seq = seq
    a.xmit = xmit
    a.cum = cum
    a.payload = payload
    a.sent_ns = sent_ns
    a.t_ns = now + p.owd_ns
    p.ack_tail += 1


@numba.njit(cache=True)
def next_delivery_ns(p, ring):
    if p.head_d < p.tail:
        return ring[p.head_d & (ring.shape[0] - 1)].finish_ns + p.owd_ns
    return np.iinfo(np.int64).max


@numba.njit(cache=True)
def next_ack_ns(p, acks):
    if p.ack_head < p.ack_tail:
        return acks[p.ack_head & (acks.shape[0] - 1)].t_ns
    return np.iinfo(np.int64).max


@numba.njit(cache=True)
def pop_delivery(p, ring):
    """Remove and return the ring index of the head-of-line delivery."""
    idx = p.head_d & (ring.shape[0] - 1)
    p.head_d += 1
    if p.head_q < p.head_d:
        p.backlog -= ring[idx].payload
        p.head_q = p.head_d
    p.deliv_count += 1
    p.deliv_bytes += ring[idx].payload
    return idx


def _pow2_at_least(n):
    return 1 << max(4, int(n - 1).bit_length())


class LinkState:
    """One direction of a bottleneck link.

    Besides the data FIFO the link carries an ACK channel that is pure delay;
    a download's ACKs ride the uplink's ACK channel and vice versa.
    """

    def __init__(self, spec: LinkSpec, ring_size=None, ack_ring_size=None):
        self.spec = spec
        p = np.zeros(1, dtype=LINK_DT)
        r = p.view(np.recarray)[0]
        r.cap_bps = max(1, int(round(spec.capacity_bits_per_s)))
        r.owd_ns = s_to_ns(spec.one_way_delay_s)
        r.loss = spec.loss_prob
        r.queue_bytes = spec.effective_queue_bytes
        r.mss = spec.mss
        self._p = p
        self.rec = r  # attribute view of _p[0] for Python-side access
        if ring_size is None:
            ring_size = self.inflight_bound(spec.mss)
        self._ring = np.zeros(_pow2_at_least(ring_size), dtype=RING_DT)
        self._acks = np.zeros(_pow2_at_least(ack_ring_size or 64), dtype=ACK_DT)
        self._rng = np.random.Generator(np.random.PCG64(spec.seed))
        self._losses = []  # (time_ns, Segment) awaiting emission
        self._segments = {}  # ring position -> Segment, Python API only

    def inflight_bound(self, payload):
        """Upper bound on ring entries for segments of ``payload`` bytes."""
        r = self.rec
        queued = r.queue_bytes // payload + 1
        on_wire = r.cap_bps * r.owd_ns // (8 * payload * NS_PER_S) + 1
        return 2 * (queued + on_wire) + 64

    def ensure_ack_capacity(self, n):
        need = _pow2_at_least(n)
        if need > self._acks.shape[0]:
            self._acks = _regrow(self._acks, self.rec.ack_head, self.rec.ack_tail, need)

    def ensure_ring_capacity(self, n):
        need = _pow2_at_least(n)
        if need > self._ring.shape[0]:
            self._ring = _regrow(self._ring, self.rec.head_d, self.rec.tail, need)

    @property
    def clock_ns(self):
        return int(self.rec.clock_ns)

    @property
    def queue_occupancy_bytes(self):
        return int(self.rec.backlog)

    @property
    def counters(self):
        r = self.rec
        return {name: int(r[name]) for name in (
            "enq_count", "enq_bytes", "deliv_count", "deliv_bytes", "dropq_count",
            "dropq_bytes", "loss_count", "loss_bytes")}

    @property
    def in_transit_bytes(self):
        """Admitted bytes not yet delivered."""
        r = self.rec
        mask = self._ring.shape[0] - 1
        return int(sum(self._ring[i & mask]["payload"] for i in range(r.head_d, r.tail)))


def _regrow(arr, head, tail, size):
    out = np.zeros(size, dtype=arr.dtype)
    old_mask = arr.shape[0] - 1
    for i in range(head, tail):
        out[i & (size - 1)] = arr[i & old_mask]
    return out


def link_new(spec: LinkSpec) -> LinkState:
    return LinkState(spec)


def _check_time(link, now_ns):
    if now_ns < link.rec.clock_ns:
        raise TimeOrderError(
            f"time went backwards: {now_ns} ns < link clock {int(link.rec.clock_ns)} ns")


def link_enqueue(link: LinkState, seg: Segment, now: float):
    """Offer ``seg`` to the link at virtual time ``now`` (seconds).

    Returns a Dropped_Queue event when the drop-tail queue rejects the segment
    and None otherwise. Random losses surface from :func:`link_advance`.
    """
    now_ns = s_to_ns(now)
    _check_time(link, now_ns)
    if not 0 < seg.payload_bytes <= link.spec.mss:
        raise LinkError(f"payload_bytes must be in (0, {link.spec.mss}], got {seg.payload_bytes}")
    r = link.rec
    link.ensure_ring_capacity(r.tail - r.head_d + 1)
    pos = int(r.tail)
    code = link_enqueue_kernel(link._p[0], link._ring, link._rng, seg.flow_id, seg.seq, 0,
                               seg.payload_bytes, now_ns)
    r.clock_ns = now_ns
    if code == DROPPED_QUEUE:
        return LinkEvent(EventKind.DROPPED_QUEUE, seg, now_ns)
    if code == DROPPED_LOSS:
        link._losses.append((now_ns, seg))
    else:
        link._segments[pos] = seg
    return None


def link_send_ack(link: LinkState, seg: Segment, now: float):
    """Carry an acknowledgement for ``seg`` across this link (pure delay)."""
    now_ns = s_to_ns(now)
    _check_time(link, now_ns)
    r = link.rec
    link.ensure_ack_capacity(r.ack_tail - r.ack_head + 1)
    pos = int(r.ack_tail)
    link_ack_kernel(link._p[0], link._acks, seg.flow_id, seg.seq, 0, 0, seg.payload_bytes, now_ns, now_ns)
    r.clock_ns = now_ns
    link._segments[("ack", pos)] = seg


def link_advance(link: LinkState, until: float):
    """Emit every pending event with time <= ``until`` in time order."""
    until_ns = s_to_ns(until)
    _check_time(link, until_ns)
    r = link.rec
    events = []
    losses = link._losses
    li = 0
    while True:
        t_d = next_delivery_ns(link._p[0], link._ring)
        t_a = next_ack_ns(link._p[0], link._acks)
        t_l = losses[li][0] if li < len(losses) else np.iinfo(np.int64).max
        t = min(t_d, t_a, t_l)
        if t > until_ns:
            break
        if t == t_l:
            events.append(LinkEvent(EventKind.DROPPED_LOSS, losses[li][1], t_l))
            li += 1
        elif t == t_d:
            pos = int(r.head_d)
            pop_delivery(link._p[0], link._ring)
            events.append(LinkEvent(EventKind.DELIVERED, link._segments.pop(pos), t_d))
        else:
            pos = int(r.ack_head)
            r.ack_head += 1
            events.append(LinkEvent(EventKind.ACK_DELIVERED, link._segments.pop(("ack", pos)), t_a))
    del losses[:li]
    r.clock_ns = until_ns
    return events
