"""Congestion-controlled senders (CUBIC and a BBR model) over emulated links.

A :class:`SimNetwork` owns a downlink and an uplink :class:`LinkState` and any
number of flows. Data rides the link matching the flow's direction, ACKs ride
the opposite link's pure-delay channel. Everything advances in one compiled
event loop so that multi-gigabit runs finish in seconds.

Simplifications: no SACK option, but each ACK names the segment that
triggered it; a segment is declared lost once three later transmissions of the
same flow have been acknowledged. The retransmit timer is
``max(2 * srtt, MIN_RTO)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .emulink import (
    ACK_DT, NS_PER_S, LinkSpec, LinkState, link_ack_kernel, link_enqueue_kernel,
    next_ack_ns, next_delivery_ns, pop_delivery, s_to_ns, serialization_ns,
)

INITIAL_CWND = 10
DEFAULT_SEND_BUFFER = 1 << 20
CUBIC_BETA = 0.7
CUBIC_C = 0.4
BBR_HIGH_GAIN = 2.885
BBR_DRAIN_GAIN = 1 / 2.885
BBR_GAIN_CYCLE = (1.25, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
BBR_BW_WINDOW_ROUNDS = 10
BBR_MIN_RTT_WINDOW_S = 10.0
BBR_FULL_BW_THRESH = 1.25
BBR_FULL_BW_ROUNDS = 3
MIN_RTO_S = 0.2
DUP_THRESH = 3

DOWN = 0
UP = 1

STARTUP, DRAIN, PROBE_BW = 0, 1, 2
_PHASE_NAMES = ("Startup", "Drain", "ProbeBW")

SEG_FREE, SEG_INFLIGHT, SEG_LOST, SEG_DELIVERED = 0, 1, 2, 3

_GAINS = np.array(BBR_GAIN_CYCLE)

CUB_DT = np.dtype([
    ("cwnd", np.float64),
    ("ssthresh", np.float64),
    ("w_max", np.float64),
    ("epoch_ns", np.int64),
    ("k", np.float64),
    ("origin", np.float64),
    ("w_est", np.float64),
    ("loss_count", np.int64),
])

BBR_DT = np.dtype([
    ("phase", np.int64),
    ("btlbw", np.float64),
    ("min_rtt_ns", np.int64),
    ("min_rtt_stamp", np.int64),
    ("pacing_gain", np.float64),
    ("cwnd_gain", np.float64),
    ("cycle_index", np.int64),
    ("cycle_start", np.int64),
    ("cycle_stamp", np.int64),
    ("full_bw", np.float64),
    ("full_bw_count", np.int64),
    ("round_count", np.int64),
    ("round_stamp", np.int64),
    ("drain_stamp", np.int64),
    ("cycle_loss0", np.int64),
    ("next_rtt_delivered", np.int64),
    ("prt_state", np.int64),
    ("prt_done", np.int64),
    ("prt_min", np.int64),
    ("saved_cwnd", np.float64),
    ("app_lim_ns", np.int64),
    ("app_lim_mark", np.int64),
    ("loss_count", np.int64),
    ("bw", np.float64, (BBR_BW_WINDOW_ROUNDS,)),
    ("bw_round", np.int64, (BBR_BW_WINDOW_ROUNDS,)),
])

FLOW_DT = np.dtype([
    ("used", np.int64),
    ("active", np.int64),
    ("dir", np.int64),
    ("cca", np.int64),
    ("mss", np.int64),
    ("start_ns", np.int64),
    ("buf_segs", np.int64),
    ("snd_una", np.int64),
    ("snd_nxt", np.int64),
    ("rcv_nxt", np.int64),
    ("written_segs", np.int64),
    ("inflight", np.int64),
    ("xmit_next", np.int64),
    ("tx_head", np.int64),
    ("tx_tail", np.int64),
    ("sus_head", np.int64),
    ("sus_tail", np.int64),
    ("rtx_head", np.int64),
    ("rtx_tail", np.int64),
    ("ack_events", np.int64),
    ("next_send_ns", np.int64),
    ("last_progress_ns", np.int64),
    ("srtt_ns", np.float64),
    ("delivered", np.int64),
    ("delivered_ns", np.int64),
    ("first_sent_ns", np.int64),
    ("recovery_seq", np.int64),
    ("cwnd", np.float64),
    ("segs_sent", np.int64),
    ("retransmits", np.int64),
    ("losses", np.int64),
    ("rto_count", np.int64),
])

SEG_DT = np.dtype([
    ("state", np.int64),
    ("xmit", np.int64),
    ("retx", np.int64),
    ("send_ns", np.int64),
    ("del_at_send", np.int64),
    ("del_ns_at_send", np.int64),
    ("first_ns_at_send", np.int64),
])

_I64_MAX = np.iinfo(np.int64).max


class CongestionAlgo(enum.Enum):
    CUBIC = "cubic"
    BBR = "bbr"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        if v in ("bbr", "bbrmodel", "bbr_model"):
            return cls.BBR
        if v == "cubic":
            return cls.CUBIC
        raise ValueError(f"unknown congestion control {value!r} (expected cubic or bbr)")


class Direction(enum.Enum):
    DOWN = "down"
    UP = "up"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown direction {value!r} (expected up or down)") from None

    @property
    def index(self):
        return DOWN if self is Direction.DOWN else UP


# --- CUBIC -----------------------------------------------------------------

@numba.njit(cache=True)
def _cubic_k(w_max, beta, c):
    return np.cbrt(w_max * (1.0 - beta) / c)


@numba.njit(cache=True)
def _cubic_target(origin, k, t, c):
    d = t - k
    return c * d * d * d + origin


def cubic_window(w_max, t_since_loss, beta=CUBIC_BETA, c_cubic=CUBIC_C):
    """CUBIC window ``c*(t-K)^3 + w_max`` in segments."""
    if not w_max > 0:
        raise ValueError(f"w_max must be positive, got {w_max!r}")
    if t_since_loss < 0:
        raise ValueError(f"t_since_loss must be non-negative, got {t_since_loss!r}")
    return float(_cubic_target(w_max, _cubic_k(w_max, beta, c_cubic), t_since_loss, c_cubic))


@numba.njit(cache=True)
def _cubic_on_ack(c, now, min_rtt_ns):
    if c.cwnd < c.ssthresh:
        c.cwnd += 1.0
        return
    if c.epoch_ns < 0:
        c.epoch_ns = now
        if c.cwnd < c.w_max:
            c.k = _cubic_k(c.w_max, 1.0 - (c.w_max - c.cwnd) / c.w_max, CUBIC_C)
            c.origin = c.w_max
        else:
            c.k = 0.0
            c.origin = c.cwnd
        c.w_est = c.cwnd
    t = (now + min_rtt_ns - c.epoch_ns) / 1e9
    target = _cubic_target(c.origin, c.k, t, CUBIC_C)
    if target > c.cwnd:
        c.cwnd += (target - c.cwnd) / c.cwnd
    else:
        c.cwnd += 0.01 / c.cwnd
    # TCP-friendly region
    c.w_est += 3.0 * (1.0 - CUBIC_BETA) / (1.0 + CUBIC_BETA) / c.cwnd
    if c.w_est > c.cwnd:
        c.cwnd = c.w_est


@numba.njit(cache=True)
def _cubic_on_loss(c):
    c.loss_count += 1
    c.w_max = c.cwnd
    c.cwnd = max(CUBIC_BETA * c.w_max, 1.0)
    c.ssthresh = max(c.cwnd, 2.0)
    c.epoch_ns = -1


@numba.njit(cache=True)
def _cubic_on_rto(c):
    c.loss_count += 1
    c.w_max = c.cwnd
    c.ssthresh = max(CUBIC_BETA * c.cwnd, 2.0)
    c.cwnd = 1.0
    c.epoch_ns = -1


@dataclass
class CubicState:
    w_max_segments: float = 0.0
    cwnd_segments: float = float(INITIAL_CWND)
    epoch_start_s: float | None = None
    ssthresh_segments: float = math.inf

    @property
    def in_slow_start(self):
        return self.cwnd_segments < self.ssthresh_segments


# --- BBR model --------------------------------------------------------------

@numba.njit(cache=True)
def _bbr_init(b, btlbw, min_rtt_ns, now, cycle_start):
    b.phase = STARTUP
    b.btlbw = btlbw
    b.min_rtt_ns = max(min_rtt_ns, 1)
    b.min_rtt_stamp = now
    b.pacing_gain = BBR_HIGH_GAIN
    b.cwnd_gain = BBR_HIGH_GAIN
    b.cycle_index = 0
    b.cycle_start = cycle_start
    b.cycle_stamp = now
    b.full_bw = 0.0
    b.full_bw_count = 0
    b.round_count = 0
    b.round_stamp = now
    b.drain_stamp = 0
    b.app_lim_ns = 0
    b.app_lim_mark = 0
    b.loss_count = 0
    for i in range(BBR_BW_WINDOW_ROUNDS):
        b.bw[i] = 0.0
        b.bw_round[i] = -BBR_BW_WINDOW_ROUNDS - 1
    b.bw[0] = btlbw
    b.bw_round[0] = 0


@numba.njit(cache=True)
def _bbr_step(b, rate, rtt_ns, now, inflight_bytes=-1.0, round_flag=-1):
    """Fold one ACK's delivery-rate and RTT samples into the model.

    ``rate`` <= 0 or ``rtt_ns`` <= 0 mean "no sample of that kind". With a
    known ``inflight_bytes`` the probing phases end on inflight like Linux BBR:
    the up-probe holds until inflight reaches its target or a loss shows up,
    the drain-probe ends early once inflight is back at the estimated BDP.
    ``round_flag`` 0/1 says whether this ACK ends a packet-timed round; -1
    falls back to rounds of one min_rtt of wall time.
    """
    expired = now - b.min_rtt_stamp > int(BBR_MIN_RTT_WINDOW_S * 1e9)
    # inside the network loop a stale min_rtt is refreshed by _bbr_refresh_min_rtt
    if rtt_ns > 0 and (rtt_ns < b.min_rtt_ns or (expired and round_flag < 0)):
        b.min_rtt_ns = rtt_ns
        b.min_rtt_stamp = now
    round_start = False
    if round_flag == 1 or (round_flag < 0 and now - b.round_stamp >= b.min_rtt_ns):
        b.round_count += 1
        b.round_stamp = now
        round_start = True
    if rate > 0.0:
        slot = b.round_count % BBR_BW_WINDOW_ROUNDS
        if b.bw_round[slot] != b.round_count:
            b.bw_round[slot] = b.round_count
            b.bw[slot] = rate
        elif rate > b.bw[slot]:
            b.bw[slot] = rate
    best = 0.0
    for i in range(BBR_BW_WINDOW_ROUNDS):
        if b.bw_round[i] > b.round_count - BBR_BW_WINDOW_ROUNDS and b.bw[i] > best:
            best = b.bw[i]
    if best > 0.0:
        b.btlbw = best

    if b.phase == STARTUP:
        if round_start:
            if b.btlbw >= b.full_bw * BBR_FULL_BW_THRESH:
                b.full_bw = b.btlbw
                b.full_bw_count = 0
            else:
                b.full_bw_count += 1
                if b.full_bw_count >= BBR_FULL_BW_ROUNDS:
                    b.phase = DRAIN
                    b.pacing_gain = BBR_DRAIN_GAIN
                    b.cwnd_gain = BBR_HIGH_GAIN
                    b.drain_stamp = now
    elif b.phase == DRAIN:
        if now - b.drain_stamp >= b.min_rtt_ns:
            b.phase = PROBE_BW
            b.cycle_index = b.cycle_start
            b.pacing_gain = _GAINS[b.cycle_index]
            b.cwnd_gain = 2.0
            b.cycle_stamp = now
            b.cycle_loss0 = b.loss_count
    else:
        adv = now - b.cycle_stamp >= b.min_rtt_ns
        if inflight_bytes >= 0.0:
            bdp = b.btlbw * b.min_rtt_ns / 8e9
            if b.pacing_gain > 1.0:
                adv = adv and (b.loss_count > b.cycle_loss0
                               or inflight_bytes >= b.pacing_gain * bdp)
            elif b.pacing_gain < 1.0:
                adv = adv or inflight_bytes <= bdp
        if adv:
            b.cycle_index = (b.cycle_index + 1) % 8
            b.pacing_gain = _GAINS[b.cycle_index]
            b.cycle_stamp = now
            b.cycle_loss0 = b.loss_count


@dataclass(frozen=True)
class BbrState:
    phase: str = "Startup"
    btl_bw_estimate_bits_per_s: float = 0.0
    min_rtt_s: float = 1e-3
    pacing_gain: float = BBR_HIGH_GAIN
    cycle_index: int = 0
    cwnd_gain: float = BBR_HIGH_GAIN
    cycle_start: int = 0
    full_bw_bits_per_s: float = 0.0
    full_bw_count: int = 0
    round_count: int = 0
    round_stamp_s: float = 0.0
    min_rtt_stamp_s: float = 0.0
    drain_stamp_s: float = 0.0
    cycle_stamp_s: float = 0.0
    loss_count: int = 0
    bw_window: tuple = ()
    bw_window_rounds: tuple = ()

    @classmethod
    def initial(cls, btl_bw_estimate_bits_per_s, min_rtt_s, now_s=0.0, cycle_start=0):
        rec = np.zeros(1, dtype=BBR_DT)
        _bbr_init(rec[0], float(btl_bw_estimate_bits_per_s), s_to_ns(min_rtt_s), s_to_ns(now_s),
                  int(cycle_start))
        return _bbr_from_record(rec[0])


def _bbr_to_record(state: BbrState):
    rec = np.zeros(1, dtype=BBR_DT)
    r = rec[0]
    r["phase"] = _PHASE_NAMES.index(state.phase)
    r["btlbw"] = state.btl_bw_estimate_bits_per_s
    r["min_rtt_ns"] = s_to_ns(state.min_rtt_s)
    r["min_rtt_stamp"] = s_to_ns(state.min_rtt_stamp_s)
    r["pacing_gain"] = state.pacing_gain
    r["cwnd_gain"] = state.cwnd_gain
    r["cycle_index"] = state.cycle_index
    r["cycle_start"] = state.cycle_start
    r["cycle_stamp"] = s_to_ns(state.cycle_stamp_s)
    r["full_bw"] = state.full_bw_bits_per_s
    r["full_bw_count"] = state.full_bw_count
    r["round_count"] = state.round_count
    r["round_stamp"] = s_to_ns(state.round_stamp_s)
    r["drain_stamp"] = s_to_ns(state.drain_stamp_s)
    r["loss_count"] = state.loss_count
    if state.bw_window:
        r["bw"][:] = state.bw_window
        r["bw_round"][:] = state.bw_window_rounds
    else:
        r["bw"][:] = 0.0
        r["bw_round"][:] = -BBR_BW_WINDOW_ROUNDS - 1
        r["bw"][0] = state.btl_bw_estimate_bits_per_s
        r["bw_round"][0] = state.round_count
    return rec


def _bbr_from_record(r) -> BbrState:
    return BbrState(
        phase=_PHASE_NAMES[int(r["phase"])],
        btl_bw_estimate_bits_per_s=float(r["btlbw"]),
        min_rtt_s=int(r["min_rtt_ns"]) / NS_PER_S,
        pacing_gain=float(r["pacing_gain"]),
        cycle_index=int(r["cycle_index"]),
        cwnd_gain=float(r["cwnd_gain"]),
        cycle_start=int(r["cycle_start"]),
        full_bw_bits_per_s=float(r["full_bw"]),
        full_bw_count=int(r["full_bw_count"]),
        round_count=int(r["round_count"]),
        round_stamp_s=int(r["round_stamp"]) / NS_PER_S,
        min_rtt_stamp_s=int(r["min_rtt_stamp"]) / NS_PER_S,
        drain_stamp_s=int(r["drain_stamp"]) / NS_PER_S,
        cycle_stamp_s=int(r["cycle_stamp"]) / NS_PER_S,
        loss_count=int(r["loss_count"]),
        bw_window=tuple(float(x) for x in r["bw"]),
        bw_window_rounds=tuple(int(x) for x in r["bw_round"]),
    )


def bbr_update(state: BbrState, delivery_rate_sample, rtt_sample, now) -> BbrState:
    """Return the model state after one ACK carrying the given samples.

    Rates are bits/s, times are seconds. Pure: ``state`` is left untouched.
    """
    if delivery_rate_sample <= 0 or rtt_sample <= 0:
        raise ValueError("delivery rate and RTT samples must be positive")
    rec = _bbr_to_record(state)
    _bbr_step(rec[0], float(delivery_rate_sample), s_to_ns(rtt_sample), s_to_ns(now))
    return _bbr_from_record(rec[0])


def bbr_on_loss(state: BbrState) -> BbrState:
    # loss is not a congestion signal for the model
    return replace(state, loss_count=state.loss_count + 1)


# --- network event loop -------------------------------------------------------

@numba.njit(cache=True)
def _bbr_cwnd(fl, b, newly):
    bdp = b.btlbw * b.min_rtt_ns / 1e9 / (8.0 * fl.mss)
    target = b.cwnd_gain * bdp + 3.0
    if b.phase != STARTUP:
        fl.cwnd = min(fl.cwnd + newly, target)
    elif fl.cwnd < target or fl.delivered < INITIAL_CWND:
        fl.cwnd += newly
    if fl.cwnd < 4.0:
        fl.cwnd = 4.0


@numba.njit(cache=True)
def _bbr_refresh_min_rtt(fl, b, rtt, now):
    """Refresh a stale min_rtt the way Linux BBR does.

    cwnd is clamped to 4 segments until the queue this flow holds has
    drained plus max(200 ms, min_rtt); the lowest RTT seen meanwhile becomes
    the new min_rtt. The phase and pacing rate are left alone.
    """
    win = int(BBR_MIN_RTT_WINDOW_S * 1e9)
    if b.prt_state == 0:
        if b.phase != STARTUP and now - b.min_rtt_stamp > win:
            b.prt_state = 1
            b.prt_min = _I64_MAX
            b.saved_cwnd = fl.cwnd
            b.app_lim_ns = now
        else:
            return
    # like Linux, on every ACK in this mode: what is sent from here until this
    # much is delivered is app-limited and may not pull the bandwidth estimate down
    b.app_lim_mark = max(fl.delivered + fl.inflight, 1)
    if rtt > 0 and rtt < b.prt_min:
        b.prt_min = rtt
    if b.prt_state == 1:
        if fl.inflight <= 4:
            b.prt_state = 2
            hold = b.min_rtt_ns if b.min_rtt_ns > 200_000_000 else 200_000_000
            b.prt_done = now + hold
    elif now >= b.prt_done:
        b.prt_state = 0
        if b.prt_min < _I64_MAX:
            b.min_rtt_ns = b.prt_min
        b.min_rtt_stamp = now
        if b.saved_cwnd > fl.cwnd:
            fl.cwnd = b.saved_cwnd
        return
    fl.cwnd = 4.0


@numba.njit(cache=True)
def _clean_rtx(fl, segs, rtx, f, mask):
    while fl.rtx_head < fl.rtx_tail:
        s = rtx[f, fl.rtx_head & mask]
        if s >= fl.snd_una and segs[f, s & mask].state == SEG_LOST:
            return True
        fl.rtx_head += 1
    return False


@numba.njit(cache=True)
def _can_send(fl, segs, rtx, f, mask):
    if fl.inflight >= int(fl.cwnd):
        return False
    if _clean_rtx(fl, segs, rtx, f, mask):
        return True
    if fl.active == 1:
        return fl.snd_nxt < fl.snd_una + fl.buf_segs
    # closing: only what the app already wrote
    return fl.snd_nxt < fl.written_segs


@numba.njit(cache=True)
def _rto_ns(fl):
    r = int(2.0 * fl.srtt_ns)
    floor = int(MIN_RTO_S * 1e9)
    return r if r > floor else floor


@numba.njit(cache=True)
def _mark_lost(f, fl, cub, bbr, segs, rtx, seq, mask):
    s = segs[f, seq & mask]
    s.state = SEG_LOST
    fl.inflight -= 1
    fl.losses += 1
    rtx[f, fl.rtx_tail & mask] = seq
    fl.rtx_tail += 1
    if fl.cca == 0:
        if seq >= fl.recovery_seq:
            _cubic_on_loss(cub[f])
            fl.cwnd = cub[f].cwnd
            fl.recovery_seq = fl.snd_nxt
    else:
        bbr[f].loss_count += 1


@numba.njit(cache=True)
def _on_ack(f, seq, xmit, now, flows, cub, bbr, segs, txq, txx, sus, susx, susat, rtx, mask):
    fl = flows[f]
    fl.ack_events += 1
    newly = 0
    rtt = -1
    rate = -1.0
    das = -1
    sent_ns = -1
    if seq >= fl.snd_una:
        s = segs[f, seq & mask]
        if s.state == SEG_INFLIGHT or s.state == SEG_LOST:
            if s.state == SEG_INFLIGHT:
                fl.inflight -= 1
            s.state = SEG_DELIVERED
            newly = 1
            das = s.del_at_send
            sent_ns = s.send_ns
            fl.delivered += 1
            fl.delivered_ns = now
            if s.xmit == xmit:
                if s.retx == 0:
                    rtt = now - s.send_ns
                send_el = s.send_ns - s.first_ns_at_send
                ack_el = now - s.del_ns_at_send
                iv = send_el if send_el > ack_el else ack_el
                if iv > 0 and (fl.cca == 0 or iv >= bbr[f].min_rtt_ns):
                    rate = (fl.delivered - s.del_at_send) * fl.mss * 8.0 * 1e9 / iv
                fl.first_sent_ns = s.send_ns
    while fl.snd_una < fl.snd_nxt and segs[f, fl.snd_una & mask].state == SEG_DELIVERED:
        segs[f, fl.snd_una & mask].state = SEG_FREE
        fl.snd_una += 1
    if rtt > 0:
        if fl.srtt_ns <= 0.0:
            fl.srtt_ns = rtt
        else:
            fl.srtt_ns += (rtt - fl.srtt_ns) / 8.0
    if newly:
        fl.last_progress_ns = now
        if fl.cca == 0:
            if fl.snd_una >= fl.recovery_seq:
                _cubic_on_ack(cub[f], now, bbr[f].min_rtt_ns)
            fl.cwnd = cub[f].cwnd
        else:
            b = bbr[f]
            if rate > 0.0 and sent_ns >= b.app_lim_ns and das < b.app_lim_mark \
                    and rate < b.btlbw:
                rate = -1.0
            rflag = 0
            if das >= bbr[f].next_rtt_delivered:
                bbr[f].next_rtt_delivered = fl.delivered
                rflag = 1
            _bbr_step(bbr[f], rate, rtt, now, float(fl.inflight * fl.mss), rflag)
            if bbr[f].prt_state == 0:
                _bbr_cwnd(fl, bbr[f], 1.0)
            _bbr_refresh_min_rtt(fl, bbr[f], rtt, now)
    elif fl.cca == 1 and rtt > 0:
        _bbr_step(bbr[f], -1.0, rtt, now, float(fl.inflight * fl.mss), 0)
        _bbr_refresh_min_rtt(fl, bbr[f], rtt, now)
    if fl.cca == 0 and rtt > 0 and rtt < bbr[f].min_rtt_ns:
        bbr[f].min_rtt_ns = rtt

    # FIFO path: every earlier transmission still unacknowledged was dropped.
    while fl.tx_head < fl.tx_tail and txx[f, fl.tx_head & mask] <= xmit:
        es = txq[f, fl.tx_head & mask]
        ex = txx[f, fl.tx_head & mask]
        fl.tx_head += 1
        if ex < xmit and es >= fl.snd_una:
            s2 = segs[f, es & mask]
            if s2.state == SEG_INFLIGHT and s2.xmit == ex:
                sus[f, fl.sus_tail & mask] = es
                susx[f, fl.sus_tail & mask] = ex
                susat[f, fl.sus_tail & mask] = fl.ack_events + DUP_THRESH - 1
                fl.sus_tail += 1
    while fl.sus_head < fl.sus_tail and susat[f, fl.sus_head & mask] <= fl.ack_events:
        es = sus[f, fl.sus_head & mask]
        ex = susx[f, fl.sus_head & mask]
        fl.sus_head += 1
        if es >= fl.snd_una:
            s2 = segs[f, es & mask]
            if s2.state == SEG_INFLIGHT and s2.xmit == ex:
                _mark_lost(f, fl, cub, bbr, segs, rtx, es, mask)
    if fl.active == 1 and now >= fl.start_ns:
        w = fl.snd_una + fl.buf_segs
        if w > fl.written_segs:
            fl.written_segs = w
    elif fl.active == 2 and fl.snd_una >= fl.written_segs:
        fl.active = 0


@numba.njit(cache=True)
def _on_rto(f, now, flows, cub, bbr, segs, rtx, mask):
    fl = flows[f]
    fl.rto_count += 1
    fl.rtx_head = 0
    fl.rtx_tail = 0
    for seq in range(fl.snd_una, fl.snd_nxt):
        s = segs[f, seq & mask]
        if s.state == SEG_INFLIGHT or s.state == SEG_LOST:
            if s.state == SEG_INFLIGHT:
                fl.losses += 1
            s.state = SEG_LOST
            rtx[f, fl.rtx_tail & mask] = seq
            fl.rtx_tail += 1
    fl.inflight = 0
    fl.tx_head = fl.tx_tail
    fl.sus_head = fl.sus_tail
    if fl.cca == 0:
        _cubic_on_rto(cub[f])
        fl.cwnd = cub[f].cwnd
    else:
        bbr[f].loss_count += 1
    fl.recovery_seq = fl.snd_nxt
    fl.last_progress_ns = now


@numba.njit(cache=True)
def _send_one(f, now, flows, bbr, segs, txq, txx, rtx, mask, p, ring, rng):
    fl = flows[f]
    w = fl.snd_una + fl.buf_segs
    if fl.active == 1 and w > fl.written_segs:
        fl.written_segs = w
    if _clean_rtx(fl, segs, rtx, f, mask):
        seq = rtx[f, fl.rtx_head & mask]
        fl.rtx_head += 1
        s = segs[f, seq & mask]
        s.retx = 1
        fl.retransmits += 1
    else:
        seq = fl.snd_nxt
        fl.snd_nxt += 1
        s = segs[f, seq & mask]
        s.retx = 0
    if fl.inflight == 0:
        fl.first_sent_ns = now
        fl.delivered_ns = now
        fl.last_progress_ns = now
    xmit = fl.xmit_next
    fl.xmit_next += 1
    s.state = SEG_INFLIGHT
    s.xmit = xmit
    s.send_ns = now
    s.del_at_send = fl.delivered
    s.del_ns_at_send = fl.delivered_ns
    s.first_ns_at_send = fl.first_sent_ns
    fl.inflight += 1
    fl.segs_sent += 1
    txq[f, fl.tx_tail & mask] = seq
    txx[f, fl.tx_tail & mask] = xmit
    fl.tx_tail += 1
    link_enqueue_kernel(p, ring, rng, f, seq, xmit, fl.mss, now)
    if fl.cca == 1:
        rate = bbr[f].pacing_gain * bbr[f].btlbw
        gap = int(math.ceil(fl.mss * 8.0 * 1e9 / rate)) if rate > 0.0 else 0
        base = now if now > fl.next_send_ns else fl.next_send_ns
        fl.next_send_ns = base + gap


@numba.njit(cache=True)
def _deliver(l, now, flows, rcv, mask, p, ring, rp, racks):
    idx = pop_delivery(p, ring)
    e = ring[idx]
    f = e.flow
    fl = flows[f]
    seq = e.seq
    if seq >= fl.rcv_nxt and seq < fl.rcv_nxt + mask + 1:
        rcv[f, seq & mask] = 1
        while rcv[f, fl.rcv_nxt & mask] == 1:
            rcv[f, fl.rcv_nxt & mask] = 0
            fl.rcv_nxt += 1
    link_ack_kernel(rp, racks, f, seq, e.xmit, fl.rcv_nxt, e.payload, e.enq_ns, now)


@numba.njit(cache=True)
def run_network(until, clock, nflows, flows, cub, bbr, segs, txq, txx, sus, susx, susat, rtx, rcv,
                p0, ring0, acks0, rng0, p1, ring1, acks1, rng1):
    """Advance every flow and both links to ``until`` (ns)."""
    mask = segs.shape[1] - 1
    now = clock[0]
    while True:
        tmin = _I64_MAX
        kind = 0
        who = -1
        t = next_delivery_ns(p0, ring0)
        if t < tmin:
            tmin, kind = t, 1
        t = next_delivery_ns(p1, ring1)
        if t < tmin:
            tmin, kind = t, 2
        t = next_ack_ns(p0, acks0)
        if t < tmin:
            tmin, kind = t, 3
        t = next_ack_ns(p1, acks1)
        if t < tmin:
            tmin, kind = t, 4
        for f in range(nflows):
            fl = flows[f]
            if fl.active == 0:
                continue
            if fl.inflight > 0:
                t = fl.last_progress_ns + _rto_ns(fl)
                if t < tmin:
                    tmin, kind, who = t, 5, f
            if _can_send(fl, segs, rtx, f, mask):
                t = fl.start_ns
                if fl.cca == 1 and fl.next_send_ns > t:
                    t = fl.next_send_ns
                if t < now:
                    t = now
                if t < tmin:
                    tmin, kind, who = t, 6, f
        if tmin > until:
            break
        now = tmin
        if kind == 1:
            _deliver(0, now, flows, rcv, mask, p0, ring0, p1, acks1)
        elif kind == 2:
            _deliver(1, now, flows, rcv, mask, p1, ring1, p0, acks0)
        elif kind == 3 or kind == 4:
            if kind == 3:
                a = acks0[p0.ack_head & (acks0.shape[0] - 1)]
                p0.ack_head += 1
            else:
                a = acks1[p1.ack_head & (acks1.shape[0] - 1)]
                p1.ack_head += 1
            _on_ack(a.flow, a.seq, a.xmit, now, flows, cub, bbr, segs, txq, txx, sus, susx,
                    susat, rtx, mask)
        elif kind == 5:
            _on_rto(who, now, flows, cub, bbr, segs, rtx, mask)
        else:
            if flows[who].dir == DOWN:
                _send_one(who, now, flows, bbr, segs, txq, txx, rtx, mask, p0, ring0, rng0)
            else:
                _send_one(who, now, flows, bbr, segs, txq, txx, rtx, mask, p1, ring1, rng1)
    clock[0] = until
    p0.clock_ns = until
    p1.clock_ns = until


# --- Python-facing objects ------------------------------------------------------

@dataclass
class Counters:
    """Counter snapshot for one connection at one instant."""
    t_s: float
    bytes_written_app: int
    bytes_acked: int
    bytes_received: int
    srtt_s: float


class SimNetwork:
    """A household-style access link: one downlink and one uplink."""

    def __init__(self, down: LinkSpec | LinkState, up: LinkSpec | LinkState | None = None,
                 max_flows=12):
        self.down = down if isinstance(down, LinkState) else LinkState(down)
        if up is None:
            up = replace(self.down.spec, seed=(self.down.spec.seed + 1) % 2**64)
        self.up = up if isinstance(up, LinkState) else LinkState(up)
        self.links = (self.down, self.up)
        self._clock = np.zeros(1, dtype=np.int64)
        self._clock[0] = max(self.down.clock_ns, self.up.clock_ns)
        self._nflows = 0
        self._width = 0
        self._alloc(max_flows, 1 << 10)
        self.connections = []
        for link, other in ((self.down, self.up), (self.up, self.down)):
            # ACKs for data on ``other`` ride ``link`` as pure delay
            link.ensure_ack_capacity(other.inflight_bound(other.spec.mss) + link.inflight_bound(
                other.spec.mss))

    def _alloc(self, nmax, width):
        old = getattr(self, "_flows", None)
        flows = np.zeros(nmax, dtype=FLOW_DT)
        cub = np.zeros(nmax, dtype=CUB_DT)
        bbr = np.zeros(nmax, dtype=BBR_DT)
        segs = np.zeros((nmax, width), dtype=SEG_DT)
        fifos = [np.zeros((nmax, width), dtype=np.int64) for _ in range(6)]
        rcv = np.zeros((nmax, width), dtype=np.int64)
        if old is not None:
            n = self._nflows
            flows[:n] = self._flows[:n]
            cub[:n] = self._cub[:n]
            bbr[:n] = self._bbr[:n]
            old_mask = self._width - 1
            new_mask = width - 1
            for f in range(n):
                _rehome(self._segs[f], segs[f], old_mask, new_mask, self._flows[f])
                for src, dst in zip(self._fifos, fifos):
                    _rehome_fifo(src[f], dst[f], old_mask, new_mask)
                for seq in range(int(self._flows[f]["rcv_nxt"]),
                                 int(self._flows[f]["rcv_nxt"]) + self._width):
                    rcv[f, seq & new_mask] = self._rcv[f, seq & old_mask]
        self._flows, self._cub, self._bbr, self._segs, self._rcv = flows, cub, bbr, segs, rcv
        self._fifos = fifos
        self._width = width

    @property
    def now(self):
        return int(self._clock[0]) / NS_PER_S

    @property
    def now_ns(self):
        return int(self._clock[0])

    def open(self, cca=CongestionAlgo.BBR, direction=Direction.DOWN, seed=0,
             send_buffer_bytes=DEFAULT_SEND_BUFFER, handshake=True) -> "Connection":
        cca = CongestionAlgo.parse(cca)
        direction = Direction.parse(direction)
        fwd = self.links[direction.index]
        rev = self.links[1 - direction.index]
        mss = fwd.spec.mss
        buf_segs = max(1, int(send_buffer_bytes) // mss)
        width = 1 << max(10, int(2 * buf_segs + 16 - 1).bit_length())
        nmax = self._flows.shape[0]
        if self._nflows >= nmax or width > self._width:
            self._alloc(max(nmax, self._nflows + 4) if self._nflows < nmax else 2 * nmax,
                        max(width, self._width))
        f = self._nflows
        self._nflows += 1
        now = self.now_ns
        rec = self._flows[f]
        rec["used"] = 1
        rec["active"] = 1
        rec["dir"] = direction.index
        rec["cca"] = 0 if cca is CongestionAlgo.CUBIC else 1
        rec["mss"] = mss
        rec["buf_segs"] = buf_segs
        rec["cwnd"] = float(INITIAL_CWND)
        rec["recovery_seq"] = 0
        prop_rtt = (int(fwd._p[0]["owd_ns"]) + int(rev._p[0]["owd_ns"])
                    + int(serialization_ns(mss, int(fwd._p[0]["cap_bps"]))))
        start = now + (prop_rtt if handshake else 0)
        rec["start_ns"] = start
        rec["next_send_ns"] = start
        rec["srtt_ns"] = float(prop_rtt)
        cstate = self._cub[f]
        cstate["cwnd"] = float(INITIAL_CWND)
        cstate["ssthresh"] = np.inf
        cstate["epoch_ns"] = -1
        init_bw = INITIAL_CWND * mss * 8.0 * NS_PER_S / max(prop_rtt, 1)
        rng = np.random.default_rng([seed % 2**63, f])
        cycle_start = int(rng.choice([0, 2, 3, 4, 5, 6, 7]))
        _bbr_init(self._bbr[f], init_bw, prop_rtt, start, cycle_start)
        conn = Connection(self, f, cca, direction, now / NS_PER_S, send_buffer_bytes)
        self.connections.append(conn)
        return conn

    def close(self, conn, abort=False):
        """Stop writing; data already written drains like a kernel socket close.

        ``abort`` models a reset: nothing more is sent, unsent data is dropped
        (packets already on the wire still arrive).
        """
        rec = self._flows[conn.flow_id]
        if abort:
            rec["active"] = 0
        elif rec["active"] == 1:
            rec["active"] = 2 if rec["snd_una"] < rec["written_segs"] else 0

    def run_until(self, t_s):
        until = s_to_ns(t_s)
        if until < self.now_ns:
            raise ValueError(f"cannot run backwards: {t_s} s < {self.now} s")
        d, u = self.down, self.up
        fi = self._fifos
        run_network(until, self._clock, self._nflows, self._flows, self._cub, self._bbr,
                    self._segs, fi[0], fi[1], fi[2], fi[3], fi[4], fi[5], self._rcv,
                    d._p[0], d._ring, d._acks, d._rng, u._p[0], u._ring, u._acks, u._rng)

    def flow_record(self, flow_id):
        return self._flows[flow_id]


def _rehome(src, dst, old_mask, new_mask, fl):
    for seq in range(int(fl["snd_una"]), int(fl["snd_nxt"])):
        dst[seq & new_mask] = src[seq & old_mask]


def _rehome_fifo(src, dst, old_mask, new_mask):
    # FIFOs are indexed by monotone counters; copy the whole window.
    for i in range(old_mask + 1):
        dst[i & new_mask] = src[i & old_mask]


@dataclass
class Connection:
    net: SimNetwork
    flow_id: int
    cca: CongestionAlgo
    direction: Direction
    open_time_s: float
    send_buffer_bytes: int
    rtt_samples: list = field(default_factory=list)

    @property
    def _rec(self):
        return self.net._flows[self.flow_id]

    @property
    def bytes_written_app(self):
        r = self._rec
        return int(r["written_segs"]) * int(r["mss"])

    @property
    def bytes_acked(self):
        r = self._rec
        return int(r["snd_una"]) * int(r["mss"])

    @property
    def bytes_received(self):
        r = self._rec
        return int(r["rcv_nxt"]) * int(r["mss"])

    @property
    def srtt_s(self):
        return float(self._rec["srtt_ns"]) / NS_PER_S

    @property
    def cwnd_segments(self):
        return float(self._rec["cwnd"])

    @property
    def stats(self):
        r = self._rec
        return {k: int(r[k]) for k in ("segs_sent", "retransmits", "losses", "rto_count",
                                        "inflight", "snd_una", "snd_nxt")}

    @property
    def cubic_state(self) -> CubicState:
        c = self.net._cub[self.flow_id]
        epoch = int(c["epoch_ns"])
        return CubicState(float(c["w_max"]), float(c["cwnd"]),
                          None if epoch < 0 else epoch / NS_PER_S, float(c["ssthresh"]))

    @property
    def bbr_state(self) -> BbrState:
        return _bbr_from_record(self.net._bbr[self.flow_id])

    def snapshot(self) -> Counters:
        c = Counters(self.net.now, self.bytes_written_app, self.bytes_acked,
                     self.bytes_received, self.srtt_s)
        self.rtt_samples.append((c.t_s, c.srtt_s))
        return c

    def close(self, abort=False):
        self.net.close(self, abort)


def connection_open(link_pair, cca=CongestionAlgo.BBR, seed=0, direction=Direction.DOWN,
                    send_buffer_bytes=DEFAULT_SEND_BUFFER) -> Connection:
    """Open a flow on ``link_pair``: a SimNetwork or a (down, up) LinkState pair."""
    net = link_pair if isinstance(link_pair, SimNetwork) else _network_for(link_pair)
    return net.open(cca=cca, direction=direction, seed=seed, send_buffer_bytes=send_buffer_bytes)


_NETWORKS = {}


def _network_for(pair):
    down, up = pair
    key = (id(down), id(up))
    net = _NETWORKS.get(key)
    if net is None or net.down is not down:
        net = SimNetwork(down, up)
        _NETWORKS[key] = net
    return net


def connection_drive(conn: Connection, until) -> Counters:
    """Run the connection's network to ``until`` seconds and snapshot it."""
    if until < conn.net.now:
        raise ValueError(f"until={until} is before the network clock {conn.net.now}")
    conn.net.run_until(until)
    return conn.snapshot()


class SimProvider:
    """Connection provider for the speed-test engines backed by a SimNetwork.

    Download senders model the server's kernel send buffer; upload senders the
    client's 1 MB write granularity.
    """

    def __init__(self, network: SimNetwork, cca=CongestionAlgo.BBR, seed=0,
                 down_send_buffer=4 << 20, up_send_buffer=DEFAULT_SEND_BUFFER):
        self.net = network
        self.cca = CongestionAlgo.parse(cca)
        self.seed = seed
        self.send_buffer = {Direction.DOWN: down_send_buffer, Direction.UP: up_send_buffer}
        self._opened = 0

    def now(self):
        return self.net.now

    def open(self, direction):
        direction = Direction.parse(direction)
        self._opened += 1
        return self.net.open(self.cca, direction, seed=self.seed * 1000 + self._opened,
                             send_buffer_bytes=self.send_buffer[direction])

    def advance(self, until_s):
        self.net.run_until(until_s)

    def snapshot(self, conns):
        return [c.snapshot() for c in conns]

    def close(self, conns):
        # a download client closing with unread data resets the server's
        # socket; an upload client's own close drains its buffer
        for c in conns:
            c.close(abort=c.direction is Direction.DOWN)
