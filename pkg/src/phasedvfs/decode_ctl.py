"""Dual-loop decode clock controller.

A coarse loop maps the measured token rate onto a static TPS-bucket ->
frequency-band table (with hysteresis), a fine loop nudges the clock inside
the band against the P95 time-between-tokens, and a slow loop shifts a
bucket's optimal clock when the fine loop keeps pinning against one edge.

One controller instance drives one decode worker.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

from .gpu_model import GpuProfile, steady_state_step
from .metrics import quantile

LOG_FIELDS = ("tick_ms", "worker", "tps", "p95_tbt_ms", "bucket", "band_lo", "band_hi", "command_mhz", "action")


@dataclass(frozen=True)
class DecodeCtlConfig:
    fine_period_ms: float = 20.0
    coarse_period_ms: float = 200.0
    adapt_period_s: float = 6.0
    step_mhz: int = 15
    max_step_mhz: int = 30
    hysteresis_count: int = 3
    bias_threshold: float = 0.8
    tbt_window_tokens: int = 256
    tps_window_ms: float = 200.0
    up_margin: float = 1.0
    down_margin: float = 0.65
    # per-worker TPS levels (tokens/s); pool levels 200..3000 over 4 workers
    tps_levels: tuple[float, ...] = tuple(float(x) for x in range(50, 751, 50))

    def __post_init__(self):
        if self.step_mhz <= 0 or self.step_mhz > self.max_step_mhz:
            raise ValueError("need 0 < step_mhz <= max_step_mhz")
        if self.max_step_mhz > 30:
            raise ValueError("max_step_mhz may not exceed 30")
        if self.hysteresis_count < 1:
            raise ValueError("hysteresis_count must be >= 1")
        if not 0 < self.bias_threshold <= 1:
            raise ValueError("bias_threshold must lie in (0, 1]")
        if list(self.tps_levels) != sorted(set(self.tps_levels)) or not self.tps_levels:
            raise ValueError("tps_levels must be strictly ascending")
        if not 0 < self.down_margin < self.up_margin:
            raise ValueError("need 0 < down_margin < up_margin")


# --------------------------------------------------------------------------
# telemetry windows


class TpsWindow:
    """Token rate over a sliding window.

    Each decode step's tokens are spread uniformly over the step's duration,
    so the estimate does not jump by a whole batch whenever a step boundary
    crosses the window edge.
    """

    def __init__(self, span_ms: float = 200.0):
        self.span = span_ms
        self.steps: deque = deque()  # (start, end, tokens)

    def add_step(self, start: float, end: float, tokens: int) -> None:
        self.steps.append((start, end, tokens))

    def tps(self, end: float, partial: tuple | None = None) -> float:
        """Rate over (end - span, end]; ``partial`` is an in-flight (start, end, tokens) step."""
        lo = end - self.span
        while self.steps and self.steps[0][1] <= lo:
            self.steps.popleft()
        total = 0.0
        steps = list(self.steps) + ([partial] if partial else [])
        for s, e, n in steps:
            if e <= s:
                if lo < e <= end:
                    total += n
                continue
            overlap = min(e, end) - max(s, lo)
            if overlap > 0:
                total += n * overlap / (e - s)
        return total * 1000.0 / self.span


class TbtWindow:
    """Last ``capacity`` token intervals with a cached nearest-rank P95."""

    def __init__(self, capacity: int = 256):
        self.buf: deque = deque(maxlen=capacity)
        self._version = 0
        self._cache = (-1, None)

    def add(self, interval_ms: float) -> None:
        self.buf.append(interval_ms)
        self._version += 1

    def extend(self, intervals: Sequence[float]) -> None:
        self.buf.extend(intervals)
        self._version += 1

    def __len__(self):
        return len(self.buf)

    def p95(self):
        if not self.buf:
            return None
        if self._cache[0] != self._version:
            self._cache = (self._version, quantile(list(self.buf), 0.95))
        return self._cache[1]


# --------------------------------------------------------------------------
# band table


@dataclass
class Bucket:
    tps_lo: float
    tps_hi: float
    f_opt: int


@dataclass
class FreqBandTable:
    buckets: list[Bucket]
    step: int
    f_min: int
    f_max: int
    diagnostics: list[str] = field(default_factory=list)

    def bucket_of(self, tps: float) -> int:
        """Bucket index; intervals are (lo, hi] so a boundary value goes to the lower bucket."""
        edges = [b.tps_hi for b in self.buckets[:-1]]
        return bisect_left(edges, tps)

    def band(self, idx: int) -> tuple[int, int, int]:
        f = self.buckets[idx].f_opt
        return max(self.f_min, f - self.step), f, min(self.f_max, f + self.step)

    def shift(self, idx: int, direction: int) -> None:
        b = self.buckets[idx]
        b.f_opt = min(self.f_max, max(self.f_min, b.f_opt + direction * self.step))

    def copy(self) -> "FreqBandTable":
        return FreqBandTable([replace(b) for b in self.buckets], self.step, self.f_min, self.f_max,
                             list(self.diagnostics))

    def f_opts(self) -> list[int]:
        return [b.f_opt for b in self.buckets]


def decode_energy_at_load(profile: GpuProfile, tps: float, f: int, max_batch: float = math.inf):
    """Steady-state (step_ms, mJ per token) of one decode worker at offered ``tps``; None if unsustainable.

    Below one stream of concurrency the worker idles between steps at idle
    power, so the energy per token includes that idle share.
    """
    if tps <= 0:
        return None
    step = steady_state_step(profile.decode, tps, f, max_batch)
    if step is None:
        return None
    duty = min(1.0, tps / 1000.0 * step)  # = batch / batch when saturated
    power = profile.power(f) * duty + profile.power.p_idle * (1.0 - duty)
    return step, power * 1000.0 / tps


def build_band_table(profile: GpuProfile, tps_levels: Sequence[float], t_slo: float,
                     max_batch: float = math.inf, step_mhz: int | None = None) -> FreqBandTable:
    """Per-bucket energy-optimal clock subject to the steady-state TBT limit.

    Buckets are centred on ``tps_levels`` with midpoint boundaries; each
    bucket is evaluated at its upper edge (the last bucket at one half-spacing
    above its level) so the chosen clock covers the whole bucket.
    """
    levels = [float(x) for x in tps_levels]
    if not levels or levels != sorted(set(levels)) or levels[0] <= 0:
        raise ValueError("tps_levels must be positive and strictly ascending")
    grid = profile.grid
    step_mhz = grid.step if step_mhz is None else step_mhz
    mids = [(a + b) / 2.0 for a, b in zip(levels, levels[1:])]
    half_last = (levels[-1] - levels[-2]) / 2.0 if len(levels) > 1 else levels[0] / 2.0
    los = [0.0] + mids
    his = mids + [levels[-1] + half_last]
    buckets, diags = [], []
    for i, (lo, hi) in enumerate(zip(los, his)):
        best, best_e = None, math.inf
        for f in grid.freqs:
            res = decode_energy_at_load(profile, hi, f, max_batch)
            if res is None or res[0] > t_slo:
                continue
            if res[1] < best_e:
                best, best_e = f, res[1]
        if best is None:
            diags.append(f"bucket {i} ({lo:g}-{hi:g} tok/s): TBT limit {t_slo:g} ms unmeetable; using f_max")
            best = grid.f_max
        buckets.append(Bucket(lo, math.inf if i == len(levels) - 1 else hi, best))
    return FreqBandTable(buckets, step_mhz, grid.f_min, grid.f_max, diags)


# --------------------------------------------------------------------------
# controller state machine


@dataclass
class ControllerState:
    worker: int
    current_bucket: int
    target_band: tuple[int, int]
    band: tuple[int, int]
    set_point: int
    t_slo: float = 100.0
    margin_decode: float = 1.0
    pending_bucket: int | None = None
    consecutive_count: int = 0
    last_tps: float = 0.0
    adjustment_log: list = field(default_factory=list)  # (tick, direction, hit_bound)


def initial_state(worker: int, table: FreqBandTable, t_slo: float = 100.0, margin_decode: float = 1.0,
                  bucket: int = 0) -> ControllerState:
    lo, mid, hi = table.band(bucket)
    return ControllerState(worker, bucket, (lo, hi), (lo, hi), mid, t_slo, margin_decode)


def _toward(x: int, target: int, s: int) -> int:
    return min(target, x + s) if target > x else max(target, x - s)


def coarse_tick(state: ControllerState, table: FreqBandTable, now: float, tps: float, cfg: DecodeCtlConfig):
    """Hysteresis step on the measured TPS; returns a decision-log row."""
    state.last_tps = tps
    b = table.bucket_of(tps)
    if b == state.current_bucket:
        state.pending_bucket, state.consecutive_count = None, 0
        action = "coarse_hold"
    else:
        if b == state.pending_bucket:
            state.consecutive_count += 1
        else:
            state.pending_bucket, state.consecutive_count = b, 1
        if state.consecutive_count >= cfg.hysteresis_count:
            state.current_bucket = b
            lo, _, hi = table.band(b)
            state.target_band = (lo, hi)
            state.pending_bucket, state.consecutive_count = None, 0
            action = "coarse_commit"
        else:
            action = "coarse_pending"
    return (now, state.worker, tps, None, b, state.band[0], state.band[1], state.set_point, action)


def fine_tick(state: ControllerState, now: float, p95, cfg: DecodeCtlConfig):
    """One fine-loop decision; returns (command MHz, decision-log row).

    The active band slews toward the committed band by at most one step per
    tick, which keeps every command inside the active band while honouring
    the per-tick rate limit.
    """
    s = cfg.step_mhz
    lo = _toward(state.band[0], state.target_band[0], s)
    hi = _toward(state.band[1], state.target_band[1], s)
    state.band = (lo, hi)
    p = state.set_point
    if p95 is None:
        direction, action = 0, "fine_nodata"
    else:
        margin = p95 / (state.margin_decode * state.t_slo)
        if margin > cfg.up_margin:
            direction, action = 1, "fine_up"
        elif margin < cfg.down_margin:
            direction, action = -1, "fine_down"
        else:
            direction, action = 0, "fine_hold"
    wanted = p + direction * s
    allowed_lo, allowed_hi = max(lo, p - s), min(hi, p + s)
    cmd = min(allowed_hi, max(allowed_lo, wanted))
    hit = (direction > 0 and wanted > hi) or (direction < 0 and wanted < lo)
    if p95 is not None:
        state.adjustment_log.append((now, direction, hit))
    state.set_point = cmd
    row = (now, state.worker, state.last_tps, p95, state.current_bucket, lo, hi, cmd, action)
    return cmd, row


def band_adapt_tick(state: ControllerState, table: FreqBandTable, now: float, cfg: DecodeCtlConfig):
    """Shift the current bucket's optimal clock on sustained one-sided clamping."""
    moves = [(d, hit) for _, d, hit in state.adjustment_log if d != 0]
    state.adjustment_log.clear()
    action = "adapt_none"
    if moves:
        up = sum(1 for d, hit in moves if d > 0 and hit) / len(moves)
        down = sum(1 for d, hit in moves if d < 0 and hit) / len(moves)
        if up > cfg.bias_threshold:
            table.shift(state.current_bucket, +1)
            action = "adapt_up"
        elif down > cfg.bias_threshold:
            table.shift(state.current_bucket, -1)
            action = "adapt_down"
        if action != "adapt_none":
            lo, _, hi = table.band(state.current_bucket)
            state.target_band = (lo, hi)
    return (now, state.worker, state.last_tps, None, state.current_bucket, state.band[0], state.band[1],
            state.set_point, action)


class DecodeController:
    """Controller instance for one decode worker, owning its telemetry and table copy."""

    def __init__(self, worker: int, table: FreqBandTable, cfg: DecodeCtlConfig, t_slo: float = 100.0,
                 margin_decode: float = 1.0):
        self.cfg = cfg
        self.table = table.copy()
        self.state = initial_state(worker, self.table, t_slo, margin_decode)
        self.tps_window = TpsWindow(cfg.tps_window_ms)
        self.tbt_window = TbtWindow(cfg.tbt_window_tokens)
        self.log: list[tuple] = [
            (0.0, worker, 0.0, None, 0, *self.state.band, self.state.set_point, "init")
        ]

    @property
    def initial_freq(self) -> int:
        return self.state.set_point

    def observe_step(self, start: float, end: float, tokens: int, intervals: Sequence[float]) -> None:
        self.tps_window.add_step(start, end, tokens)
        self.tbt_window.extend(intervals)

    def coarse(self, now: float, partial: tuple | None = None) -> None:
        tps = self.tps_window.tps(now, partial)
        self.log.append(coarse_tick(self.state, self.table, now, tps, self.cfg))

    def fine(self, now: float) -> int:
        cmd, row = fine_tick(self.state, now, self.tbt_window.p95(), self.cfg)
        self.log.append(row)
        return cmd

    def adapt(self, now: float) -> None:
        self.log.append(band_adapt_tick(self.state, self.table, now, self.cfg))
