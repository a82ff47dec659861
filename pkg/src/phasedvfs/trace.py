"""Request/trace data model, CSV ingest, and synthetic workload generators.

Trace CSV schema::

    arrival_ms,prompt_tokens,output_tokens[,class]

``class`` is optional and, when present, must be ``SM`` or ``L`` and agree
with the length router.  Generators are pure functions of their parameters
and seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyTrace, MalformedRow, NonMonotoneArrivals, TraceError
from .router import CLASS_NAMES, RoutingConfig, classify

HEADER = ("arrival_ms", "prompt_tokens", "output_tokens")


@dataclass(frozen=True)
class Request:
    id: int
    arrival_ms: int
    prompt_tokens: int
    output_tokens: int
    cls: int | None = None

    def __post_init__(self):
        if self.arrival_ms < 0:
            raise TraceError(f"request {self.id}: negative arrival time")
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise TraceError(f"request {self.id}: token counts must be >= 1")


@dataclass(frozen=True)
class Trace:
    requests: tuple[Request, ...]
    name: str = "trace"
    duration_ms: int = 0
    qps: float = 0.0

    def __post_init__(self):
        prev = 0
        for r in self.requests:
            if r.arrival_ms < prev:
                raise NonMonotoneArrivals(f"request {r.id} arrives at {r.arrival_ms} < {prev}")
            prev = r.arrival_ms
        if self.requests and self.duration_ms < self.requests[-1].arrival_ms:
            object.__setattr__(self, "duration_ms", self.requests[-1].arrival_ms)

    def __len__(self):
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    @property
    def meta(self) -> dict:
        return {"name": self.name, "duration_ms": self.duration_ms, "qps": self.qps}


def _build(rows, name, duration_ms, qps=None) -> Trace:
    reqs = tuple(Request(i, a, p, o) for i, (a, p, o) in enumerate(rows))
    if qps is None:
        qps = len(reqs) * 1000.0 / duration_ms if duration_ms > 0 else 0.0
    return Trace(reqs, name=name, duration_ms=int(duration_ms), qps=float(qps))


# --------------------------------------------------------------------------
# CSV


def load_trace(path, routing: RoutingConfig | None = None) -> Trace:
    routing = routing or RoutingConfig()
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyTrace(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    has_class = header == [*HEADER, "class"]
    if not has_class and header != list(HEADER):
        raise MalformedRow(f"{path}: bad header {header}")
    if len(rows) == 1:
        raise EmptyTrace(f"{path}: no requests")

    requests = []
    prev = 0
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise MalformedRow(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            arrival, prompt, output = (int(c.strip()) for c in row[:3])
        except ValueError as exc:
            raise MalformedRow(f"{path}:{lineno}: non-numeric field ({exc})") from None
        if arrival < 0:
            raise MalformedRow(f"{path}:{lineno}: negative arrival time")
        if arrival < prev:
            raise NonMonotoneArrivals(f"{path}:{lineno}: arrival {arrival} < previous {prev}")
        prev = arrival
        cls = classify(routing, prompt)
        if has_class:
            label = row[3].strip()
            if label not in CLASS_NAMES:
                raise MalformedRow(f"{path}:{lineno}: unknown class {label!r}")
            if CLASS_NAMES.index(label) != min(cls, len(CLASS_NAMES) - 1):
                raise MalformedRow(f"{path}:{lineno}: class {label} disagrees with prompt length {prompt}")
        try:
            requests.append(Request(len(requests), arrival, prompt, output, cls))
        except TraceError as exc:
            raise MalformedRow(f"{path}:{lineno}: {exc}") from None
    duration = requests[-1].arrival_ms
    return Trace(tuple(requests), name=path.stem, duration_ms=duration,
                 qps=len(requests) * 1000.0 / duration if duration else 0.0)


def save_trace(trace: Trace, path, with_class: bool = False, routing: RoutingConfig | None = None) -> None:
    routing = routing or RoutingConfig()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*HEADER, "class"] if with_class else HEADER)
        for r in trace:
            row = [r.arrival_ms, r.prompt_tokens, r.output_tokens]
            if with_class:
                row.append(CLASS_NAMES[min(classify(routing, r.prompt_tokens), len(CLASS_NAMES) - 1)])
            w.writerow(row)


# --------------------------------------------------------------------------
# load shapes

KINDS = ("poisson_qps", "sinusoid_tps", "constant_tps", "bimodal_length")


@dataclass(frozen=True)
class LoadShape:
    """Parameters of a synthetic load.

    ``rate`` is requests/s for ``poisson_qps`` and decode tokens/s for the TPS
    kinds.  Length ranges are inclusive token ranges sampled uniformly.
    ``bimodal_length`` only describes lengths and is used as the length
    distribution of a Poisson trace.
    """

    kind: str
    rate: float = 1.0
    amplitude: float = 0.0
    period_ms: float = 120_000.0
    short_range: tuple[int, int] = (64, 1024)
    long_range: tuple[int, int] = (2048, 8192)
    long_fraction: float = 0.0
    output_range: tuple[int, int] = (32, 512)
    stream_tokens: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown load shape {self.kind!r}")
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if not 0.0 <= self.long_fraction <= 1.0:
            raise ValueError("mix fraction must lie in [0, 1]")
        if self.kind == "sinusoid_tps":
            if not self.period_ms > 0:
                raise ValueError("sinusoid period must be positive")
            if not self.rate > self.amplitude >= 0:
                raise ValueError("sinusoid requires rate > amplitude >= 0")
        for lo, hi in (self.short_range, self.long_range, self.output_range):
            if not 1 <= lo <= hi:
                raise ValueError(f"bad length range ({lo}, {hi})")

    def sample_lengths(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        is_long = rng.random(n) < self.long_fraction
        short = rng.integers(self.short_range[0], self.short_range[1] + 1, n)
        long_ = rng.integers(self.long_range[0], self.long_range[1] + 1, n)
        out = rng.integers(self.output_range[0], self.output_range[1] + 1, n)
        return np.where(is_long, long_, short), out

    def generate(self, duration_ms: int, seed: int | None = None) -> Trace:
        seed = self.seed if seed is None else seed
        if self.kind in ("poisson_qps", "bimodal_length"):
            return gen_poisson_trace(self.rate, duration_ms, self, seed)
        return gen_sinusoid_decode_trace(
            self.rate, self.amplitude if self.kind == "sinusoid_tps" else 0.0,
            self.period_ms, duration_ms, seed, stream_tokens=self.stream_tokens,
        )


def chat_lengths(long_fraction: float = 0.08) -> LoadShape:
    """Length mix used for the synthetic chat workloads."""
    return LoadShape("bimodal_length", short_range=(64, 1024), long_range=(2048, 8192),
                     long_fraction=long_fraction, output_range=(32, 512))


# --------------------------------------------------------------------------
# generators


def gen_poisson_trace(qps: float, duration_ms: int, length_dist: LoadShape | None = None, seed: int = 0) -> Trace:
    if not qps > 0:
        raise ValueError("qps must be positive")
    length_dist = length_dist or chat_lengths()
    rng = np.random.default_rng(seed)
    mean_gap = 1000.0 / qps
    # draw in chunks until the horizon is passed
    times = []
    t = 0.0
    while True:
        gaps = rng.exponential(mean_gap, size=max(16, int(1.2 * qps * duration_ms / 1000.0) + 16))
        stamps = t + np.cumsum(gaps)
        keep = stamps[stamps < duration_ms]
        times.extend(keep.tolist())
        if len(keep) < len(stamps):
            break
        t = float(stamps[-1])
    n = len(times)
    prompts, outputs = length_dist.sample_lengths(np.random.default_rng([seed, 1]), n)
    rows = [(int(a), int(p), int(o)) for a, p, o in zip(times, prompts, outputs)]
    return _build(rows, f"poisson_{qps:g}qps", duration_ms, qps)


def _paced(lengths: Sequence[int], tps: float, duration_ms: int) -> list[int]:
    """Arrival times (ms) spreading each request's tokens around its arrival.

    Request i arrives when the offered-token credit reaches the midpoint of
    its own token count, so the realized token rate tracks ``tps`` to within
    half a request over any long window.
    """
    out = []
    cum = 0
    for n in lengths:
        t = (cum + n / 2.0) * 1000.0 / tps
        if t >= duration_ms:
            break
        out.append(int(t))
        cum += n
    return out


def gen_prefill_microbench(target_tps: float, prompt_range=(256, 1024), duration_ms: int = 60_000, seed: int = 0) -> Trace:
    """Prompt-token-paced trace of single-output-token requests."""
    lo, hi = prompt_range
    if not 1 <= lo <= hi:
        raise ValueError("prompt range must satisfy 1 <= min <= max")
    if not target_tps > 0:
        raise ValueError("target_tps must be positive")
    rng = np.random.default_rng(seed)
    est = int(target_tps * duration_ms / 1000.0 / lo) + 2
    prompts = rng.integers(lo, hi + 1, est).tolist()
    arrivals = _paced(prompts, target_tps, duration_ms)
    rows = [(a, p, 1) for a, p in zip(arrivals, prompts)]
    return _build(rows, f"prefill_micro_{target_tps:g}tps", duration_ms)


def gen_decode_microbench(target_tps: float, gen_range=(256, 1024), duration_ms: int = 60_000, seed: int = 0,
                          prompt_tokens: int = 32) -> Trace:
    """Decode-token-paced trace of short-prompt streams.

    Stream arrivals are paced by their generated-token budget, so the number
    of concurrently live streams settles wherever the serving clock puts it;
    at the reference clock this gives the target aggregate TPS.
    """
    lo, hi = gen_range
    if not 1 <= lo <= hi:
        raise ValueError("generation range must satisfy 1 <= min <= max")
    if not target_tps > 0:
        raise ValueError("target_tps must be positive")
    rng = np.random.default_rng(seed)
    est = int(target_tps * duration_ms / 1000.0 / lo) + 2
    gens = rng.integers(lo, hi + 1, est).tolist()
    arrivals = _paced(gens, target_tps, duration_ms)
    rows = [(a, prompt_tokens, g) for a, g in zip(arrivals, gens)]
    return _build(rows, f"decode_micro_{target_tps:g}tps", duration_ms)


def gen_sinusoid_decode_trace(tps_mean: float, tps_amplitude: float, period_ms: float, duration_ms: int,
                              seed: int = 0, stream_tokens: int = 128, prompt_tokens: int = 32) -> Trace:
    """Fixed-length streams admitted at rate ``(mean + amp*sin(2*pi*t/period)) / stream_tokens``.

    Arrivals are placed where the integrated admission rate crosses
    ``k + u`` for k = 0, 1, ...; ``u`` is a seeded phase in [0, 1).
    """
    if not tps_mean > tps_amplitude >= 0:
        raise ValueError("requires tps_mean > tps_amplitude >= 0")
    if not period_ms > 0:
        raise ValueError("period must be positive")
    phase = np.random.default_rng(seed).random()
    if duration_ms <= 0:
        return Trace((), name="sinusoid", duration_ms=0)
    t = np.arange(duration_ms + 1, dtype=float)
    w = 2.0 * math.pi / period_ms
    # streams admitted by time t (t in ms, rates in tokens/s)
    admitted = (tps_mean * t + tps_amplitude * (1.0 - np.cos(w * t)) / w) / 1000.0 / stream_tokens
    n = int(admitted[-1] - phase) + 1 if admitted[-1] >= phase else 0
    targets = np.arange(n) + phase
    arrivals = np.searchsorted(admitted, targets, side="left")
    rows = [(int(a), prompt_tokens, stream_tokens) for a in arrivals if a < duration_ms]
    kind = "sinusoid" if tps_amplitude > 0 else "constant"
    return _build(rows, f"{kind}_{tps_mean:g}tps", duration_ms)


def gen_constant_decode_trace(tps: float, duration_ms: int, seed: int = 0, stream_tokens: int = 128) -> Trace:
    return gen_sinusoid_decode_trace(tps, 0.0, 1.0, duration_ms, seed, stream_tokens=stream_tokens)


def offered_tps(trace: Trace, window_ms: float, duration_ms: float | None = None,
                kind: str = "output") -> tuple[np.ndarray, np.ndarray]:
    """Offered tokens/s in consecutive windows; returns (window centres ms, tps).

    Tokens are counted at arrival.  ``kind`` selects output (decode) or
    prompt tokens.
    """
    duration_ms = trace.duration_ms if duration_ms is None else duration_ms
    nbins = max(1, int(math.ceil(duration_ms / window_ms)))
    tokens = np.zeros(nbins)
    for r in trace:
        idx = int(r.arrival_ms // window_ms)
        if idx < nbins:
            tokens[idx] += r.output_tokens if kind == "output" else r.prompt_tokens
    centres = (np.arange(nbins) + 0.5) * window_ms
    return centres, tokens * 1000.0 / window_ms
