"""Reusable experiment drivers: microbenchmark level sweeps, tracking correlation, margin sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .gpu_model import GpuProfile, steady_state_step
from .metrics import SloConfig, bin_series, pearson, pooled_tbt_quantile, slo_pass_rates, ttft_quantile
from .router import CLASS_NAMES
from .simkernel import GovernorPolicy, NodeConfig, RunResult, policy_by_name, run
from .trace import Trace, gen_decode_microbench, gen_prefill_microbench, offered_tps


def parse_levels(text: str) -> list[float]:
    """``"200:3000:200"`` (inclusive range) or ``"200,400,800"``."""
    text = text.strip()
    if not text:
        raise ValueError("empty level list")
    if ":" in text:
        parts = [float(x) for x in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
            raise ValueError(f"bad range {text!r}; expected start:stop:step")
        lo, hi, st = parts
        n = int(math.floor((hi - lo) / st + 1e-9)) + 1
        return [lo + i * st for i in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


def saturated_level(kind: str, tps: float, profile: GpuProfile, node: NodeConfig,
                    prompt_range=(256, 1024)) -> bool:
    """True when ``tps`` exceeds what the pool can sustain even at f_max."""
    f = profile.grid.f_max
    if kind == "decode":
        return steady_state_step(profile.decode, tps / node.n_decode, f, node.max_batch) is None
    lo, hi = prompt_range
    mean_tokens = (lo + hi) / 2.0
    # reference ms of prefill work offered per ms, spread over the workers
    per_job = float(np.mean([profile.prefill.t_ref(n) for n in range(lo, hi + 1)]))
    load = tps / 1000.0 / mean_tokens * per_job * (profile.prefill.f_ref / f)
    return load >= node.n_prefill


@dataclass(frozen=True)
class MicrobenchRow:
    kind: str
    tps: float
    policy: str
    saturated: bool
    ttft_p90_ms: float
    ttft_p90_sm_ms: float
    ttft_p90_l_ms: float
    tbt_p90_ms: float
    ttft_pct: float
    tbt_pct: float
    energy_j: float
    savings_pct: float


def microbench(kind: str, levels: Sequence[float], policies: Sequence[str], profile: GpuProfile,
               duration_ms: int = 60_000, seed: int = 0, slo: SloConfig | None = None,
               node: NodeConfig | None = None, prompt_range=(256, 1024)) -> list[MicrobenchRow]:
    """Run the prefill or decode microbenchmark across TPS levels and policies.

    Energy is the pool under test; savings are relative to the first policy
    at the same level.
    """
    if kind not in ("prefill", "decode"):
        raise ValueError("kind must be 'prefill' or 'decode'")
    slo = slo or SloConfig()
    node = node or NodeConfig()
    pols = [policy_by_name(p) for p in policies]
    rows = []
    for tps in levels:
        if kind == "prefill":
            trace = gen_prefill_microbench(tps, prompt_range, duration_ms, seed)
        else:
            trace = gen_decode_microbench(tps, (256, 1024), duration_ms, seed)
        sat = saturated_level(kind, tps, profile, node, prompt_range)
        base_e = None
        for pol in pols:
            res = run(trace, profile, pol, seed, slo, node)
            e = res.energy[f"{kind}_j"]
            base_e = e if base_e is None else base_e
            ttft, tbt = slo_pass_rates(res, slo)
            unfinished = any(d.startswith("overload") for d in res.diagnostics)
            rows.append(MicrobenchRow(
                kind, float(tps), pol.name, sat or unfinished,
                ttft_quantile(res, 0.9), ttft_quantile(res, 0.9, 0), ttft_quantile(res, 0.9, 1),
                pooled_tbt_quantile(res, 0.9), ttft, tbt, e, 100.0 * (1.0 - e / base_e),
            ))
    return rows


def tracking_correlation(res: RunResult, trace: Trace, bin_ms: float = 5000.0, warmup_ms: float = 0.0,
                         until_ms: float | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Pearson correlation between the pool-mean commanded decode clock and offered TPS, in bins."""
    until_ms = trace.duration_ms if until_ms is None else until_ms
    cmds = res.decode_commands()
    series = [bin_series([c[0] for c in v], [c[1] for c in v], until_ms, bin_ms) for _, v in sorted(cmds.items())]
    commanded = np.mean(series, axis=0)
    _, offered = offered_tps(trace, bin_ms, until_ms)
    k = int(warmup_ms // bin_ms)
    return pearson(commanded[k:], offered[k:]), commanded[k:], offered[k:]


@dataclass(frozen=True)
class MarginPoint:
    margin: float
    energy_j: float
    latency_p90_ms: float


def margin_sweep(which: str, margins: Sequence[float], traces: Sequence[Trace], profile: GpuProfile,
                 fixed_margin: float = 0.95, horizon: bool = True, base_slo: SloConfig | None = None,
                 policy: GovernorPolicy | None = None) -> list[MarginPoint]:
    """Seed-averaged pool energy and P90 latency as one margin varies.

    ``which='prefill'`` reports prefill-pool energy and P90 TTFT;
    ``which='decode'`` reports decode-pool energy and pooled P90 TBT.
    With ``horizon`` every run stops at its trace's duration, so all margins
    are charged over the same window instead of their own drain tails.
    """
    if which not in ("prefill", "decode"):
        raise ValueError("which must be 'prefill' or 'decode'")
    base_slo = base_slo or SloConfig()
    policy = policy or policy_by_name("greenllm")
    out = []
    for m in margins:
        if which == "prefill":
            slo = replace(base_slo, margin_prefill=m, margin_decode=fixed_margin)
        else:
            slo = replace(base_slo, margin_prefill=fixed_margin, margin_decode=m)
        energies, lats = [], []
        for seed, trace in enumerate(traces):
            node = NodeConfig(horizon_ms=float(trace.duration_ms) if horizon else None)
            res = run(trace, profile, policy, seed, slo, node)
            energies.append(res.energy[f"{which}_j"])
            lats.append(ttft_quantile(res, 0.9) if which == "prefill" else pooled_tbt_quantile(res, 0.9))
        out.append(MarginPoint(float(m), float(np.mean(energies)), float(np.mean(lats))))
    return out


def ttft_histogram(res: RunResult, bin_ms: float = 50.0) -> list[tuple[str, float, int]]:
    """(class, bin start ms, count) rows of completed-request TTFTs."""
    rows = []
    for cls, name in enumerate(CLASS_NAMES):
        vals = [r.ttft_ms for r in res.requests if r.ttft_ms is not None and r.cls == cls]
        if not vals:
            continue
        counts: dict[int, int] = {}
        for v in vals:
            k = int(v // bin_ms)
            counts[k] = counts.get(k, 0) + 1
        rows.extend((name, k * bin_ms, counts[k]) for k in sorted(counts))
    return rows
