"""Quantiles, SLO pass rates, energy normalization, controller-log audit, report emission."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MissingBaseline


def quantile(samples: Sequence[float], q: float) -> float:
    """Nearest-rank quantile: ``sorted[ceil(q*N)]`` (1-indexed); q=0 gives the minimum."""
    if len(samples) == 0:
        raise ValueError("quantile of empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    s = sorted(samples)
    k = max(1, math.ceil(q * len(s) - 1e-12))
    return s[k - 1]


@dataclass(frozen=True)
class SloConfig:
    ttft_sm_ms: float = 400.0
    ttft_l_ms: float = 2000.0
    tbt_p95_ms: float = 100.0
    margin_prefill: float = 1.0
    margin_decode: float = 0.9

    def __post_init__(self):
        if min(self.ttft_sm_ms, self.ttft_l_ms, self.tbt_p95_ms) <= 0:
            raise ValueError("SLO limits must be positive")
        for m in (self.margin_prefill, self.margin_decode):
            if not 0.2 <= m <= 2.0:
                raise ValueError("margins must lie in [0.2, 2.0]")

    def ttft_limit(self, cls: int) -> float:
        return self.ttft_sm_ms if cls == 0 else self.ttft_l_ms


def tbt_digest(samples: Sequence[float], limit: float) -> dict:
    if not len(samples):
        return {"count": 0}
    s = sorted(samples)
    return {
        "count": len(s),
        "mean": float(sum(s) / len(s)),
        "p50": quantile(s, 0.5),
        "p90": quantile(s, 0.9),
        "p95": quantile(s, 0.95),
        "p99": quantile(s, 0.99),
        "max": s[-1],
        "within_limit": sum(1 for x in s if x <= limit),
    }


def slo_pass_rates(run, slo: SloConfig, mode: str = "per_request") -> tuple[float, float]:
    """(TTFT pass %, TBT pass %) over completed requests.

    ``per_request``: a request passes TBT when its own P95 interval is within
    the limit.  ``aggregate``: percentage of all token intervals within it.
    Requests without any token interval are left out of the TBT figure.
    """
    done = [r for r in run.requests if r.ttft_ms is not None]
    if not done:
        return 100.0, 100.0
    ttft_ok = sum(1 for r in done if r.ttft_ms <= slo.ttft_limit(r.cls))
    ttft_pct = 100.0 * ttft_ok / len(done)
    if mode == "per_request":
        rated = [r for r in done if r.tbt["count"] > 0]
        ok = sum(1 for r in rated if r.tbt["p95"] <= slo.tbt_p95_ms)
        tbt_pct = 100.0 * ok / len(rated) if rated else 100.0
    elif mode == "aggregate":
        total = sum(r.tbt["count"] for r in done)
        ok = sum(r.tbt.get("within_limit", 0) for r in done)
        tbt_pct = 100.0 * ok / total if total else 100.0
    else:
        raise ValueError(f"unknown TBT mode {mode!r}")
    return ttft_pct, tbt_pct


def ttft_quantile(run, q: float, cls: int | None = None) -> float:
    vals = [r.ttft_ms for r in run.requests if r.ttft_ms is not None and (cls is None or r.cls == cls)]
    return quantile(vals, q) if vals else float("nan")


def pooled_tbt_quantile(run, q: float) -> float:
    vals = [x for r in run.requests for x in r.tbt_samples]
    return quantile(vals, q) if vals else float("nan")


@dataclass(frozen=True)
class ReportRow:
    workload: str
    method: str
    rel_decode_energy: float
    rel_prefill_energy: float
    ttft_pass_pct: float
    tbt_pass_pct: float
    delta_energy_pct: float


def energy_report(runs: Mapping[str, object], baseline: str, slo: SloConfig | None = None,
                  workload: str = "", tbt_mode: str = "per_request") -> list[ReportRow]:
    """Rows normalized to ``baseline``: each pool's energy over the baseline's same pool."""
    if baseline not in runs:
        raise MissingBaseline(baseline)
    slo = slo or SloConfig()
    base = runs[baseline].energy
    rows = []
    for method in [baseline] + sorted(m for m in runs if m != baseline):
        e = runs[method].energy
        ttft, tbt = slo_pass_rates(runs[method], slo, tbt_mode)
        rows.append(ReportRow(
            workload, method,
            e["decode_j"] / base["decode_j"],
            e["prefill_j"] / base["prefill_j"],
            ttft, tbt,
            100.0 * (1.0 - e["total_j"] / base["total_j"]),
        ))
    return rows


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation; 0.0 when either series is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length series of at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(dx @ dy) / (sx * sy)


def bin_series(times: Sequence[float], values: Sequence[float], t_end: float, width: float) -> np.ndarray:
    """Time-weighted mean of a step function (value holds from its timestamp) in bins of ``width``."""
    nbins = int(math.ceil(t_end / width))
    out = np.zeros(nbins)
    times = list(times) + [t_end]
    for i in range(len(values)):
        a, b, v = times[i], min(times[i + 1], t_end), values[i]
        while a < b:
            k = int(a // width)
            edge = min(b, (k + 1) * width)
            out[k] += v * (edge - a)
            a = edge
    return out / width


# --------------------------------------------------------------------------
# controller audit


def audit_decision_log(rows: Iterable[tuple], f_min: int, f_max: int, max_step: int = 30,
                       hysteresis: int = 3) -> list[str]:
    """Check band containment, per-tick rate limit and hysteresis from decision-log rows.

    Returns a list of human-readable violations (empty when clean).
    """
    problems = []
    last_cmd: dict[int, int] = {}
    current: dict[int, int] = {}
    run: dict[int, tuple] = {}
    for row in rows:
        tick, worker, _tps, _p95, bucket, lo, hi, cmd, action = row
        if action == "init":
            current[worker] = bucket
            last_cmd[worker] = cmd
            run[worker] = (None, 0)
            continue
        if action.startswith("fine"):
            if not (f_min <= lo <= cmd <= hi <= f_max):
                problems.append(f"t={tick} w={worker}: command {cmd} outside band [{lo}, {hi}]")
            if worker in last_cmd and abs(cmd - last_cmd[worker]) > max_step:
                problems.append(f"t={tick} w={worker}: step {last_cmd[worker]}->{cmd} exceeds {max_step}")
            last_cmd[worker] = cmd
        elif action.startswith("coarse"):
            cur = current.get(worker, 0)
            prev_b, n = run.get(worker, (None, 0))
            if bucket == cur:
                run[worker] = (None, 0)
                if action != "coarse_hold":
                    problems.append(f"t={tick} w={worker}: {action} while in current bucket")
                continue
            n = n + 1 if bucket == prev_b else 1
            if action == "coarse_commit":
                if n < hysteresis:
                    problems.append(f"t={tick} w={worker}: commit after {n} observations")
                current[worker] = bucket
                run[worker] = (None, 0)
            else:
                run[worker] = (bucket, n)
                if n >= hysteresis:
                    problems.append(f"t={tick} w={worker}: {n} observations without commit")
    return problems


# --------------------------------------------------------------------------
# emission


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    fields = list(ReportRow.__dataclass_fields__)
    w.writerow(fields)
    for r in rows:
        d = asdict(r)
        w.writerow([_fmt(d[k]) for k in fields])
    return buf.getvalue()


def rows_to_text(rows: Sequence[ReportRow]) -> str:
    header = ["workload", "method", "rel_decode", "rel_prefill", "ttft_%", "tbt_%", "dEn_%"]
    body = [[r.workload, r.method, f"{r.rel_decode_energy:.3f}", f"{r.rel_prefill_energy:.3f}",
             f"{r.ttft_pass_pct:.2f}", f"{r.tbt_pass_pct:.2f}", f"{r.delta_energy_pct:.2f}"] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(line, widths)))
             for line in [header] + body]
    return "\n".join(lines) + "\n"


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def write_log_csv(rows: Iterable[tuple], path, fields: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in row])
