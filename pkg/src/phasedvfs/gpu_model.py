"""Synthetic GPU device model: clock grid, latency/step-time models, power model.

All models are frozen dataclasses; every operation is a pure function of its
arguments.  Units: frequency in MHz, time in ms, power in W.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml

from .errors import (
    NegativeLatencyError,
    OffGridFrequency,
    ProfileError,
    RankDeficientError,
)

_LATENCY_SCALE = 1024.0  # tokens
_FREQ_SCALE = 1000.0  # MHz


@dataclass(frozen=True)
class FrequencyGrid:
    f_min: int = 210
    f_max: int = 1410
    step: int = 15
    f_ref: int = 1410

    def __post_init__(self):
        if not self.f_min < self.f_max:
            raise ProfileError("grid requires f_min < f_max")
        if self.step <= 0:
            raise ProfileError("grid step must be positive")
        if (self.f_max - self.f_min) % self.step:
            raise ProfileError("f_max - f_min must be a multiple of step")
        if not self.contains(self.f_ref):
            raise ProfileError(f"f_ref={self.f_ref} is not on the grid")

    @property
    def freqs(self) -> tuple[int, ...]:
        return tuple(range(self.f_min, self.f_max + 1, self.step))

    def __len__(self):
        return (self.f_max - self.f_min) // self.step + 1

    def contains(self, f) -> bool:
        if f != f or f < self.f_min or f > self.f_max:
            return False
        return float(f - self.f_min) % self.step == 0

    def validate(self, f) -> int:
        if not self.contains(f):
            raise OffGridFrequency(f, self)
        return int(f)

    def index(self, f) -> int:
        return (self.validate(f) - self.f_min) // self.step

    def clamp(self, f) -> int:
        """Nearest grid point at or below ``f``, clipped into [f_min, f_max]."""
        if f <= self.f_min:
            return self.f_min
        if f >= self.f_max:
            return self.f_max
        return self.f_min + int((f - self.f_min) // self.step) * self.step


@dataclass(frozen=True)
class LatencyModel:
    """Prefill latency at the reference clock: ``a*L^2 + b*L + c`` ms."""

    a: float
    b: float
    c: float
    f_ref: int = 1410

    def __post_init__(self):
        if self.a < 0:
            raise ProfileError("latency model requires a >= 0")
        # the quadratic is convex, so positivity on [1, 65536] reduces to the
        # minimum over that interval
        if min_quadratic(self.a, self.b, self.c, 1.0, 65536.0) <= 0:
            raise ProfileError("latency model predicts non-positive latency on [1, 65536]")

    def t_ref(self, tokens) -> float:
        return (self.a * tokens + self.b) * tokens + self.c


@dataclass(frozen=True)
class PowerModel:
    """Active power ``k3 f^3 + k2 f^2 + k1 f + k0`` (W, f in MHz) plus idle power."""

    k3: float
    k2: float
    k1: float
    k0: float
    p_idle: float

    def __call__(self, f) -> float:
        return ((self.k3 * f + self.k2) * f + self.k1) * f + self.k0

    def check(self, grid: FrequencyGrid) -> list[str]:
        """Return the list of invariant violations on ``grid`` (empty when valid)."""
        problems = []
        if not self.p_idle > 0:
            problems.append("p_idle must be positive")
        prev = None
        for f in grid.freqs:
            p = self(f)
            if not p > self.p_idle:
                problems.append(f"P({f}) = {p:.3f} W does not exceed p_idle")
                break
            if prev is not None and not p > prev:
                problems.append(f"P is not strictly increasing at {f} MHz")
                break
            prev = p
        return problems


@dataclass(frozen=True)
class DecodeStepModel:
    """Continuous-batching step time: memory part + compute part scaled by f_ref/f."""

    alpha0: float
    alpha1: float
    beta0: float
    beta1: float
    f_ref: int = 1410

    def __post_init__(self):
        if min(self.alpha0, self.alpha1, self.beta0, self.beta1) < 0:
            raise ProfileError("decode step coefficients must be non-negative")
        if self.alpha0 + self.alpha1 + self.beta0 + self.beta1 <= 0:
            raise ProfileError("decode step time must be positive")


@dataclass(frozen=True)
class GpuProfile:
    grid: FrequencyGrid
    prefill: LatencyModel
    decode: DecodeStepModel
    power: PowerModel
    name: str = "synthetic"

    def __post_init__(self):
        f_ref = self.grid.f_ref
        if self.prefill.f_ref != f_ref or self.decode.f_ref != f_ref:
            raise ProfileError("f_ref differs between grid and sub-models")
        problems = self.power.check(self.grid)
        if problems:
            raise ProfileError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "grid": asdict(self.grid),
            "prefill": {k: v for k, v in asdict(self.prefill).items() if k != "f_ref"},
            "decode": {k: v for k, v in asdict(self.decode).items() if k != "f_ref"},
            "power": asdict(self.power),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GpuProfile":
        try:
            grid = FrequencyGrid(**{k: int(v) for k, v in doc.get("grid", {}).items()})
            prefill = LatencyModel(f_ref=grid.f_ref, **_floats(doc["prefill"], "a", "b", "c"))
            decode = DecodeStepModel(
                f_ref=grid.f_ref, **_floats(doc["decode"], "alpha0", "alpha1", "beta0", "beta1")
            )
            power = PowerModel(**_floats(doc["power"], "k3", "k2", "k1", "k0", "p_idle"))
        except (KeyError, TypeError) as exc:
            raise ProfileError(f"malformed profile document: {exc}") from exc
        return cls(grid, prefill, decode, power, name=str(doc.get("name", "synthetic")))


def _floats(section: dict, *keys) -> dict:
    missing = [k for k in keys if k not in section]
    if missing:
        raise ProfileError(f"missing keys {missing}")
    unknown = set(section) - set(keys)
    if unknown:
        raise ProfileError(f"unknown keys {sorted(unknown)}")
    return {k: float(section[k]) for k in keys}


def min_quadratic(a, b, c, lo, hi) -> float:
    vals = [(a * lo + b) * lo + c, (a * hi + b) * hi + c]
    if a > 0:
        x = -b / (2 * a)
        if lo < x < hi:
            vals.append((a * x + b) * x + c)
    return min(vals)


PROFILE_DIR = Path(__file__).parent / "profiles"
PROFILE_ENV = "PHASEDVFS_PROFILE_DIR"


def load_profile(path) -> GpuProfile:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ProfileError(f"{path}: profile must be a mapping")
    return GpuProfile.from_dict(doc)


def dump_profile(profile: GpuProfile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(profile.to_dict(), fh, sort_keys=False)


def default_profile() -> GpuProfile:
    return load_profile(PROFILE_DIR / "default.profile")


# --------------------------------------------------------------------------
# model evaluation


def prefill_latency(model: LatencyModel, tokens, f, grid: FrequencyGrid | None = None) -> float:
    """Prefill latency of one ``tokens``-long prompt at clock ``f``.

    The reference-clock latency is scaled by ``f_ref / f``.
    """
    if tokens < 1:
        raise ValueError("prompt length must be >= 1")
    _check_freq(f, grid)
    return model.t_ref(tokens) * (model.f_ref / f)


def decode_step_time(model: DecodeStepModel, batch, f, grid: FrequencyGrid | None = None) -> float:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    _check_freq(f, grid)
    return (model.alpha0 + model.alpha1 * batch) + (model.beta0 + model.beta1 * batch) * (model.f_ref / f)


def active_power(model: PowerModel, f, grid: FrequencyGrid | None = None) -> float:
    _check_freq(f, grid)
    return model(f)


def _check_freq(f, grid):
    if grid is None:
        if not f > 0:
            raise OffGridFrequency(f)
    else:
        grid.validate(f)


def decode_energy_per_token(profile: GpuProfile, batch, f) -> float:
    """Active energy per generated token (mJ) at a fixed batch size."""
    return active_power(profile.power, f, profile.grid) * decode_step_time(
        profile.decode, batch, f, profile.grid
    ) / batch


# --------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class LatencyFit:
    model: LatencyModel
    r2: float
    residuals: tuple[float, ...]


@dataclass(frozen=True)
class PowerFit:
    model: PowerModel
    r2: float
    residuals: tuple[float, ...]
    warnings: tuple[str, ...] = field(default=())


def _lstsq(x: np.ndarray, y: np.ndarray, degree: int) -> np.ndarray:
    design = np.vander(x, degree + 1)  # columns: x^d ... x^0
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < degree + 1:
        raise RankDeficientError(f"design matrix has rank {rank} < {degree + 1}")
    return coef


def _r2(y: np.ndarray, pred: np.ndarray) -> float:
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def fit_latency(samples: Iterable[tuple[float, float]], f_ref: int = 1410) -> LatencyFit:
    """Least-squares quadratic of prefill latency (ms at ``f_ref``) in prompt length."""
    pts = np.asarray(list(samples), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or len(np.unique(pts[:, 0])) < 3:
        raise RankDeficientError("need at least 3 distinct prompt lengths")
    L, t = pts[:, 0], pts[:, 1]
    cs = _lstsq(L / _LATENCY_SCALE, t, 2)
    a = cs[0] / _LATENCY_SCALE**2
    b = cs[1] / _LATENCY_SCALE
    c = cs[2]
    if min_quadratic(a, b, c, L.min(), L.max()) <= 0:
        raise NegativeLatencyError("fitted latency is non-positive inside the sampled range")
    pred = (a * L + b) * L + c
    try:
        model = LatencyModel(float(a), float(b), float(c), f_ref=f_ref)
    except ProfileError as exc:
        raise NegativeLatencyError(str(exc)) from exc
    return LatencyFit(model, _r2(t, pred), tuple(float(r) for r in t - pred))


def fit_power(
    samples: Iterable[tuple[float, float]],
    p_idle: float,
    grid: FrequencyGrid | None = None,
) -> PowerFit:
    """Least-squares cubic of active power (W) in SM clock (MHz).

    ``p_idle`` is measured separately and stored as-is.  Monotonicity on the
    grid is checked and reported as a warning, not an error.
    """
    pts = np.asarray(list(samples), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 4 or len(np.unique(pts[:, 0])) < 4:
        raise RankDeficientError("need at least 4 distinct frequencies")
    f, p = pts[:, 0], pts[:, 1]
    cs = _lstsq(f / _FREQ_SCALE, p, 3)
    model = PowerModel(
        k3=float(cs[0] / _FREQ_SCALE**3),
        k2=float(cs[1] / _FREQ_SCALE**2),
        k1=float(cs[2] / _FREQ_SCALE),
        k0=float(cs[3]),
        p_idle=float(p_idle),
    )
    pred = np.array([model(x) for x in f])
    notes = tuple(model.check(grid or FrequencyGrid()))
    for msg in notes:
        warnings.warn(f"fitted power model: {msg}", stacklevel=2)
    return PowerFit(model, _r2(p, pred), tuple(float(r) for r in p - pred), notes)


# --------------------------------------------------------------------------
# analytic FLOPs


@dataclass(frozen=True)
class FlopsParams:
    d_model: int
    d_ff: int
    h_q: int
    d_k: int
    batch: int = 1
    alpha_tri: float = 1.0

    def __post_init__(self):
        if min(self.d_model, self.d_ff, self.h_q, self.d_k, self.batch) <= 0:
            raise ValueError("FLOPs parameters must be positive")
        if self.h_q * self.d_k != self.d_model:
            raise ValueError("h_q * d_k must equal d_model")
        if self.alpha_tri not in (0.5, 1.0):
            raise ValueError("alpha_tri must be 0.5 (causal triangle) or 1.0 (full)")

    @property
    def linear_coeff(self) -> float:
        B, d = self.batch, self.d_model
        return 8 * B * d * d + 4 * B * d * self.d_ff

    @property
    def quadratic_coeff(self) -> float:
        return 4 * self.alpha_tri * self.batch * self.h_q * self.d_k


def flops_prefill_per_layer(p: FlopsParams, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return p.linear_coeff * n + p.quadratic_coeff * n * n


def steady_state_step(model: DecodeStepModel, tps: float, f: float, max_batch: float = math.inf):
    """Steady-state decode step time (ms) for one worker sustaining ``tps`` tokens/s.

    With continuous batching the concurrency is ``b = tps * step / 1000``
    (Little's law), so the step time solves a linear fixed point.  Returns
    ``None`` when the load cannot be sustained at ``f`` within ``max_batch``.
    """
    lam = tps / 1000.0
    r = model.f_ref / f
    denom = 1.0 - lam * (model.alpha1 + model.beta1 * r)
    if denom <= 0:
        return None
    # batch is at least one stream whenever load is offered
    step = (model.alpha0 + model.beta0 * r) / denom
    batch = lam * step
    if batch < 1.0:
        step = (model.alpha0 + model.alpha1) + (model.beta0 + model.beta1) * r
        batch = 1.0
    if batch > max_batch:
        return None
    return step

