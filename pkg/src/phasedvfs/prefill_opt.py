"""Prefill busy-time / energy model and SLO-constrained clock selection.

Energies are reported in joules (W * ms / 1000).  The optimizer is an
exhaustive scan over the frequency grid; the closed-form energy expression is
kept as an independent cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import EmptyBatch
from .gpu_model import GpuProfile, LatencyModel


@dataclass(frozen=True)
class PrefillJob:
    request_id: int
    tokens: int
    deadline_ms: float
    # fraction of reference work still to do (1.0 for queued jobs)
    remaining: float = 1.0


@dataclass(frozen=True)
class PrefillBatch:
    jobs: Sequence[PrefillJob]

    def __len__(self):
        return len(self.jobs)

    def t_ref_total(self, model: LatencyModel) -> float:
        return sum(j.remaining * model.t_ref(j.tokens) for j in self.jobs)


@dataclass(frozen=True)
class SloWindow:
    D: float
    margin_prefill: float = 1.0

    def __post_init__(self):
        if not self.D > 0:
            raise ValueError("D must be positive")
        if not 0.2 <= self.margin_prefill <= 2.0:
            raise ValueError("margin_prefill must lie in [0.2, 2.0]")

    @property
    def budget(self) -> float:
        return self.D * self.margin_prefill


@dataclass(frozen=True)
class EnergyBreakdown:
    total: float
    active: float
    idle: float
    feasible: bool
    busy_ms: float


class _Infeasible:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __bool__(self):
        return False

    def __repr__(self):
        return "Infeasible"


INFEASIBLE = _Infeasible()


@dataclass(frozen=True)
class FrequencyChoice:
    freq: int
    energy_j: float


def busy_time(batch: PrefillBatch, f, model: LatencyModel, grid=None) -> float:
    if not len(batch):
        raise EmptyBatch("busy time of an empty batch")
    if grid is not None:
        grid.validate(f)
    return (model.f_ref / f) * batch.t_ref_total(model)


def _energy(t_ref: float, f, D: float, profile: GpuProfile) -> EnergyBreakdown:
    power = profile.power
    busy = (profile.prefill.f_ref / f) * t_ref
    active = power(f) * busy / 1000.0
    idle = power.p_idle * (D - busy) / 1000.0
    return EnergyBreakdown(active + idle, active, idle, busy <= D, busy)


def energy_total(batch: PrefillBatch, f, D: float, profile: GpuProfile) -> EnergyBreakdown:
    """Active + idle energy of ``batch`` inside an SLO window of ``D`` ms at clock ``f``.

    When the work does not fit in the window the result is flagged infeasible;
    the energies are still reported for diagnostics.
    """
    profile.grid.validate(f)
    if not D > 0:
        raise ValueError("D must be positive")
    return _energy(batch.t_ref_total(profile.prefill), f, D, profile)


def energy_total_closed_form(t_ref: float, f, D: float, profile: GpuProfile) -> float:
    """Total window energy (J) expanded in powers of f; used to cross-check ``energy_total``."""
    p = profile.power
    f_ref = profile.prefill.f_ref
    return (
        f_ref * t_ref * (p.k3 * f * f + p.k2 * f + p.k1 + p.k0 / f)
        + p.p_idle * (D - f_ref / f * t_ref)
    ) / 1000.0


def select_frequency(batch: PrefillBatch, D: float, profile: GpuProfile):
    """Energy-minimal grid clock with ``busy(f) <= D``; ties go to the lower clock.

    Returns a :class:`FrequencyChoice`, or ``INFEASIBLE`` when even ``f_max``
    cannot finish the batch inside ``D``.  ``D`` may be ``math.inf``; the
    f-independent idle term is then dropped from the comparison.
    """
    if not D > 0:
        raise ValueError("D must be positive")
    t_ref = batch.t_ref_total(profile.prefill)
    return _select(t_ref, D, profile)


def _select(t_ref: float, D: float, profile: GpuProfile):
    power = profile.power
    f_ref = profile.prefill.f_ref
    unbounded = math.isinf(D)
    best_f, best_e = None, math.inf
    for f in profile.grid.freqs:
        busy = (f_ref / f) * t_ref
        if busy > D:
            continue
        if unbounded:
            e = (power(f) - power.p_idle) * busy / 1000.0
        else:
            e = power(f) * busy / 1000.0 + power.p_idle * (D - busy) / 1000.0
        if e < best_e:
            best_f, best_e = f, e
    if best_f is None:
        return INFEASIBLE
    return FrequencyChoice(best_f, math.inf if unbounded else best_e)


# --------------------------------------------------------------------------
# runtime policy


@dataclass(frozen=True)
class PrefillOptConfig:
    resolve_period_ms: float = 100.0
    margin_prefill: float = 1.0
    # D is clamped below at this budget; defaults to one re-solve period
    min_budget_ms: float | None = None

    def __post_init__(self):
        if not self.resolve_period_ms > 0:
            raise ValueError("resolve_period_ms must be positive")
        if not 0.2 <= self.margin_prefill <= 2.0:
            raise ValueError("margin_prefill must lie in [0.2, 2.0]")

    @property
    def budget_floor(self) -> float:
        return self.resolve_period_ms if self.min_budget_ms is None else self.min_budget_ms


@dataclass
class QueueSnapshot:
    now: float
    # class id -> queued + in-flight jobs (in-flight jobs carry their remaining fraction)
    jobs: Mapping[int, Sequence[PrefillJob]] = field(default_factory=dict)
    # class id -> number of workers serving that class
    servers: Mapping[int, int] = field(default_factory=dict)


def queue_optimizer_tick(snapshot: QueueSnapshot, cfg: PrefillOptConfig, profile: GpuProfile) -> dict[int, int]:
    """One re-solve of the prefill optimizer; returns class id -> commanded MHz.

    Classes with no pending work get no command (their clock is held).
    """
    commands = {}
    for cls_id in sorted(snapshot.jobs):
        jobs = snapshot.jobs[cls_id]
        if not jobs:
            continue
        slack = min(j.deadline_ms for j in jobs) - snapshot.now
        if slack <= 0:
            # a job is already late: run flat out
            commands[cls_id] = profile.grid.f_max
            continue
        D = max(cfg.margin_prefill * slack, cfg.budget_floor)
        servers = max(1, snapshot.servers.get(cls_id, 1))
        t_ref = PrefillBatch(jobs).t_ref_total(profile.prefill) / servers
        choice = _select(t_ref, D, profile)
        commands[cls_id] = profile.grid.f_max if choice is INFEASIBLE else choice.freq
    return commands
