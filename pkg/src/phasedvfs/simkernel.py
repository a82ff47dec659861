"""Deterministic discrete-event simulation of a two-pool serving node.

Requests arrive, are routed onto prefill queues, run to completion on a
prefill worker, hand off to the least-loaded decode worker and then emit one
token per continuous-batching step until done.  Every worker carries a clock
that governors change through :func:`Simulator.apply_frequency`, and an
energy ledger that partitions simulated time into active/idle intervals.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .decode_ctl import LOG_FIELDS, DecodeController, DecodeCtlConfig, build_band_table
from .gpu_model import GpuProfile, decode_step_time
from .metrics import SloConfig, slo_pass_rates, tbt_digest
from .prefill_opt import PrefillJob, PrefillOptConfig, QueueSnapshot, queue_optimizer_tick
from .router import RoutingConfig, Router, classify
from .trace import Trace

# event kinds, in tie-break priority order (service before control)
FREQ_APPLIED = 0
PREFILL_DONE = 1
STEP_END = 1
HANDOFF = 1
ARRIVAL = 2
OPTIMIZER = 3
ADAPT = 3
COARSE = 4
FINE = 5

ACTIVE_PREFILL, ACTIVE_DECODE, IDLE = "active-prefill", "active-decode", "idle"


@dataclass(frozen=True)
class NodeConfig:
    n_prefill: int = 2
    n_decode: int = 4
    prefill_gpus: int = 2
    decode_gpus: int = 1
    max_batch: int = 128
    max_queue: int = 100_000
    actuation_delay_ms: float = 5.0
    handoff_delay_ms: float = 0.0
    # simulation stops this long after the last arrival; unfinished work is reported
    drain_limit_ms: float = 600_000.0
    # if set, stop at this absolute time instead of draining (unfinished work is reported)
    horizon_ms: float | None = None
    keep_intervals: bool = False

    def __post_init__(self):
        if self.n_prefill < 1 or self.n_decode < 1:
            raise ValueError("need at least one worker per pool")
        if self.max_batch < 1 or self.max_queue < 1:
            raise ValueError("caps must be >= 1")
        if self.actuation_delay_ms < 0 or self.handoff_delay_ms < 0:
            raise ValueError("delays must be non-negative")


POLICY_KINDS = ("defaultnv", "prefill_split", "greenllm", "fixed")


@dataclass(frozen=True)
class GovernorPolicy:
    kind: str
    freq: int | None = None
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    prefill_opt: PrefillOptConfig = field(default_factory=PrefillOptConfig)
    decode_ctl: DecodeCtlConfig = field(default_factory=DecodeCtlConfig)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy {self.kind!r}")
        if self.kind == "fixed" and self.freq is None:
            raise ValueError("fixed policy needs a frequency")

    @property
    def prefill_dvfs(self) -> bool:
        return self.kind == "greenllm"

    @property
    def decode_dvfs(self) -> bool:
        return self.kind == "greenllm"

    @property
    def name(self) -> str:
        return f"fixed{self.freq}" if self.kind == "fixed" else self.kind


def default_nv() -> GovernorPolicy:
    return GovernorPolicy("defaultnv", routing=RoutingConfig(enabled=False))


def prefill_split() -> GovernorPolicy:
    return GovernorPolicy("prefill_split")


def greenllm(decode_ctl: DecodeCtlConfig | None = None, prefill_opt: PrefillOptConfig | None = None) -> GovernorPolicy:
    return GovernorPolicy("greenllm", decode_ctl=decode_ctl or DecodeCtlConfig(),
                          prefill_opt=prefill_opt or PrefillOptConfig())


def fixed_freq(f: int, routing: bool = False) -> GovernorPolicy:
    return GovernorPolicy("fixed", freq=int(f), routing=RoutingConfig(enabled=routing))


def policy_by_name(name: str) -> GovernorPolicy:
    name = name.lower().replace("-", "_")
    if name in ("defaultnv", "default_nv", "default"):
        return default_nv()
    if name in ("prefill_split", "prefillsplit", "split"):
        return prefill_split()
    if name == "greenllm":
        return greenllm()
    if name.startswith("fixed"):
        return fixed_freq(int(name[5:].strip(":_=")))
    raise ValueError(f"unknown policy {name!r}")


# --------------------------------------------------------------------------
# results


@dataclass
class RequestRecord:
    id: int
    arrival_ms: float
    cls: int
    prompt_tokens: int
    output_tokens: int
    queue: int = -1
    prefill_worker: int = -1
    decode_worker: int = -1
    prefill_start_ms: float | None = None
    prefill_end_ms: float | None = None
    ttft_ms: float | None = None
    completed_ms: float | None = None
    tokens_emitted: int = 0
    rejected: bool = False
    tbt: dict = field(default_factory=lambda: {"count": 0})
    tbt_samples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("tbt_samples")
        return d


@dataclass
class RunResult:
    requests: list[RequestRecord]
    energy: dict
    workers: list[dict]
    decision_log: list[tuple]
    freq_trace: dict
    diagnostics: list[str]
    config: dict
    t_end_ms: float

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "t_end_ms": self.t_end_ms,
            "energy": self.energy,
            "workers": self.workers,
            "diagnostics": self.diagnostics,
            "freq_trace": self.freq_trace,
            "requests": [r.to_dict() for r in self.requests],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def decode_commands(self) -> dict[int, list[tuple[float, int]]]:
        """Per decode worker: (tick, commanded MHz) from the fine loop, or the constant clock."""
        out: dict[int, list] = {}
        for row in self.decision_log:
            if row[8].startswith("fine") or row[8] == "init":
                out.setdefault(row[1], []).append((row[0], row[7]))
        if not out:
            for w in self.workers:
                if w["pool"] == "decode":
                    out[w["id"]] = [(0.0, w["freq_trace"][0][1])]
        return out


# --------------------------------------------------------------------------
# workers and ledger


class _Ledger:
    def __init__(self, keep: bool):
        self.keep = keep
        self.intervals: list = []
        self.seg_start = 0.0
        self.power = 0.0
        self.phase = IDLE
        self.joules = {ACTIVE_PREFILL: 0.0, ACTIVE_DECODE: 0.0, IDLE: 0.0}
        self.time = {ACTIVE_PREFILL: 0.0, ACTIVE_DECODE: 0.0, IDLE: 0.0}

    def switch(self, now: float, power: float, phase: str) -> None:
        if power == self.power and phase == self.phase:
            return
        self.close(now)
        self.power, self.phase = power, phase

    def close(self, now: float) -> None:
        dt = now - self.seg_start
        if dt > 0:
            self.joules[self.phase] += self.power * dt / 1000.0
            self.time[self.phase] += dt
            if self.keep:
                self.intervals.append((self.seg_start, now, self.power, self.phase))
        self.seg_start = now


class _Worker:
    def __init__(self, wid: int, pool: str, freq: int, gpus: int, keep: bool):
        self.id = wid
        self.pool = pool
        self.freq = freq
        self.target = freq  # last commanded clock (may still be in flight)
        self.gpus = gpus
        self.ledger = _Ledger(keep)
        self.freq_trace = [(0.0, freq)]
        # prefill state
        self.job: int | None = None
        self.remaining_ref = 0.0
        self.seg_start = 0.0
        self.version = 0
        # decode state
        self.active: list[int] = []
        self.pending: deque = deque()
        self.stepping = False
        self.step_start = 0.0
        self.step_end = 0.0
        self.step_batch = 0

    @property
    def busy(self) -> bool:
        return self.job is not None if self.pool == "prefill" else self.stepping

    @property
    def load(self) -> int:
        return len(self.active) + len(self.pending)


class Simulator:
    def __init__(self, trace: Trace, profile: GpuProfile, policy: GovernorPolicy, slo: SloConfig | None = None,
                 node: NodeConfig | None = None, seed: int = 0):
        if not len(trace):
            raise ValueError("trace is empty")
        self.trace = trace
        self.profile = profile
        self.policy = policy
        self.slo = slo or SloConfig()
        self.node = node or NodeConfig()
        self.seed = seed
        grid = profile.grid
        node = self.node
        if policy.kind == "fixed":
            grid.validate(policy.freq)
        self.router = Router(policy.routing, node.n_prefill)
        self.events: list = []
        self._seq = 0
        self.now = 0.0
        self.diagnostics: list[str] = []
        self.decision_log: list[tuple] = []

        f0_prefill = policy.freq if policy.kind == "fixed" else grid.f_max
        self.prefill = [_Worker(i, "prefill", f0_prefill, node.prefill_gpus, node.keep_intervals)
                        for i in range(node.n_prefill)]
        self.controllers: list[DecodeController] = []
        if policy.decode_dvfs:
            t_budget = self.slo.tbt_p95_ms * self.slo.margin_decode
            table = build_band_table(profile, policy.decode_ctl.tps_levels, t_budget, node.max_batch,
                                     policy.decode_ctl.step_mhz)
            self.diagnostics.extend(table.diagnostics)
            self.controllers = [DecodeController(node.n_prefill + i, table, policy.decode_ctl,
                                                 self.slo.tbt_p95_ms, self.slo.margin_decode)
                                for i in range(node.n_decode)]
            f0_decode = [c.initial_freq for c in self.controllers]
        else:
            f0_decode = [f0_prefill] * node.n_decode
        self.decode = [_Worker(node.n_prefill + i, "decode", f0_decode[i], node.decode_gpus, node.keep_intervals)
                       for i in range(node.n_decode)]
        for w in self.prefill + self.decode:
            w.ledger.switch(0.0, self._power(w, False), IDLE)

        self.records = [RequestRecord(r.id, float(r.arrival_ms), classify(policy.routing, r.prompt_tokens),
                                      r.prompt_tokens, r.output_tokens) for r in trace]
        self.remaining_tokens = [r.output_tokens for r in trace]
        self.last_emit = [0.0] * len(trace)
        self.done = 0
        self.closed = 0  # completed or rejected
        self.max_pending = 0

    # ---------------------------------------------------------------- events

    def _push(self, t: float, prio: int, kind: str, payload=None) -> None:
        heapq.heappush(self.events, (t, prio, self._seq, kind, payload))
        self._seq += 1

    def _power(self, w: _Worker, active: bool) -> float:
        return (self.profile.power(w.freq) if active else self.profile.power.p_idle) * w.gpus

    def _touch(self, w: _Worker) -> None:
        phase = (ACTIVE_PREFILL if w.pool == "prefill" else ACTIVE_DECODE) if w.busy else IDLE
        w.ledger.switch(self.now, self._power(w, w.busy), phase)

    def apply_frequency(self, w: _Worker, f: int) -> bool:
        """Command clock ``f``; it takes effect after the actuation delay.  Returns False for a no-op."""
        self.profile.grid.validate(f)
        if f == w.target:
            return False
        w.target = f
        self._push(self.now + self.node.actuation_delay_ms, FREQ_APPLIED, "freq", (w.pool, w.id, f))
        return True

    def _worker(self, pool: str, wid: int) -> _Worker:
        return self.prefill[wid] if pool == "prefill" else self.decode[wid - self.node.n_prefill]

    def _on_freq(self, payload) -> None:
        pool, wid, f = payload
        w = self._worker(pool, wid)
        if f == w.freq:
            return
        if pool == "prefill" and w.job is not None:
            # residual reference work is unchanged; only its pace changes
            done_ref = (self.now - w.seg_start) * w.freq / self.profile.prefill.f_ref
            w.remaining_ref = max(0.0, w.remaining_ref - done_ref)
            w.seg_start = self.now
            w.version += 1
            w.freq = f
            self._push(self.now + w.remaining_ref * self.profile.prefill.f_ref / f, PREFILL_DONE, "prefill_done",
                       (w.id, w.version))
        else:
            w.freq = f
        w.freq_trace.append((self.now, f))
        self._touch(w)

    # ---------------------------------------------------------------- prefill

    def _on_arrival(self, rid: int) -> None:
        rec = self.records[rid]
        q = self.router.queue_of(rec.prompt_tokens)
        if len(self.router.queues[q]) >= self.node.max_queue:
            rec.rejected = True
            self.closed += 1
            self.diagnostics.append(f"overload: request {rid} rejected, queue {q} at cap {self.node.max_queue}")
            return
        rec.queue = self.router.dispatch(rid, rec.prompt_tokens, self.now)
        self._try_start(q)

    def _try_start(self, q: int) -> None:
        queue = self.router.queues[q]
        for wid in self.router.workers_for(q):
            if not queue:
                return
            w = self.prefill[wid]
            if w.job is None:
                rid, _ = queue.pop()
                self._start_prefill(w, rid)

    def _start_prefill(self, w: _Worker, rid: int) -> None:
        rec = self.records[rid]
        rec.prefill_start_ms = self.now
        rec.prefill_worker = w.id
        w.job = rid
        w.remaining_ref = self.profile.prefill.t_ref(rec.prompt_tokens)
        w.seg_start = self.now
        w.version += 1
        self._touch(w)
        self._push(self.now + w.remaining_ref * self.profile.prefill.f_ref / w.freq, PREFILL_DONE, "prefill_done",
                   (w.id, w.version))

    def _on_prefill_done(self, payload) -> None:
        wid, version = payload
        w = self.prefill[wid]
        if version != w.version or w.job is None:
            return
        rid = w.job
        w.job = None
        w.remaining_ref = 0.0
        self.records[rid].prefill_end_ms = self.now
        self._touch(w)
        self._push(self.now + self.node.handoff_delay_ms, HANDOFF, "handoff", rid)
        self._try_start(self.router.worker_queue[wid])

    # ---------------------------------------------------------------- decode

    def _on_handoff(self, rid: int) -> None:
        w = min(self.decode, key=lambda d: (d.load, d.id))
        self.records[rid].decode_worker = w.id
        w.pending.append(rid)
        if not w.stepping:
            self._start_step(w)

    def _start_step(self, w: _Worker) -> None:
        cap = self.node.max_batch
        while w.pending and len(w.active) < cap:
            w.active.append(w.pending.popleft())
        if len(w.pending) > self.max_pending:
            self.max_pending = len(w.pending)
        if not w.active:
            w.stepping = False
            self._touch(w)
            return
        w.stepping = True
        w.step_batch = len(w.active)
        w.step_start = self.now
        w.step_end = self.now + decode_step_time(self.profile.decode, w.step_batch, w.freq)
        self._touch(w)
        self._push(w.step_end, STEP_END, "step_end", w.id)

    def _on_step_end(self, wid: int) -> None:
        w = self.decode[wid - self.node.n_prefill]
        intervals = []
        still = []
        for rid in w.active:
            rec = self.records[rid]
            if rec.tokens_emitted == 0:
                rec.ttft_ms = self.now - rec.arrival_ms
            else:
                dt = self.now - self.last_emit[rid]
                rec.tbt_samples.append(dt)
                intervals.append(dt)
            rec.tokens_emitted += 1
            self.last_emit[rid] = self.now
            if rec.tokens_emitted >= rec.output_tokens:
                rec.completed_ms = self.now
                rec.tbt = tbt_digest(rec.tbt_samples, self.slo.tbt_p95_ms)
                self.done += 1
                self.closed += 1
            else:
                still.append(rid)
        if self.controllers:
            self.controllers[wid - self.node.n_prefill].observe_step(w.step_start, self.now, w.step_batch, intervals)
        w.active = still
        w.stepping = False
        self._start_step(w)

    # ---------------------------------------------------------------- control

    def _on_optimizer(self) -> None:
        jobs: dict[int, list] = {}
        servers: dict[int, int] = {}
        for q, queue in enumerate(self.router.queues):
            lst = []
            for rid, _ in queue.items:
                rec = self.records[rid]
                lst.append(PrefillJob(rid, rec.prompt_tokens, rec.arrival_ms + self.slo.ttft_limit(rec.cls)))
            workers = self.router.workers_for(q)
            for wid in workers:
                w = self.prefill[wid]
                if w.job is not None:
                    rec = self.records[w.job]
                    done_ref = (self.now - w.seg_start) * w.freq / self.profile.prefill.f_ref
                    frac = max(0.0, w.remaining_ref - done_ref) / self.profile.prefill.t_ref(rec.prompt_tokens)
                    lst.append(PrefillJob(w.job, rec.prompt_tokens, rec.arrival_ms + self.slo.ttft_limit(rec.cls),
                                          frac))
            jobs[q] = lst
            servers[q] = len(workers)
        cfg = self.policy.prefill_opt
        if cfg.margin_prefill != self.slo.margin_prefill:
            cfg = PrefillOptConfig(cfg.resolve_period_ms, self.slo.margin_prefill, cfg.min_budget_ms)
        commands = queue_optimizer_tick(QueueSnapshot(self.now, jobs, servers), cfg, self.profile)
        for q, f in commands.items():
            for wid in self.router.workers_for(q):
                self.apply_frequency(self.prefill[wid], f)

    def _partial(self, w: _Worker):
        return (w.step_start, w.step_end, w.step_batch) if w.stepping else None

    def _on_fine(self) -> None:
        for ctl, w in zip(self.controllers, self.decode):
            cmd = ctl.fine(self.now)
            self.apply_frequency(w, cmd)

    def _on_coarse(self) -> None:
        for ctl, w in zip(self.controllers, self.decode):
            ctl.coarse(self.now, self._partial(w))

    def _on_adapt(self) -> None:
        for ctl in self.controllers:
            ctl.adapt(self.now)

    # ---------------------------------------------------------------- loop

    def run(self) -> RunResult:
        for r in self.trace:
            self._push(float(r.arrival_ms), ARRIVAL, "arrival", r.id)
        periodic = []
        if self.policy.prefill_dvfs:
            periodic.append(("optimizer", OPTIMIZER, self.policy.prefill_opt.resolve_period_ms))
        if self.controllers:
            c = self.policy.decode_ctl
            periodic += [("fine", FINE, c.fine_period_ms), ("coarse", COARSE, c.coarse_period_ms),
                         ("adapt", ADAPT, c.adapt_period_s * 1000.0)]
        for kind, prio, period in periodic:
            self._push(period, prio, kind, (1, period))

        handlers = {
            "arrival": self._on_arrival,
            "prefill_done": self._on_prefill_done,
            "handoff": self._on_handoff,
            "step_end": self._on_step_end,
            "freq": self._on_freq,
        }
        ticks = {"optimizer": self._on_optimizer, "fine": self._on_fine, "coarse": self._on_coarse,
                 "adapt": self._on_adapt}
        n = len(self.records)
        stop_at = self.trace.requests[-1].arrival_ms + self.node.drain_limit_ms
        if self.node.horizon_ms is not None:
            stop_at = self.node.horizon_ms
        while self.events and self.closed < n:
            t, prio, _, kind, payload = heapq.heappop(self.events)
            if t > stop_at:
                break
            self.now = t
            if kind in ticks:
                ticks[kind]()
                k, period = payload
                # tick times are k * period to avoid accumulated rounding drift
                self._push((k + 1) * period, prio, kind, (k + 1, period))
            else:
                handlers[kind](payload)
        if self.closed < n:
            self.now = stop_at
            unfinished = [r.id for r in self.records if r.completed_ms is None and not r.rejected]
            self.diagnostics.append(f"overload: {len(unfinished)} requests unfinished at t={self.now:.1f} ms")
            for rid in unfinished:
                rec = self.records[rid]
                rec.tbt = tbt_digest(rec.tbt_samples, self.slo.tbt_p95_ms)
        if self.max_pending:
            self.diagnostics.append(f"decode batch cap {self.node.max_batch} reached; "
                                    f"max {self.max_pending} streams waited")
        return self._result()

    def _result(self) -> RunResult:
        t_end = self.now
        workers = []
        totals = {ACTIVE_PREFILL: 0.0, ACTIVE_DECODE: 0.0, IDLE: 0.0}
        pool = {"prefill": 0.0, "decode": 0.0}
        for w in self.prefill + self.decode:
            w.ledger.close(t_end)
            e = w.ledger.joules
            for k in totals:
                totals[k] += e[k]
            pool[w.pool] += sum(e.values())
            entry = {
                "id": w.id, "pool": w.pool, "gpus": w.gpus,
                "energy_j": dict(e), "time_ms": dict(w.ledger.time),
                "freq_trace": [list(x) for x in w.freq_trace],
            }
            if self.node.keep_intervals:
                entry["intervals"] = [list(x) for x in w.ledger.intervals]
            workers.append(entry)
        energy = {
            "total_j": totals[ACTIVE_PREFILL] + totals[ACTIVE_DECODE] + totals[IDLE],
            "active_prefill_j": totals[ACTIVE_PREFILL],
            "active_decode_j": totals[ACTIVE_DECODE],
            "idle_j": totals[IDLE],
            "prefill_j": pool["prefill"],
            "decode_j": pool["decode"],
        }
        log = []
        for c in self.controllers:
            log.extend(c.log)
        log.sort(key=lambda r: (r[0], r[1]))
        return RunResult(
            requests=self.records,
            energy=energy,
            workers=workers,
            decision_log=log,
            freq_trace={str(w.id): [list(x) for x in w.freq_trace] for w in self.prefill + self.decode},
            diagnostics=self.diagnostics,
            config=config_echo(self.profile, self.policy, self.slo, self.node, self.seed, self.trace),
            t_end_ms=t_end,
        )


def config_echo(profile, policy, slo, node, seed, trace) -> dict:
    return {
        "profile": profile.to_dict(),
        "policy": _plain(asdict(policy)),
        "slo": asdict(slo),
        "node": asdict(node),
        "seed": seed,
        "trace": trace.meta | {"requests": len(trace)},
    }


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def run(trace: Trace, profile: GpuProfile, policy: GovernorPolicy, seed: int = 0, slo_cfg: SloConfig | None = None,
        node: NodeConfig | None = None) -> RunResult:
    """Simulate ``trace`` under ``policy``.  ``seed`` is recorded; the engine itself draws no randomness."""
    return Simulator(trace, profile, policy, slo_cfg, node, seed).run()


@dataclass(frozen=True)
class SweepPoint:
    freq: int
    energy: dict
    ttft_pct: float
    tbt_pct: float


def fixed_frequency_sweep(trace: Trace, profile: GpuProfile, freq_list: Sequence[int], slo: SloConfig | None = None,
                          node: NodeConfig | None = None, routing: bool = False) -> list[SweepPoint]:
    slo = slo or SloConfig()
    for f in freq_list:
        profile.grid.validate(f)
    out = []
    for f in freq_list:
        res = run(trace, profile, fixed_freq(f, routing), 0, slo, node)
        ttft, tbt = slo_pass_rates(res, slo)
        out.append(SweepPoint(int(f), res.energy, ttft, tbt))
    return out


def decision_log_fields() -> tuple[str, ...]:
    return LOG_FIELDS
