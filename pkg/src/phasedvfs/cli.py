"""Command-line interface: simulate, microbench, sweep, fit, report.

Exit codes: 0 success, 1 configuration/usage error, 2 assertion-flag
failure, 3 internal error.  Nothing is written when configuration fails.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from types import SimpleNamespace

import click
import yaml

from .decode_ctl import LOG_FIELDS, DecodeCtlConfig
from .errors import ConfigError, FitError, PhaseDvfsError
from .experiments import microbench, parse_levels, ttft_histogram
from .gpu_model import PROFILE_DIR, PROFILE_ENV, GpuProfile, fit_latency, fit_power, load_profile
from .metrics import SloConfig, energy_report, rows_to_csv, rows_to_text, write_log_csv
from .prefill_opt import PrefillOptConfig
from .router import RoutingConfig
from .simkernel import GovernorPolicy, NodeConfig, fixed_frequency_sweep, policy_by_name, run
from .trace import Trace, chat_lengths, gen_decode_microbench, gen_poisson_trace, \
    gen_prefill_microbench, gen_sinusoid_decode_trace, load_trace

EXIT_OK, EXIT_CONFIG, EXIT_ASSERT, EXIT_INTERNAL = 0, 1, 2, 3


class AssertionFlagFailure(Exception):
    pass


# --------------------------------------------------------------------------
# config resolution


def resolve_profile(name: str) -> tuple[GpuProfile, str]:
    candidates = [Path(name)]
    env = os.environ.get(PROFILE_ENV)
    if env:
        candidates.append(Path(env) / name)
    candidates.append(PROFILE_DIR / name)
    if not name.endswith(".profile"):
        candidates += [c.with_name(c.name + ".profile") for c in candidates]
    for c in candidates:
        if c.is_file():
            return load_profile(c), str(c.resolve())
    raise ConfigError(f"profile {name!r} not found (looked in cwd, ${PROFILE_ENV}, {PROFILE_DIR})")


GENERATORS = ("poisson", "sinusoid", "constant", "prefill_micro", "decode_micro")


def build_trace(tspec: dict, routing: RoutingConfig) -> Trace:
    if tspec.get("file"):
        path = Path(tspec["file"])
        if not path.is_file():
            raise ConfigError(f"trace file {path} not found")
        return load_trace(path, routing)
    gen = tspec.get("gen")
    if gen not in GENERATORS:
        raise ConfigError(f"trace needs 'file' or 'gen' in {GENERATORS}")
    if tspec.get("seed") is None:
        raise ConfigError("generated traces need a seed")
    seed = int(tspec["seed"])
    dur = int(tspec.get("duration_ms", 120_000))
    try:
        if gen == "poisson":
            lengths = chat_lengths(float(tspec.get("long_fraction", 0.08)))
            return gen_poisson_trace(float(tspec.get("qps", 3.0)), dur, lengths, seed)
        if gen in ("sinusoid", "constant"):
            amp = float(tspec.get("amplitude", 1000.0)) if gen == "sinusoid" else 0.0
            return gen_sinusoid_decode_trace(float(tspec.get("tps", 1500.0)), amp,
                                             float(tspec.get("period_ms", 120_000.0)), dur, seed,
                                             stream_tokens=int(tspec.get("stream_tokens", 128)))
        if gen == "prefill_micro":
            rng = tuple(tspec.get("prompt_range", (256, 1024)))
            return gen_prefill_microbench(float(tspec.get("tps", 6000.0)), rng, dur, seed)
        return gen_decode_microbench(float(tspec.get("tps", 1600.0)), tuple(tspec.get("gen_range", (256, 1024))),
                                     dur, seed)
    except ValueError as exc:
        raise ConfigError(f"bad trace parameters: {exc}") from None


def build_policy(name: str, cfg: dict) -> GovernorPolicy:
    try:
        pol = policy_by_name(name)
        if "routing" in cfg:
            r = cfg["routing"]
            routing = RoutingConfig(
                thresholds=tuple(r.get("thresholds", pol.routing.thresholds)),
                enabled=bool(r.get("enabled", pol.routing.enabled)),
                worker_map=tuple(tuple(x) for x in r.get("worker_map", pol.routing.worker_map)),
            )
            pol = replace(pol, routing=routing)
        if "decode_ctl" in cfg:
            pol = replace(pol, decode_ctl=_sub(DecodeCtlConfig, cfg["decode_ctl"]))
        if "prefill_opt" in cfg:
            pol = replace(pol, prefill_opt=_sub(PrefillOptConfig, cfg["prefill_opt"]))
        return pol
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad policy configuration: {exc}") from None


def _sub(cls, doc: dict):
    if not isinstance(doc, dict):
        raise ConfigError(f"{cls.__name__} section must be a mapping")
    known = set(cls.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    try:
        return cls(**doc)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from None


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must be a mapping")
    return doc


def _prepare_out(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_yaml(path: Path, doc: dict) -> None:
    path.write_text(yaml.safe_dump(json.loads(json.dumps(doc)), sort_keys=True))


def _trace_spec(cfg: dict, trace_file, gen, qps, tps, amplitude, period_ms, duration_ms, long_fraction, seed) -> dict:
    tspec = dict(cfg.get("trace", {}))
    overrides = {"file": trace_file, "gen": gen, "qps": qps, "tps": tps, "amplitude": amplitude,
                 "period_ms": period_ms, "duration_ms": duration_ms, "long_fraction": long_fraction}
    for k, v in overrides.items():
        if v is not None:
            tspec[k] = v
    if trace_file is not None:
        tspec.pop("gen", None)
    if gen is not None:
        tspec.pop("file", None)
    s = seed if seed is not None else cfg.get("seed")
    if s is not None:
        tspec["seed"] = int(s)
    return tspec


def _slo(cfg: dict, margin_prefill, margin_decode) -> SloConfig:
    doc = dict(cfg.get("slo", {}))
    if margin_prefill is not None:
        doc["margin_prefill"] = margin_prefill
    if margin_decode is not None:
        doc["margin_decode"] = margin_decode
    return _sub(SloConfig, doc)


def _node(cfg: dict, horizon_ms=None) -> NodeConfig:
    doc = dict(cfg.get("node", {}))
    if horizon_ms is not None:
        doc["horizon_ms"] = horizon_ms
    return _sub(NodeConfig, doc)


trace_options = [
    click.option("--config", "config_path", type=click.Path(), default=None, help="YAML experiment config"),
    click.option("--profile", default=None, help="profile file or name (default: packaged default)"),
    click.option("--trace", "trace_file", default=None, help="trace CSV"),
    click.option("--gen", type=click.Choice(GENERATORS), default=None, help="trace generator"),
    click.option("--qps", type=float, default=None),
    click.option("--tps", type=float, default=None),
    click.option("--amplitude", type=float, default=None),
    click.option("--period-ms", type=float, default=None),
    click.option("--duration-ms", type=int, default=None),
    click.option("--long-fraction", type=float, default=None),
    click.option("--seed", type=int, default=None),
    click.option("--margin-prefill", type=float, default=None),
    click.option("--margin-decode", type=float, default=None),
]


def with_trace_options(f):
    for opt in reversed(trace_options):
        f = opt(f)
    return f


# --------------------------------------------------------------------------
# commands


@click.group()
def cli():
    """Phase-aware DVFS serving simulator."""


@cli.command()
@with_trace_options
@click.option("--policy", default=None, help="defaultnv | prefill_split | greenllm | fixed<MHz>")
@click.option("--horizon-ms", type=float, default=None, help="stop at this time instead of draining")
@click.option("--out", type=click.Path(), default=None, required=False)
def simulate(config_path, profile, trace_file, gen, qps, tps, amplitude, period_ms, duration_ms, long_fraction, seed,
             margin_prefill, margin_decode, policy, horizon_ms, out):
    """Run one policy on one trace; writes result.json, decisions.csv, report.csv."""
    cfg = load_config(config_path)
    prof, prof_path = resolve_profile(profile or cfg.get("profile", "default.profile"))
    pol = build_policy(policy or cfg.get("policy", "greenllm"), cfg)
    tspec = _trace_spec(cfg, trace_file, gen, qps, tps, amplitude, period_ms, duration_ms, long_fraction, seed)
    trace = build_trace(tspec, pol.routing)
    slo = _slo(cfg, margin_prefill, margin_decode)
    node = _node(cfg, horizon_ms)
    out = out or cfg.get("out")
    if not out:
        raise ConfigError("--out is required")
    run_seed = int(tspec.get("seed", cfg.get("seed", 0)) or 0)

    res = run(trace, prof, pol, run_seed, slo, node)
    outdir = _prepare_out(Path(out))
    (outdir / "result.json").write_text(res.to_json())
    write_log_csv(res.decision_log, outdir / "decisions.csv", LOG_FIELDS)
    rows = energy_report({pol.name: res}, pol.name, slo, trace.name)
    (outdir / "report.csv").write_text(rows_to_csv(rows))
    echo = {
        "profile": prof_path, "policy": policy or cfg.get("policy", "greenllm"), "trace": tspec,
        "slo": asdict(slo), "node": asdict(node), "seed": run_seed,
        "routing": asdict(pol.routing), "decode_ctl": asdict(pol.decode_ctl), "prefill_opt": asdict(pol.prefill_opt),
    }
    _write_yaml(outdir / "config.yaml", echo)
    click.echo(rows_to_text(rows), nl=False)


@cli.command("microbench")
@click.option("--kind", type=click.Choice(["prefill", "decode"]), required=True)
@click.option("--levels", default="200:3000:200", help="TPS levels: start:stop:step or comma list")
@click.option("--policies", default="defaultnv,greenllm")
@click.option("--profile", default=None)
@click.option("--duration-ms", type=int, default=60_000)
@click.option("--seed", type=int, default=0)
@click.option("--prompt-range", default="256,1024", help="prefill prompt length range min,max")
@click.option("--margin-prefill", type=float, default=None)
@click.option("--margin-decode", type=float, default=None)
@click.option("--out", type=click.Path(), required=True)
def microbench_cmd(kind, levels, policies, profile, duration_ms, seed, prompt_range, margin_prefill, margin_decode, out):
    """Sweep a microbenchmark across TPS levels and policies; writes microbench.csv."""
    prof, prof_path = resolve_profile(profile or "default.profile")
    try:
        lv = parse_levels(levels)
        pr = tuple(int(x) for x in prompt_range.split(","))
        pols = [p.strip() for p in policies.split(",") if p.strip()]
        for p in pols:
            policy_by_name(p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not pols:
        raise ConfigError("no policies given")
    slo = _slo({}, margin_prefill, margin_decode)
    rows = microbench(kind, lv, pols, prof, duration_ms, seed, slo, NodeConfig(), pr)
    outdir = _prepare_out(Path(out))
    with open(outdir / "microbench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        fields = list(rows[0].__dataclass_fields__)
        w.writerow(fields)
        for r in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in asdict(r).values()])
    _write_yaml(outdir / "config.yaml", {"kind": kind, "levels": lv, "policies": pols, "profile": prof_path,
                                         "duration_ms": duration_ms, "seed": seed, "prompt_range": list(pr),
                                         "slo": asdict(slo)})
    click.echo(f"{len(rows)} rows -> {outdir / 'microbench.csv'}")


@cli.command()
@with_trace_options
@click.option("--freqs", default=None, help="start:stop:step or comma list (default: full grid)")
@click.option("--metric", type=click.Choice(["total", "prefill", "decode"]), default="total")
@click.option("--assert-convex", is_flag=True, help="exit 2 unless both endpoints exceed the minimum")
@click.option("--out", type=click.Path(), required=True)
def sweep(config_path, profile, trace_file, gen, qps, tps, amplitude, period_ms, duration_ms, long_fraction, seed,
          margin_prefill, margin_decode, freqs, metric, assert_convex, out):
    """Fixed-frequency energy sweep; writes sweep.csv normalised to the minimum."""
    cfg = load_config(config_path)
    prof, prof_path = resolve_profile(profile or cfg.get("profile", "default.profile"))
    if freqs is None:
        flist = list(prof.grid.freqs)
    else:
        try:
            flist = [int(f) for f in parse_levels(freqs)]
        except ValueError as exc:
            raise click.UsageError(str(exc)) from None
    if not flist:
        raise click.UsageError("empty frequency list")
    for f in flist:
        if not prof.grid.contains(f):
            raise ConfigError(f"frequency {f} MHz is not on the grid")
    tspec = _trace_spec(cfg, trace_file, gen, qps, tps, amplitude, period_ms, duration_ms, long_fraction, seed)
    trace = build_trace(tspec, RoutingConfig(enabled=False))
    slo = _slo(cfg, margin_prefill, margin_decode)
    node = _node(cfg)
    pts = fixed_frequency_sweep(trace, prof, flist, slo, node)
    key = f"{metric}_j"
    energies = [p.energy[key] for p in pts]
    e_min = min(energies)
    outdir = _prepare_out(Path(out))
    with open(outdir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["freq_mhz", "total_j", "prefill_j", "decode_j", "norm", "ttft_pct", "tbt_pct"])
        for p, e in zip(pts, energies):
            w.writerow([p.freq, f"{p.energy['total_j']:.6f}", f"{p.energy['prefill_j']:.6f}",
                        f"{p.energy['decode_j']:.6f}", f"{e / e_min:.3f}", f"{p.ttft_pct:.2f}", f"{p.tbt_pct:.2f}"])
    _write_yaml(outdir / "config.yaml", {"profile": prof_path, "trace": tspec, "freqs": flist, "metric": metric,
                                         "slo": asdict(slo), "node": asdict(node)})
    best = pts[energies.index(e_min)].freq
    click.echo(f"min {metric} energy {e_min:.1f} J at {best} MHz; "
               f"endpoints {energies[0] / e_min:.3f} / {energies[-1] / e_min:.3f}")
    if assert_convex and not (energies[0] > e_min and energies[-1] > e_min):
        raise AssertionFlagFailure("energy-frequency curve is not U-shaped: an endpoint is the minimum")


@cli.command()
@click.option("--kind", type=click.Choice(["latency", "power"]), required=True)
@click.option("--samples", "samples_csv", type=click.Path(), required=True,
              help="CSV: tokens,latency_ms (latency) or freq_mhz,power_w (power)")
@click.option("--f-ref", type=int, default=1410)
@click.option("--p-idle", type=float, default=50.0)
@click.option("--out", type=click.Path(), required=True, help="profile-fragment YAML to write")
def fit(kind, samples_csv, f_ref, p_idle, out):
    """Least-squares fit of the prefill latency or active power model."""
    path = Path(samples_csv)
    if not path.is_file():
        raise ConfigError(f"samples file {path} not found")
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        data = [(float(a), float(b)) for a, b in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: cannot parse samples ({exc})") from None
    try:
        if kind == "latency":
            res = fit_latency(data, f_ref)
            coeffs = {"a": res.model.a, "b": res.model.b, "c": res.model.c}
        else:
            res = fit_power(data, p_idle)
            coeffs = {k: getattr(res.model, k) for k in ("k3", "k2", "k1", "k0", "p_idle")}
    except FitError as exc:
        raise ConfigError(f"fit failed: {exc}") from None
    section = "prefill" if kind == "latency" else "power"
    doc = {
        section: {k: float(f"{v:.9g}") for k, v in coeffs.items()},
        "diagnostics": {"r2": float(f"{res.r2:.9g}"), "residuals": [float(f"{x:.9g}") for x in res.residuals]},
    }
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(yaml.safe_dump(doc, sort_keys=False))
    click.echo(" ".join(f"{k}={v:.9g}" for k, v in coeffs.items()) + f"  R2={res.r2:.6f}")


def _load_run(path: Path):
    doc = json.loads((path / "result.json").read_text())
    reqs = [SimpleNamespace(**r) for r in doc["requests"]]
    pol = doc["config"]["policy"]
    name = f"fixed{pol['freq']}" if pol["kind"] == "fixed" else pol["kind"]
    return name, SimpleNamespace(requests=reqs, energy=doc["energy"], workers=doc["workers"], doc=doc)


@cli.command()
@click.argument("runs", nargs=-1, type=click.Path())
@click.option("--baseline", default="defaultnv")
@click.option("--workload", default="")
@click.option("--tbt-mode", type=click.Choice(["per_request", "aggregate"]), default="per_request")
@click.option("--out", type=click.Path(), required=True)
def report(runs, baseline, workload, tbt_mode, out):
    """Combine simulate output directories into report.csv / report.txt / report.json."""
    if not runs:
        raise click.UsageError("no run directories given")
    loaded = {}
    for r in runs:
        p = Path(r)
        if not (p / "result.json").is_file():
            raise ConfigError(f"{p} has no result.json")
        name, res = _load_run(p)
        if name in loaded:
            raise ConfigError(f"two runs for method {name}")
        loaded[name] = res
    if baseline not in loaded:
        raise ConfigError(f"baseline {baseline!r} not among runs {sorted(loaded)}")
    slo = SloConfig(**next(iter(loaded.values())).doc["config"]["slo"])
    rows = energy_report(loaded, baseline, slo, workload, tbt_mode)
    outdir = _prepare_out(Path(out))
    (outdir / "report.csv").write_text(rows_to_csv(rows))
    (outdir / "report.txt").write_text(rows_to_text(rows))
    (outdir / "report.json").write_text(json.dumps([asdict(r) for r in rows], sort_keys=True, indent=1))
    with open(outdir / "freq_series.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "worker", "t_ms", "freq_mhz"])
        for name in sorted(loaded):
            for wk in loaded[name].workers:
                for t, f in wk["freq_trace"]:
                    w.writerow([name, wk["id"], f"{t:.3f}", f])
    with open(outdir / "ttft_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "class", "bin_ms", "count"])
        for name in sorted(loaded):
            for row in ttft_histogram(loaded[name]):
                w.writerow([name, *row])
    click.echo(rows_to_text(rows), nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="phasedvfs", standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, click.BadParameter) as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return EXIT_CONFIG
    except AssertionFlagFailure as exc:
        click.echo(f"assertion failed: {exc}", err=True)
        return EXIT_ASSERT
    except (PhaseDvfsError, yaml.YAMLError) as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
