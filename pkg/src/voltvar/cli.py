"""Command-line entry point: run scenarios, compare policies, run the
verification suites.

Exit codes: 0 success, 1 failed verification checks, 2 configuration or
validation errors, 3 plant divergence.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from . import __version__
from .baselines import DroopConfig
from .controller import ControllerConfig
from .netmodel import CaseError, NetworkCase, NodePhase, load_case
from .scenario import (
    Event,
    Metrics,
    OutOfAreaPV,
    Profile,
    ProfileError,
    ScenarioConfig,
    compute_mae,
    compute_metrics,
    load_profile,
    run,
)
from .trace import ScenarioTrace
from .verify import SUITES

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

log = logging.getLogger("voltvar")


class ConfigError(ValueError):
    pass


@dataclass
class RunSetup:
    case: NetworkCase
    profile: Profile
    scenario: ScenarioConfig
    policy: str
    seed: int
    horizon: int | None
    resolved: dict  # every default materialized, for the manifest
    case_path: Path
    profile_path: Path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_config(path: str | Path, seed_override: int | None = None) -> RunSetup:
    """Parse a scenario configuration file and materialize all defaults.

    Paths inside the file are resolved relative to the file itself.  A
    manifest written by `run` is itself a valid configuration.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if "config" in doc and "inputs" in doc:  # manifest re-run
        doc = doc["config"]

    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else (base / q)

    try:
        case_path = resolve(doc["case"])
        profile_path = resolve(doc["profile"])
        case = load_case(case_path)
        events = tuple(
            Event(int(e["time"]), str(e["kind"]), float(e.get("magnitude", 0.0)))
            for e in doc.get("events", [])
        )
        profile = load_profile(profile_path, events)

        cc = doc.get("controller", {})
        controller = ControllerConfig(
            alpha1=float(cc.get("alpha1", 10.0)),
            alpha2=float(cc.get("alpha2", 5.0)),
            d=float(cc.get("d", 0.1)),
            v_target=cc.get("v_target", 1.0),
            window=int(cc.get("window", 10)),
            beta=float(cc.get("beta", 0.95)),
            lam=float(cc.get("lambda", 1e-2)),
            dither=float(cc.get("dither", 0.02)),
        )
        dd = doc.get("droop", {})
        droop = DroopConfig(gamma=float(dd.get("gamma", 10.0)), v_ref=float(dd.get("v_ref", 1.0)))
        sv = doc.get("solver", {})
        st = doc.get("stale", {})
        s_base = case.s_base_kva
        out_of_area = tuple(
            OutOfAreaPV(
                location=NodePhase(int(u["node"]), str(u["phase"])),
                s_rating=float(u["s_rating_kva"]) / s_base,
                p_rating=float(u["p_rating_kva"]) / s_base,
            )
            for u in doc.get("out_of_area", [])
        )
        scenario = ScenarioConfig(
            controller=controller,
            droop=droop,
            noise_sigma=float(doc.get("noise_sigma", 0.001)),
            bounds=tuple(doc.get("bounds", (0.95, 1.05))),
            pv_p_factor=float(doc.get("pv_p_factor", 0.8)),
            out_of_area=out_of_area,
            solver_tol=float(sv.get("tol", 1e-8)),
            solver_max_iter=int(sv.get("max_iter", 200)),
            stale_mismatch=float(st.get("mismatch", 0.0)),
            stale_perturbation=float(st.get("perturbation", 1e-4)),
        )
        policy = str(doc.get("policy", "proposed"))
        seed = int(doc.get("seed", 0)) if seed_override is None else int(seed_override)
        horizon = doc.get("horizon")
        horizon = None if horizon in (None, 0) else int(horizon)
    except (KeyError, TypeError, ValueError, CaseError, ProfileError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"config {path}: {exc}") from exc

    resolved = {
        "case": str(case_path),
        "profile": str(profile_path),
        "policy": policy,
        "seed": seed,
        "horizon": horizon,
        "noise_sigma": scenario.noise_sigma,
        "bounds": list(scenario.bounds),
        "pv_p_factor": scenario.pv_p_factor,
        "events": [
            {"time": e.time, "kind": e.kind, "magnitude": e.magnitude} for e in events
        ],
        "controller": {
            "alpha1": controller.alpha1,
            "alpha2": controller.alpha2,
            "d": controller.d,
            "v_target": controller.v_target
            if np.isscalar(controller.v_target)
            else list(controller.v_target),
            "window": controller.window,
            "beta": controller.beta,
            "lambda": controller.lam,
            "dither": controller.dither,
        },
        "droop": {"gamma": droop.gamma, "v_ref": droop.v_ref},
        "out_of_area": [
            {
                "node": u.location.node,
                "phase": u.location.phase,
                "s_rating_kva": u.s_rating * s_base,
                "p_rating_kva": u.p_rating * s_base,
            }
            for u in out_of_area
        ],
        "solver": {"tol": scenario.solver_tol, "max_iter": scenario.solver_max_iter},
        "stale": {
            "mismatch": scenario.stale_mismatch,
            "perturbation": scenario.stale_perturbation,
        },
    }
    return RunSetup(
        case=case,
        profile=profile,
        scenario=scenario,
        policy=policy,
        seed=seed,
        horizon=horizon,
        resolved=resolved,
        case_path=case_path,
        profile_path=profile_path,
    )


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_trace_csv(trace: ScenarioTrace, path: Path) -> None:
    cfg = trace.config
    header = ["t", "pv_scale", "load_scale"]
    header += [f"q_{c}" for c in cfg["channel_labels"]]
    header += [f"vmeas_{c}" for c in cfg["monitored_labels"]]
    header += [f"vtrue_{c}" for c in cfg["node_phase_labels"]]
    header += ["loss", "t_regress_ms", "t_control_ms"]
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for r in trace.rows:
            cells = [str(r.t), _fmt(r.pv_scale), _fmt(r.load_scale)]
            cells += [_fmt(v) for v in r.q]
            cells += [_fmt(v) for v in r.v_meas]
            cells += [_fmt(v) for v in r.v_true]
            cells += [_fmt(r.loss), _fmt(r.t_regress_ms), _fmt(r.t_control_ms)]
            fh.write(",".join(cells) + "\n")


def write_metrics_csv(metrics: dict[str, Metrics], path: Path) -> None:
    with path.open("w") as fh:
        fh.write("policy,mae,violations,total_loss,v_min,v_max,v_lo,v_hi\n")
        for pol, m in metrics.items():
            fh.write(
                f"{pol},{_fmt(m.mae)},{m.violations},{_fmt(m.total_loss)},"
                f"{_fmt(m.v_min)},{_fmt(m.v_max)},{_fmt(m.bounds[0])},{_fmt(m.bounds[1])}\n"
            )


def write_manifest(setup: RunSetup, out: Path) -> None:
    manifest = {
        "tool": "voltvar",
        "version": __version__,
        "numpy": np.__version__,
        "config": dict(setup.resolved),
        "inputs": {
            "case_sha256": _sha256(setup.case_path),
            "profile_sha256": _sha256(setup.profile_path),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _trace_svg(traces: dict[str, ScenarioTrace], bounds, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(traces) + 1, 1, figsize=(9, 3 * (len(traces) + 1)))
    axes = np.atleast_1d(axes)
    for ax, (pol, trace) in zip(axes, traces.items()):
        idx = trace.config["monitored_indices"]
        vmon = np.array([r.v_true[idx] for r in trace.rows])
        t = trace.times
        ax.fill_between(t, vmon.min(axis=1), vmon.max(axis=1), alpha=0.4)
        for b in bounds:
            ax.axhline(b, color="r", ls="--", lw=0.8)
        ax.set_ylabel("|v| envelope (p.u.)")
        ax.set_title(pol)
    ax = axes[-1]
    for pol, trace in traces.items():
        ax.plot(trace.times, trace.loss, label=pol)
    ax.set_ylabel("loss (p.u.)")
    ax.set_xlabel("t (s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


@click.group()
@click.version_option(__version__)
def main():
    """Model-free Volt/VAr control simulation toolkit."""
    level = os.environ.get("VOLTVAR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


@main.command("run")
@click.option("--config", "-c", "config_path", required=True, type=click.Path())
@click.option("--out", "-o", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--svg", is_flag=True, default=False, help="emit voltage/loss plots")
def cmd_run(config_path, out_dir, seed, svg):
    """Run one policy over the configured scenario."""
    try:
        setup = load_config(config_path, seed)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = run(
        setup.case, setup.policy, setup.profile, setup.scenario,
        seed=setup.seed, horizon=setup.horizon,
    )
    write_trace_csv(trace, out / "trace.csv")
    write_manifest(setup, out)
    if trace.aborted:
        click.echo(f"plant diverged: {trace.aborted}", err=True)
        sys.exit(EXIT_DIVERGED)
    metrics = compute_metrics(trace, setup.scenario.bounds)
    write_metrics_csv({setup.policy: metrics}, out / "metrics.csv")
    if svg:
        _trace_svg({setup.policy: trace}, setup.scenario.bounds, out / "trace.svg")
    click.echo(
        f"{setup.policy}: {len(trace)} steps, {metrics.violations} violations, "
        f"loss {metrics.total_loss:.4f} p.u.s, MAE {metrics.mae:.3e}"
    )
    sys.exit(EXIT_OK)


@main.command("compare")
@click.option("--config", "-c", "config_path", required=True, type=click.Path())
@click.option("--policies", "-p", multiple=True, required=True)
@click.option("--out", "-o", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--svg", is_flag=True, default=False)
def cmd_compare(config_path, policies, out_dir, seed, svg):
    """Run several policies on the identical seeded scenario."""
    if len(policies) < 2:
        click.echo("error: compare needs at least two policies", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        setup = load_config(config_path, seed)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(setup, out)

    traces: dict[str, ScenarioTrace] = {}
    metrics: dict[str, Metrics] = {}
    diverged = False
    for pol in policies:
        trace = run(
            setup.case, pol, setup.profile, setup.scenario,
            seed=setup.seed, horizon=setup.horizon,
        )
        traces[pol] = trace
        write_trace_csv(trace, out / f"trace_{pol}.csv")
        if trace.aborted:
            click.echo(f"{pol}: plant diverged: {trace.aborted}", err=True)
            diverged = True
            continue
        metrics[pol] = compute_metrics(trace, setup.scenario.bounds)

    # side-by-side per-step extrema, loss, and model error
    rows = min(len(t) for t in traces.values())
    with (out / "compare.csv").open("w") as fh:
        cols = ["t"]
        for pol in traces:
            cols += [f"vmin_{pol}", f"vmax_{pol}", f"loss_{pol}", f"mae_{pol}"]
        fh.write(",".join(cols) + "\n")
        mae = {pol: compute_mae(t) for pol, t in traces.items()}
        for i in range(rows):
            first = next(iter(traces.values()))
            cells = [str(first.rows[i].t)]
            for pol, t in traces.items():
                idx = t.config["monitored_indices"]
                vm = t.rows[i].v_true[idx]
                cells += [_fmt(vm.min()), _fmt(vm.max()), _fmt(t.rows[i].loss), _fmt(mae[pol][i])]
            fh.write(",".join(cells) + "\n")

    write_metrics_csv(metrics, out / "metrics.csv")
    if svg:
        _trace_svg(traces, setup.scenario.bounds, out / "compare.svg")
    for pol, m in metrics.items():
        click.echo(
            f"{pol}: {m.violations} violations, loss {m.total_loss:.4f} p.u.s, "
            f"MAE {m.mae:.3e}, |v| in [{m.v_min:.4f}, {m.v_max:.4f}]"
        )
    sys.exit(EXIT_DIVERGED if diverged else EXIT_OK)


@main.command("verify")
@click.argument("suite", type=click.Choice(sorted(SUITES)))
@click.option("--out", "-o", "out_dir", required=True, type=click.Path())
def cmd_verify(suite, out_dir):
    """Run one oracle suite and write its pass/fail report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = SUITES[suite]()
    lines = []
    for c in result["checks"]:
        verdict = "PASS" if c["pass"] else "FAIL"
        lines.append(f"{verdict} {c['name']}: value={c['value']:.3e} limit={c['limit']:.3e}")
    report = "\n".join(lines) + "\n"
    (out / f"verify_{suite}.txt").write_text(report)
    click.echo(report, nl=False)
    sys.exit(EXIT_OK if result["ok"] else EXIT_CHECK_FAILED)


if __name__ == "__main__":
    main()
