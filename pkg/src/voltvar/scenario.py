"""Closed-loop experiment driver.

Couples the plant simulator to a control policy over a time-series profile
with events (sudden PV/load steps, the constant-power-to-ZIP load switch),
measurement noise, and out-of-area droop PV units, and computes the
comparison metrics.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import controller as ctrl
from . import powerflow as pf
from .baselines import DroopConfig, droop_step, stale_sensitivity
from .netmodel import Branch, NetworkCase, NodePhase, inverter_channels
from .regression import DegenerateWindowError, ResponseModel, Sample
from .trace import ScenarioTrace, StepRecord

POLICIES = ("proposed", "droop", "stale_model")

EVENT_KINDS = ("pv_step", "load_step", "zip_switch")

CONSTANT_POWER = (0.0, 0.0, 1.0)


class ProfileError(ValueError):
    """Malformed profile file or event list."""


@dataclass(frozen=True)
class Event:
    time: int
    kind: str
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ProfileError(f"unknown event kind {self.kind!r}")


@dataclass(frozen=True)
class Profile:
    """Exogenous series at fixed (1 s) resolution plus the event list."""

    t: np.ndarray
    pv_scale: np.ndarray
    load_scale: np.ndarray
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        t = np.asarray(self.t, dtype=int)
        pv = np.asarray(self.pv_scale, dtype=float)
        ld = np.asarray(self.load_scale, dtype=float)
        if not (t.size == pv.size == ld.size) or t.size == 0:
            raise ProfileError("profile series must be non-empty and equal length")
        dt = np.diff(t)
        if t.size > 1 and (np.any(dt <= 0) or np.any(dt != dt[0])):
            raise ProfileError("timestamps must be strictly increasing at a fixed interval")
        if np.any(pv < 0) or np.any(ld < 0):
            raise ProfileError("scales must be non-negative")
        for arr, name in ((t, "t"), (pv, "pv_scale"), (ld, "load_scale")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.t.size

    @classmethod
    def constant(
        cls, pv: float = 1.0, load: float = 1.0, horizon: int = 100, t0: int = 0
    ) -> "Profile":
        return cls(
            t=np.arange(t0, t0 + horizon),
            pv_scale=np.full(horizon, pv),
            load_scale=np.full(horizon, load),
        )

    def scales_at(self, k: int) -> tuple[float, float]:
        """Effective (pv, load) scales at row k, events applied."""
        t = int(self.t[k])
        pv = float(self.pv_scale[k])
        ld = float(self.load_scale[k])
        for ev in self.events:
            if ev.time <= t:
                if ev.kind == "pv_step":
                    pv *= 1.0 + ev.magnitude
                elif ev.kind == "load_step":
                    ld *= 1.0 + ev.magnitude
        return pv, ld

    def zip_active_at(self, k: int) -> bool:
        """True when the case-file (nonlinear) ZIP triples apply at row k.

        Before the first zip_switch event all loads run constant-power;
        a profile without such an event uses the case triples throughout.
        """
        switches = [ev.time for ev in self.events if ev.kind == "zip_switch"]
        if not switches:
            return True
        return int(self.t[k]) >= min(switches)

    def events_at(self, k: int) -> list[Event]:
        t = int(self.t[k])
        return [ev for ev in self.events if ev.time == t]


def load_profile(path: str | Path, events: tuple[Event, ...] = ()) -> Profile:
    """Read a `t,pv_scale,load_scale` CSV and attach the event list."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != [
                "t",
                "pv_scale",
                "load_scale",
            ]:
                raise ProfileError(
                    f"profile {path} must have header 't,pv_scale,load_scale', "
                    f"got {reader.fieldnames}"
                )
            rows = [(int(r["t"]), float(r["pv_scale"]), float(r["load_scale"])) for r in reader]
    except OSError as exc:
        raise ProfileError(f"cannot read profile {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ProfileError):
            raise
        raise ProfileError(f"profile {path} is malformed: {exc}") from exc
    if not rows:
        raise ProfileError(f"profile {path} is empty")
    t, pv, ld = (np.array(col) for col in zip(*rows))
    return Profile(t=t, pv_scale=pv, load_scale=ld, events=tuple(events))


@dataclass(frozen=True)
class OutOfAreaPV:
    """PV unit outside the control area; runs local droop on its own bus."""

    location: NodePhase
    s_rating: float  # p.u.
    p_rating: float  # p.u.


@dataclass
class ScenarioConfig:
    controller: ctrl.ControllerConfig = field(default_factory=ctrl.ControllerConfig)
    droop: DroopConfig = field(default_factory=DroopConfig)
    noise_sigma: float = 0.001
    bounds: tuple[float, float] = (0.95, 1.05)
    pv_p_factor: float = 0.8  # active output at scale 1.0, fraction of rating
    out_of_area: tuple[OutOfAreaPV, ...] = ()
    solver_tol: float = 1e-8
    solver_max_iter: int = 200
    stale_mismatch: float = 0.0  # +- fraction impedance error in the stale model
    stale_perturbation: float = 1e-4


def perturb_impedances(case: NetworkCase, fraction: float, seed: int) -> NetworkCase:
    """Seeded uniform +-fraction perturbation of every branch impedance."""
    rng = np.random.default_rng(seed)
    branches = []
    for br in case.branches:
        factor = 1.0 + fraction * rng.uniform(-1.0, 1.0)
        branches.append(Branch(br.from_node, br.to_node, br.phases, br.z * factor))
    return replace(case, branches=tuple(branches))


class SimulatedFeeder:
    """Plant adapter: one instance drives one closed-loop run.

    Implements the `trace.Plant` protocol.  `probe` evaluates the pending
    step's plant noiselessly without advancing time, for finite-difference
    sensitivities and oracles.
    """

    def __init__(
        self,
        case: NetworkCase,
        profile: Profile,
        config: ScenarioConfig,
        noise_rng: np.random.Generator,
    ):
        self.case = case
        self.profile = profile
        self.config = config
        self.noise_rng = noise_rng
        self.system = pf.build_admittance(case)

        channels = inverter_channels(case)
        self.channel_locs = [loc for _, loc in channels]
        self.ratings = np.array(
            [case.inverters[inv_id].s_rating for inv_id, _ in channels], dtype=float
        )
        self.chan_idx = np.array([self.system.index[loc] for loc in self.channel_locs], dtype=int)

        for unit in config.out_of_area:
            if unit.location not in self.system.index:
                raise ValueError(f"out-of-area PV channel {unit.location} does not exist")
        self.ooa = list(config.out_of_area)
        self.ooa_idx = np.array([self.system.index[u.location] for u in self.ooa], dtype=int)
        self.ooa_q = np.zeros(len(self.ooa))

        # static load arrays; s0 is scaled per step
        loads = case.loads
        self.load_idx = np.array([self.system.index[ld.location] for ld in loads], dtype=int)
        self.load_s0 = np.array([ld.s0 for ld in loads], dtype=complex)
        self.zip_p = np.array([ld.zip_p for ld in loads], dtype=float).reshape(-1, 3)
        self.zip_q = np.array([ld.zip_q for ld in loads], dtype=float).reshape(-1, 3)
        self.zip_const = np.tile(CONSTANT_POWER, (len(loads), 1))

        self.all_nps = case.node_phases
        self.k = 0
        self._last_v: np.ndarray | None = None
        self._snapshot: dict = {}

    # -- plant protocol ---------------------------------------------------

    def n_channels(self) -> int:
        return len(self.channel_locs)

    def p_output(self, k: int | None = None) -> np.ndarray:
        """In-area PV active output at step k (MPPT, capped at rating)."""
        k = self.k if k is None else k
        pv, _ = self.profile.scales_at(min(k, len(self.profile) - 1))
        return np.minimum(self.config.pv_p_factor * self.ratings * pv, self.ratings)

    def q_limits(self) -> np.ndarray:
        p = self.p_output()
        return np.array([ctrl.q_limit(s, pi) for s, pi in zip(self.ratings, p)])

    def _injections(self, q: np.ndarray, k: int) -> pf.InjectionSet:
        pv, load = self.profile.scales_at(k)
        fixed = np.zeros(self.system.dim, dtype=complex)
        np.add.at(fixed, self.chan_idx, self.p_output(k) + 1j * np.asarray(q))
        if self.ooa:
            p_ooa = np.array([min(u.p_rating * pv, u.s_rating) for u in self.ooa])
            np.add.at(fixed, self.ooa_idx, p_ooa + 1j * self.ooa_q)
        zp, zq = (
            (self.zip_p, self.zip_q)
            if self.profile.zip_active_at(k)
            else (self.zip_const, self.zip_const)
        )
        return pf.InjectionSet(
            fixed=fixed,
            load_idx=self.load_idx,
            load_s0=self.load_s0 * load,
            load_zip_p=zp,
            load_zip_q=zq,
        )

    def _solve(self, q: np.ndarray, k: int) -> pf.VoltageSolution:
        return pf.solve(
            self.system,
            self._injections(q, k),
            tol=self.config.solver_tol,
            max_iter=self.config.solver_max_iter,
            v0=self._last_v,
        )

    def probe(self, q: np.ndarray) -> np.ndarray:
        """Noiseless monitored magnitudes at the pending step (no advance)."""
        k = min(self.k, len(self.profile) - 1)
        sol = self._solve(q, k)
        return sol.magnitudes(self.case.monitored)

    def apply_and_measure(self, q: np.ndarray) -> np.ndarray:
        if self.k >= len(self.profile):
            raise IndexError("profile exhausted")
        k = self.k
        sol = self._solve(q, k)
        self._last_v = sol.v
        v_meas = pf.measure(sol, self.case, self.config.noise_sigma, self.noise_rng)

        pv, load = self.profile.scales_at(k)
        self._snapshot = {
            "t": int(self.profile.t[k]),
            "pv_scale": pv,
            "load_scale": load,
            "v_true": np.abs(sol.all_voltages(self.case)),
            "loss": sol.loss_total,
            "event": " ".join(ev.kind for ev in self.profile.events_at(k)),
        }

        # local droop response of out-of-area units, applied next interval
        if self.ooa:
            v_local = np.array([abs(sol.voltage(u.location)) for u in self.ooa])
            pv_next, _ = self.profile.scales_at(min(k + 1, len(self.profile) - 1))
            q_max = np.array(
                [
                    np.sqrt(max(u.s_rating**2 - min(u.p_rating * pv_next, u.s_rating) ** 2, 0.0))
                    for u in self.ooa
                ]
            )
            self.ooa_q = droop_step(
                v_local, self.config.droop.v_ref, self.config.droop.gamma, q_max
            )

        self.k += 1
        return v_meas

    def snapshot(self) -> dict:
        return self._snapshot


def _trace_config(case: NetworkCase, config: ScenarioConfig, seed, policy: str) -> dict:
    nps = list(case.node_phases)
    return {
        "policy": policy,
        "seed": seed,
        "window": config.controller.window,
        "beta": config.controller.beta,
        "lambda": config.controller.lam,
        "bounds": list(config.bounds),
        "noise_sigma": config.noise_sigma,
        "monitored_indices": [nps.index(ch) for ch in case.monitored],
        "monitored_labels": [str(ch) for ch in case.monitored],
        "channel_labels": [str(loc) for _, loc in inverter_channels(case)],
        "node_phase_labels": [str(np_) for np_ in nps],
    }


def _run_droop(
    feeder: SimulatedFeeder, droop_cfg: DroopConfig, horizon: int
) -> ScenarioTrace:
    trace = ScenarioTrace(policy="droop", warmup_steps=0)
    case_nps = list(feeder.all_nps)
    local_idx = [case_nps.index(loc) for loc in feeder.channel_locs]
    q = np.zeros(feeder.n_channels())
    for _ in range(horizon):
        q_max = feeder.q_limits()
        q_cmd = np.clip(q, -q_max, q_max)
        try:
            v_meas = feeder.apply_and_measure(q_cmd)
        except pf.PowerFlowError as exc:
            trace.aborted = str(exc)
            return trace
        snap = feeder.snapshot()
        t0 = time.perf_counter()
        v_local = snap["v_true"][local_idx]
        q = droop_step(v_local, droop_cfg.v_ref, droop_cfg.gamma, q_max)
        dt_ms = (time.perf_counter() - t0) * 1e3
        trace.rows.append(
            StepRecord(
                t=snap["t"],
                pv_scale=snap["pv_scale"],
                load_scale=snap["load_scale"],
                q=q_cmd,
                v_meas=v_meas,
                v_true=snap["v_true"],
                loss=snap["loss"],
                t_control_ms=dt_ms,
                event=snap["event"],
            )
        )
    return trace


def _run_stale(
    feeder: SimulatedFeeder,
    case: NetworkCase,
    config: ScenarioConfig,
    horizon: int,
    rng: np.random.Generator,
    seed: int,
) -> ScenarioTrace:
    """Dither warm-up, then control with a frozen finite-difference model."""
    cc = config.controller
    trace = ScenarioTrace(policy="stale_model", warmup_steps=cc.window)
    g = feeder.n_channels()
    q = np.zeros(g)
    w_stale: np.ndarray | None = None

    for t in range(1, horizon + 1):
        q_max = feeder.q_limits()
        if t <= cc.window:
            q_cmd = np.clip(cc.dither * q_max * rng.uniform(-1.0, 1.0, size=g), -q_max, q_max)
        else:
            q_cmd = np.clip(q, -q_max, q_max)

        if t == cc.window + 1 and w_stale is None:
            # freeze the linearization at the state entering the control phase
            if config.stale_mismatch > 0:
                probe_case = perturb_impedances(case, config.stale_mismatch, seed + 17)
                probe_feeder = SimulatedFeeder(
                    probe_case, feeder.profile, config, np.random.default_rng(0)
                )
                probe_feeder.k = feeder.k
                probe = probe_feeder.probe
            else:
                probe = feeder.probe
            w_stale = stale_sensitivity(probe, q_cmd, config.stale_perturbation)

        try:
            v_meas = feeder.apply_and_measure(q_cmd)
        except pf.PowerFlowError as exc:
            trace.aborted = str(exc)
            return trace
        snap = feeder.snapshot()
        rec = StepRecord(
            t=snap["t"],
            pv_scale=snap["pv_scale"],
            load_scale=snap["load_scale"],
            q=q_cmd,
            v_meas=v_meas,
            v_true=snap["v_true"],
            loss=snap["loss"],
            event=snap["event"],
        )
        if w_stale is not None and t > cc.window:
            rec.v_pred = w_stale.T @ np.append(q_cmd, 1.0)
            t0 = time.perf_counter()
            err = v_meas - cc.targets(v_meas.size)
            dq = cc.alpha1 * (w_stale[:-1] @ err) + cc.alpha2 * q_cmd
            q = ctrl.control_update(q_cmd, dq, cc.d, q_max)
            rec.t_control_ms = (time.perf_counter() - t0) * 1e3
            rec.w_norm = float(np.linalg.norm(w_stale[:-1], 2))
        trace.rows.append(rec)
    return trace


def run(
    case: NetworkCase,
    policy: str,
    profile: Profile,
    config: ScenarioConfig,
    seed: int = 0,
    horizon: int | None = None,
) -> ScenarioTrace:
    """Run one policy over the profile; fully determined by the seed."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
    horizon = len(profile) if horizon is None else min(horizon, len(profile))

    noise_ss, dither_ss = np.random.SeedSequence(seed).spawn(2)
    feeder = SimulatedFeeder(case, profile, config, np.random.default_rng(noise_ss))
    dither_rng = np.random.default_rng(dither_ss)

    if policy == "proposed":
        trace = ctrl.run_algorithm1(feeder, config.controller, horizon, dither_rng)
    elif policy == "droop":
        trace = _run_droop(feeder, config.droop, horizon)
    else:
        trace = _run_stale(feeder, case, config, horizon, dither_rng, seed)

    trace.config = _trace_config(case, config, seed, policy)
    return trace


def replay_predictions(trace: ScenarioTrace) -> np.ndarray:
    """Reconstruct the online one-step-ahead predictions from a trace.

    Replays the regression state machine over the recorded (q, v_meas)
    stream; rows without a defined prediction (warm-up) are NaN.
    """
    cfg = trace.config
    window, beta, lam = cfg["window"], cfg["beta"], cfg["lambda"]
    m = trace.rows[0].v_meas.size
    out = np.full((len(trace.rows), m), np.nan)

    model: ResponseModel | None = None
    pending: list[Sample] = []
    for i, row in enumerate(trace.rows):
        sample = Sample(x=np.append(row.q, 1.0), y=row.v_meas, t=row.t)
        if model is None:
            pending.append(sample)
            if len(pending) == window:
                model = ResponseModel.init_batch(pending, beta, lam)
                pending = []
        else:
            out[i] = model.predict(row.q)
            try:
                model.update(sample)
            except DegenerateWindowError:
                # the run re-entered warm-up here; the prediction stands
                model = None
                pending = []
    return out


def compute_mae(trace: ScenarioTrace, w_stale: np.ndarray | None = None) -> np.ndarray:
    """Per-step mean absolute error between the linear prediction and the
    measurement: ||v_pred - v_meas||_1 / M.

    With `w_stale` given, predictions come from the frozen model on the
    same dispatch stream; otherwise the recorded/replayed online
    predictions are used.  Steps without a prediction are NaN.
    """
    n = len(trace.rows)
    out = np.full(n, np.nan)
    if w_stale is not None:
        for i, row in enumerate(trace.rows):
            pred = w_stale.T @ np.append(row.q, 1.0)
            out[i] = np.mean(np.abs(pred - row.v_meas))
        return out
    if any(r.v_pred is not None for r in trace.rows):
        for i, row in enumerate(trace.rows):
            if row.v_pred is not None:
                out[i] = np.mean(np.abs(row.v_pred - row.v_meas))
        return out
    preds = replay_predictions(trace)
    for i, row in enumerate(trace.rows):
        if np.all(np.isfinite(preds[i])):
            out[i] = np.mean(np.abs(preds[i] - row.v_meas))
    return out


@dataclass
class Metrics:
    mae: float
    violations: int
    total_loss: float
    bounds: tuple[float, float]
    v_min: float
    v_max: float

    def __post_init__(self):
        if self.violations < 0:
            raise ValueError("violation count cannot be negative")


def compute_metrics(
    trace: ScenarioTrace,
    bounds: tuple[float, float] | None = None,
    start_step: int = 0,
) -> Metrics:
    """Violation count, integrated loss, and summary MAE over the trace.

    Violations are (step, channel) pairs whose *true* monitored magnitude
    leaves [v_lo, v_hi], counted from `start_step` on.
    """
    bounds = tuple(bounds if bounds is not None else trace.config.get("bounds", (0.95, 1.05)))
    lo, hi = bounds
    idx = trace.config["monitored_indices"]
    rows = trace.rows[start_step:]
    if not rows:
        raise ValueError("no steps in the metric window")

    vmon = np.array([r.v_true[idx] for r in rows])
    violations = int(np.sum((vmon < lo) | (vmon > hi)))
    total_loss = float(sum(r.loss for r in rows))  # 1 s interval: p.u. * s
    mae_series = compute_mae(trace)[start_step:]
    mae = float(np.nanmean(mae_series)) if np.any(np.isfinite(mae_series)) else float("nan")
    return Metrics(
        mae=mae,
        violations=violations,
        total_loss=total_loss,
        bounds=bounds,
        v_min=float(vmon.min()),
        v_max=float(vmon.max()),
    )
