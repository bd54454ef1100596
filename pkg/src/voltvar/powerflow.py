"""Three-phase unbalanced power flow by the implicit Z-bus fixed point.

The node-phase admittance matrix is partitioned into slack and non-slack
blocks; the non-slack block is LU-factorized once per case and reused for
every solve.  Each iteration converts the voltage-dependent ZIP loads and
the fixed inverter injections to equivalent currents and performs one
linear solve, until the voltage update falls below tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .netmodel import NetworkCase, NodePhase, ZipLoad

# Slack phasor angles: A at 0, B at -120 deg, C at +120 deg.
PHASE_ANGLE = {"A": 0.0, "B": -2.0 * math.pi / 3.0, "C": 2.0 * math.pi / 3.0}


class PowerFlowError(RuntimeError):
    """Power-flow iteration failed to converge."""

    def __init__(self, message: str, residual: float = math.nan):
        super().__init__(message)
        self.residual = residual


class SingularNetworkError(ValueError):
    """The admittance system cannot be factorized."""


@dataclass(frozen=True)
class AdmittanceSystem:
    """Factorized node-phase admittance system for one case.

    `order` lists the non-slack channels; `index` maps a channel to its row.
    """

    order: tuple[NodePhase, ...]
    index: dict[NodePhase, int]
    slack_order: tuple[NodePhase, ...]
    lu: tuple
    y_ns: np.ndarray
    y_sn: np.ndarray
    y_ss: np.ndarray
    v_slack: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.order)


def slack_phasors(case: NetworkCase) -> dict[str, complex]:
    return {
        ph: case.v_slack * complex(math.cos(a), math.sin(a))
        for ph, a in PHASE_ANGLE.items()
    }


def build_admittance(case: NetworkCase) -> AdmittanceSystem:
    """Stamp the node-phase admittance matrix and factorize its
    non-slack block.

    Raises `SingularNetworkError` for zero-impedance branches or a
    singular (disconnected) non-slack block.
    """
    all_nps = list(case.node_phases)
    non_slack = [np_ for np_ in all_nps if np_.node != case.slack]
    slack_nps = [np_ for np_ in all_nps if np_.node == case.slack]
    pos = {np_: i for i, np_ in enumerate(all_nps)}

    n_all = len(all_nps)
    y = np.zeros((n_all, n_all), dtype=complex)
    for br in case.branches:
        try:
            yb = np.linalg.inv(br.z)
        except np.linalg.LinAlgError as exc:
            raise SingularNetworkError(
                f"branch {br.from_node}-{br.to_node} has a singular impedance matrix"
            ) from exc
        if not np.all(np.isfinite(yb)) or np.linalg.cond(br.z) > 1e12:
            raise SingularNetworkError(
                f"branch {br.from_node}-{br.to_node} impedance is (near) zero"
            )
        fi = [pos[NodePhase(br.from_node, p)] for p in br.phases]
        ti = [pos[NodePhase(br.to_node, p)] for p in br.phases]
        y[np.ix_(fi, fi)] += yb
        y[np.ix_(ti, ti)] += yb
        y[np.ix_(fi, ti)] -= yb
        y[np.ix_(ti, fi)] -= yb

    ni = [pos[np_] for np_ in non_slack]
    si = [pos[np_] for np_ in slack_nps]
    y_nn = y[np.ix_(ni, ni)]
    y_ns = y[np.ix_(ni, si)]
    y_sn = y[np.ix_(si, ni)]
    y_ss = y[np.ix_(si, si)]

    try:
        lu = lu_factor(y_nn)
    except Exception as exc:  # LinAlgError from a hard-singular block
        raise SingularNetworkError(f"admittance block is singular: {exc}") from exc
    u_diag = np.abs(np.diag(lu[0]))
    if u_diag.size and u_diag.min() < 1e-10 * max(u_diag.max(), 1.0):
        raise SingularNetworkError(
            "admittance block is numerically singular (disconnected component?)"
        )

    phasor = slack_phasors(case)
    v_slack = np.array([phasor[np_.phase] for np_ in slack_nps], dtype=complex)

    return AdmittanceSystem(
        order=tuple(non_slack),
        index={np_: i for i, np_ in enumerate(non_slack)},
        slack_order=tuple(slack_nps),
        lu=lu,
        y_ns=y_ns,
        y_sn=y_sn,
        y_ss=y_ss,
        v_slack=v_slack,
    )


def zip_power(load: ZipLoad, v: complex) -> complex:
    """Complex power drawn by a ZIP load at voltage v (p.u.).

    P(v) = P0 (a_z |v|^2 + a_i |v| + a_p), likewise Q with its own triple.
    """
    m = abs(v)
    if m <= 0.0:
        raise ValueError("ZIP load evaluation requires |v| > 0")
    az, ai, ap = load.zip_p
    bz, bi, bp = load.zip_q
    p = load.s0.real * (az * m * m + ai * m + ap)
    q = load.s0.imag * (bz * m * m + bi * m + bp)
    return complex(p, q)


@dataclass
class InjectionSet:
    """Per-channel injections for one solve: voltage-dependent ZIP draws
    plus fixed (constant-power) inverter injections.

    Arrays are aligned to `AdmittanceSystem.order`.  `fixed` is positive
    for generation.  ZIP parameters are stored columnwise for vectorized
    evaluation; `load_idx` may repeat a channel.
    """

    fixed: np.ndarray
    load_idx: np.ndarray
    load_s0: np.ndarray
    load_zip_p: np.ndarray
    load_zip_q: np.ndarray

    @classmethod
    def build(
        cls,
        system: AdmittanceSystem,
        loads: list[ZipLoad] | tuple[ZipLoad, ...] = (),
        fixed: dict[NodePhase, complex] | None = None,
    ) -> "InjectionSet":
        n = system.dim
        fixed_arr = np.zeros(n, dtype=complex)
        for np_, s in (fixed or {}).items():
            fixed_arr[system.index[np_]] += s
        idx = np.array([system.index[ld.location] for ld in loads], dtype=int)
        s0 = np.array([ld.s0 for ld in loads], dtype=complex)
        zp = np.array([ld.zip_p for ld in loads], dtype=float).reshape(-1, 3)
        zq = np.array([ld.zip_q for ld in loads], dtype=float).reshape(-1, 3)
        return cls(fixed_arr, idx, s0, zp, zq)

    def power(self, v: np.ndarray) -> np.ndarray:
        """Net complex injection at each channel for voltages v."""
        s = self.fixed.copy()
        if self.load_idx.size:
            m = np.abs(v[self.load_idx])
            p = self.load_s0.real * (
                self.load_zip_p[:, 0] * m * m
                + self.load_zip_p[:, 1] * m
                + self.load_zip_p[:, 2]
            )
            q = self.load_s0.imag * (
                self.load_zip_q[:, 0] * m * m
                + self.load_zip_q[:, 1] * m
                + self.load_zip_q[:, 2]
            )
            np.add.at(s, self.load_idx, -(p + 1j * q))
        return s


@dataclass(frozen=True)
class VoltageSolution:
    """Converged node-phase voltages plus solver metadata."""

    v: np.ndarray  # non-slack voltages, aligned to system.order
    system: AdmittanceSystem
    iterations: int
    residual: float
    converged: bool
    loss_total: float
    injections: np.ndarray  # realized net complex power per non-slack channel

    def voltage(self, np_: NodePhase) -> complex:
        if np_ in self.system.index:
            return self.v[self.system.index[np_]]
        i = self.system.slack_order.index(np_)
        return self.system.v_slack[i]

    def magnitudes(self, channels) -> np.ndarray:
        return np.array([abs(self.voltage(ch)) for ch in channels], dtype=float)

    def all_voltages(self, case: NetworkCase) -> np.ndarray:
        return np.array([self.voltage(ch) for ch in case.node_phases], dtype=complex)


def solve(
    system: AdmittanceSystem,
    injections: InjectionSet,
    tol: float = 1e-8,
    max_iter: int = 200,
    v0: np.ndarray | None = None,
) -> VoltageSolution:
    """Run the implicit Z-bus fixed point to convergence.

    Starts flat (slack phasor rotated per phase) unless `v0` is given.
    Raises `PowerFlowError` carrying the last residual when the iteration
    does not settle within `max_iter`.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    base = np.array(
        [abs(system.v_slack[0]) * np.exp(1j * PHASE_ANGLE[np_.phase]) for np_ in system.order],
        dtype=complex,
    )
    v = base.copy() if v0 is None else np.asarray(v0, dtype=complex).copy()
    slack_current = system.y_ns @ system.v_slack

    residual = math.inf
    for it in range(1, max_iter + 1):
        s = injections.power(v)
        i_inj = np.conj(s / v)
        v_new = lu_solve(system.lu, i_inj - slack_current)
        residual = float(np.max(np.abs(v_new - v))) if v.size else 0.0
        v = v_new
        if residual <= tol:
            s = injections.power(v)
            i_slack = system.y_ss @ system.v_slack + system.y_sn @ v
            s_slack = system.v_slack * np.conj(i_slack)
            loss = float(np.sum(s_slack.real) + np.sum(s.real))
            return VoltageSolution(
                v=v,
                system=system,
                iterations=it,
                residual=residual,
                converged=True,
                loss_total=loss,
                injections=s,
            )

    raise PowerFlowError(
        f"implicit Z-bus iteration did not converge in {max_iter} steps "
        f"(last update {residual:.3e} p.u.)",
        residual=residual,
    )


def measure(
    solution: VoltageSolution,
    case: NetworkCase,
    noise_sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Monitored voltage magnitudes with additive Gaussian sensor noise."""
    if not solution.converged:
        raise ValueError("measurements require a converged solution")
    mags = solution.magnitudes(case.monitored)
    if noise_sigma:
        mags = mags + rng.normal(0.0, noise_sigma, size=mags.shape)
    return mags


def branch_losses(case: NetworkCase, solution: VoltageSolution) -> float:
    """Total series loss summed branch by branch.

    Independent of the power-balance loss in `solve`; used as a
    cross-check.
    """
    total = 0.0
    for br in case.branches:
        vf = np.array([solution.voltage(NodePhase(br.from_node, p)) for p in br.phases])
        vt = np.array([solution.voltage(NodePhase(br.to_node, p)) for p in br.phases])
        drop = vf - vt
        i = np.linalg.solve(br.z, drop)
        total += float(np.sum((drop * np.conj(i)).real))
    return total
