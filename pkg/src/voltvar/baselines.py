"""Reference policies: local droop control, a frozen model-based
linearization, and a per-snapshot ideal-optimum oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .controller import ControllerConfig, control_update, project

# probe(q) -> true monitored magnitudes for a frozen exogenous state
PlantProbe = Callable[[np.ndarray], np.ndarray]


@dataclass
class DroopConfig:
    """Local proportional law Q = clamp(-gamma (v - v_ref))."""

    gamma: float = 10.0
    v_ref: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma <= 0:
            raise ValueError(f"droop coefficient must be positive and finite, got {self.gamma}")


def droop_step(v_local, v_ref, gamma, q_max):
    """Droop response to the local voltage deviation, saturated at q_max.

    Sets the output from the deviation directly (not incrementally).
    Accepts scalars or per-channel arrays.
    """
    q = -np.asarray(gamma) * (np.asarray(v_local) - np.asarray(v_ref))
    return np.clip(q, -np.asarray(q_max), np.asarray(q_max))


def stale_sensitivity(
    probe: PlantProbe,
    q0: np.ndarray,
    perturbation: float = 1e-4,
) -> np.ndarray:
    """Frozen linear response model about q0 by central differences.

    Returns the (G+1) x M matrix whose first G rows are the Jacobian
    d|v_M|/dq and whose last row makes the prediction exact at q0:
    bias = v_M(q0) - J^T q0.
    """
    q0 = np.asarray(q0, dtype=float)
    v0 = np.asarray(probe(q0), dtype=float)
    g, m = q0.size, v0.size
    jac = np.empty((g, m))
    for i in range(g):
        e = np.zeros(g)
        e[i] = perturbation
        v_plus = probe(q0 + e)
        v_minus = probe(q0 - e)
        jac[i] = (v_plus - v_minus) / (2.0 * perturbation)
    w = np.empty((g + 1, m))
    w[:g] = jac
    w[g] = v0 - jac.T @ q0
    return w


def ideal_qp_oracle(
    probe: PlantProbe,
    q_max: np.ndarray,
    config: ControllerConfig,
    q0: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    fd_step: float = 1e-5,
    refresh: int = 5,
) -> np.ndarray:
    """Fixed point of the measurement-feedback projected-gradient update
    on a frozen plant, using fresh finite-difference sensitivities.

    This is the converged dispatch an ideal model-based method would
    reach; the closed-loop controller is expected to approach it.
    """
    q_max = np.asarray(q_max, dtype=float)
    q = np.zeros_like(q_max) if q0 is None else np.asarray(q0, dtype=float).copy()
    q = project(q, q_max)
    targets = None
    w = None
    stale_age = 0
    for _ in range(max_iter):
        if w is None or stale_age >= refresh:
            w = stale_sensitivity(probe, q, perturbation=fd_step)
            stale_age = 0
        v = np.asarray(probe(q), dtype=float)
        if targets is None:
            targets = config.targets(v.size)
        dq = config.alpha1 * (w[:-1] @ (v - targets)) + config.alpha2 * q
        q_next = control_update(q, dq, config.d, q_max)
        if np.linalg.norm(q_next - q) <= tol:
            if stale_age == 0:
                return q_next
            w = None  # re-verify the fixed point with a fresh sensitivity
        q = q_next
        stale_age += 1
    raise RuntimeError(f"ideal oracle did not converge within {max_iter} iterations")
