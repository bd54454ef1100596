"""Per-timestep records shared by the controller loop and scenario runner."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np


class Plant(Protocol):
    """What the control loop needs from the physical system.

    One call to `apply_and_measure` advances the plant a single control
    interval with the given dispatch applied and returns the (noisy)
    monitored-voltage measurement for that interval.
    """

    def n_channels(self) -> int: ...

    def q_limits(self) -> np.ndarray:
        """Per-channel reactive bound for the *next* interval (p.u.)."""
        ...

    def apply_and_measure(self, q: np.ndarray) -> np.ndarray: ...

    def snapshot(self) -> dict:
        """State of the interval just simulated (for the trace)."""
        ...


@dataclass
class StepRecord:
    t: int
    pv_scale: float
    load_scale: float
    q: np.ndarray
    v_meas: np.ndarray
    v_true: np.ndarray
    loss: float
    t_regress_ms: float = 0.0
    t_control_ms: float = 0.0
    v_pred: np.ndarray | None = None  # one-step-ahead prediction, control steps only
    w_norm: float = float("nan")  # spectral norm of the fitted sensitivity
    event: str = ""


@dataclass
class ScenarioTrace:
    """Complete record of one closed-loop run."""

    rows: list[StepRecord] = field(default_factory=list)
    policy: str = ""
    warmup_steps: int = 0
    config: dict = field(default_factory=dict)
    aborted: str = ""  # non-empty holds the abort reason (plant divergence)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def q(self) -> np.ndarray:
        return np.array([r.q for r in self.rows])

    @property
    def v_meas(self) -> np.ndarray:
        return np.array([r.v_meas for r in self.rows])

    @property
    def v_true(self) -> np.ndarray:
        return np.array([r.v_true for r in self.rows])

    @property
    def loss(self) -> np.ndarray:
        return np.array([r.loss for r in self.rows])

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.rows])
