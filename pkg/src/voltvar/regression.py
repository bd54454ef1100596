"""Sliding-window recursive regression of the voltage response model.

Maintains v_M ~ W^T [q; 1] over a FIFO window of L samples with geometric
down-weighting (forgetting factor beta), updated in closed form: each step
pulls in the newest sample and pushes out the oldest via rank-one updates
of the inverse Gram matrix Phi, so no factorization or inversion happens
after initialization.

Weighting: the sample that is k steps old carries weight beta^k in the
Gram matrix.  The ridge term lambda*I from initialization is never removed
by the recursion; it decays geometrically (tracked in `ridge_residue`) and
is accounted for by the verification oracles.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class DegenerateWindowError(RuntimeError):
    """Removing the oldest sample would make the window Gram singular.

    The window has lost excitation in a direction only that sample
    supported; the caller must re-initialize with `init_batch`.
    """


REMOVAL_DENOMINATOR_FLOOR = 1e-8


@dataclass(frozen=True)
class Sample:
    """One regression observation: augmented input [q; 1] and measured
    monitored magnitudes."""

    x: np.ndarray
    y: np.ndarray
    t: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 1 or y.ndim != 1:
            raise ValueError("sample vectors must be one-dimensional")
        if x[-1] != 1.0:
            raise ValueError("last entry of the augmented input must be 1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)


@dataclass
class ResponseModel:
    """Regression state: W, inverse Gram Phi, and the sample window.

    Single-owner mutable: updates are strictly sequential per instance.
    """

    w: np.ndarray
    phi: np.ndarray
    window: deque = field(default_factory=deque)
    beta: float = 0.95
    lam: float = 1e-2
    step: int = 0
    ridge_residue: float = 0.0

    @property
    def n_inputs(self) -> int:
        return self.w.shape[0] - 1

    @property
    def n_outputs(self) -> int:
        return self.w.shape[1]

    @property
    def window_length(self) -> int:
        return len(self.window)

    # -- lifecycle -----------------------------------------------------

    @classmethod
    def init_batch(cls, samples, beta: float, lam: float) -> "ResponseModel":
        """Solve the ridge-regularized weighted batch problem over an
        initial window.

        The sample that is k steps old is weighted beta^k; lam > 0
        guarantees invertibility even for collinear windows.
        """
        samples = list(samples)
        if not samples:
            raise ValueError("init_batch requires at least one sample")
        if not 0.0 < beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {beta}")
        if lam <= 0.0:
            raise ValueError(f"lambda must be positive, got {lam}")
        n = samples[0].x.size
        m = samples[0].y.size
        gram = lam * np.eye(n)
        cross = np.zeros((n, m))
        for age, s in enumerate(reversed(samples)):  # age 0 = newest
            wgt = beta**age
            gram += wgt * np.outer(s.x, s.x)
            cross += wgt * np.outer(s.x, s.y)
        phi = np.linalg.inv(gram)
        phi = 0.5 * (phi + phi.T)
        return cls(
            w=phi @ cross,
            phi=phi,
            window=deque(samples),
            beta=beta,
            lam=lam,
            step=len(samples),
            ridge_residue=lam,
        )

    # -- recursive updates ----------------------------------------------

    def add_sample(self, sample: Sample) -> "ResponseModel":
        """Pull in the newest sample (window grows to L+1).

        Rank-one Sherman-Morrison update of Phi followed by the gain-form
        correction of W; the add denominator beta + x' Phi x is strictly
        positive for positive-definite Phi.
        """
        x, y = sample.x, sample.y
        if x.size != self.phi.shape[0]:
            raise ValueError(f"input size {x.size} does not match model {self.phi.shape[0]}")
        phi_x = self.phi @ x
        gain = phi_x / (self.beta + x @ phi_x)
        self.w += np.outer(gain, y - self.w.T @ x)
        self.phi = (self.phi - np.outer(gain, phi_x)) / self.beta
        self.phi = 0.5 * (self.phi + self.phi.T)
        self.window.append(sample)
        self.ridge_residue *= self.beta
        return self

    def remove_oldest(self) -> "ResponseModel":
        """Push out the oldest sample (window shrinks back to L).

        The oldest of L+1 samples carries weight beta^L.  Raises
        `DegenerateWindowError` when the removal denominator
        1 - beta^L x' Phi x falls below the floor: the remaining window no
        longer supports that sample's direction.
        """
        if len(self.window) < 2:
            raise ValueError("cannot remove from a window of length < 2")
        old = self.window[0]
        x, y = old.x, old.y
        w_l = self.beta ** (len(self.window) - 1)
        phi_x = self.phi @ x
        denom = 1.0 - w_l * (x @ phi_x)
        if denom < REMOVAL_DENOMINATOR_FLOOR:
            raise DegenerateWindowError(
                f"removal denominator {denom:.3e} below "
                f"{REMOVAL_DENOMINATOR_FLOOR:.0e}; window lost excitation"
            )
        gain = w_l * phi_x / denom
        self.phi = self.phi + np.outer(gain, phi_x)
        self.phi = 0.5 * (self.phi + self.phi.T)
        # residual against the post-add W, per the sequential form
        self.w -= np.outer(gain, y - self.w.T @ x)
        self.window.popleft()
        return self

    def update(self, sample: Sample) -> "ResponseModel":
        """One timestep: add the new sample, then drop the oldest.

        This is the single entry point used by the controller loop.
        """
        self.add_sample(sample)
        self.remove_oldest()
        self.step += 1
        return self

    # -- queries ---------------------------------------------------------

    def predict(self, q: np.ndarray) -> np.ndarray:
        """Predicted monitored magnitudes for dispatch q: W^T [q; 1]."""
        q = np.asarray(q, dtype=float)
        if q.size != self.n_inputs:
            raise ValueError(f"dispatch size {q.size} does not match model {self.n_inputs}")
        x = np.append(q, 1.0)
        return self.w.T @ x

    def sensitivity(self) -> np.ndarray:
        """Input-output sensitivity block: W without its bias row (G x M)."""
        return self.w[:-1, :]

    # -- state dump (debugging and golden tests) --------------------------

    def dump(self, path) -> None:
        """Write the full model state as JSON."""
        import json

        doc = {
            "w": self.w.tolist(),
            "phi": self.phi.tolist(),
            "window": [
                {"x": s.x.tolist(), "y": s.y.tolist(), "t": s.t} for s in self.window
            ],
            "beta": self.beta,
            "lambda": self.lam,
            "step": self.step,
            "ridge_residue": self.ridge_residue,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "ResponseModel":
        import json

        with open(path) as fh:
            doc = json.load(fh)
        window = deque(
            Sample(x=np.array(s["x"]), y=np.array(s["y"]), t=s["t"])
            for s in doc["window"]
        )
        return cls(
            w=np.array(doc["w"]),
            phi=np.array(doc["phi"]),
            window=window,
            beta=doc["beta"],
            lam=doc["lambda"],
            step=doc["step"],
            ridge_residue=doc["ridge_residue"],
        )
