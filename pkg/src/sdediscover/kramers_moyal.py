"""Regression targets for drift and diffusion from sampled increments.

Each consecutive pair of samples in each path contributes one row; rows are
stacked path-major, time-minor.  The last sample of a path has no forward
difference and is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sde import DimensionMismatchError, Ensemble


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TargetSet:
    y: np.ndarray
    n_paths: int
    n_steps: int
    kind: str
    states: tuple[int, ...]

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.shape != (self.n_paths * self.n_steps,):
            raise ValueError(f"target length {y.shape} != {self.n_paths} x {self.n_steps}")
        if not np.isfinite(y).all():
            raise ValueError("targets contain non-finite values")
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    def row_index(self, row: int) -> tuple[int, int]:
        """(path, step) of a stacked row."""
        return divmod(int(row), self.n_steps)

    @property
    def label(self) -> str:
        return f"{self.kind}({','.join(str(i + 1) for i in self.states)})"

    def to_csv(self, path: str | Path) -> None:
        p, k = np.divmod(np.arange(len(self)), self.n_steps)
        lines = ["path,step,y"]
        lines.extend(f"{a},{b},{v!r}" for a, b, v in zip(p, k, self.y.tolist()))
        Path(path).write_text("\n".join(lines) + "\n")


def regression_states(ens: Ensemble) -> np.ndarray:
    """States at which the targets are evaluated, stacked like the targets."""
    return ens.states[:, :-1, :].reshape(-1, ens.dim)


def _increments(ens: Ensemble, i: int) -> np.ndarray:
    if not 0 <= i < ens.dim:
        raise DimensionMismatchError(f"state {i} out of range for dimension {ens.dim}")
    return np.diff(ens.states[:, :, i], axis=1)


def drift_targets(ens: Ensemble, i: int) -> TargetSet:
    """Forward-difference targets ``(X_i[k+1] - X_i[k]) / dt``."""
    dx = _increments(ens, i)
    return TargetSet((dx / ens.dt).ravel(), ens.n_paths, ens.n_samples - 1, "drift", (i,))


def diffusion_targets(ens: Ensemble, i: int, j: int | None = None, half: bool = False) -> TargetSet:
    """Quadratic-variation targets ``dX_i dX_j / dt``.

    Their expectation is ``(g g^T)_ij``.  ``half=True`` applies the extra
    factor 1/2 of the moment definition, in which case the expectation is
    half of that.
    """
    j = i if j is None else j
    y = _increments(ens, i) * _increments(ens, j) / ens.dt
    if half:
        y = 0.5 * y
    return TargetSet(y.ravel(), ens.n_paths, ens.n_samples - 1, "diffusion", (i, j))


def velocity_from_displacement(x, dt: float) -> np.ndarray:
    """Central differences inside, one-sided at both ends."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] < 3:
        raise InsufficientDataError("need at least 3 samples to differentiate")
    v = np.empty_like(x)
    v[1:-1] = (x[2:] - x[:-2]) / (2 * dt)
    v[0] = (x[1] - x[0]) / dt
    v[-1] = (x[-1] - x[-2]) / dt
    return v
