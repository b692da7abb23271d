"""Monte Carlo first-passage failure probabilities.

A path fails at the first grid time at which the monitored state exceeds the
threshold; once failed it stays failed.  ``pf(t)`` is the failed fraction.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sde import DimensionMismatchError, SdeModel, _check_inputs, _em_blocks, child_seed, steps_for

log = logging.getLogger(__name__)

NEVER = np.iinfo(np.int64).max


@dataclass(frozen=True)
class LimitState:
    state_index: int
    threshold: float
    direction: str = "exceed_above"
    absolute: bool = False

    def __post_init__(self):
        if self.direction != "exceed_above":
            raise ValueError(f"unsupported direction {self.direction!r}")
        if self.state_index < 0:
            raise ValueError("state_index must be >= 0")
        if math.isnan(self.threshold):
            raise ValueError("threshold is NaN")

    def margin(self, X: np.ndarray) -> np.ndarray:
        """Signed margin ``response - threshold``; positive means failure."""
        r = X[..., self.state_index]
        return (np.abs(r) if self.absolute else r) - self.threshold

    def to_dict(self) -> dict:
        return {"state_index": self.state_index, "threshold": self.threshold,
                "direction": self.direction, "absolute": self.absolute}


@dataclass(frozen=True)
class FailureCurve:
    times: np.ndarray
    pf: np.ndarray
    ci_halfwidth: np.ndarray
    n_paths: int
    seed: int
    n_diverged: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.times) == len(self.pf) == len(self.ci_halfwidth)):
            raise ValueError("times, pf and ci_halfwidth lengths disagree")
        if np.any(self.pf < 0) or np.any(self.pf > 1):
            raise ValueError("pf outside [0, 1]")
        if np.any(np.diff(self.pf) < 0):
            raise ValueError("pf must be non-decreasing")

    def to_csv(self, path: str | Path, header: str = "") -> None:
        lo = np.clip(self.pf - self.ci_halfwidth, 0.0, 1.0)
        hi = np.clip(self.pf + self.ci_halfwidth, 0.0, 1.0)
        lines = [header.rstrip("\n")] if header else []
        lines.append("t,pf,ci_lo,ci_hi")
        lines.extend(f"{t!r},{p!r},{a!r},{b!r}" for t, p, a, b in zip(
            np.round(self.times, 12).tolist(), self.pf.tolist(), lo.tolist(), hi.tolist()))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path, n_paths: int = 0, seed: int = 0) -> "FailureCurve":
        rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
        a = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]]).reshape(-1, 4)
        return cls(a[:, 0], a[:, 1], 0.5 * (a[:, 3] - a[:, 2]), n_paths, seed)


def _first_passage(model, X0, dt, n_steps, ls, rngs) -> tuple[np.ndarray, int]:
    # first failing step per path (NEVER if none); diverged paths fail when they blow up
    P = X0.shape[0]
    first = np.full(P, NEVER, dtype=np.int64)
    n_div = 0
    step = 0
    for block in _em_blocks(model, X0, dt, n_steps, rngs):
        with np.errstate(invalid="ignore"):
            hit = (ls.margin(block) > 0) | np.isnan(block).any(axis=2)
        n_div_block = np.isnan(block).any(axis=2)
        fresh = hit.any(axis=0) & (first == NEVER)
        if fresh.any():
            k = np.argmax(hit[:, fresh], axis=0)
            first[fresh] = step + k
            n_div += int(n_div_block[k, np.flatnonzero(fresh)].sum())
        step += block.shape[0]
    return first, n_div


def failure_probability(
    model: SdeModel,
    x0,
    dt: float,
    horizon: float,
    n_paths: int,
    ls: LimitState,
    seed: int,
    report_stride: float = 0.1,
    threads: int = 1,
    substeps: int = 1,
) -> FailureCurve:
    """First-passage failure curve on the grid ``0, stride, ..., horizon``.

    The model is integrated with step ``dt / substeps`` and the threshold is
    checked after every integration step.  Explicit Euler-Maruyama is only
    stable while ``|1 + lambda h| < 1`` for every eigenvalue of the linearized
    drift, which lightly damped stiff modes can violate at the sampling step.

    Path ``j`` uses the same child seed as in :func:`simulate_ensemble`, so two
    models run with one seed share their Brownian increments.  Paths are split
    into ``threads`` contiguous chunks; the result does not depend on the split.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if ls.state_index >= model.dim:
        raise DimensionMismatchError(f"limit-state index {ls.state_index} out of range for dimension {model.dim}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = dt / substeps
    n_steps = steps_for(horizon, dt) * substeps
    stride = steps_for(report_stride, dt) * substeps
    if n_steps % stride:
        raise ValueError("horizon is not a whole number of report strides")
    X0 = np.tile(np.asarray(x0, dtype=float).reshape(1, -1), (n_paths, 1))
    _check_inputs(model, X0[:1], h, n_steps)

    chunks = [c for c in np.array_split(np.arange(n_paths), max(1, int(threads))) if c.size]

    def run(idx):
        rngs = [np.random.default_rng(child_seed(seed, int(j))) for j in idx]
        return _first_passage(model, X0[idx], h, n_steps, ls, rngs)

    if len(chunks) == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(len(chunks)) as ex:
            parts = list(ex.map(run, chunks))
    first = np.concatenate([p[0] for p in parts])
    n_div = sum(p[1] for p in parts)
    if n_div:
        log.warning("%d of %d paths diverged and were counted as failed", n_div, n_paths)

    grid = np.arange(0, n_steps + 1, stride)
    pf = np.searchsorted(np.sort(first), grid, side="right") / n_paths
    ci = 1.96 * np.sqrt(pf * (1 - pf) / n_paths)
    return FailureCurve(grid * h, pf, ci, n_paths, seed, n_div,
                        {"limit_state": ls.to_dict(), "dt": dt, "substeps": substeps, "horizon": horizon})


def compare_curves(a: FailureCurve, b: FailureCurve) -> dict:
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times, rtol=0, atol=1e-9):
        raise ValueError("failure curves are on different time grids")
    d = np.abs(a.pf - b.pf)
    return {"sup_diff": float(d.max()), "mean_abs_diff": float(d.mean())}


def comparison_report(a: FailureCurve, b: FailureCurve, labels=("reference", "candidate"), header: str = "") -> str:
    c = compare_curves(a, b)
    lines = [header.rstrip("\n")] if header else []
    lines += [f"sup_diff: {c['sup_diff']!r}", f"mean_abs_diff: {c['mean_abs_diff']!r}"]
    for lab, cur in zip(labels, (a, b)):
        lines += [f"[{lab}]", f"  n_paths: {cur.n_paths}", f"  seed: {cur.seed}",
                  f"  n_diverged: {cur.n_diverged}", f"  pf_final: {cur.pf[-1]!r}"]
        for k, v in cur.meta.items():
            lines.append(f"  {k}: {v}")
    return "\n".join(lines) + "\n"
