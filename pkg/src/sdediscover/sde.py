"""
Itô SDE models built from symbolic basis expansions.

A model carries one drift expansion and one (diagonal) diffusion expansion
per state.  Paths are integrated with Euler-Maruyama,

    X[k+1] = X[k] + f(X[k]) dt + g(X[k]) sqrt(dt) xi[k],   xi ~ N(0, I),

where every path owns an independent ``numpy.random.Generator`` so that an
ensemble is the same regardless of how the paths are batched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("constant", "monomial", "signum", "absolute", "x_abs_x", "sine", "cosine")

# noise draws are produced in blocks of this many steps per path
_BLOCK = 256


class DimensionMismatchError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    """A simulated state became non-finite."""

    def __init__(self, step: int, path: int | None = None):
        self.step = step
        self.path = path
        where = f"step {step}" if path is None else f"path {path}, step {step}"
        super().__init__(f"non-finite state encountered at {where}")


@dataclass(frozen=True, order=True)
class BasisTerm:
    """One candidate function of the state vector.

    ``indices`` holds the state components the term acts on.  Monomials list
    a component once per power, so ``x1^2*x3`` is ``("monomial", (0, 0, 2))``.
    """

    kind: str
    indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        idx = tuple(int(i) for i in self.indices)
        if any(i < 0 for i in idx):
            raise ValueError(f"negative component index in {idx}")
        if self.kind == "constant":
            if idx:
                raise ValueError("constant term takes no indices")
        elif self.kind == "monomial":
            if not idx:
                raise ValueError("monomial needs degree >= 1")
            idx = tuple(sorted(idx))
        elif len(idx) != 1:
            raise ValueError(f"{self.kind} term acts on exactly one component")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def constant(cls) -> "BasisTerm":
        return cls("constant")

    @classmethod
    def monomial(cls, *indices: int) -> "BasisTerm":
        return cls("monomial", tuple(indices))

    @property
    def degree(self) -> int:
        if self.kind == "constant":
            return 0
        if self.kind == "monomial":
            return len(self.indices)
        return 1

    @property
    def max_index(self) -> int:
        return max(self.indices, default=-1)

    @property
    def name(self) -> str:
        if self.kind == "constant":
            return "1"
        if self.kind == "monomial":
            parts = []
            for i in sorted(set(self.indices)):
                p = self.indices.count(i)
                parts.append(f"x{i + 1}" if p == 1 else f"x{i + 1}^{p}")
            return "*".join(parts)
        x = f"x{self.indices[0] + 1}"
        return {
            "signum": f"sgn({x})",
            "absolute": f"abs({x})",
            "x_abs_x": f"{x}*abs({x})",
            "sine": f"sin({x})",
            "cosine": f"cos({x})",
        }[self.kind]

    def __str__(self):
        return self.name

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Evaluate on states stacked along the last axis (shape ``(..., m)``)."""
        X = np.asarray(X, dtype=float)
        if self.max_index >= X.shape[-1]:
            raise DimensionMismatchError(
                f"term {self.name} needs state dimension > {self.max_index}, got {X.shape[-1]}"
            )
        if self.kind == "constant":
            return np.ones(X.shape[:-1])
        if self.kind == "monomial":
            # repeated multiplication keeps results identical across batch sizes
            out = X[..., self.indices[0]].copy()
            for i in self.indices[1:]:
                out = out * X[..., i]
            return out
        x = X[..., self.indices[0]]
        if self.kind == "signum":
            return np.sign(x)
        if self.kind == "absolute":
            return np.abs(x)
        if self.kind == "x_abs_x":
            return x * np.abs(x)
        if self.kind == "sine":
            return np.sin(x)
        return np.cos(x)

    def to_record(self, weight: float) -> dict:
        return {"kind": self.kind, "indices": list(self.indices), "degree": self.degree, "weight": float(weight)}

    @classmethod
    def from_record(cls, rec: dict) -> tuple["BasisTerm", float]:
        term = cls(rec["kind"], tuple(rec.get("indices", ())))
        if "degree" in rec and int(rec["degree"]) != term.degree:
            raise ValueError(f"record degree {rec['degree']} inconsistent with {term.name}")
        return term, float(rec["weight"])


def evaluate_basis(term: BasisTerm, x: Sequence[float]) -> float:
    """Scalar value of ``term`` at a single state vector ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatchError(f"expected a state vector, got shape {x.shape}")
    return float(term.evaluate(x[None, :])[0])


@dataclass(frozen=True)
class BasisExpansion:
    """Weighted sum of basis terms over an ``dim``-dimensional state."""

    dim: int
    terms: tuple[tuple[BasisTerm, float], ...] = ()

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        terms = tuple((t, float(w)) for t, w in self.terms)
        for t, _ in terms:
            if t.max_index >= self.dim:
                raise DimensionMismatchError(f"term {t.name} out of range for dimension {self.dim}")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def zero(cls, dim: int) -> "BasisExpansion":
        return cls(dim)

    @classmethod
    def from_dict(cls, dim: int, weights: dict[BasisTerm, float]) -> "BasisExpansion":
        return cls(dim, tuple(weights.items()))

    @property
    def is_zero(self) -> bool:
        return all(w == 0.0 for _, w in self.terms)

    def weight(self, term: BasisTerm) -> float:
        return sum(w for t, w in self.terms if t == term)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.dim:
            raise DimensionMismatchError(f"expected state dimension {self.dim}, got {X.shape[-1]}")
        out = np.zeros(X.shape[:-1])
        for t, w in self.terms:
            out = out + w * t.evaluate(X)
        return out

    def __str__(self):
        if not self.terms:
            return "0"
        return " + ".join(f"{w:.6g}*{t.name}" for t, w in self.terms)

    def to_records(self) -> list[dict]:
        return [t.to_record(w) for t, w in self.terms]

    @classmethod
    def from_records(cls, dim: int, records: list[dict]) -> "BasisExpansion":
        return cls(dim, tuple(BasisTerm.from_record(r) for r in records))


@dataclass(frozen=True)
class SdeModel:
    """dX = f(X) dt + diag(g(X)) dB with f, g given per state as expansions."""

    dim: int
    drift: tuple[BasisExpansion, ...]
    diffusion: tuple[BasisExpansion, ...]
    label: str = ""
    kinematic: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "drift", tuple(self.drift))
        object.__setattr__(self, "diffusion", tuple(self.diffusion))
        object.__setattr__(self, "kinematic", tuple(int(i) for i in self.kinematic))
        if len(self.drift) != self.dim or len(self.diffusion) != self.dim:
            raise DimensionMismatchError(
                f"model of dimension {self.dim} needs {self.dim} drift and diffusion entries, "
                f"got {len(self.drift)} and {len(self.diffusion)}"
            )
        for e in (*self.drift, *self.diffusion):
            if e.dim != self.dim:
                raise DimensionMismatchError("expansion dimension differs from model dimension")
        for i in self.kinematic:
            if not 0 <= i < self.dim:
                raise DimensionMismatchError(f"kinematic state {i} out of range")
            if not self.diffusion[i].is_zero:
                raise ValueError(f"kinematic state {i} must have zero diffusion")

    def drift_at(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.stack([e.evaluate(X) for e in self.drift], axis=-1)

    def diffusion_at(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.stack([e.evaluate(X) for e in self.diffusion], axis=-1)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "label": self.label,
            "kinematic": list(self.kinematic),
            "drift": [e.to_records() for e in self.drift],
            "diffusion": [e.to_records() for e in self.diffusion],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SdeModel":
        m = int(d["dim"])
        return cls(
            dim=m,
            drift=tuple(BasisExpansion.from_records(m, r) for r in d["drift"]),
            diffusion=tuple(BasisExpansion.from_records(m, r) for r in d["diffusion"]),
            label=d.get("label", ""),
            kinematic=tuple(d.get("kinematic", ())),
        )

    def __str__(self):
        lines = [f"SdeModel {self.label!r} (m={self.dim})"]
        for i in range(self.dim):
            lines.append(f"  dx{i + 1} = [{self.drift[i]}] dt + [{self.diffusion[i]}] dB{i + 1}")
        return "\n".join(lines)


def save_model(model: SdeModel, path: str | Path, **extra) -> None:
    d = model.to_dict()
    d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


def load_model(path: str | Path) -> SdeModel:
    return SdeModel.from_dict(json.loads(Path(path).read_text()))


class _Evaluator:
    # Compiles the model into a flat list of column operations.  Every distinct
    # term is computed once per call, monomials reuse their shared prefixes, and
    # the floating-point operation order is fixed so results do not depend on
    # how many paths are stacked in X.
    _UNARY = {"signum": np.sign, "absolute": np.abs, "sine": np.sin, "cosine": np.cos}

    def __init__(self, model: SdeModel):
        self.model = model
        self.ops: list[tuple] = []
        slots: dict[tuple, int] = {}

        def slot(key, op):
            if key not in slots:
                slots[key] = len(self.ops)
                self.ops.append(op)
            return slots[key]

        def term_slot(t: BasisTerm) -> int:
            if t.kind == "constant":
                return slot(("one",), ("one",))
            if t.kind == "monomial":
                s_ = slot(("m", t.indices[:1]), ("col", t.indices[0]))
                for k in range(2, len(t.indices) + 1):
                    s_ = slot(("m", t.indices[:k]), ("mul", s_, t.indices[k - 1]))
                return s_
            if t.kind == "x_abs_x":
                return slot((t.kind, t.indices), ("xabsx", t.indices[0]))
            return slot((t.kind, t.indices), ("unary", self._UNARY[t.kind], t.indices[0]))

        self.drift_rows = [[(term_slot(t), w) for t, w in e.terms] for e in model.drift]
        self.diff_rows = [[(term_slot(t), w) for t, w in e.terms] for e in model.diffusion]

    def _values(self, X: np.ndarray) -> list:
        cols = [np.ascontiguousarray(X[..., i]) for i in range(X.shape[-1])]
        vals: list = []
        for op in self.ops:
            tag = op[0]
            if tag == "col":
                vals.append(cols[op[1]])
            elif tag == "mul":
                vals.append(vals[op[1]] * cols[op[2]])
            elif tag == "one":
                vals.append(np.ones(X.shape[:-1]))
            elif tag == "xabsx":
                vals.append(cols[op[1]] * np.abs(cols[op[1]]))
            else:
                vals.append(op[1](cols[op[2]]))
        return vals

    @staticmethod
    def _combine(rows, values, shape):
        out = np.zeros(shape)
        for i, row in enumerate(rows):
            if not row:
                continue
            acc = row[0][1] * values[row[0][0]]
            for u, w in row[1:]:
                acc += w * values[u]
            out[..., i] = acc
        return out

    def __call__(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        values = self._values(X)
        return (
            self._combine(self.drift_rows, values, X.shape),
            self._combine(self.diff_rows, values, X.shape),
        )


def child_seed(seed: int, j: int) -> int:
    """Seed for path ``j`` of an ensemble seeded with ``seed``."""
    ss = np.random.SeedSequence([int(seed) % 2**63, int(j)])
    return int(ss.generate_state(1, np.uint64)[0])


def _em_blocks(
    model: SdeModel,
    X0: np.ndarray,
    dt: float,
    n_steps: int,
    rngs: Sequence[np.random.Generator],
) -> Iterator[np.ndarray]:
    """Yield successive blocks of integrated states with shape ``(b, P, m)``.

    The first block starts with the initial states.  Paths whose state turns
    non-finite are set to NaN from that step on and never recover.
    """
    P, m = X0.shape
    evaluate = _Evaluator(model)
    sqdt = np.sqrt(dt)
    X = X0.copy()
    yield X[None].copy()
    done = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while done < n_steps:
            b = min(_BLOCK, n_steps - done)
            xi = np.stack([g.standard_normal((b, m)) for g in rngs], axis=1)
            out = np.empty((b, P, m))
            for k in range(b):
                f, g = evaluate(X)
                X = X + f * dt + g * sqdt * xi[k]
                if not np.isfinite(X.sum()):
                    bad = ~np.isfinite(X).all(axis=1)
                    X[bad] = np.nan
                out[k] = X
            done += b
            yield out


def _check_inputs(model: SdeModel, X0: np.ndarray, dt: float, n_steps: int):
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if X0.shape[-1] != model.dim:
        raise DimensionMismatchError(f"x0 has dimension {X0.shape[-1]}, model has {model.dim}")
    if not np.isfinite(X0).all():
        raise ValueError("x0 must be finite")
    f, g = _Evaluator(model)(X0)
    if not (np.isfinite(f).all() and np.isfinite(g).all()):
        raise ValueError("model is not finite at x0")


@dataclass(frozen=True)
class Trajectory:
    dt: float
    states: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 2 or s.shape[0] < 2:
            raise ValueError(f"trajectory needs an N x m array with N >= 2, got shape {s.shape}")
        if not np.isfinite(s).all():
            raise ValueError("trajectory contains non-finite entries")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "states", s)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.states.shape[0])


@dataclass(frozen=True)
class Ensemble:
    """Paths sharing dt and length, stored as a ``(n_paths, N, m)`` array."""

    dt: float
    states: np.ndarray
    seed: int = 0
    t0: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 3 or s.shape[1] < 2:
            raise ValueError(f"ensemble needs shape (n_paths, N>=2, m), got {s.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "states", s)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], seed: int = 0) -> "Ensemble":
        if not trajectories:
            raise ValueError("empty ensemble")
        first = trajectories[0]
        for tr in trajectories:
            if tr.states.shape != first.states.shape or tr.dt != first.dt:
                raise ValueError("ensemble members must share dt and shape")
        return cls(first.dt, np.stack([t.states for t in trajectories]), seed, first.t0)

    @property
    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.dt, s, self.t0) for s in self.states]

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_samples(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_samples)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.states).tobytes())
        h.update(repr((self.dt, self.t0)).encode())
        return h.hexdigest()


def euler_maruyama(model: SdeModel, x0, dt: float, n_steps: int, seed: int) -> Trajectory:
    X0 = np.asarray(x0, dtype=float).reshape(1, -1)
    _check_inputs(model, X0, dt, n_steps)
    blocks = list(_em_blocks(model, X0, dt, n_steps, [np.random.default_rng(seed)]))
    states = np.concatenate(blocks)[:, 0, :]
    bad = ~np.isfinite(states).all(axis=1)
    if bad.any():
        raise DivergenceError(int(np.argmax(bad)))
    return Trajectory(dt, states)


def steps_for(horizon: float, dt: float, tol: float = 1e-9) -> int:
    """Whole number of steps covering ``horizon``; raises if it is not one."""
    if not dt > 0 or not horizon > 0:
        raise ValueError("dt and horizon must be positive")
    n = horizon / dt
    k = int(round(n))
    if k < 1 or abs(n - k) > tol * max(1.0, n):
        raise ValueError(f"horizon {horizon} is not a whole number of steps of dt={dt}")
    return k


def simulate_ensemble(model: SdeModel, x0, dt: float, horizon: float, n_paths: int, seed: int) -> Ensemble:
    n_steps = steps_for(horizon, dt)
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    X0 = np.tile(np.asarray(x0, dtype=float).reshape(1, -1), (n_paths, 1))
    _check_inputs(model, X0[:1], dt, n_steps)
    rngs = [np.random.default_rng(child_seed(seed, j)) for j in range(n_paths)]
    states = np.concatenate(list(_em_blocks(model, X0, dt, n_steps, rngs)))
    states = np.ascontiguousarray(states.transpose(1, 0, 2))
    bad = ~np.isfinite(states).all(axis=2)
    if bad.any():
        j = int(np.argmax(bad.any(axis=1)))
        raise DivergenceError(int(np.argmax(bad[j])), path=j)
    return Ensemble(dt, states, seed)


def add_measurement_noise(ens: Ensemble, percent: float, seed: int, columns: Sequence[int] | None = None) -> Ensemble:
    """Corrupt states with Gaussian noise scaled to each column's ensemble std.

    ``columns`` restricts corruption to the listed states (all by default).
    """
    if percent < 0:
        raise ValueError("noise percent must be >= 0")
    cols = range(ens.dim) if columns is None else [int(c) for c in columns]
    for c in cols:
        if not 0 <= c < ens.dim:
            raise DimensionMismatchError(f"noise column {c} out of range")
    if percent == 0:
        return ens
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(ens.states.shape)
    std = ens.states.reshape(-1, ens.dim).std(axis=0)
    noisy = ens.states.copy()
    for c in cols:
        if std[c] > 0:
            noisy[..., c] += (percent / 100.0) * std[c] * xi[..., c]
    return Ensemble(ens.dt, noisy, ens.seed, ens.t0)


# -- built-in ground-truth systems ------------------------------------------

def _x(i):
    return BasisTerm.monomial(i)


def _shear_chain(stiff, damp, diff, extra=None, label=""):
    """Unit-mass shear chain; DOF r has state (x, v) at indices (2r, 2r+1).

    Spring r joins DOF r to DOF r-1 (the ground for r = 0).  ``extra`` maps a
    velocity row to additional drift weights.
    """
    n = len(stiff)
    m = 2 * n
    rows = [dict() for _ in range(m)]

    def add(row, term, w):
        rows[row][term] = rows[row].get(term, 0.0) + w

    for r in range(n):
        add(2 * r, _x(2 * r + 1), 1.0)
    for r in range(n):
        v = 2 * r + 1
        for s, (k, c) in enumerate(zip(stiff, damp)):
            # spring s pulls DOF s toward DOF s-1
            lo = s - 1
            if s == r:
                add(v, _x(2 * r), -k)
                add(v, _x(2 * r + 1), -c)
                if lo >= 0:
                    add(v, _x(2 * lo), k)
                    add(v, _x(2 * lo + 1), c)
            elif lo == r:
                add(v, _x(2 * r), -k)
                add(v, _x(2 * r + 1), -c)
                add(v, _x(2 * s), k)
                add(v, _x(2 * s + 1), c)
    for row, weights in (extra or {}).items():
        for term, w in weights.items():
            add(row, term, w)
    drift = tuple(BasisExpansion.from_dict(m, {t: w for t, w in rw.items() if w != 0.0}) for rw in rows)
    diffusion = tuple(
        BasisExpansion(m, ((BasisTerm.constant(), float(diff[i // 2])),))
        if i % 2 and diff[i // 2]
        else BasisExpansion.zero(m)
        for i in range(m)
    )
    return SdeModel(m, drift, diffusion, label=label, kinematic=tuple(range(0, m, 2)))


def _cubic_links(links, alphas):
    """Drift weights for cubic springs ``alpha * (x_a - x_b)^3``.

    ``b is None`` anchors DOF ``a`` to the ground.
    """
    extra: dict[int, dict[BasisTerm, float]] = {}

    def add(row, term, w):
        extra.setdefault(row, {})
        extra[row][term] = extra[row].get(term, 0.0) + w

    for (a, b), alpha in zip(links, alphas):
        xa = 2 * a
        if b is None:
            add(2 * a + 1, BasisTerm.monomial(xa, xa, xa), -alpha)
            continue
        xb = 2 * b
        # (xa - xb)^3 = xa^3 - 3 xa^2 xb + 3 xa xb^2 - xb^3
        cube = {
            BasisTerm.monomial(xa, xa, xa): 1.0,
            BasisTerm.monomial(xa, xa, xb): -3.0,
            BasisTerm.monomial(xa, xb, xb): 3.0,
            BasisTerm.monomial(xb, xb, xb): -1.0,
        }
        for term, c in cube.items():
            add(2 * a + 1, term, -alpha * c)
            add(2 * b + 1, term, alpha * c)
    return extra


BUILTINS = ("duffing_sdof", "cubic_3dof", "tmd_5dof")


def builtin_system(name: str) -> tuple[SdeModel, np.ndarray]:
    """Ground-truth mass-normalized model and default initial state."""
    if name == "duffing_sdof":
        m = 2
        drift = (
            BasisExpansion(m, ((_x(1), 1.0),)),
            BasisExpansion(m, ((_x(0), -1000.0), (_x(1), -2.0), (BasisTerm.monomial(0, 0, 0), -100000.0))),
        )
        diffusion = (BasisExpansion.zero(m), BasisExpansion(m, ((BasisTerm.constant(), 1.0),)))
        return SdeModel(m, drift, diffusion, label=name, kinematic=(0,)), np.zeros(2)
    if name == "cubic_3dof":
        # links: ground-1 (alpha1 x1^3), 1-2 (alpha2 (x1-x3)^3), 2-3 (alpha3 (x3-x5)^3)
        extra = _cubic_links([(0, None), (0, 1), (1, 2)], [1e5, 1e5, 1e5])
        model = _shear_chain([1000.0, 2000.0, 3000.0], [2.0] * 3, [1.0] * 3, extra, label=name)
        return model, np.array([0.05, 0.0, 0.01, 0.0, 0.01, 0.0])
    if name == "tmd_5dof":
        stiff = [1000.0, 1500.0, 2000.0, 2500.0, 3000.0, 300.0]
        model = _shear_chain(stiff, [2.0] * 6, [1.0] * 5 + [0.0], label=name)
        return model, np.zeros(12)
    raise ValueError(f"unknown built-in system {name!r}; choose from {', '.join(BUILTINS)}")


# -- file formats -------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_ensemble(ens: Ensemble, directory: str | Path, meta: dict | None = None, comment: str = "") -> Path:
    """One ``path_<j>.csv`` per path (columns ``t,x1..xm``) plus ``manifest.json``.

    ``comment`` lines are written first, each prefixed with ``#``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    head = [f"# {c}" for c in comment.splitlines()]
    head.append("t," + ",".join(f"x{i + 1}" for i in range(ens.dim)))
    t = ens.times
    for j, path in enumerate(ens.states):
        lines = list(head)
        lines.extend(",".join(map(_fmt, (ti, *row))) for ti, row in zip(t, path))
        (d / f"path_{j}.csv").write_text("\n".join(lines) + "\n")
    manifest = {"dt": ens.dt, "N": ens.n_samples, "m": ens.dim, "n_paths": ens.n_paths, "seed": ens.seed, "t0": ens.t0}
    manifest.update(meta or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def read_ensemble(directory: str | Path) -> Ensemble:
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    man = json.loads(mf.read_text())
    paths = []
    for j in range(int(man["n_paths"])):
        body = [ln for ln in (d / f"path_{j}.csv").read_text().splitlines() if not ln.startswith("#")]
        arr = np.loadtxt(body[1:], delimiter=",", ndmin=2)
        paths.append(arr[:, 1:])
    states = np.stack(paths)
    if states.shape[1:] != (int(man["N"]), int(man["m"])):
        raise ValueError(f"ensemble files disagree with manifest in {d}")
    return Ensemble(float(man["dt"]), states, int(man["seed"]), float(man.get("t0", 0.0)))
