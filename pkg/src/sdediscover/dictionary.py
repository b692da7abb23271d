"""Candidate-function design matrices and their standardization."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Sequence

import numpy as np

from .sde import BasisTerm, DimensionMismatchError

EXTRA_FAMILIES = (
    ("include_signum", "signum"),
    ("include_abs", "absolute"),
    ("include_x_abs_x", "x_abs_x"),
    ("include_sin", "sine"),
    ("include_cos", "cosine"),
)


class DegenerateColumnError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class DictionaryConfig:
    poly_order: int = 2
    include_signum: bool = False
    include_abs: bool = False
    include_x_abs_x: bool = False
    include_sin: bool = False
    include_cos: bool = False
    columns: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.poly_order < 0:
            raise ValueError("poly_order must be >= 0")
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(self.columns))
            return
        if self.poly_order < 1 and not any(getattr(self, f) for f, _ in EXTRA_FAMILIES):
            raise ValueError("dictionary needs poly_order >= 1 or at least one extra family")

    @property
    def n_extra_families(self) -> int:
        return sum(bool(getattr(self, f)) for f, _ in EXTRA_FAMILIES)

    def to_dict(self) -> dict:
        d = {"poly_order": self.poly_order}
        d.update({f: getattr(self, f) for f, _ in EXTRA_FAMILIES})
        if self.columns is not None:
            d["columns"] = list(self.columns)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DictionaryConfig":
        d = dict(d)
        if d.get("columns") is not None:
            d["columns"] = tuple(str(c) for c in d["columns"])
        return cls(**d)


def parse_term(name: str) -> BasisTerm:
    """Inverse of ``BasisTerm.name`` (``"1"``, ``"x1^2*x3"``, ``"sgn(x2)"``, ...)."""
    s = name.replace(" ", "")
    if s == "1":
        return BasisTerm.constant()
    for prefix, kind in (("sgn(", "signum"), ("abs(", "absolute"), ("sin(", "sine"), ("cos(", "cosine")):
        if s.startswith(prefix) and s.endswith(")"):
            return BasisTerm(kind, (_component(s[len(prefix):-1]),))
    if s.endswith(")") and "*abs(" in s:
        a, b = s[:-1].split("*abs(")
        if a != b:
            raise ValueError(f"mixed-component term {name!r} not supported")
        return BasisTerm("x_abs_x", (_component(a),))
    idx: list[int] = []
    for factor in s.split("*"):
        base, _, power = factor.partition("^")
        idx.extend([_component(base)] * (int(power) if power else 1))
    return BasisTerm.monomial(*idx)


def _component(tok: str) -> int:
    if not tok.startswith("x") or not tok[1:].isdigit() or int(tok[1:]) < 1:
        raise ValueError(f"bad state symbol {tok!r}")
    return int(tok[1:]) - 1


def dictionary_terms(m: int, cfg: DictionaryConfig) -> list[BasisTerm]:
    """Columns in canonical order.

    Constant first, then monomials of degree 1..P in graded-lexicographic
    order, then the extra families, each listed component by component.
    """
    if m < 1:
        raise ValueError("state dimension must be >= 1")
    if cfg.columns is not None:
        terms = [parse_term(c) for c in cfg.columns]
        for t in terms:
            if t.max_index >= m:
                raise DimensionMismatchError(f"column {t.name} out of range for {m} states")
        if len(set(terms)) != len(terms):
            raise ValueError("duplicate columns in explicit column list")
        return terms
    terms = [BasisTerm.constant()]
    for d in range(1, cfg.poly_order + 1):
        terms.extend(BasisTerm.monomial(*c) for c in combinations_with_replacement(range(m), d))
    for flag, kind in EXTRA_FAMILIES:
        if getattr(cfg, flag):
            terms.extend(BasisTerm(kind, (i,)) for i in range(m))
    return terms


@dataclass(frozen=True)
class Dictionary:
    columns: tuple[BasisTerm, ...]
    matrix: np.ndarray

    @property
    def K(self) -> int:
        return len(self.columns)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def to_csv(self, path: str | Path) -> None:
        lines = [",".join(self.names)]
        lines.extend(",".join(repr(v) for v in row) for row in self.matrix.tolist())
        Path(path).write_text("\n".join(lines) + "\n")


def build_dictionary(states: np.ndarray, cfg: DictionaryConfig, terms: Sequence[BasisTerm] | None = None) -> Dictionary:
    X = np.asarray(states, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"states must be an N x m array, got shape {X.shape}")
    cols = list(terms) if terms is not None else dictionary_terms(X.shape[1], cfg)
    L = np.empty((X.shape[0], len(cols)))
    with np.errstate(over="ignore", invalid="ignore"):
        for k, t in enumerate(cols):
            L[:, k] = t.evaluate(X)
            if not np.isfinite(L[:, k]).all():
                raise EvaluationError(f"column {t.name} has non-finite entries")
    return Dictionary(tuple(cols), L)


@dataclass(frozen=True)
class StandardizationStats:
    mu_D: np.ndarray
    s_D: np.ndarray
    mu_Y: float
    dropped_constant: int | None
    retained: tuple[int, ...]


def standardize(d: Dictionary, y) -> tuple[np.ndarray, np.ndarray, StandardizationStats]:
    """Zero-mean, unit-std columns (divisor N) and a centered target.

    The constant column is removed; its weight comes back as the intercept
    in :func:`destandardize_weights`.
    """
    y = np.asarray(getattr(y, "y", y), dtype=float)
    L = d.matrix
    if L.shape[0] < 2:
        raise ValueError("need at least two rows to standardize")
    if y.shape != (L.shape[0],):
        raise DimensionMismatchError(f"target length {y.shape} != dictionary rows {L.shape[0]}")
    const = [k for k, c in enumerate(d.columns) if c.kind == "constant"]
    retained = tuple(k for k in range(d.K) if k not in const)
    Lr = L[:, retained]
    mu = Lr.mean(axis=0)
    Ls = Lr - mu
    s = np.sqrt((Ls * Ls).mean(axis=0))
    for k, sk in zip(retained, s):
        if not sk > 0:
            raise DegenerateColumnError(f"column {d.columns[k].name} has zero variance")
    Ls /= s
    mu_y = float(y.mean())
    stats = StandardizationStats(mu, s, mu_y, const[0] if const else None, retained)
    return Ls, y - mu_y, stats


def destandardize_weights(mu_s, Sigma_s, stats: StandardizationStats) -> tuple[np.ndarray, np.ndarray, float]:
    """Map standardized-space weights back to the original columns."""
    mu_s = np.asarray(mu_s, dtype=float)
    Sigma_s = np.asarray(Sigma_s, dtype=float)
    K = stats.s_D.shape[0]
    if mu_s.shape != (K,) or Sigma_s.shape != (K, K):
        raise DimensionMismatchError(f"weights of shape {mu_s.shape}/{Sigma_s.shape} do not match {K} columns")
    mu = mu_s / stats.s_D
    Sigma = Sigma_s / np.outer(stats.s_D, stats.s_D)
    Sigma = 0.5 * (Sigma + Sigma.T)
    intercept = stats.mu_Y - float(stats.mu_D @ mu)
    return mu, Sigma, intercept
