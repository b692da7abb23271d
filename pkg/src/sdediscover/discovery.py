"""Per-equation sparse regression and assembly of a discovered SDE."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dictionary import Dictionary, DictionaryConfig, StandardizationStats, build_dictionary, destandardize_weights, standardize
from .kramers_moyal import diffusion_targets, drift_targets, regression_states
from .sde import BasisExpansion, BasisTerm, Ensemble, SdeModel
from .spike_slab import PosteriorSummary, SsHyperparams, run_vb

log = logging.getLogger(__name__)


class AssemblyError(ValueError):
    pass


class DiscoveryFailure(ArithmeticError):
    pass


@dataclass(frozen=True)
class DiscoveryConfig:
    dict_cfg: DictionaryConfig = field(default_factory=lambda: DictionaryConfig(poly_order=3))
    hyper: SsHyperparams = field(default_factory=SsHyperparams)
    drift_states: tuple[int, ...] = ()
    diffusion_states: tuple[int, ...] = ()
    kinematic_pairs: dict[int, int] = field(default_factory=dict)
    # separate diffusion dictionary; None reuses dict_cfg
    diffusion_dict_cfg: DictionaryConfig | None = None
    # subtract f_hat(X) dt from increments before forming quadratic-variation targets
    drift_corrected_diffusion: bool = True
    half_factor: bool = False
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "drift_states", tuple(int(i) for i in self.drift_states))
        object.__setattr__(self, "diffusion_states", tuple(int(i) for i in self.diffusion_states))
        object.__setattr__(self, "kinematic_pairs", {int(k): int(v) for k, v in self.kinematic_pairs.items()})
        overlap = set(self.kinematic_pairs) & set(self.drift_states)
        if overlap:
            raise ValueError(f"states {sorted(overlap)} are both kinematic and regressed")

    def validate(self, m: int) -> None:
        for i in (*self.drift_states, *self.diffusion_states, *self.kinematic_pairs, *self.kinematic_pairs.values()):
            if not 0 <= i < m:
                raise ValueError(f"state index {i} out of range for dimension {m}")

    def to_dict(self) -> dict:
        return {
            "dictionary": self.dict_cfg.to_dict(),
            "diffusion_dictionary": None if self.diffusion_dict_cfg is None else self.diffusion_dict_cfg.to_dict(),
            "vb": self.hyper.to_dict(),
            "drift_states": list(self.drift_states),
            "diffusion_states": list(self.diffusion_states),
            "kinematic_pairs": {str(k): v for k, v in sorted(self.kinematic_pairs.items())},
            "drift_corrected_diffusion": self.drift_corrected_diffusion,
            "half_factor": self.half_factor,
        }

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class EquationFit:
    """Regression result for one drift or diffusion equation, in original units."""

    kind: str
    state: int
    columns: tuple[BasisTerm, ...]
    posterior: PosteriorSummary
    weights: np.ndarray
    weight_cov: np.ndarray
    intercept: float
    n_clipped: int = 0

    @property
    def selected_terms(self) -> list[BasisTerm]:
        return [self.columns[k] for k in self.posterior.selected]

    def expansion(self, m: int) -> BasisExpansion:
        terms = [(BasisTerm.constant(), self.intercept)]
        terms.extend((self.columns[k], float(self.weights[k])) for k in self.posterior.selected)
        return BasisExpansion(m, tuple(terms))

    def rows(self) -> list[dict]:
        """PIP table including the always-present intercept."""
        sd = np.sqrt(np.clip(np.diag(self.weight_cov), 0.0, None))
        sel = set(self.posterior.selected)
        out = [{"column_name": "1", "pip": 1.0, "weight_mean": self.intercept, "weight_std": 0.0, "selected": True}]
        for k, t in enumerate(self.columns):
            out.append(
                {
                    "column_name": t.name,
                    "pip": float(self.posterior.pip[k]),
                    "weight_mean": float(self.weights[k]) if k in sel else 0.0,
                    "weight_std": float(sd[k]),
                    "selected": k in sel,
                }
            )
        return out

    def write_pip_csv(self, path: str | Path, header: str = "") -> None:
        lines = [header.rstrip("\n")] if header else []
        lines.append("column_name,pip,weight_mean,weight_std,selected")
        for r in self.rows():
            lines.append(f"{r['column_name']},{r['pip']!r},{r['weight_mean']!r},{r['weight_std']!r},{str(r['selected']).lower()}")
        Path(path).write_text("\n".join(lines) + "\n")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "state": self.state,
            "converged": self.posterior.converged,
            "n_iter": self.posterior.n_iter,
            "sbl_fallback": self.posterior.sbl_fallback,
            "noise_variance": self.posterior.noise_variance,
            "n_clipped": self.n_clipped,
            "table": self.rows(),
        }


class _Design:
    # standardized dictionary shared by every equation fitted on the same states
    def __init__(self, d: Dictionary):
        self.dictionary = d
        Ls, _, stats = standardize(d, np.zeros(d.matrix.shape[0]))
        self.Ls = Ls
        self.stats = stats
        self.gram = Ls.T @ Ls
        self.columns = tuple(d.columns[k] for k in stats.retained)

    def fit(self, y: np.ndarray, h: SsHyperparams, kind: str, state: int) -> EquationFit:
        mu_y = float(y.mean())
        post = run_vb(self.Ls, y - mu_y, h, gram=self.gram)
        if not post.converged:
            log.warning("%s equation for state %d did not converge", kind, state + 1)
        stats = StandardizationStats(self.stats.mu_D, self.stats.s_D, mu_y, self.stats.dropped_constant, self.stats.retained)
        w, cov, c = destandardize_weights(post.mu_theta_hat, post.Sigma_theta_hat, stats)
        return EquationFit(kind, state, self.columns, post, w, cov, c)


def _design(ens: Ensemble, cfg: DictionaryConfig) -> _Design:
    return _Design(build_dictionary(regression_states(ens), cfg))


def kinematic_expansion(m: int, velocity: int) -> BasisExpansion:
    return BasisExpansion(m, ((BasisTerm.monomial(velocity), 1.0),))


def discover_drift(ens: Ensemble, i: int, cfg: DiscoveryConfig, *, design: _Design | None = None):
    """Returns ``(expansion, fit)``; kinematic states bypass regression (fit is None)."""
    m = ens.dim
    cfg.validate(m)
    if i in cfg.kinematic_pairs:
        return kinematic_expansion(m, cfg.kinematic_pairs[i]), None
    if i not in cfg.drift_states:
        raise ValueError(f"state {i} is not listed in drift_states")
    design = design or _design(ens, cfg.dict_cfg)
    fit = design.fit(drift_targets(ens, i).y, cfg.hyper, "drift", i)
    return fit.expansion(m), fit


def _sqrt_expansion(fit: EquationFit, design: _Design, m: int) -> tuple[BasisExpansion, int]:
    """Diffusion coefficient from a fitted variance expansion."""
    if not fit.posterior.selected:
        if fit.intercept < 0:
            raise DiscoveryFailure(f"fitted variance for state {fit.state + 1} is negative everywhere")
        return BasisExpansion(m, ((BasisTerm.constant(), float(np.sqrt(fit.intercept))),)), 0
    sel = list(fit.posterior.selected)
    Lsel = design.dictionary.matrix[:, [design.stats.retained[k] for k in sel]]
    var = fit.intercept + Lsel @ fit.weights[sel]
    neg = int((var < 0).sum())
    if neg == var.size:
        raise DiscoveryFailure(f"fitted variance for state {fit.state + 1} is negative everywhere")
    g = np.sqrt(np.clip(var, 0.0, None))
    # least-squares projection of the pointwise root onto the selected columns
    A = np.column_stack([np.ones(len(g)), Lsel])
    coef, *_ = np.linalg.lstsq(A, g, rcond=None)
    terms = [(BasisTerm.constant(), float(coef[0]))]
    terms.extend((fit.columns[k], float(c)) for k, c in zip(sel, coef[1:]))
    return BasisExpansion(m, tuple(terms)), neg


def discover_diffusion(
    ens: Ensemble,
    i: int,
    cfg: DiscoveryConfig,
    *,
    drift: BasisExpansion | None = None,
    design: _Design | None = None,
):
    """Fit the squared diffusion of state ``i`` and return its square root.

    With ``cfg.drift_corrected_diffusion`` the increments are first reduced
    by ``drift(X) dt``; ``drift`` is discovered on the fly if not supplied.
    """
    m = ens.dim
    cfg.validate(m)
    if i not in cfg.diffusion_states:
        raise ValueError(f"state {i} is not listed in diffusion_states")
    design = design or _design(ens, cfg.diffusion_dict_cfg or cfg.dict_cfg)
    if cfg.drift_corrected_diffusion:
        if drift is None:
            drift, _ = discover_drift(ens, i, cfg)
        X = ens.states[:, :-1, :]
        resid = np.diff(ens.states[:, :, i], axis=1) - drift.evaluate(X) * ens.dt
        y = (resid * resid / ens.dt).ravel()
        if cfg.half_factor:
            y = 0.5 * y
    else:
        y = diffusion_targets(ens, i, half=cfg.half_factor).y
    fit = design.fit(y, cfg.hyper, "diffusion", i)
    g, neg = _sqrt_expansion(fit, design, m)
    if neg:
        log.info("clipped %d negative fitted variances for state %d", neg, i + 1)
    fit = EquationFit(fit.kind, fit.state, fit.columns, fit.posterior, fit.weights, fit.weight_cov, fit.intercept, neg)
    return g, fit


@dataclass(frozen=True)
class DiscoveredSde:
    model: SdeModel
    per_equation: dict[tuple[str, int], EquationFit]
    provenance: dict

    @property
    def converged(self) -> bool:
        return all(f.posterior.converged for f in self.per_equation.values())

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d["posteriors"] = {f"{k}_{i + 1}": f.to_dict() for (k, i), f in sorted(self.per_equation.items())}
        d["provenance"] = self.provenance
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def assemble_model(
    drift_parts: dict[int, BasisExpansion],
    diffusion_parts: dict[int, BasisExpansion],
    cfg: DiscoveryConfig,
    m: int,
    label: str = "discovered",
) -> SdeModel:
    drift = []
    for i in range(m):
        if i in drift_parts:
            drift.append(drift_parts[i])
        elif i in cfg.kinematic_pairs:
            drift.append(kinematic_expansion(m, cfg.kinematic_pairs[i]))
        else:
            raise AssemblyError(f"no drift for state {i + 1}")
    diffusion = [diffusion_parts.get(i, BasisExpansion.zero(m)) for i in range(m)]
    kin = tuple(sorted(i for i in cfg.kinematic_pairs if diffusion[i].is_zero))
    return SdeModel(m, tuple(drift), tuple(diffusion), label=label, kinematic=kin)


def discover(ens: Ensemble, cfg: DiscoveryConfig, label: str = "discovered", extra_provenance: dict | None = None) -> DiscoveredSde:
    """Full pipeline: regress every listed drift and diffusion equation."""
    m = ens.dim
    cfg.validate(m)
    drift_design = _design(ens, cfg.dict_cfg)
    diff_design = drift_design if cfg.diffusion_dict_cfg is None else _design(ens, cfg.diffusion_dict_cfg)
    fits: dict[tuple[str, int], EquationFit] = {}

    def do_drift(i):
        return i, discover_drift(ens, i, cfg, design=drift_design)

    drift_parts: dict[int, BasisExpansion] = {}
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        for i, (expn, fit) in pool.map(do_drift, sorted(cfg.drift_states)):
            drift_parts[i] = expn
            fits[("drift", i)] = fit
    for i, v in cfg.kinematic_pairs.items():
        drift_parts.setdefault(i, kinematic_expansion(m, v))

    def do_diff(i):
        if i not in drift_parts and cfg.drift_corrected_diffusion:
            raise AssemblyError(f"diffusion for state {i + 1} needs its drift")
        return i, discover_diffusion(ens, i, cfg, drift=drift_parts.get(i), design=diff_design)

    diff_parts: dict[int, BasisExpansion] = {}
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        for i, (expn, fit) in pool.map(do_diff, sorted(cfg.diffusion_states)):
            diff_parts[i] = expn
            fits[("diffusion", i)] = fit

    model = assemble_model(drift_parts, diff_parts, cfg, m, label)
    prov = {
        "config_hash": cfg.hash(),
        "data_fingerprint": ens.fingerprint(),
        "data_seed": ens.seed,
        "converged": all(f.posterior.converged for f in fits.values()),
    }
    prov.update(extra_provenance or {})
    return DiscoveredSde(model, fits, prov)


def load_discovered(path: str | Path) -> SdeModel:
    """Model part of a saved :class:`DiscoveredSde` (extra sections are ignored)."""
    return SdeModel.from_dict(json.loads(Path(path).read_text()))
