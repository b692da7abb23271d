"""
Sparse Bayesian linear regression with a spike-and-slab prior, fitted by
coordinate-ascent variational Bayes.

Model (on a standardized design ``L`` and centered target ``y``)::

    y | theta, Z, sigma2 ~ N(L diag(Z) theta, sigma2 I)
    theta_k ~ N(0, sigma2 v_s),  Z_k ~ Bern(p0),  sigma2 ~ IG(a_sigma, b_sigma)

with the factorized approximation
``q(theta) q(sigma2) prod_k q(Z_k) = N(mu, Sigma) IG(a_q, b_q) prod Bern(w_k)``.
The inclusion probabilities are initialized from a sparse Bayesian learning
(relevance vector) fit.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit, gammaln

from .sde import DimensionMismatchError

log = logging.getLogger(__name__)

W_EPS = 1e-12


class VbNumericalError(ArithmeticError):
    def __init__(self, msg: str, iteration: int | None = None):
        self.iteration = iteration
        super().__init__(msg if iteration is None else f"{msg} (iteration {iteration})")


class UpdateDivergenceError(VbNumericalError):
    pass


class SblConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SsHyperparams:
    v_s: float = 10.0
    a_sigma: float = 1e-4
    b_sigma: float = 1e-4
    p0: float = 0.1
    rho: float = 1e-6
    tau_init: float = 1000.0
    pip_threshold: float = 0.5
    max_iters: int = 500
    # Gauss-Seidel (True) or Jacobi (False) sweep over the inclusion probabilities
    gauss_seidel: bool = True

    def __post_init__(self):
        if not self.v_s > 0:
            raise ValueError("v_s must be positive")
        if not (self.a_sigma > 0 and self.b_sigma > 0):
            raise ValueError("a_sigma and b_sigma must be positive")
        if not 0 < self.p0 < 1:
            raise ValueError("p0 must lie in (0, 1)")
        if not self.rho > 0 or not self.tau_init > 0:
            raise ValueError("rho and tau_init must be positive")
        if not 0 < self.pip_threshold < 1:
            raise ValueError("pip_threshold must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @property
    def logit_p0(self) -> float:
        return float(np.log(self.p0) - np.log1p(-self.p0))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class VbState:
    mu_q: np.ndarray
    Sigma_q: np.ndarray
    a_q: float
    b_q: float
    tau: float
    w_q: np.ndarray
    elbo: float = -np.inf
    iter: int = 0


@dataclass(frozen=True)
class PosteriorSummary:
    pip: np.ndarray
    selected: tuple[int, ...]
    mu_theta_hat: np.ndarray
    Sigma_theta_hat: np.ndarray
    a_star: float
    b_star: float
    elbo_trace: list[float] = field(default_factory=list)
    converged: bool = True
    n_iter: int = 0
    sbl_fallback: bool = False

    @property
    def noise_variance(self) -> float:
        return self.b_star / self.a_star

    def write_elbo_csv(self, path: str | Path, header: str = "") -> None:
        lines = [header.rstrip("\n")] if header else []
        lines.append("iter,elbo")
        lines.extend(f"{i + 1},{v!r}" for i, v in enumerate(self.elbo_trace))
        Path(path).write_text("\n".join(lines) + "\n")


class _Design:
    # sufficient statistics of (L, y); everything in the VB loop needs only these
    def __init__(self, L, y, gram=None):
        L = np.asarray(L, dtype=float)
        y = np.asarray(y, dtype=float)
        if L.ndim != 2 or y.shape != (L.shape[0],):
            raise DimensionMismatchError(f"design {L.shape} and target {y.shape} disagree")
        self.N, self.K = L.shape
        self.G = L.T @ L if gram is None else np.asarray(gram, dtype=float)
        if self.G.shape != (self.K, self.K):
            raise DimensionMismatchError("gram matrix does not match the design")
        self.Ly = L.T @ y
        self.yy = float(y @ y)


def sbl_initialize(
    L, y, *, max_iters: int = 1000, prune: float = 1e12, tol: float = 1e-4, gram=None, p0: float = 0.1
) -> np.ndarray:
    """Relevance diagnostics ``gamma_k = 1 - alpha_k Sigma_kk`` from evidence maximization.

    MacKay fixed-point updates of the per-column precisions ``alpha_k`` and the
    noise precision.  Columns with ``alpha_k > prune`` leave the model and get
    0.01; the rest are clamped to [0.01, 0.99].  Iteration stops once no
    ``gamma_k`` moves by more than ``tol``.  Precisions of irrelevant columns
    grow without bound, so convergence is judged on ``gamma`` and not on
    ``alpha``.  If the cap is hit, emits :class:`SblConvergenceWarning` and
    returns ``p0`` everywhere.
    """
    d = y if isinstance(y, _Design) else _Design(L, y, gram)
    K, N = d.K, d.N
    if K == 0:
        return np.zeros(0)
    alpha = np.ones(K)
    beta = 10.0 * N / max(d.yy, 1e-300)
    beta_max = 1e10 * N / max(d.yy, 1e-300)
    gamma = np.zeros(K)
    for it in range(max_iters):
        idx = np.flatnonzero(alpha < prune)
        if idx.size == 0:
            gamma[:] = 0.0
            break
        A = beta * d.G[np.ix_(idx, idx)] + np.diag(alpha[idx])
        try:
            Sigma = cho_solve(cho_factor(A), np.eye(idx.size))
        except LinAlgError:
            warnings.warn("SBL posterior factorization failed; using the prior inclusion probability", SblConvergenceWarning)
            return np.full(K, p0)
        mu = beta * Sigma @ d.Ly[idx]
        g = np.zeros(K)
        g[idx] = np.clip(1.0 - alpha[idx] * np.diag(Sigma), 0.0, 1.0)
        delta = np.abs(g - gamma).max()
        gamma = g
        alpha[idx] = np.maximum(g[idx], 1e-300) / np.maximum(mu * mu, 1e-300)
        resid = d.yy - 2.0 * mu @ d.Ly[idx] + mu @ d.G[np.ix_(idx, idx)] @ mu
        beta = min(max(N - g.sum(), 1.0) / max(resid, 1e-300), beta_max)
        if it > 0 and delta < tol:
            break
    else:
        warnings.warn("SBL initialization did not converge; using the prior inclusion probability", SblConvergenceWarning)
        return np.full(K, p0)
    gamma[alpha >= prune] = 0.0
    return np.clip(gamma, 0.01, 0.99)


def initial_state(K: int, N: int, w0, h: SsHyperparams) -> VbState:
    a_q = h.a_sigma + 0.5 * N + 0.5 * K
    w0 = np.clip(np.asarray(w0, dtype=float), W_EPS, 1 - W_EPS)
    return VbState(np.zeros(K), np.eye(K), a_q, a_q / h.tau_init, h.tau_init, w0, -np.inf, 0)


def _b_update(d: _Design, mu, Sigma, w, h: SsHyperparams) -> float:
    A = d.G * (np.outer(w, w) + np.diag(w * (1 - w)))
    A[np.diag_indices_from(A)] += 1.0 / h.v_s
    quad = d.yy - 2.0 * d.Ly @ (w * mu) + mu @ A @ mu + np.sum(A * Sigma)
    return h.b_sigma + 0.5 * quad


def vb_iteration(state: VbState, L, y, h: SsHyperparams, *, design: _Design | None = None) -> VbState:
    """One sweep: Sigma, mu, a, b, tau, then eta_k / w_k for k = 1..K.

    ``b`` and ``tau`` are refreshed once more after the ``w`` sweep so that the
    stored noise posterior is the optimum for the stored inclusion
    probabilities; this keeps the closed-form ELBO exact.
    """
    d = design if design is not None else _Design(L, y)
    N, K = d.N, d.K
    it = state.iter + 1
    w = state.w_q.copy()
    tau = state.tau

    A = d.G * (np.outer(w, w) + np.diag(w * (1 - w)))
    A[np.diag_indices_from(A)] += 1.0 / h.v_s
    try:
        c = cho_factor(tau * A)
    except LinAlgError as exc:
        raise VbNumericalError("Sigma_q factorization failed", it) from exc
    Sigma = cho_solve(c, np.eye(K))
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = tau * Sigma @ (w * d.Ly)
    a_q = h.a_sigma + 0.5 * N + 0.5 * K
    b_q = _b_update(d, mu, Sigma, w, h)
    if not b_q > 0:
        raise UpdateDivergenceError(f"b_q = {b_q} is not positive", it)
    tau = a_q / b_q

    w_old = w.copy()
    src = w if h.gauss_seidel else w_old
    lp0 = h.logit_p0
    for k in range(K):
        coupling = d.G[k] * src * (mu * mu[k] + Sigma[:, k])
        rest = coupling.sum() - coupling[k]
        eta = lp0 - 0.5 * tau * (mu[k] ** 2 + Sigma[k, k]) * d.G[k, k] + tau * (d.Ly[k] * mu[k] - rest)
        w[k] = min(max(expit(eta), W_EPS), 1 - W_EPS)

    b_q = _b_update(d, mu, Sigma, w, h)
    if not b_q > 0:
        raise UpdateDivergenceError(f"b_q = {b_q} is not positive", it)
    tau = a_q / b_q
    new = VbState(mu, Sigma, a_q, b_q, tau, w, -np.inf, it)
    return replace(new, elbo=compute_elbo(new, h, N, K))


def compute_elbo(state: VbState, h: SsHyperparams, N: int, K: int) -> float:
    try:
        c = cho_factor(state.Sigma_q)
    except LinAlgError as exc:
        raise VbNumericalError("Sigma_q is not positive definite", state.iter) from exc
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    w = np.clip(state.w_q, W_EPS, 1 - W_EPS)
    bern = np.sum(w * np.log(h.p0 / w) + (1 - w) * np.log((1 - h.p0) / (1 - w)))
    return float(
        0.5 * K
        - 0.5 * N * np.log(2 * np.pi)
        - 0.5 * K * np.log(h.v_s)
        + h.a_sigma * np.log(h.b_sigma)
        - gammaln(h.a_sigma)
        + gammaln(state.a_q)
        - state.a_q * np.log(state.b_q)
        + 0.5 * logdet
        + bern
    )


def run_vb(L, y, h: SsHyperparams | None = None, *, w0=None, gram=None) -> PosteriorSummary:
    """Iterate to ELBO convergence and select columns with PIP above threshold."""
    h = h or SsHyperparams()
    L = np.asarray(L, dtype=float)
    y = np.asarray(y, dtype=float)
    d = _Design(L, y, gram)
    N, K = d.N, d.K
    scale = max(1.0, float(np.abs(y).max(initial=0.0)))
    if K and np.abs(L.mean(axis=0)).max() > 1e-8:
        raise ValueError("design columns must be centered (standardize first)")
    if abs(y.mean()) > 1e-8 * scale:
        raise ValueError("target must be centered")

    fallback = False
    if w0 is None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SblConvergenceWarning)
            w0 = sbl_initialize(L, d, p0=h.p0)
        fallback = any(issubclass(c.category, SblConvergenceWarning) for c in caught)
        if fallback:
            log.warning("SBL initialization did not converge; starting from p0")

    if K == 0:
        a_q = h.a_sigma + 0.5 * N
        b_q = h.b_sigma + 0.5 * d.yy
        return PosteriorSummary(np.zeros(0), (), np.zeros(0), np.zeros((0, 0)), a_q, b_q, [], True, 0, fallback)

    state = initial_state(K, N, w0, h)
    trace: list[float] = []
    converged = False
    for _ in range(h.max_iters):
        state = vb_iteration(state, L, y, h, design=d)
        trace.append(state.elbo)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < h.rho:
            converged = True
            break
    if not converged:
        log.warning("VB stopped at max_iters=%d without meeting the ELBO tolerance", h.max_iters)

    pip = state.w_q.copy()
    sel = np.flatnonzero(pip > h.pip_threshold)
    mu_hat = np.zeros(K)
    mu_hat[sel] = state.mu_q[sel]
    Sig_hat = np.zeros((K, K))
    Sig_hat[np.ix_(sel, sel)] = state.Sigma_q[np.ix_(sel, sel)]
    return PosteriorSummary(
        pip, tuple(int(i) for i in sel), mu_hat, Sig_hat, state.a_q, state.b_q, trace, converged, state.iter, fallback
    )


def predict(L_star, post: PosteriorSummary) -> tuple[np.ndarray, np.ndarray]:
    """Posterior predictive mean and covariance at new design rows."""
    L_star = np.atleast_2d(np.asarray(L_star, dtype=float))
    if L_star.shape[1] != post.mu_theta_hat.shape[0]:
        raise DimensionMismatchError(f"test design has {L_star.shape[1]} columns, posterior has {post.mu_theta_hat.shape[0]}")
    mean = L_star @ post.mu_theta_hat
    cov = L_star @ post.Sigma_theta_hat @ L_star.T
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += post.b_star / post.a_star
    return mean, cov
