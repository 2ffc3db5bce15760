"""Full-covariance Gaussian mixtures: EM fitting, likelihood, BIC and sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from pagecl.errors import ConfigError, DataError, InsufficientDataError, NumericError, ShapeError

log = logging.getLogger(__name__)

COLLAPSE_WEIGHT = 1e-10
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class EmConfig:
    max_iter: int = 200
    tol: float = 1e-4
    cov_reg: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1 or self.tol <= 0 or self.cov_reg <= 0 or self.seed < 0:
            raise ConfigError(f"invalid EM configuration {self}")


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    n_reinit: int = 0
    ll_trace: list[float] = field(default_factory=list)
    converged: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        c, d = self.means.shape
        if self.weights.shape != (c,) or self.covariances.shape != (c, d, d):
            raise ShapeError("inconsistent mixture parameter shapes")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def cholesky_factors(self) -> np.ndarray:
        return _cholesky_all(self.covariances)


def _cholesky_all(covariances: np.ndarray) -> np.ndarray:
    chol = np.empty_like(covariances)
    for k, cov in enumerate(covariances):
        try:
            chol[k] = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericError(f"covariance of component {k} is not positive definite") from exc
    return chol


def _component_log_density(x: np.ndarray, means: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """log N(x | mu_c, Sigma_c) for every row and component, shape (n, C)."""
    n, d = x.shape
    out = np.empty((n, means.shape[0]))
    for k in range(means.shape[0]):
        z = linalg.solve_triangular(chol[k], (x - means[k]).T, lower=True)
        log_det = 2.0 * np.log(np.diag(chol[k])).sum()
        out[:, k] = -0.5 * (d * _LOG_2PI + log_det + (z * z).sum(axis=0))
    return out


def _weighted_log_density(model: GmmModel, x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    return _component_log_density(x, model.means, model.cholesky_factors()) + log_w


def _check_data(x, dim: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2:
        raise ShapeError("data must be a 2-D matrix")
    if dim is not None and x.shape[1] != dim:
        raise ShapeError(f"data dim {x.shape[1]} != model dim {dim}")
    if not np.isfinite(x).all():
        raise DataError("data contains non-finite values")
    return x


def log_likelihood(model: GmmModel, data) -> float:
    """Total log-likelihood of the rows of ``data``."""
    x = _check_data(data, model.dim)
    return float(logsumexp(_weighted_log_density(model, x), axis=1).sum())


def responsibilities(model: GmmModel, data) -> np.ndarray:
    x = _check_data(data, model.dim)
    lp = _weighted_log_density(model, x)
    return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))


def n_parameters(n_components: int, dim: int) -> int:
    return (n_components - 1) + n_components * dim + n_components * dim * (dim + 1) // 2


def bic(model: GmmModel, data) -> float:
    """``k ln n - 2 ln L``; lower is better."""
    x = _check_data(data, model.dim)
    n = x.shape[0]
    if n == 0:
        raise InsufficientDataError("BIC of an empty dataset is undefined")
    k = n_parameters(model.n_components, model.dim)
    return k * np.log(n) - 2.0 * log_likelihood(model, x)


def _sample_covariance(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    return centered.T @ centered / x.shape[0]


def _kmeanspp_rows(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    """Row indices picked by greedy k-means++ seeding.

    Each round draws ``2 + ln(c)`` candidates with probability proportional to
    the squared distance to the nearest pick and keeps the one that lowers the
    total squared distance most.
    """
    n = x.shape[0]
    trials = 2 + int(np.log(c))
    picks = [int(rng.integers(n))]
    d2 = ((x - x[picks[0]]) ** 2).sum(axis=1)
    for _ in range(1, c):
        total = d2.sum()
        if total <= 0:
            # every row coincides with a pick; any unused row will do
            nxt = int(rng.choice(np.setdiff1d(np.arange(n), picks)))
            cand_d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
        else:
            cands = rng.choice(n, size=trials, p=d2 / total)
            dists = np.minimum(d2, ((x[None, :, :] - x[cands][:, None, :]) ** 2).sum(axis=2))
            best = int(np.argmin(dists.sum(axis=1)))
            nxt, cand_d2 = int(cands[best]), dists[best]
        picks.append(nxt)
        d2 = cand_d2
    return np.array(picks)


def em_fit(data, n_components: int, cfg: EmConfig | None = None) -> GmmModel:
    """Fit a mixture with ``n_components`` full-covariance components by EM.

    Means start at data rows chosen by k-means++ seeding with ``cfg.seed``;
    weights start uniform and every covariance starts at the global sample
    covariance.
    A component whose weight drops below 1e-10 is re-seeded at a random row
    (counted in ``GmmModel.n_reinit``) rather than aborting the fit.
    """
    cfg = cfg or EmConfig()
    x = _check_data(data)
    n, d = x.shape
    c = int(n_components)
    if c < 1:
        raise ConfigError("n_components must be positive")
    if n < c:
        raise InsufficientDataError(f"{n} rows cannot support {c} components")

    rng = np.random.default_rng(cfg.seed)
    reg = cfg.cov_reg * np.eye(d)
    global_cov = _sample_covariance(x) + reg
    model = GmmModel(
        weights=np.full(c, 1.0 / c),
        means=x[_kmeanspp_rows(x, c, rng)].copy(),
        covariances=np.repeat(global_cov[None], c, axis=0),
    )

    prev = None
    for _ in range(cfg.max_iter):
        lp = _weighted_log_density(model, x)
        norm = logsumexp(lp, axis=1, keepdims=True)
        ll = float(norm.sum())
        model.ll_trace.append(ll)
        if prev is not None and abs(ll - prev) <= cfg.tol * max(abs(ll), 1e-300):
            model.converged = True
            break
        prev = ll
        resp = np.exp(lp - norm)

        # M-step
        nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ x) / np.maximum(nk, np.finfo(float).tiny)[:, None]
        covs = np.empty((c, d, d))
        for k in range(c):
            diff = x - means[k]
            covs[k] = (resp[:, k, None] * diff).T @ diff / max(nk[k], np.finfo(float).tiny)
            covs[k] = 0.5 * (covs[k] + covs[k].T) + reg
        collapsed = np.flatnonzero(weights < COLLAPSE_WEIGHT)
        for k in collapsed:
            means[k] = x[rng.integers(n)]
            covs[k] = global_cov
            weights[k] = 1.0 / c
            model.n_reinit += 1
        if collapsed.size:
            log.warning("re-initialised %d collapsed GMM component(s)", collapsed.size)
            prev = None
        model.weights = weights / weights.sum()
        model.means = means
        model.covariances = covs
    else:
        model.ll_trace.append(log_likelihood(model, x))
    return model


def sample(model: GmmModel, count: int, seed: int = 0) -> np.ndarray:
    """Draw ``count`` rows: component ~ weights, then N(mu_c, Sigma_c) via Cholesky."""
    count = int(count)
    if count < 1:
        raise ConfigError("count must be at least 1")
    rng = np.random.default_rng(seed)
    chol = model.cholesky_factors()
    comps = rng.choice(model.n_components, size=count, p=model.weights / model.weights.sum())
    z = rng.standard_normal((count, model.dim))
    out = np.empty((count, model.dim))
    for k in range(model.n_components):
        idx = comps == k
        out[idx] = model.means[k] + z[idx] @ chol[k].T
    return out
