"""Target distributions, Bayesian data models, datasets, and conjugate oracles.

Every sampler in the package consumes a :class:`TargetModel` (a potential
U(x) = -log unnormalized density plus its gradient).  Bayesian models keep
the per-datum decomposition of the potential explicit so coreset and
distributed engines can reweight or shard individual likelihood terms.
All built-in likelihoods are smooth and finite on all of R^d, so no sampler
needs support handling.
"""

import csv
import hashlib
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, logsumexp

from .errors import InputError, UnsupportedModelError

LOG_2PI = float(np.log(2.0 * np.pi))


class Dataset:
    """Immutable matrix of observations, one row per datum.

    The row matrix is exposed through the :attr:`rows` property, which
    increments :attr:`access_count`.  The counter exists purely so tests can
    audit which datasets a distributed worker touched; it is not part of the
    value semantics (two datasets with equal rows compare equal regardless
    of how often they were read).
    """

    def __init__(self, rows: np.ndarray, labels: np.ndarray | None = None):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[0] < 1:
            raise InputError("dataset needs at least one observation")
        if not np.all(np.isfinite(rows)):
            raise InputError("dataset rows must be finite")
        if labels is not None:
            labels = np.asarray(labels, dtype=float).ravel()
            if labels.shape[0] != rows.shape[0]:
                raise InputError("labels length must match number of rows")
            if not np.all(np.isfinite(labels)):
                raise InputError("labels must be finite")
        rows = rows.copy()
        rows.setflags(write=False)
        self._rows = rows
        self._labels = labels
        self.access_count = 0

    @property
    def n_obs(self) -> int:
        return self._rows.shape[0]

    @property
    def obs_dim(self) -> int:
        return self._rows.shape[1]

    @property
    def rows(self) -> np.ndarray:
        self.access_count += 1
        return self._rows

    @property
    def labels(self) -> np.ndarray | None:
        return self._labels

    def subset(self, idx: np.ndarray) -> "Dataset":
        labels = None if self._labels is None else self._labels[idx]
        return Dataset(self._rows[idx], labels)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self._rows.tobytes())
        if self._labels is not None:
            h.update(self._labels.tobytes())
        return h.hexdigest()[:16]


def read_dataset_csv(path) -> Dataset:
    """Read a dataset from CSV with a header row, one observation per line.

    A column named ``y`` (if present) is split off as the label vector; the
    remaining columns form the observation matrix in file order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty CSV, expected a header row")
        body = [row for row in reader if row]
    header = [h.strip() for h in header]
    try:
        table = np.array([[float(v) for v in row] for row in body])
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric cell ({exc})") from exc
    if table.size == 0:
        raise InputError(f"{path}: no observation rows")
    if table.shape[1] != len(header):
        raise InputError(f"{path}: row width does not match header")
    if "y" in header:
        ycol = header.index("y")
        labels = table[:, ycol]
        feats = np.delete(table, ycol, axis=1)
        return Dataset(feats, labels)
    return Dataset(table)


def write_dataset_csv(path, data: Dataset) -> None:
    feats = data._rows
    cols = [f"x{i}" for i in range(feats.shape[1])]
    out = feats
    if data.labels is not None:
        cols.append("y")
        out = np.column_stack([feats, data.labels])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        writer.writerows(out.tolist())


@dataclass(frozen=True)
class TargetModel:
    """Unnormalized target on R^dim given by its potential and gradient.

    ``potential(x)`` is U(x) with density proportional to exp(-U(x));
    ``grad_potential`` must match central finite differences of the
    potential.  ``log_normalizer`` is set only when exp(-U) is a normalized
    density up to exp(log_normalizer) in closed form.
    """

    dim: int
    potential: Callable[[np.ndarray], float]
    grad_potential: Callable[[np.ndarray], np.ndarray]
    log_normalizer: float | None = None
    # optional vectorized evaluation over (n, dim) batches; kernels fall back
    # to per-point calls when these are absent
    potential_batch: Callable[[np.ndarray], np.ndarray] | None = None
    grad_batch: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise InputError("dimension must be a positive integer")

    def potential_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.potential_batch is not None:
            return self.potential_batch(X)
        return np.array([self.potential(x) for x in X])

    def grad_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.grad_batch is not None:
            return self.grad_batch(X)
        return np.stack([self.grad_potential(x) for x in X])


@dataclass(frozen=True)
class BayesModel:
    """Prior + per-datum log-likelihood decomposition of a posterior.

    ``datum_loglik(theta, n)`` is the log-likelihood contribution of datum
    ``n``; ``all_datum_logliks(theta)`` evaluates every contribution at once
    (the coreset engine leans on this).  ``kind`` tags the conjugate
    catalogue entries the oracles understand.
    """

    dim: int
    dataset: Dataset
    prior_logdensity: Callable[[np.ndarray], float]
    grad_prior_logdensity: Callable[[np.ndarray], np.ndarray]
    datum_loglik: Callable[[np.ndarray, int], float]
    grad_datum_loglik: Callable[[np.ndarray, int], np.ndarray]
    all_datum_logliks: Callable[[np.ndarray], np.ndarray]
    grad_sum_datum_logliks: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kind: str = "generic"
    meta: dict = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return self.dataset.n_obs

    def target(self) -> TargetModel:
        """Posterior as a TargetModel: U = -(log prior + sum_n f_n)."""
        return self.weighted_target(None)

    def weighted_target(self, weights: np.ndarray | None,
                        prior_power: float = 1.0) -> TargetModel:
        """Target with reweighted likelihood terms and a powered prior.

        ``weights=None`` means the all-ones weighting.  Coresets use sparse
        nonnegative weights; distributed subset posteriors use uniform
        integer powers and fractional prior powers.
        """
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != (self.n_obs,):
                raise InputError("weights length must equal n_obs")

        def potential(theta: np.ndarray) -> float:
            lp = prior_power * self.prior_logdensity(theta)
            lls = self.all_datum_logliks(theta)
            like = lls.sum() if weights is None else float(weights @ lls)
            return -(lp + like)

        def grad(theta: np.ndarray) -> np.ndarray:
            g = prior_power * self.grad_prior_logdensity(theta)
            g = g + self.grad_sum_datum_logliks(
                theta, np.ones(self.n_obs) if weights is None else weights)
            return -g

        return TargetModel(dim=self.dim, potential=potential, grad_potential=grad)


@dataclass(frozen=True)
class GaussianPosterior:
    """Exact Gaussian posterior used as a test oracle."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        if cov.shape != (mean.size, mean.size):
            raise InputError("covariance shape must match mean dimension")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise InputError("covariance must be symmetric to 1e-12")
        np.linalg.cholesky(cov)  # raises LinAlgError if not SPD

    @property
    def dim(self) -> int:
        return self.mean.size

    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.covariance)

    def natural_params(self) -> tuple[np.ndarray, np.ndarray]:
        """(precision @ mean, precision): the additive exponential-family pair."""
        prec = self.precision()
        return prec @ self.mean, prec

    def logpdf(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float).ravel()
        diff = x - self.mean
        sign, logdet = np.linalg.slogdet(self.covariance)
        quad = diff @ np.linalg.solve(self.covariance, diff)
        return -0.5 * (self.dim * LOG_2PI + logdet + quad)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(self.covariance)
        return self.mean + rng.standard_normal((n, self.dim)) @ chol.T


def kl_gaussians(p: GaussianPosterior, q: GaussianPosterior) -> float:
    """KL(p || q) between two Gaussians in closed form."""
    if p.dim != q.dim:
        raise InputError("dimension mismatch")
    d = p.dim
    qinv = np.linalg.inv(q.covariance)
    diff = q.mean - p.mean
    _, logdet_p = np.linalg.slogdet(p.covariance)
    _, logdet_q = np.linalg.slogdet(q.covariance)
    tr = float(np.trace(qinv @ p.covariance))
    quad = float(diff @ qinv @ diff)
    return 0.5 * (tr + quad - d + logdet_q - logdet_p)


def make_gaussian_location(d: int, data: Dataset) -> BayesModel:
    """Gaussian location model: theta ~ N(0, I_d), each datum ~ N(theta, I_d)."""
    if data.obs_dim != d:
        raise InputError(f"data rows have dimension {data.obs_dim}, expected {d}")
    rows = data.rows

    def prior_logdensity(theta):
        theta = np.asarray(theta, dtype=float)
        return float(-0.5 * (theta @ theta) - 0.5 * d * LOG_2PI)

    def grad_prior(theta):
        return -np.asarray(theta, dtype=float)

    def datum_loglik(theta, n):
        diff = np.asarray(theta, dtype=float) - rows[n]
        return float(-0.5 * (diff @ diff) - 0.5 * d * LOG_2PI)

    def grad_datum(theta, n):
        return rows[n] - np.asarray(theta, dtype=float)

    def all_logliks(theta):
        diff = rows - np.asarray(theta, dtype=float)
        return -0.5 * np.einsum("nd,nd->n", diff, diff) - 0.5 * d * LOG_2PI

    def grad_sum(theta, weights):
        return weights @ rows - weights.sum() * np.asarray(theta, dtype=float)

    return BayesModel(
        dim=d, dataset=data,
        prior_logdensity=prior_logdensity, grad_prior_logdensity=grad_prior,
        datum_loglik=datum_loglik, grad_datum_loglik=grad_datum,
        all_datum_logliks=all_logliks, grad_sum_datum_logliks=grad_sum,
        kind="gaussian_location",
    )


def make_gaussian_mixture_target(means, weights, scale: float) -> TargetModel:
    """Isotropic Gaussian mixture target with exact potential and gradient."""
    means = [np.asarray(m, dtype=float).ravel() for m in means]
    if len(means) == 0:
        raise InputError("mixture needs at least one component mean")
    dim = means[0].size
    if any(m.size != dim for m in means):
        raise InputError("all component means must share a dimension")
    weights = np.asarray(weights, dtype=float).ravel()
    if weights.size != len(means):
        raise InputError("one weight per component required")
    if abs(weights.sum() - 1.0) > 1e-12 or np.any(weights < 0):
        raise InputError("weights must be a probability vector (sum 1 within 1e-12)")
    if scale <= 0:
        raise InputError("scale must be positive")
    mu = np.stack(means)          # (C, dim)
    logw = np.log(weights)
    var = scale * scale

    log_norm_const = 0.5 * dim * (LOG_2PI + 2.0 * np.log(scale))

    def component_logdens(X):
        diff = X[:, None, :] - mu[None, :, :]          # (n, C, dim)
        sq = np.einsum("ncd,ncd->nc", diff, diff)
        return logw - 0.5 * sq / var - log_norm_const

    def potential(x):
        X = np.asarray(x, dtype=float).reshape(1, dim)
        return float(-logsumexp(component_logdens(X), axis=1)[0])

    def grad(x):
        X = np.asarray(x, dtype=float).reshape(1, dim)
        return grad_b(X)[0]

    def potential_b(X):
        return -logsumexp(component_logdens(np.asarray(X, dtype=float)), axis=1)

    def grad_b(X):
        X = np.asarray(X, dtype=float)
        ld = component_logdens(X)
        resp = np.exp(ld - logsumexp(ld, axis=1, keepdims=True))
        return np.einsum("nc,ncd->nd", resp, X[:, None, :] - mu[None, :, :]) / var

    return TargetModel(dim=dim, potential=potential, grad_potential=grad,
                       log_normalizer=0.0, potential_batch=potential_b,
                       grad_batch=grad_b)


def standard_normal_target(dim: int) -> TargetModel:
    """N(0, I_dim) with exact normalizer; the canonical kernel test target."""
    return make_gaussian_mixture_target([np.zeros(dim)], [1.0], 1.0)


def make_logistic_regression(data: Dataset, prior_scale: float = 1.0) -> BayesModel:
    """Bernoulli-logit regression with an isotropic Gaussian prior on weights."""
    if data.labels is None:
        raise InputError("logistic regression needs a labels column 'y'")
    labels = data.labels
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise InputError("labels must lie in {0, 1}")
    if prior_scale <= 0:
        raise InputError("prior_scale must be positive")
    X = data.rows
    p = X.shape[1]
    pvar = prior_scale * prior_scale

    def prior_logdensity(theta):
        theta = np.asarray(theta, dtype=float)
        return float(-0.5 * (theta @ theta) / pvar
                     - 0.5 * p * (LOG_2PI + 2.0 * np.log(prior_scale)))

    def grad_prior(theta):
        return -np.asarray(theta, dtype=float) / pvar

    def _logits(theta):
        return X @ np.asarray(theta, dtype=float)

    def datum_loglik(theta, n):
        z = float(X[n] @ np.asarray(theta, dtype=float))
        # log sigma(z) = -log(1+e^{-z}) computed stably
        return float(labels[n] * z - np.logaddexp(0.0, z))

    def grad_datum(theta, n):
        z = float(X[n] @ np.asarray(theta, dtype=float))
        return (labels[n] - expit(z)) * X[n]

    def all_logliks(theta):
        z = _logits(theta)
        return labels * z - np.logaddexp(0.0, z)

    def grad_sum(theta, weights):
        z = _logits(theta)
        return (weights * (labels - expit(z))) @ X

    return BayesModel(
        dim=p, dataset=data,
        prior_logdensity=prior_logdensity, grad_prior_logdensity=grad_prior,
        datum_loglik=datum_loglik, grad_datum_loglik=grad_datum,
        all_datum_logliks=all_logliks, grad_sum_datum_logliks=grad_sum,
        kind="logistic_regression", meta={"prior_scale": prior_scale},
    )


def make_linear_regression(X: np.ndarray, y: np.ndarray, noise_var: float,
                           prior_var: float) -> BayesModel:
    """Bayesian linear regression with known noise variance (conjugate)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise InputError("design rows must match response length")
    if noise_var <= 0 or prior_var <= 0:
        raise InputError("variances must be positive")
    data = Dataset(X, y)
    p = X.shape[1]

    def prior_logdensity(theta):
        theta = np.asarray(theta, dtype=float)
        return float(-0.5 * (theta @ theta) / prior_var
                     - 0.5 * p * (LOG_2PI + np.log(prior_var)))

    def grad_prior(theta):
        return -np.asarray(theta, dtype=float) / prior_var

    def datum_loglik(theta, n):
        r = y[n] - float(X[n] @ np.asarray(theta, dtype=float))
        return float(-0.5 * r * r / noise_var - 0.5 * (LOG_2PI + np.log(noise_var)))

    def grad_datum(theta, n):
        r = y[n] - float(X[n] @ np.asarray(theta, dtype=float))
        return (r / noise_var) * X[n]

    def all_logliks(theta):
        r = y - X @ np.asarray(theta, dtype=float)
        return -0.5 * r * r / noise_var - 0.5 * (LOG_2PI + np.log(noise_var))

    def grad_sum(theta, weights):
        r = y - X @ np.asarray(theta, dtype=float)
        return ((weights * r) @ X) / noise_var

    return BayesModel(
        dim=p, dataset=data,
        prior_logdensity=prior_logdensity, grad_prior_logdensity=grad_prior,
        datum_loglik=datum_loglik, grad_datum_loglik=grad_datum,
        all_datum_logliks=all_logliks, grad_sum_datum_logliks=grad_sum,
        kind="linear_regression",
        meta={"noise_var": noise_var, "prior_var": prior_var},
    )


def conjugate_posterior(model: BayesModel, weights: np.ndarray | None = None,
                        prior_power: float = 1.0) -> GaussianPosterior:
    """Exact Gaussian posterior for the conjugate catalogue.

    Supports the Gaussian location model (optionally with per-datum
    likelihood weights and a powered prior, covering coreset surrogates and
    tempered/powered subset posteriors) and linear regression with known
    noise.  Anything else raises :class:`UnsupportedModelError`.
    """
    if weights is None:
        w = np.ones(model.n_obs)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != (model.n_obs,):
            raise InputError("weights length must equal n_obs")
    if model.kind == "gaussian_location":
        rows = model.dataset.rows
        prec_scalar = prior_power + w.sum()
        mean = (w @ rows) / prec_scalar
        cov = np.eye(model.dim) / prec_scalar
        return GaussianPosterior(mean=mean, covariance=cov)
    if model.kind == "linear_regression":
        X = model.dataset.rows
        y = model.dataset.labels
        nv = model.meta["noise_var"]
        pv = model.meta["prior_var"]
        prec = (X.T * w) @ X / nv + prior_power * np.eye(model.dim) / pv
        cov = np.linalg.inv(prec)
        cov = 0.5 * (cov + cov.T)
        mean = cov @ ((w * y) @ X / nv)
        return GaussianPosterior(mean=mean, covariance=cov)
    raise UnsupportedModelError(
        f"no conjugate posterior for model kind {model.kind!r}")


def partition(data: Dataset, K: int, seed: int) -> list[Dataset]:
    """Randomly split a dataset into K disjoint equal-size subsets.

    K must divide the number of observations; ragged partitions are refused
    instead of silently padded.  Deterministic given the seed.
    """
    n = data.n_obs
    if K < 1:
        raise InputError("K must be at least 1")
    if n % K != 0:
        raise InputError(f"K={K} does not divide N={n}; equal subset sizes required")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    size = n // K
    return [data.subset(np.sort(perm[j * size:(j + 1) * size])) for j in range(K)]


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               step: float = 1e-5) -> np.ndarray:
    """Central finite differences; the gradient oracle used throughout testing."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def model_hash(model: BayesModel) -> str:
    """Stable short hash of a model's kind, dimension, and data content."""
    h = hashlib.sha256()
    h.update(model.kind.encode())
    h.update(str(model.dim).encode())
    h.update(model.dataset.content_hash().encode())
    for k in sorted(model.meta):
        h.update(f"{k}={model.meta[k]!r}".encode())
    return h.hexdigest()[:16]
