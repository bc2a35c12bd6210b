"""Gaussian mixtures and their exact rectified-flow velocity field.

A mixture ``X_0`` is paired with independent noise ``X_1 ~ N(0, I)`` and
interpolated as ``Z_t = (1 - t) X_0 + t X_1``.  Because every component of
``Z_t`` is jointly Gaussian with ``(X_0, X_1)``, the velocity
``E[X_1 - X_0 | Z_t = z]`` has a closed form, which makes mixtures a
ground-truth model for the editing procedures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from . import rng

EIGEN_FLOOR = 1e-10
_WEIGHT_TOL = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    """Raised when a mixture cannot be constructed or used."""


def as_batch(points, dim=None) -> np.ndarray:
    """Validate and return an ``(n, d)`` float64 array of finite points."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected an (n, d) batch, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"dimension mismatch: batch has d={arr.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("batch contains non-finite entries")
    return arr


def _floor_covariance(cov: np.ndarray) -> np.ndarray:
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    scale = max(1.0, float(np.max(np.abs(vals))))
    if vals.min() < -1e-8 * scale:
        raise ModelError(f"covariance is not positive semi-definite (min eigenvalue {vals.min():.3e})")
    if vals.min() >= EIGEN_FLOOR:
        return sym
    vals = np.maximum(vals, EIGEN_FLOOR)
    floored = (vecs * vals) @ vecs.T
    return 0.5 * (floored + floored.T)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Weighted mixture of multivariate normals.

    Covariances are symmetrized and eigenvalue-floored at ``1e-10`` on
    construction, so point masses go through the same code path as
    ordinary components.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64)
        cov = np.array(self.covs, dtype=np.float64)
        if mu.ndim != 2 or mu.shape[0] != w.size:
            raise ModelError("means must have shape (K, d) matching the weights")
        k, d = mu.shape
        if d < 1 or k < 1:
            raise ModelError("mixture needs at least one component of positive dimension")
        if cov.shape != (k, d, d):
            raise ModelError(f"covariances must have shape {(k, d, d)}, got {cov.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise ModelError("weights must be positive and sum to 1")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ModelError("means and covariances must be finite")
        cov = np.stack([_floor_covariance(c) for c in cov])
        for arr in (w, mu, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def isotropic(cls, means, weights=None, var=1.0):
        means = np.asarray(means, dtype=np.float64)
        k, d = means.shape
        if weights is None:
            weights = np.full(k, 1.0 / k)
        return cls(weights, means, np.broadcast_to(var * np.eye(d), (k, d, d)))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {
                    "weight": float(w),
                    "mean": [float(v) for v in m],
                    "cov": [float(v) for v in c.ravel()],
                }
                for w, m, c in zip(self.weights, self.means, self.covs)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        try:
            dim = int(data["dim"])
            comps = data["components"]
            weights = [float(c["weight"]) for c in comps]
            means = [[float(v) for v in c["mean"]] for c in comps]
            covs = [np.asarray(c["cov"], dtype=np.float64).reshape(dim, dim) for c in comps]
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed mixture specification: {exc}") from exc
        if not comps:
            raise ModelError("mixture specification has no components")
        if any(len(m) != dim for m in means):
            raise ModelError("component mean length does not match dim")
        return cls(weights, means, covs)

    def to_json(self) -> str:
        # repr-based float output round-trips doubles exactly
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        return cls.from_dict(json.loads(text))

    def mixed_with(self, other: "GaussianMixture", frac: float = 0.5) -> "GaussianMixture":
        """The mixture ``(1 - frac) * self + frac * other``."""
        if other.dim != self.dim:
            raise ModelError("cannot mix distributions of different dimension")
        w = np.concatenate([(1.0 - frac) * self.weights, frac * other.weights])
        w = w / w.sum()
        return GaussianMixture(
            w,
            np.concatenate([self.means, other.means]),
            np.concatenate([self.covs, other.covs]),
        )


def _component_log_pdf(means, covs, x):
    """(n, K) matrix of log N(x; mean_k, cov_k), plus whitened residual solves."""
    n, d = x.shape
    k = means.shape[0]
    out = np.empty((n, k))
    solved = np.empty((n, k, d))
    for j in range(k):
        chol = np.linalg.cholesky(covs[j])
        resid = x - means[j]
        white = solve_triangular(chol, resid.T, lower=True)
        solved[:, j, :] = solve_triangular(chol.T, white, lower=False).T
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, j] = -0.5 * (np.sum(white**2, axis=0) + logdet + d * _LOG_2PI)
    return out, solved


def log_density(gmm: GaussianMixture, points) -> np.ndarray:
    """log sum_k w_k N(x; mu_k, Sigma_k) for every row of ``points``."""
    x = as_batch(points, gmm.dim)
    comp, _ = _component_log_pdf(gmm.means, gmm.covs, x)
    return logsumexp(comp + np.log(gmm.weights), axis=1)


def sample_with(gmm: GaussianMixture, u, eps, return_labels=False):
    """Deterministic transform of uniforms ``u`` (n,) and normals ``eps`` (n, d)."""
    cdf = np.cumsum(gmm.weights)
    cdf[-1] = 1.0
    labels = np.minimum(np.searchsorted(cdf, u, side="left"), gmm.n_components - 1)
    try:
        chols = np.linalg.cholesky(gmm.covs)
    except np.linalg.LinAlgError as exc:
        raise ModelError("covariance is not positive definite") from exc
    x = gmm.means[labels] + np.einsum("nij,nj->ni", chols[labels], eps)
    return (x, labels) if return_labels else x


def sample(gmm: GaussianMixture, n: int, seed: int, stream: str = "gmm-sample",
           rows=None, return_labels=False):
    """Draw ``n`` i.i.d. points; row ``i`` depends only on ``(seed, stream, i)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rows = np.arange(n) if rows is None else np.asarray(rows)
    u = rng.uniforms(seed, stream + "/component", rows)[0, :, 0]
    eps = rng.normals(seed, stream + "/normal", rows, dim=gmm.dim)[0]
    return sample_with(gmm, u, eps, return_labels)


def marginal_at_t(gmm: GaussianMixture, t: float) -> GaussianMixture:
    """Distribution of ``(1 - t) X_0 + t X_1`` with ``X_1 ~ N(0, I)``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    eye = np.eye(gmm.dim)
    return GaussianMixture(
        gmm.weights,
        (1.0 - t) * gmm.means,
        (1.0 - t) ** 2 * gmm.covs + t**2 * eye,
    )


def _interpolant_terms(gmm, t, x):
    a = 1.0 - t
    means_t = a * gmm.means
    s = a**2 * gmm.covs + t**2 * np.eye(gmm.dim)
    comp, solved = _component_log_pdf(means_t, s, x)
    log_post = comp + np.log(gmm.weights)
    log_post -= logsumexp(log_post, axis=1, keepdims=True)
    return log_post, solved


def responsibilities(gmm: GaussianMixture, t: float, points) -> np.ndarray:
    """Posterior component probabilities given ``Z_t = z``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    x = as_batch(points, gmm.dim)
    log_post, _ = _interpolant_terms(gmm, t, x)
    return np.exp(log_post)


def posterior_means(gmm: GaussianMixture, t: float, points):
    """``(E[X_0 | Z_t], E[X_1 | Z_t])`` for every row."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    x = as_batch(points, gmm.dim)
    log_post, solved = _interpolant_terms(gmm, t, x)
    resp = np.exp(log_post)
    # solved[:, k] = S_k^{-1} (z - (1 - t) mu_k); per-component matmuls beat einsum here
    ex0 = np.zeros_like(x)
    ex1 = np.zeros_like(x)
    for k in range(gmm.n_components):
        r = resp[:, k, None]
        ex0 += r * (gmm.means[k] + (1.0 - t) * (solved[:, k] @ gmm.covs[k].T))
        ex1 += r * solved[:, k]
    return ex0, t * ex1


def analytic_velocity(gmm: GaussianMixture, t: float, points) -> np.ndarray:
    """Exact rectified-flow velocity ``E[X_1 - X_0 | Z_t = z]``."""
    ex0, ex1 = posterior_means(gmm, t, points)
    return ex1 - ex0
