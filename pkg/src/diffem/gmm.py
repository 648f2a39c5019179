"""Diagonal-covariance Gaussian mixture over the latent space.

Cluster indices are 1-based in the public API. All densities are evaluated in
log space and normalized with log-sum-exp, so responsibilities stay valid for
latent dimensionalities where direct densities would underflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "VARIANCE_FLOOR",
    "GMMParams",
    "fit_gmm",
    "responsibilities",
    "assign",
    "sample_prior",
    "sample_component",
    "gmm_log_likelihood",
]

VARIANCE_FLOOR = 1e-6
_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GMMParams:
    """Mixture prior {pi, mu_c, sigma2_c} with K diagonal Gaussian components."""

    pi: np.ndarray  # (K,)
    mu: np.ndarray  # (K, J)
    sigma2: np.ndarray  # (K, J)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if pi.ndim != 1 or mu.ndim != 2 or sigma2.shape != mu.shape or mu.shape[0] != pi.shape[0]:
            raise ValueError(
                f"inconsistent shapes: pi {pi.shape}, mu {mu.shape}, sigma2 {sigma2.shape}"
            )
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError(f"pi must be a probability vector (sum={pi.sum()!r})")
        if np.any(sigma2 < VARIANCE_FLOOR * (1 - 1e-9)):
            raise ValueError(f"sigma2 entries must be >= {VARIANCE_FLOOR}")
        if not (np.isfinite(mu).all() and np.isfinite(sigma2).all()):
            raise ValueError("non-finite GMM parameters")
        for name, arr in (("pi", pi), ("mu", mu), ("sigma2", sigma2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def J(self) -> int:
        return self.mu.shape[1]

    def save(self, path):
        """Binary npz plus a plain-text sidecar (one line per component)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, pi=self.pi, mu=self.mu, sigma2=self.sigma2)
        txt = path.with_suffix(".txt")
        with open(txt, "w") as fh:
            fh.write("# component: pi | mu_1..mu_J | sigma2_1..sigma2_J\n")
            for c in range(self.K):
                mu = " ".join(repr(v) for v in self.mu[c])
                s2 = " ".join(repr(v) for v in self.sigma2[c])
                fh.write(f"{self.pi[c]!r} | {mu} | {s2}\n")

    @classmethod
    def load(cls, path) -> "GMMParams":
        with np.load(path) as data:
            return cls(pi=data["pi"], mu=data["mu"], sigma2=data["sigma2"])


def _component_log_densities(Z: np.ndarray, mu: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """(N, K) matrix of log N(z_n | mu_c, diag(sigma2_c))."""
    # (N, K, J) broadcast; J and K are small in all supported configurations.
    diff2 = (Z[:, None, :] - mu[None, :, :]) ** 2
    log_det = np.sum(np.log(sigma2), axis=1)  # (K,)
    quad = np.sum(diff2 / sigma2[None, :, :], axis=2)  # (N, K)
    return -0.5 * (Z.shape[1] * _LOG2PI + log_det[None, :] + quad)


def _log_responsibilities(Z: np.ndarray, log_weights: np.ndarray, mu, sigma2) -> np.ndarray:
    """Row-normalized log responsibilities; log_weights need not be normalized."""
    lp = _component_log_densities(Z, mu, sigma2) + log_weights[None, :]
    return lp - logsumexp(lp, axis=1, keepdims=True)


def _as_matrix(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    if z.ndim == 2:
        return z, False
    raise ValueError(f"latent input must be 1-D or 2-D, got shape {z.shape}")


def responsibilities(z, params: GMMParams) -> np.ndarray:
    """Posterior component probabilities w_c = pi_c N(z|c) / sum_c' pi_c' N(z|c').

    Accepts a single length-J vector (returns shape (K,)) or an (N, J) matrix
    (returns (N, K)).
    """
    Z, single = _as_matrix(z)
    if Z.shape[1] != params.J:
        raise ValueError(f"latent dim {Z.shape[1]} != GMM dim {params.J}")
    if not np.isfinite(Z).all():
        raise ValueError("non-finite latent input")
    with np.errstate(divide="ignore"):  # pi_c == 0 maps to log 0 = -inf
        log_pi = np.log(params.pi)
    w = np.exp(_log_responsibilities(Z, log_pi, params.mu, params.sigma2))
    return w[0] if single else w


def assign(z, params: GMMParams):
    """Most responsible component, 1-based; ties break toward the lowest index."""
    w = responsibilities(z, params)
    return int(np.argmax(w) + 1) if w.ndim == 1 else np.argmax(w, axis=1) + 1


def sample_component(params: GMMParams, c: int, rng: np.random.Generator) -> np.ndarray:
    """One draw from component c (1-based): z ~ N(mu_c, diag(sigma2_c))."""
    if not 1 <= c <= params.K:
        raise ValueError(f"component index {c} out of range [1, {params.K}]")
    idx = c - 1
    return params.mu[idx] + np.sqrt(params.sigma2[idx]) * rng.standard_normal(params.J)


def sample_prior(params: GMMParams, rng: np.random.Generator):
    """Ancestral draw from the prior: c ~ Cat(pi), then z ~ N(mu_c, diag(sigma2_c))."""
    c = int(rng.choice(params.K, p=params.pi)) + 1
    return c, sample_component(params, c, rng)


def gmm_log_likelihood(Z: np.ndarray, params: GMMParams) -> float:
    """Total data log-likelihood sum_n log sum_c pi_c N(z_n | c)."""
    Z, _ = _as_matrix(Z)
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi)
    lp = _component_log_densities(Z, params.mu, params.sigma2) + log_pi[None, :]
    return float(np.sum(logsumexp(lp, axis=1)))


def _kmeans_pp_centers(Z: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first center uniform, the rest proportional to squared distance."""
    N = Z.shape[0]
    centers = np.empty((K, Z.shape[1]))
    idx = int(rng.integers(N))
    centers[0] = Z[idx]
    d2 = np.sum((Z - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            idx = (idx + 1) % N
        else:
            idx = int(rng.choice(N, p=d2 / total))
        centers[k] = Z[idx]
        d2 = np.minimum(d2, np.sum((Z - centers[k]) ** 2, axis=1))
    return centers


def _init_from_kmeans_pp(Z: np.ndarray, K: int, rng: np.random.Generator) -> GMMParams:
    """Seed with k-means++ and take one hard-assignment pass for (pi, mu, sigma2)."""
    centers = _kmeans_pp_centers(Z, K, rng)
    d2 = np.sum((Z[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    N, J = Z.shape
    pi = np.empty(K)
    mu = np.empty((K, J))
    sigma2 = np.empty((K, J))
    for k in range(K):
        members = Z[labels == k]
        pi[k] = len(members) / N
        if len(members) == 0:
            mu[k] = centers[k]
            sigma2[k] = 1.0
        else:
            mu[k] = members.mean(axis=0)
            sigma2[k] = members.var(axis=0)
    pi = np.maximum(pi, 1.0 / (10.0 * N))
    pi /= pi.sum()
    sigma2 = np.maximum(sigma2, VARIANCE_FLOOR)
    return GMMParams(pi=pi, mu=mu, sigma2=sigma2)


def fit_gmm(
    Z: np.ndarray,
    K: int,
    max_iters: int = 200,
    tol: float = 1e-7,
    rng: Optional[np.random.Generator] = None,
    init: Optional[GMMParams] = None,
    return_log_likelihoods: bool = False,
):
    """Classic EM for a diagonal-covariance GMM.

    Stops when the total log-likelihood improves by less than `tol` or after
    `max_iters` iterations. `init` warm-starts from existing parameters;
    otherwise k-means++ seeding plus one hard-assignment pass is used.
    The log-likelihood is checked to be non-decreasing at every iteration.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"Z must be (N, J), got shape {Z.shape}")
    if not np.isfinite(Z).all():
        raise ValueError("non-finite rows in latent matrix")
    N, J = Z.shape
    if K < 1 or N < K:
        raise ValueError(f"need N >= K >= 1, got N={N}, K={K}")
    if rng is None:
        rng = np.random.default_rng()

    if init is not None:
        if init.J != J or init.K != K:
            raise ValueError("warm-start parameters have incompatible shape")
        params = init
    else:
        params = _init_from_kmeans_pp(Z, K, rng)

    lls = []
    prev_ll = -np.inf
    for _ in range(max_iters):
        with np.errstate(divide="ignore"):
            log_pi = np.log(params.pi)
        lp = _component_log_densities(Z, params.mu, params.sigma2) + log_pi[None, :]
        row_lse = logsumexp(lp, axis=1)
        ll = float(np.sum(row_lse))
        if ll < prev_ll - 1e-8 * (1.0 + abs(prev_ll)):
            raise RuntimeError(f"EM log-likelihood decreased: {prev_ll} -> {ll}")
        lls.append(ll)
        if ll - prev_ll < tol:
            break
        prev_ll = ll

        resp = np.exp(lp - row_lse[:, None])  # (N, K)
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        pi = nk / N
        mu = (resp.T @ Z) / nk[:, None]
        ez2 = (resp.T @ (Z**2)) / nk[:, None]
        sigma2 = np.maximum(ez2 - mu**2, VARIANCE_FLOOR)
        params = GMMParams(pi=pi / pi.sum(), mu=mu, sigma2=sigma2)

    if return_log_likelihoods:
        return params, lls
    return params
