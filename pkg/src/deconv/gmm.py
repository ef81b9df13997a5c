"""Gaussian mixtures: exact densities, noise-convolved marginals, posteriors.

Two representations live here.  ``Gmm`` is a frozen numpy value type used
for evaluation, sampling and exact posteriors.  ``GmmParams`` is the
trainable counterpart: weights through a softmax, covariances through an
unconstrained lower-Cholesky factor with softplus diagonal plus a 1e-4
eigenvalue floor, so every parameter setting yields a valid mixture.

With Gaussian noise of covariance S the marginal density of an observation
is again a mixture, with component covariances C_k + S; that closed form is
what makes the SGD deconvolution baseline tractable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param, Tape
from .errors import CovarianceError
from .rng import stream

LOG_2PI = float(np.log(2.0 * np.pi))
COV_FLOOR = 1e-4


def _softplus(x):
    return np.logaddexp(0.0, x)


def _inv_softplus(y):
    # inverse of log(1+exp(x)); y must be positive
    return y + np.log1p(-np.exp(-y))


def _chol(mat, what: str):
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as e:
        raise CovarianceError(f"{what} is not positive definite") from e


def mvn_log_prob(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """log N(x_n; mean_k, cov_k) -> (N, K); covs (K,D,D) or (N,K,D,D)."""
    d = x.shape[-1]
    chol = _chol(covs, "covariance")
    linv = np.linalg.inv(chol) * np.tril(np.ones((d, d)))
    diff = x[:, None, :] - means[None, :, :]
    if covs.ndim == 3:
        z = np.einsum("kde,nke->nkd", linv, diff, optimize=True)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)[None, :]
    else:
        z = np.einsum("nkde,nke->nkd", linv, diff, optimize=True)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    quad = (z * z).sum(-1)
    return -0.5 * (quad + logdet + d * LOG_2PI)


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.exp(a - m).sum(axis=axis))


@dataclass(frozen=True)
class Gmm:
    """Immutable mixture; weights sum to 1, covariances SPD."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covs: np.ndarray  # (K, D, D)

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, float))
        object.__setattr__(self, "means", np.asarray(self.means, float))
        object.__setattr__(self, "covs", np.asarray(self.covs, float))
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-8):
            raise ValueError("mixture weights must sum to 1")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_prob(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        comp = mvn_log_prob(v, self.means, self.covs)
        return _logsumexp(comp + np.log(self.weights)[None, :])

    def marginal_log_prob(self, w: np.ndarray, s_mat: np.ndarray) -> np.ndarray:
        """log density of w under the noise-convolved mixture.

        s_mat is one shared (D,D) covariance or per-point (N,D,D).
        """
        w = np.atleast_2d(w)
        s_mat = np.asarray(s_mat, float)
        if s_mat.ndim == 2:
            covs = self.covs + s_mat[None, :, :]
        else:
            covs = self.covs[None, :, :, :] + s_mat[:, None, :, :]
        comp = mvn_log_prob(w, self.means, covs)
        return _logsumexp(comp + np.log(self.weights)[None, :])

    def posterior_moments(self, w: np.ndarray, s_mat: np.ndarray):
        """Batched exact posterior: (log_resp (N,K), means (N,K,D), covs (K,D,D)).

        Shared s_mat only; per-point posteriors go through exact_posterior.
        """
        w = np.atleast_2d(w)
        total = self.covs + s_mat[None, :, :]
        gain = self.covs @ np.linalg.inv(total)  # C (C+S)^-1, (K,D,D)
        diff = w[:, None, :] - self.means[None, :, :]
        post_means = self.means[None, :, :] + np.einsum(
            "kde,nke->nkd", gain, diff, optimize=True
        )
        post_covs = self.covs - gain @ self.covs
        post_covs = 0.5 * (post_covs + np.swapaxes(post_covs, -1, -2))
        log_resp = mvn_log_prob(w, self.means, total) + np.log(self.weights)
        log_resp = log_resp - _logsumexp(log_resp)[:, None]
        return log_resp, post_means, post_covs

    def exact_posterior(self, w: np.ndarray, s_mat: np.ndarray) -> "Gmm":
        """Posterior over the latent value for a single observation."""
        w = np.asarray(w, float).reshape(1, -1)
        s_mat = np.asarray(s_mat, float)
        log_resp, post_means, post_covs = self.posterior_moments(w, s_mat)
        return Gmm(np.exp(log_resp[0]), post_means[0], post_covs)

    def sample(self, n: int, seed_or_rng) -> np.ndarray:
        rng = (
            seed_or_rng
            if isinstance(seed_or_rng, np.random.Generator)
            else stream(seed_or_rng, "gmm-sample")
        )
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        chol = _chol(self.covs, "covariance")
        eps = rng.standard_normal((n, self.dim))
        return self.means[comps] + np.einsum(
            "nde,ne->nd", chol[comps], eps, optimize=True
        )


class GmmParams:
    """Trainable mixture parameters with recorded-density methods."""

    def __init__(self, n_components: int, dim: int, name: str = "gmm"):
        m = dim * (dim + 1) // 2
        self.n_components = n_components
        self.dim = dim
        self.logits = Param(np.zeros(n_components), f"{name}.logits")
        self.means = Param(np.zeros((n_components, dim)), f"{name}.means")
        self.tril = Param(np.zeros((n_components, m)), f"{name}.tril")
        rows, cols = np.tril_indices(dim)
        self._diag_slots = np.flatnonzero(rows == cols)
        self._strict_slots = np.flatnonzero(rows != cols)

    def params(self) -> list[Param]:
        return [self.logits, self.means, self.tril]

    # ------------------------------------------------------------------
    # parameterization

    def set_covariances(self, covs: np.ndarray) -> None:
        covs = np.asarray(covs, float)
        raw = np.zeros_like(self.tril.value)
        rows, cols = np.tril_indices(self.dim)
        for k in range(self.n_components):
            t = _chol(covs[k] - COV_FLOOR * np.eye(self.dim),
                      "initial covariance")
            entries = t[rows, cols]
            entries[self._diag_slots] = _inv_softplus(
                np.maximum(entries[self._diag_slots], 1e-8)
            )
            raw[k] = entries
        self.tril.assign(raw)

    def _strict_indicator(self):
        ind = np.zeros(self.tril.value.shape[-1])
        ind[self._strict_slots] = 1.0
        return ind

    def _diag_indicator(self):
        ind = np.zeros(self.tril.value.shape[-1])
        ind[self._diag_slots] = 1.0
        return ind

    def covariances(self) -> np.ndarray:
        rows, cols = np.tril_indices(self.dim)
        t = np.zeros((self.n_components, self.dim, self.dim))
        entries = self.tril.value.copy()
        entries[:, self._diag_slots] = _softplus(entries[:, self._diag_slots])
        t[:, rows, cols] = entries
        return t @ np.swapaxes(t, -1, -2) + COV_FLOOR * np.eye(self.dim)

    def to_gmm(self) -> Gmm:
        logits = self.logits.value
        w = np.exp(logits - _logsumexp(logits[None, :])[0])
        w = w / w.sum()
        return Gmm(w, self.means.value.copy(), self.covariances())

    # ------------------------------------------------------------------
    # recorded densities

    def _factor_node(self, tape: Tape) -> Node:
        raw = tape.leaf(self.tril)
        diag_ind = tape.constant(self._diag_indicator())
        strict_part = ad.mul(raw, tape.constant(self._strict_indicator()))
        soft = ad.softplus(raw)
        diag_part = ad.mul(soft, diag_ind)
        entries = ad.add(strict_part, diag_part)
        return ad.fill_lower(entries, self.dim, strict=False)

    def _log_weights(self, tape: Tape) -> Node:
        logits = tape.leaf(self.logits)
        return ad.sub(logits, ad.logsumexp(logits, axis=0, keepdims=True))

    def log_prob(self, tape: Tape, v, **_) -> Node:
        return self.marginal_log_prob(tape, v, None)

    def marginal_log_prob(self, tape: Tape, w, s_mat=None, **_) -> Node:
        """Recorded log-density of w under the S-convolved mixture.

        s_mat: None (no noise), shared (D,D), or per-point (N,D,D) array.
        """
        w = np.atleast_2d(w) if not isinstance(w, Node) else w
        w_node = w if isinstance(w, Node) else tape.constant(w)
        n = w_node.value.shape[0]
        t_node = self._factor_node(tape)
        cov = ad.add(
            ad.einsum2("kde,kfe->kdf", t_node, t_node),
            tape.constant(COV_FLOOR * np.eye(self.dim)),
        )
        per_point = s_mat is not None and np.asarray(s_mat).ndim == 3
        if s_mat is not None:
            s_arr = np.asarray(s_mat, float)
            if per_point:
                cov = ad.add(ad.reshape(cov, (1,) + cov.value.shape),
                             tape.constant(s_arr[:, None, :, :]))
            else:
                cov = ad.add(cov, tape.constant(s_arr))
        try:
            chol = ad.cholesky(cov)
        except Exception as e:
            raise CovarianceError(f"convolved covariance not SPD: {e}") from e
        linv = ad.tri_inv(chol)
        means = ad.reshape(tape.leaf(self.means), (1, self.n_components, self.dim))
        diff = ad.sub(ad.reshape(w_node, (n, 1, self.dim)), means)
        if per_point:
            z = ad.einsum2("nkde,nke->nkd", linv, diff)
        else:
            z = ad.einsum2("kde,nke->nkd", linv, diff)
        quad = ad.asum(ad.mul(z, z), axis=-1)
        logdet = ad.mul(ad.asum(ad.log(ad.diag_part(chol)), axis=-1),
                        tape.constant(2.0))
        if not per_point:
            logdet = ad.reshape(logdet, (1, self.n_components))
        comp = ad.mul(
            ad.add(ad.add(quad, logdet), tape.constant(self.dim * LOG_2PI)),
            tape.constant(-0.5),
        )
        logw = ad.reshape(self._log_weights(tape), (1, self.n_components))
        return ad.logsumexp(ad.add(comp, logw), axis=-1)


def kmeans_pp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding (selection only, no Lloyd iterations)."""
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(-1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(-1))
    return np.stack(centers)


def init_gmm_params(
    w: np.ndarray,
    s_mean: np.ndarray,
    n_components: int,
    seed: int,
    name: str = "gmm",
) -> GmmParams:
    """Data-driven start: k-means++ means, shared moment-matched covariance."""
    d = w.shape[1]
    params = GmmParams(n_components, d, name=name)
    rng = stream(seed, "gmm-init")
    params.means.assign(kmeans_pp_centers(w, n_components, rng))
    c0 = np.cov(w.T).reshape(d, d) - np.asarray(s_mean, float)
    evals, evecs = np.linalg.eigh(0.5 * (c0 + c0.T))
    c0 = (evecs * np.maximum(evals, 1e-2)) @ evecs.T
    params.set_covariances(np.repeat(c0[None, :, :], n_components, axis=0))
    return params
