"""Monte Carlo training and evaluation bounds on the observation likelihood.

For an observation w with Gaussian noise covariance S and latent prior p,
K proposal draws v_k ~ q(v | w, S) give per-sample log-weights

    log r_k = log N(w - v_k; 0, S) + log p(v_k) - log q(v_k).

Averaging the r_k in log space gives the K-sample evidence lower bound;
log-mean-exp gives the tighter importance-weighted bound, consistent as
K grows.  Both are differentiable through the reparameterized sampler of a
flow posterior; an exact mixture posterior enters as constants, which makes
the bound tight and its gradient the marginal-likelihood gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param, Tape
from .errors import CovarianceError, DegenerateWeightsError, NumericError
from .flows import Flow, chol_flatten
from .gmm import LOG_2PI, Gmm, mvn_log_prob
from .made import ContextEmbedder
from .rng import stream


@dataclass
class BoundEstimate:
    """One observation's bound value plus the material for resampling."""

    value: float
    K: int
    kind: str  # "elbo" or "iwae"
    log_weights: np.ndarray  # (K,)
    samples: np.ndarray  # (K, D)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NumericError(f"{self.kind} estimate is not finite")
        if len(self.log_weights) != self.K:
            raise ValueError("log_weights length must equal K")


def _noise_chol_inv(s_mat: np.ndarray):
    d = s_mat.shape[-1]
    try:
        chol = np.linalg.cholesky(s_mat)
    except np.linalg.LinAlgError as e:
        raise CovarianceError("noise covariance is not SPD") from e
    linv = np.linalg.inv(chol) * np.tril(np.ones((d, d)))
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    return linv, logdet


def noise_log_prob(tape: Tape, diff: Node, s_mat: np.ndarray, k_rep: int = 1) -> Node:
    """log N(diff; 0, S) per row; S shared (D,D) or per-point (N,D,D).

    With per-point S each of the N rows of S covers k_rep consecutive rows
    of diff (K Monte Carlo draws per observation).
    """
    d = diff.value.shape[-1]
    linv, logdet = _noise_chol_inv(s_mat)
    if s_mat.ndim == 2:
        z = ad.matmul(diff, tape.constant(linv.T))
        const = 0.5 * float(logdet) + 0.5 * d * LOG_2PI
        quad = ad.asum(ad.mul(z, z), axis=-1)
        return ad.sub(ad.mul(quad, tape.constant(-0.5)), tape.constant(const))
    linv = np.repeat(linv, k_rep, axis=0)
    logdet = np.repeat(logdet, k_rep, axis=0)
    z = ad.einsum2("mde,me->md", tape.constant(linv), diff)
    quad = ad.asum(ad.mul(z, z), axis=-1)
    return ad.mul(
        ad.add(ad.add(quad, tape.constant(logdet)), tape.constant(d * LOG_2PI)),
        tape.constant(-0.5),
    )


class FlowPosterior:
    """Amortized recognition model: context embedder feeding a conditional flow.

    The embedder sees the observation concatenated with the flattened
    Cholesky factor of its noise covariance, or the observation alone when
    `condition_on_noise` is off.
    """

    def __init__(self, flow: Flow, embedder: ContextEmbedder,
                 condition_on_noise: bool = True):
        if flow.config.context_dim != embedder.out_dim:
            raise ValueError("flow context width must match embedder output")
        self.flow = flow
        self.embedder = embedder
        self.condition_on_noise = condition_on_noise

    def params(self) -> list[Param]:
        return self.flow.params() + self.embedder.params()

    def _noise_features(self, w: np.ndarray, s_mat: np.ndarray) -> np.ndarray | None:
        if not self.condition_on_noise:
            return None
        flat = chol_flatten(s_mat)
        if flat.ndim == 1:
            flat = np.tile(flat, (len(w), 1))
        return flat

    def context(self, tape: Tape, w: np.ndarray, s_mat: np.ndarray,
                train=False, dropout=0.0, rng=None) -> Node:
        w = np.atleast_2d(w)
        feats = self._noise_features(w, s_mat)
        f_node = tape.constant(feats) if feats is not None else None
        return self.embedder(tape, tape.constant(w), f_node, train=train,
                             dropout=dropout, rng=rng)

    def sample_with_log_prob(self, tape: Tape, w: np.ndarray, s_mat: np.ndarray,
                             k: int, sample_rng, train=False, dropout=0.0,
                             rng=None):
        """K reparameterized draws per observation: ((N*K, D), (N*K,)) nodes."""
        w = np.atleast_2d(w)
        ctx = self.context(tape, w, s_mat, train=train, dropout=dropout, rng=rng)
        ctx_rep = ad.repeat_rows(ctx, k)
        base = sample_rng.standard_normal((len(w) * k, self.flow.dim))
        return self.flow.sample_with_log_prob(
            tape, base=base, ctx=ctx_rep, train=train, dropout=dropout, rng=rng
        )

    def log_prob(self, tape: Tape, v, w: np.ndarray, s_mat: np.ndarray,
                 train=False, dropout=0.0, rng=None) -> Node:
        """Conditional density of given latents (one inverse pass per dim)."""
        ctx = self.context(tape, w, s_mat, train=train, dropout=dropout, rng=rng)
        return self.flow.log_prob(tape, v, ctx=ctx, train=train,
                                  dropout=dropout, rng=rng)


class ExactPosterior:
    """The mixture posterior itself, used as a zero-gap proposal.

    Samples and densities enter the tape as constants: the bound's value
    then equals the convolved marginal exactly, and gradients flow only
    through the prior term.
    """

    def __init__(self, gmm: Gmm):
        self.gmm = gmm

    def params(self) -> list[Param]:
        return []

    def sample_with_log_prob(self, tape: Tape, w: np.ndarray, s_mat: np.ndarray,
                             k: int, sample_rng, **_):
        w = np.atleast_2d(w)
        n, d = w.shape
        log_resp, post_means, post_covs = self.gmm.posterior_moments(w, s_mat)
        resp = np.exp(log_resp)
        resp = resp / resp.sum(axis=1, keepdims=True)
        cum = np.cumsum(resp, axis=1)
        u = sample_rng.random((n, k))
        comps = (u[:, :, None] > cum[:, None, :]).sum(-1)
        chol = np.linalg.cholesky(post_covs)
        eps = sample_rng.standard_normal((n, k, d))
        rows = np.arange(n)[:, None]
        v = post_means[rows, comps] + np.einsum(
            "nkde,nke->nkd", chol[comps], eps, optimize=True
        )
        # mixture density of each draw under its own observation's posterior
        diff = v[:, :, None, :] - post_means[:, None, :, :]
        linv = np.linalg.inv(chol) * np.tril(np.ones((d, d)))
        z = np.einsum("cde,nkce->nkcd", linv, diff, optimize=True)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
        comp_lp = -0.5 * ((z * z).sum(-1) + logdet[None, None, :] + d * LOG_2PI)
        a = comp_lp + log_resp[:, None, :]
        m = a.max(-1, keepdims=True)
        logq = (m[..., 0] + np.log(np.exp(a - m).sum(-1))).reshape(n * k)
        return tape.constant(v.reshape(n * k, d)), tape.constant(logq)


def _log_weights_and_samples(tape: Tape, prior, posterior, w: np.ndarray,
                             s_mat: np.ndarray, k: int, sample_rng, train=False,
                             dropout=0.0, rng=None) -> tuple[Node, Node]:
    w = np.atleast_2d(w)
    n = len(w)
    v, logq = posterior.sample_with_log_prob(
        tape, w, s_mat, k, sample_rng, train=train, dropout=dropout, rng=rng
    )
    w_rep = np.repeat(w, k, axis=0)
    diff = ad.sub(tape.constant(w_rep), v)
    log_noise = noise_log_prob(tape, diff, np.asarray(s_mat, float), k_rep=k)
    logp = prior.log_prob(tape, v, train=train, dropout=dropout, rng=rng)
    logw = ad.sub(ad.add(log_noise, logp), logq)
    return ad.reshape(logw, (n, k)), v


def bound_log_weights(tape: Tape, prior, posterior, w: np.ndarray,
                      s_mat: np.ndarray, k: int, sample_rng, train=False,
                      dropout=0.0, rng=None) -> Node:
    """Per-draw log importance weights as an (N, K) node."""
    logw, _ = _log_weights_and_samples(tape, prior, posterior, w, s_mat, k,
                                       sample_rng, train=train,
                                       dropout=dropout, rng=rng)
    return logw


def elbo_node(tape: Tape, prior, posterior, w, s_mat, k, sample_rng,
              train=False, dropout=0.0, rng=None) -> Node:
    """(N,) evidence lower bound estimates."""
    logw = bound_log_weights(tape, prior, posterior, w, s_mat, k, sample_rng,
                             train=train, dropout=dropout, rng=rng)
    return ad.amean(logw, axis=1)


def iwae_node(tape: Tape, prior, posterior, w, s_mat, k, sample_rng,
              train=False, dropout=0.0, rng=None) -> Node:
    """(N,) importance-weighted bound estimates."""
    logw = bound_log_weights(tape, prior, posterior, w, s_mat, k, sample_rng,
                             train=train, dropout=dropout, rng=rng)
    return ad.sub(ad.logsumexp(logw, axis=1), tape.constant(np.log(k)))


def _estimate(kind: str, prior, posterior, w, s_mat, k: int, seed: int):
    if k < 1:
        raise ValueError("K must be >= 1")
    w = np.asarray(w, float).reshape(1, -1)
    tape = Tape()
    sample_rng = stream(seed, "bound")  # shared draws: elbo == iwae at K=1
    logw, v = _log_weights_and_samples(tape, prior, posterior, w, s_mat, k,
                                       sample_rng)
    lw = logw.value[0]
    if not np.all(np.isfinite(lw)):
        bad = int(np.flatnonzero(~np.isfinite(lw))[0])
        raise NumericError(f"non-finite log-weight at draw {bad}")
    if kind == "elbo":
        value = float(lw.mean())
    else:
        value = float(_np_logsumexp(lw) - np.log(k))
    return BoundEstimate(value, k, kind, lw.copy(), v.value.copy())


def _np_logsumexp(a):
    m = np.max(a)
    return m + np.log(np.exp(a - m).sum())


def elbo_estimate(prior, posterior, w, s_mat, k: int, seed: int) -> BoundEstimate:
    return _estimate("elbo", prior, posterior, w, s_mat, k, seed)


def iwae_estimate(prior, posterior, w, s_mat, k: int, seed: int) -> BoundEstimate:
    return _estimate("iwae", prior, posterior, w, s_mat, k, seed)


def eval_marginal_nll(prior, posterior, w: np.ndarray, s_mat: np.ndarray,
                      k: int = 100, seed: int = 0, row_budget: int = 16384) -> float:
    """Mean over observations of -IWAE(K), in nats; chunked over the data."""
    w = np.atleast_2d(w)
    if len(w) == 0:
        raise ValueError("dataset is empty")
    s_arr = np.asarray(s_mat, float)
    per_point = s_arr.ndim == 3
    chunk = max(1, row_budget // k)
    rng = stream(seed, "eval-marginal")
    total = 0.0
    for lo in range(0, len(w), chunk):
        hi = min(lo + chunk, len(w))
        tape = Tape()
        s_part = s_arr[lo:hi] if per_point else s_arr
        vals = iwae_node(tape, prior, posterior, w[lo:hi], s_part, k, rng).value
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"non-finite bound in rows {lo}:{hi}")
        total += float(vals.sum())
    return -total / len(w)


def sir_resample(samples: np.ndarray, log_weights: np.ndarray, n_out: int,
                 seed) -> np.ndarray:
    """Draw n_out rows with replacement, probability proportional to weight."""
    samples = np.asarray(samples)
    lw = np.asarray(log_weights, float)
    if len(samples) != len(lw):
        raise ValueError("samples and log_weights must align")
    if n_out > len(samples):
        raise ValueError("cannot resample more points than provided")
    finite = np.isfinite(lw)
    if not finite.any():
        raise DegenerateWeightsError("all importance weights are zero")
    p = np.zeros(len(lw))
    shifted = lw[finite] - lw[finite].max()
    p[finite] = np.exp(shifted)
    p /= p.sum()
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "sir")
    idx = rng.choice(len(samples), size=n_out, replace=True, p=p)
    return samples[idx]
