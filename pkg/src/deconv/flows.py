"""Invertible transform stacks with exact log-densities.

A ``Flow`` maps base noise u (standard normal) to data v through an ordered
stack of layers, v = T(u); densities come from the change-of-variable
formula evaluated along the inverse pass.  Affine autoregressive layers are
one-pass in the density direction ("maf") or in the sampling direction
("iaf"); the other direction costs one conditioner pass per dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param, Tape
from .errors import NumericError, SingularityError
from .made import ContextEmbedder, MadeConditioner
from .rng import stream

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_log_prob(tape: Tape, x: Node) -> Node:
    """Standard-normal log-density per row of x (N, D)."""
    d = x.value.shape[-1]
    quad = ad.asum(ad.mul(x, x), axis=-1)
    return ad.sub(ad.mul(quad, tape.constant(-0.5)),
                  tape.constant(0.5 * d * LOG_2PI))


class AffineAutoregressive:
    """Per-dimension affine transform whose parameters come from a MADE.

    direction "maf": the conditioner reads the data side, so the inverse
    (density) pass is a single network evaluation and sampling loops over
    dimensions.  direction "iaf": the conditioner reads the base side, so
    sampling is single-pass and density evaluation loops.
    """

    def __init__(self, conditioner: MadeConditioner, direction: str,
                 log_scale_clamp: float = 7.0):
        if direction not in ("maf", "iaf"):
            raise ValueError(f"unknown direction {direction!r}")
        self.conditioner = conditioner
        self.direction = direction
        self.clamp = log_scale_clamp

    def params(self) -> list[Param]:
        return self.conditioner.params()

    def _net(self, tape, x, ctx, train, dropout, rng):
        shift, log_scale = self.conditioner(
            tape, x, ctx, train=train, dropout=dropout, rng=rng
        )
        return shift, ad.clip(log_scale, -self.clamp, self.clamp)

    def _one_pass_forward(self, tape, x, ctx, train, dropout, rng):
        shift, log_scale = self._net(tape, x, ctx, train, dropout, rng)
        y = ad.add(ad.mul(x, ad.exp(log_scale)), shift)
        return y, ad.asum(log_scale, axis=-1)

    def _one_pass_inverse(self, tape, y, ctx, train, dropout, rng):
        shift, log_scale = self._net(tape, y, ctx, train, dropout, rng)
        x = ad.mul(ad.sub(y, shift), ad.exp(ad.neg(log_scale)))
        return x, ad.neg(ad.asum(log_scale, axis=-1))

    def _looped(self, tape, given, ctx, train, dropout, rng, invert):
        """Build the conditioner-side vector one degree at a time."""
        n, d = given.value.shape
        cols: list[Node | None] = [tape.constant(np.zeros((n, 1)))] * d
        out_cols: list[Node | None] = [None] * d
        scale_cols = []
        for pos in np.argsort(self.conditioner.order, kind="stable"):
            cur = cols[0] if d == 1 else ad.concat(cols, axis=1)
            shift, log_scale = self._net(tape, cur, ctx, train, dropout, rng)
            mu = ad.slice_axis(shift, pos, pos + 1, axis=1)
            a = ad.slice_axis(log_scale, pos, pos + 1, axis=1)
            g = ad.slice_axis(given, pos, pos + 1, axis=1)
            if invert:  # solve for the conditioner-side input
                new = ad.mul(ad.sub(g, mu), ad.exp(ad.neg(a)))
            else:  # generate the conditioner-side output
                new = ad.add(ad.mul(g, ad.exp(a)), mu)
            cols[pos] = new
            out_cols[pos] = new
            scale_cols.append(a)
        out = out_cols[0] if d == 1 else ad.concat(out_cols, axis=1)
        total = scale_cols[0] if d == 1 else ad.concat(scale_cols, axis=1)
        return out, ad.asum(total, axis=-1)

    def forward(self, tape, x, ctx=None, train=False, dropout=0.0, rng=None):
        """base -> data; returns (y, log|det dy/dx|)."""
        if self.direction == "iaf":
            return self._one_pass_forward(tape, x, ctx, train, dropout, rng)
        y, logdet = self._looped(tape, x, ctx, train, dropout, rng, invert=False)
        return y, logdet

    def inverse(self, tape, y, ctx=None, train=False, dropout=0.0, rng=None):
        """data -> base; returns (x, log|det dx/dy|)."""
        if self.direction == "maf":
            return self._one_pass_inverse(tape, y, ctx, train, dropout, rng)
        x, logdet = self._looped(tape, y, ctx, train, dropout, rng, invert=True)
        return x, ad.neg(logdet)


class LuLinear:
    """Linear layer W = P L U with P a fixed random permutation.

    L is unit lower triangular, U upper triangular with positive diagonal
    exp(log_diag), so log|det W| = sum(log_diag) exactly.
    """

    def __init__(self, dim: int, rng: np.random.Generator, name: str = "lu",
                 identity_permutation: bool = False):
        self.dim = dim
        self.perm = (
            np.arange(dim) if identity_permutation else rng.permutation(dim)
        )
        self.p_mat = np.eye(dim)[:, np.argsort(self.perm)]  # applies the permutation
        m = dim * (dim - 1) // 2
        self.lower = Param(np.zeros(m), f"{name}.lower")
        self.upper = Param(np.zeros(m), f"{name}.upper")
        self.log_diag = Param(np.zeros(dim), f"{name}.log_diag")

    def params(self) -> list[Param]:
        return [self.lower, self.upper, self.log_diag]

    def _check_diag(self):
        if np.min(np.exp(self.log_diag.value)) < 1e-12:
            raise SingularityError("lu-linear: |diag U| below 1e-12")

    def _factors(self, tape):
        eye = tape.constant(np.eye(self.dim))
        l_mat = ad.add(ad.fill_lower(tape.leaf(self.lower), self.dim, strict=True),
                       eye)
        u_strict = ad.swap_last2(
            ad.fill_lower(tape.leaf(self.upper), self.dim, strict=True)
        )
        u_mat = ad.add(u_strict, ad.diag_embed(ad.exp(tape.leaf(self.log_diag))))
        return l_mat, u_mat

    def forward(self, tape, x, ctx=None, train=False, dropout=0.0, rng=None):
        self._check_diag()
        l_mat, u_mat = self._factors(tape)
        w = ad.matmul(tape.constant(self.p_mat), ad.matmul(l_mat, u_mat))
        y = ad.matmul(x, ad.swap_last2(w))
        logdet = ad.asum(tape.leaf(self.log_diag))
        return y, logdet

    def inverse(self, tape, y, ctx=None, train=False, dropout=0.0, rng=None):
        self._check_diag()
        l_mat, u_mat = self._factors(tape)
        t = ad.matmul(y, tape.constant(self.p_mat))  # rows: P^T y
        t = ad.matmul(t, ad.swap_last2(ad.tri_inv(l_mat, lower=True)))
        x = ad.matmul(t, ad.swap_last2(ad.tri_inv(u_mat, lower=False)))
        logdet = ad.neg(ad.asum(tape.leaf(self.log_diag)))
        return x, logdet


class Permutation:
    """Fixed permutation of coordinates; log|det| = 0."""

    def __init__(self, perm: np.ndarray):
        self.perm = np.asarray(perm, dtype=np.intp)
        self.inv = np.argsort(self.perm)

    def params(self) -> list[Param]:
        return []

    def forward(self, tape, x, ctx=None, train=False, dropout=0.0, rng=None):
        return ad.permute_cols(x, self.perm), tape.constant(0.0)

    def inverse(self, tape, y, ctx=None, train=False, dropout=0.0, rng=None):
        return ad.permute_cols(y, self.inv), tape.constant(0.0)


@dataclass(frozen=True)
class FlowConfig:
    """Architecture of one transform stack."""

    dim: int
    n_ar_layers: int = 5
    hidden_features: int = 128
    depth: int = 2  # residual blocks (resmade) or hidden layers (made)
    variant: str = "resmade"
    direction: str = "maf"
    use_lu: bool = True
    context_dim: int = 0
    log_scale_clamp: float = 7.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class Flow:
    """Ordered layer stack over a standard-normal base (base -> data)."""

    def __init__(self, config: FlowConfig, seed: int):
        self.config = config
        self.seed = seed
        self.dim = config.dim
        self.layers = []
        init_rng = stream(seed, "flow-init")
        for i in range(config.n_ar_layers):
            order = np.arange(1, config.dim + 1)
            if i % 2 == 1:
                order = order[::-1].copy()
            cond = MadeConditioner(
                config.dim,
                config.hidden_features,
                config.depth,
                variant=config.variant,
                context_dim=config.context_dim,
                order=order,
                name=f"ar{i}",
                rng=init_rng,
            )
            self.layers.append(
                AffineAutoregressive(cond, config.direction,
                                     config.log_scale_clamp)
            )
            if config.use_lu and i < config.n_ar_layers - 1:
                self.layers.append(
                    LuLinear(config.dim, stream(seed, "lu-perm", i), name=f"lu{i}")
                )

    def params(self) -> list[Param]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def _lift(self, tape, x):
        return x if isinstance(x, Node) else tape.constant(x)

    def log_prob(self, tape, v, ctx=None, train=False, dropout=0.0, rng=None):
        """log-density of rows of v under the flow; (N,) node."""
        x = self._lift(tape, v)
        total = tape.constant(0.0)
        for i, layer in enumerate(reversed(self.layers)):
            x, ld = layer.inverse(tape, x, ctx, train=train, dropout=dropout,
                                  rng=rng)
            if not np.all(np.isfinite(x.value)):
                raise NumericError(
                    f"flow log_prob: non-finite output at layer {len(self.layers) - 1 - i}"
                )
            total = ad.add(total, ld)
        return ad.add(gaussian_log_prob(tape, x), total)

    def sample_with_log_prob(self, tape, n=None, ctx=None, base=None,
                             train=False, dropout=0.0, rng=None,
                             sample_rng=None):
        """Transform base noise; returns (v, log q(v)) nodes.

        Base draws come from `base` (array) if given, else `sample_rng`.
        With context, n defaults to the context row count.
        """
        if base is None:
            if n is None:
                n = ctx.value.shape[0]
            base = sample_rng.standard_normal((n, self.dim))
        u = self._lift(tape, base)
        x = u
        total = tape.constant(0.0)
        for i, layer in enumerate(self.layers):
            x, ld = layer.forward(tape, x, ctx, train=train, dropout=dropout,
                                  rng=rng)
            if not np.all(np.isfinite(x.value)):
                raise NumericError(
                    f"flow sample: non-finite output at layer {i}"
                )
            total = ad.add(total, ld)
        return x, ad.sub(gaussian_log_prob(tape, u), total)

    # ------------------------------------------------------------------
    # convenience evaluation helpers (throwaway tapes, chunked)

    def log_prob_values(self, v: np.ndarray, ctx: np.ndarray | None = None,
                        batch: int = 4096) -> np.ndarray:
        out = np.empty(len(v))
        for lo in range(0, len(v), batch):
            hi = min(lo + batch, len(v))
            tape = Tape()
            c = tape.constant(ctx[lo:hi]) if ctx is not None else None
            out[lo:hi] = self.log_prob(tape, v[lo:hi], c).value
        return out

    def sample_values(self, n: int, seed: int, ctx: np.ndarray | None = None,
                      batch: int = 4096):
        rng = stream(seed, "flow-sample")
        vs, lps = [], []
        for lo in range(0, n, batch):
            m = min(batch, n - lo)
            tape = Tape()
            c = tape.constant(ctx[lo:lo + m]) if ctx is not None else None
            v, lp = self.sample_with_log_prob(tape, n=m, ctx=c, sample_rng=rng)
            vs.append(v.value)
            lps.append(lp.value)
        return np.concatenate(vs), np.concatenate(lps)


@dataclass(frozen=True)
class EmbedderConfig:
    obs_dim: int
    noise_dim: int  # 0 conditions on the observation only
    width: int = 64
    out_dim: int = 64
    n_blocks: int = 2

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def build_embedder(config: EmbedderConfig, seed: int) -> ContextEmbedder:
    return ContextEmbedder(
        config.obs_dim,
        config.noise_dim,
        width=config.width,
        out_dim=config.out_dim,
        n_blocks=config.n_blocks,
        rng=stream(seed, "embed-init"),
    )


def chol_flatten(s_mat: np.ndarray) -> np.ndarray:
    """Row-major lower-triangle entries of chol(S); batched over leading axes."""
    from .errors import CovarianceError

    try:
        chol = np.linalg.cholesky(s_mat)
    except np.linalg.LinAlgError as e:
        raise CovarianceError(f"noise covariance is not SPD: {e}") from e
    d = s_mat.shape[-1]
    rows, cols = np.tril_indices(d)
    return chol[..., rows, cols]
