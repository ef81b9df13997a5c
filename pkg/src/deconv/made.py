"""Masked autoregressive conditioners (dense MADE and its residual variant).

A conditioner maps a D-dimensional input (optionally concatenated with a
context vector) to per-dimension shift and log-scale outputs, where output
block d only sees inputs of strictly smaller degree.  Masks are fixed at
construction; context columns are unmasked.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param, Tape


def hidden_degrees(dim: int, width: int) -> np.ndarray:
    """Sequential degree assignment for a hidden layer of `width` units."""
    return np.arange(width) % max(1, dim - 1) + min(1, dim - 1)


def build_made_masks(
    dim: int,
    hidden_sizes: list[int],
    order: np.ndarray | None = None,
    context_dim: int = 0,
    out_per_dim: int = 2,
):
    """Masks enforcing the strict autoregressive property.

    `order[i]` is the degree (1..dim) of input position i; natural order by
    default.  Returns (input_mask, [hidden_masks...], output_mask); the
    input mask has `context_dim` extra all-ones rows appended for context
    features, and the output mask covers `out_per_dim` stacked output blocks.
    """
    if order is None:
        order = np.arange(1, dim + 1)
    order = np.asarray(order)
    degs = [hidden_degrees(dim, w) for w in hidden_sizes]

    input_mask = (degs[0][None, :] >= order[:, None]).astype(float)
    if context_dim:
        input_mask = np.concatenate(
            [input_mask, np.ones((context_dim, hidden_sizes[0]))], axis=0
        )
    hidden_masks = [
        (degs[i + 1][None, :] >= degs[i][:, None]).astype(float)
        for i in range(len(hidden_sizes) - 1)
    ]
    out_deg = np.tile(order, out_per_dim)
    output_mask = (out_deg[None, :] > degs[-1][:, None]).astype(float)
    return input_mask, hidden_masks, output_mask


def _he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def _dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    return (rng.random(shape) >= p) / (1.0 - p)


class MadeConditioner:
    """Masked network producing (shift, log_scale) per dimension.

    variant "made": `depth` plain masked hidden layers.
    variant "resmade": one masked input layer followed by `depth`
    pre-activation residual blocks of two masked layers each, all sharing
    one hidden degree vector so the skip connections stay autoregressive.
    """

    def __init__(
        self,
        dim: int,
        hidden_features: int,
        depth: int,
        variant: str = "made",
        context_dim: int = 0,
        order: np.ndarray | None = None,
        name: str = "made",
        rng: np.random.Generator | None = None,
    ):
        if variant not in ("made", "resmade"):
            raise ValueError(f"unknown conditioner variant {variant!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.hidden_features = hidden_features
        self.depth = depth
        self.variant = variant
        self.context_dim = context_dim
        self.order = (
            np.arange(1, dim + 1) if order is None else np.asarray(order).copy()
        )
        n_hidden = depth if variant == "made" else 1 + 2 * depth
        self.input_mask, self.hidden_masks, self.output_mask = build_made_masks(
            dim, [hidden_features] * max(n_hidden, 1), self.order, context_dim
        )

        fan0 = dim + context_dim
        h = hidden_features
        self.w_in = Param(_he_init(rng, fan0, h), f"{name}.w_in")
        self.b_in = Param(np.zeros(h), f"{name}.b_in")
        n_mid = len(self.hidden_masks)
        self.w_mid = [
            Param(_he_init(rng, h, h), f"{name}.w{i}") for i in range(n_mid)
        ]
        self.b_mid = [Param(np.zeros(h), f"{name}.b{i}") for i in range(n_mid)]
        # zero final layer: the conditioner starts as the identity map
        self.w_out = Param(np.zeros((h, 2 * dim)), f"{name}.w_out")
        self.b_out = Param(np.zeros(2 * dim), f"{name}.b_out")

    def params(self) -> list[Param]:
        return [self.w_in, self.b_in, *self.w_mid, *self.b_mid,
                self.w_out, self.b_out]

    def _masked_affine(self, tape, x, w, b, mask):
        return ad.add(ad.masked_matmul(x, tape.leaf(w), mask), tape.leaf(b))

    def __call__(
        self,
        tape: Tape,
        x: Node,
        ctx: Node | None = None,
        train: bool = False,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> tuple[Node, Node]:
        if (ctx is not None) != bool(self.context_dim):
            raise ValueError("context supplied iff the conditioner is conditional")
        inp = ad.concat([x, ctx], axis=1) if ctx is not None else x
        drop = train and dropout > 0.0

        def maybe_drop(node):
            if not drop:
                return node
            mask = _dropout_mask(rng, node.value.shape, dropout)
            return ad.dropout_apply(node, mask)

        h = self._masked_affine(tape, inp, self.w_in, self.b_in, self.input_mask)
        if self.variant == "made":
            h = maybe_drop(ad.relu(h))
            for w, b, mask in zip(self.w_mid, self.b_mid, self.hidden_masks):
                h = maybe_drop(ad.relu(self._masked_affine(tape, h, w, b, mask)))
        else:
            for i in range(self.depth):
                t = maybe_drop(ad.relu(h))
                t = self._masked_affine(
                    tape, t, self.w_mid[2 * i], self.b_mid[2 * i],
                    self.hidden_masks[2 * i],
                )
                t = maybe_drop(ad.relu(t))
                t = self._masked_affine(
                    tape, t, self.w_mid[2 * i + 1], self.b_mid[2 * i + 1],
                    self.hidden_masks[2 * i + 1],
                )
                h = ad.add(h, t)
            h = ad.relu(h)
        out = self._masked_affine(tape, h, self.w_out, self.b_out, self.output_mask)
        shift = ad.slice_axis(out, 0, self.dim, axis=1)
        log_scale = ad.slice_axis(out, self.dim, 2 * self.dim, axis=1)
        return shift, log_scale


class ContextEmbedder:
    """Residual net mapping (w, flattened chol(S)) to a fixed-width context.

    With `noise_dim == 0` the embedding conditions on the observation only
    and any supplied noise features are ignored.
    """

    def __init__(
        self,
        obs_dim: int,
        noise_dim: int,
        width: int = 64,
        out_dim: int = 64,
        n_blocks: int = 2,
        name: str = "embed",
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.noise_dim = noise_dim
        self.width = width
        self.out_dim = out_dim
        self.n_blocks = n_blocks
        fan0 = obs_dim + noise_dim
        self.w_in = Param(_he_init(rng, fan0, width), f"{name}.w_in")
        self.b_in = Param(np.zeros(width), f"{name}.b_in")
        self.blocks = []
        for i in range(n_blocks):
            self.blocks.append(
                (
                    Param(_he_init(rng, width, width), f"{name}.blk{i}.w1"),
                    Param(np.zeros(width), f"{name}.blk{i}.b1"),
                    Param(_he_init(rng, width, width), f"{name}.blk{i}.w2"),
                    Param(np.zeros(width), f"{name}.blk{i}.b2"),
                )
            )
        self.w_out = Param(_he_init(rng, width, out_dim), f"{name}.w_out")
        self.b_out = Param(np.zeros(out_dim), f"{name}.b_out")

    def params(self) -> list[Param]:
        ps = [self.w_in, self.b_in]
        for w1, b1, w2, b2 in self.blocks:
            ps += [w1, b1, w2, b2]
        return ps + [self.w_out, self.b_out]

    def __call__(
        self,
        tape: Tape,
        w: Node,
        noise_feat: Node | None = None,
        train: bool = False,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Node:
        if self.noise_dim:
            if noise_feat is None:
                raise ValueError("embedder expects noise features")
            inp = ad.concat([w, noise_feat], axis=1)
        else:
            inp = w
        drop = train and dropout > 0.0

        def maybe_drop(node):
            if not drop:
                return node
            return ad.dropout_apply(node, _dropout_mask(rng, node.value.shape, dropout))

        h = ad.affine(inp, tape.leaf(self.w_in), tape.leaf(self.b_in))
        for w1, b1, w2, b2 in self.blocks:
            t = maybe_drop(ad.relu(h))
            t = ad.affine(t, tape.leaf(w1), tape.leaf(b1))
            t = maybe_drop(ad.relu(t))
            t = ad.affine(t, tape.leaf(w2), tape.leaf(b2))
            h = ad.add(h, t)
        return ad.affine(ad.relu(h), tape.leaf(self.w_out), tape.leaf(self.b_out))


def numeric_jacobian(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Finite-difference Jacobian of fn: (D,) -> (M,); used to audit masks."""
    y0 = fn(x)
    jac = np.zeros((y0.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        jac[:, i] = (fn(xp) - fn(xm)) / (2 * eps)
    return jac
