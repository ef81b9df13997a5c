"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every operation in execution order, so the node list is
already topologically sorted and a single reverse sweep from a scalar root
propagates gradients to all reachable ``Param`` leaves.  Everything runs in
64-bit floats; there is no broadcasting magic beyond what numpy provides,
and gradients of broadcast operands are summed back to the operand shape.

Ops are plain functions returning ``Node`` objects.  ``Node`` also carries
the usual arithmetic operator overloads for readability in model code.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Param:
    """A named leaf with a value array and a same-shape gradient accumulator."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str):
        self.value = _as_array(value)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def assign(self, value) -> None:
        value = _as_array(value)
        if value.shape != self.value.shape:
            raise ShapeError(
                f"param {self.name}: cannot assign shape {value.shape} "
                f"over {self.value.shape}"
            )
        self.value = value
        self.grad = np.zeros_like(value)

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


class Node:
    """One recorded operation: forward value plus a vjp closure."""

    __slots__ = ("tape", "value", "parents", "vjp", "idx", "param")

    def __init__(self, tape: "Tape", value: Array, parents, vjp, param=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param = param
        self.idx = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar; scalars/arrays are lifted to constants on the same tape
    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))


class Tape:
    """Append-only operation record; single-owner during recording."""

    __slots__ = ("nodes", "_leaves")

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}

    def constant(self, value) -> Node:
        return Node(self, _as_array(value), (), None)

    def leaf(self, param: Param) -> Node:
        """Enter a Param once per tape; repeated calls return the same node."""
        node = self._leaves.get(id(param))
        if node is None:
            node = Node(self, param.value, (), None, param=param)
            self._leaves[id(param)] = node
        return node

    def backward(self, root: Node) -> None:
        """Accumulate d(root)/d(leaf) into each reachable Param's .grad."""
        if root.tape is not self:
            raise ValueError("root was recorded on a different tape")
        if root.value.shape != ():
            raise ValueError(
                f"backward root must be scalar, got shape {root.value.shape}"
            )
        grads: list[Array | None] = [None] * len(self.nodes)
        grads[root.idx] = np.ones(())
        for node in reversed(self.nodes[: root.idx + 1]):
            g = grads[node.idx]
            if g is None:
                continue
            grads[node.idx] = None  # free as we go
            if node.param is not None:
                node.param.grad += g
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if grads[parent.idx] is None:
                    grads[parent.idx] = np.zeros_like(parent.value)
                grads[parent.idx] += pg


def backward(root: Node) -> None:
    root.tape.backward(root)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Array, b: Array) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a: Node, b: Node) -> Node:
    _check_broadcast("add", a.value, b.value)
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Node(a.tape, out, (a, b), vjp)


def sub(a: Node, b: Node) -> Node:
    _check_broadcast("sub", a.value, b.value)
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)

    return Node(a.tape, out, (a, b), vjp)


def mul(a: Node, b: Node) -> Node:
    _check_broadcast("mul", a.value, b.value)
    out = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Node(a.tape, out, (a, b), vjp)


def div(a: Node, b: Node) -> Node:
    _check_broadcast("div", a.value, b.value)
    out = a.value / b.value

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return Node(a.tape, out, (a, b), vjp)


def neg(a: Node) -> Node:
    return Node(a.tape, -a.value, (a,), lambda g: (-g,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(a.tape, out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    return Node(a.tape, np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(a.tape, out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Node) -> Node:
    out = np.maximum(a.value, 0.0)
    return Node(a.tape, out, (a,), lambda g: (g * (a.value > 0.0),))


def softplus(a: Node) -> Node:
    out = np.logaddexp(0.0, a.value)

    def vjp(g):
        # sigmoid(x), computed stably
        s = np.where(a.value >= 0, 1.0 / (1.0 + np.exp(-a.value)),
                     np.exp(a.value) / (1.0 + np.exp(a.value)))
        return (g * s,)

    return Node(a.tape, out, (a,), vjp)


def clip(a: Node, lo: float, hi: float) -> Node:
    out = np.clip(a.value, lo, hi)

    def vjp(g):
        return (g * ((a.value >= lo) & (a.value <= hi)),)

    return Node(a.tape, out, (a,), vjp)


def dropout_apply(a: Node, mask: Array) -> Node:
    """Multiply by a precomputed keep-mask (already inverted-scaled)."""
    mask = _as_array(mask)
    if mask.shape != a.value.shape:
        raise ShapeError(
            f"dropout-mask-apply: mask {mask.shape} vs input {a.value.shape}"
        )
    return Node(a.tape, a.value * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear-algebra ops


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
    out = av @ bv

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return Node(a.tape, out, (a, b), vjp)


def masked_matmul(x: Node, w: Node, mask: Array) -> Node:
    """x @ (w * mask) with a constant binary mask."""
    mask = _as_array(mask)
    if x.value.ndim != 2 or w.value.ndim != 2 or mask.shape != w.value.shape:
        raise ShapeError(
            f"masked-matmul: x {x.value.shape}, w {w.value.shape}, mask {mask.shape}"
        )
    if x.value.shape[1] != w.value.shape[0]:
        raise ShapeError(f"masked-matmul: {x.value.shape} @ {w.value.shape}")
    wm = w.value * mask
    out = x.value @ wm

    def vjp(g):
        return g @ wm.T, (x.value.T @ g) * mask

    return Node(x.tape, out, (x, w), vjp)


def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b in one recorded op."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
        raise ShapeError(f"affine: {x.value.shape} @ {w.value.shape}")
    if b.value.shape != (w.value.shape[1],):
        raise ShapeError(f"affine: bias {b.value.shape} vs out dim {w.value.shape[1]}")
    out = x.value @ w.value + b.value

    def vjp(g):
        return g @ w.value.T, x.value.T @ g, g.sum(axis=0)

    return Node(x.tape, out, (x, w, b), vjp)


def einsum2(formula: str, a: Node, b: Node) -> Node:
    """Two-operand einsum.

    Each index must appear in at least two of the three terms and no index
    may repeat within a term, so the adjoint is again a two-operand einsum
    with the output term swapped into the differentiated slot.
    """
    lhs, rhs = formula.split("->")
    ta, tb = lhs.split(",")
    for term in (ta, tb, rhs):
        if len(set(term)) != len(term):
            raise ShapeError(f"einsum2: repeated index in term '{term}'")
    if not (set(ta) <= set(tb) | set(rhs) and set(tb) <= set(ta) | set(rhs)):
        raise ShapeError(f"einsum2: unsupported formula '{formula}'")
    out = np.einsum(formula, a.value, b.value, optimize=True)

    def vjp(g):
        ga = np.einsum(f"{rhs},{tb}->{ta}", g, b.value, optimize=True)
        gb = np.einsum(f"{rhs},{ta}->{tb}", g, a.value, optimize=True)
        return ga, gb

    return Node(a.tape, out, (a, b), vjp)


def _tril_mask(d: int, strict: bool) -> Array:
    return np.tril(np.ones((d, d)), -1 if strict else 0)


def cholesky(a: Node) -> Node:
    """Batched lower Cholesky factor of symmetric positive definite input."""
    try:
        l_val = np.linalg.cholesky(a.value)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"cholesky: {e}") from e

    def vjp(g):
        # standard Cholesky pullback: Abar = L^-T phi(L^T Lbar) L^-1, symmetrized
        lt = np.swapaxes(l_val, -1, -2)
        m = lt @ g
        phi = np.tril(m)
        d = phi.shape[-1]
        idx = np.arange(d)
        phi[..., idx, idx] *= 0.5
        linv = np.linalg.inv(l_val)
        abar = np.swapaxes(linv, -1, -2) @ phi @ linv
        return (0.5 * (abar + np.swapaxes(abar, -1, -2)),)

    return Node(a.tape, l_val, (a,), vjp)


def tri_inv(a: Node, lower: bool = True) -> Node:
    """Batched inverse of a triangular matrix (result re-masked to triangle)."""
    d = a.value.shape[-1]
    mask = _tril_mask(d, strict=False)
    if not lower:
        mask = mask.T
    try:
        inv = np.linalg.inv(a.value) * mask
    except np.linalg.LinAlgError as e:
        raise NumericError(f"tri-inv: {e}") from e

    def vjp(g):
        it = np.swapaxes(inv, -1, -2)
        return (-(it @ g @ it) * mask,)

    return Node(a.tape, inv, (a,), vjp)


def diag_part(a: Node) -> Node:
    d = a.value.shape[-1]
    idx = np.arange(d)
    out = a.value[..., idx, idx]

    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[..., idx, idx] = g
        return (ga,)

    return Node(a.tape, out, (a,), vjp)


def diag_embed(a: Node) -> Node:
    d = a.value.shape[-1]
    idx = np.arange(d)
    out = np.zeros(a.value.shape + (d,))
    out[..., idx, idx] = a.value

    def vjp(g):
        return (g[..., idx, idx],)

    return Node(a.tape, out, (a,), vjp)


def fill_lower(vec: Node, d: int, strict: bool = False) -> Node:
    """Scatter a (..., M) vector into the lower triangle of (..., d, d)."""
    rows, cols = np.tril_indices(d, -1 if strict else 0)
    m = len(rows)
    if vec.value.shape[-1] != m:
        raise ShapeError(
            f"fill-lower: need {m} entries for d={d} (strict={strict}), "
            f"got {vec.value.shape[-1]}"
        )
    out = np.zeros(vec.value.shape[:-1] + (d, d))
    out[..., rows, cols] = vec.value

    def vjp(g):
        return (g[..., rows, cols],)

    return Node(vec.tape, out, (vec,), vjp)


def swap_last2(a: Node) -> Node:
    out = np.swapaxes(a.value, -1, -2)
    return Node(a.tape, out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def asum(a: Node, axis=None, keepdims: bool = False) -> Node:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, _axis_tuple(axis, a.value.ndim))
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return Node(a.tape, out, (a,), vjp)


def amean(a: Node, axis=None, keepdims: bool = False) -> Node:
    axes = _axis_tuple(axis, a.value.ndim)
    count = np.prod([a.value.shape[i] for i in axes])
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.value.shape).copy(),)

    return Node(a.tape, out, (a,), vjp)


def logsumexp(a: Node, axis: int = -1, keepdims: bool = False) -> Node:
    ax = axis % a.value.ndim
    mx = np.max(a.value, axis=ax, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    s = np.exp(a.value - mx).sum(axis=ax, keepdims=True)
    out_k = mx + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=ax)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (gk * np.exp(a.value - out_k),)

    return Node(a.tape, out, (a,), vjp)


def concat(parts: Sequence[Node], axis: int = -1) -> Node:
    vals = [p.value for p in parts]
    ndims = {v.ndim for v in vals}
    if len(ndims) != 1:
        raise ShapeError(f"concat: mixed ranks {[v.shape for v in vals]}")
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    sizes = [v.shape[ax] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return Node(parts[0].tape, out, tuple(parts), vjp)


def slice_axis(a: Node, start: int, stop: int, axis: int = -1) -> Node:
    ax = axis % a.value.ndim
    sl = [slice(None)] * a.value.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    out = a.value[sl]

    def vjp(g):
        ga = np.zeros_like(a.value)
        ga[sl] = g
        return (ga,)

    return Node(a.tape, out, (a,), vjp)


def permute_cols(a: Node, perm: Array) -> Node:
    perm = np.asarray(perm, dtype=np.intp)
    inv = np.argsort(perm)
    out = a.value[..., perm]
    return Node(a.tape, out, (a,), lambda g: (g[..., inv],))


def reshape(a: Node, shape) -> Node:
    out = a.value.reshape(shape)
    return Node(a.tape, out, (a,), lambda g: (g.reshape(a.value.shape),))


def repeat_rows(a: Node, k: int) -> Node:
    """Repeat each row k times: (n, ...) -> (n*k, ...)."""
    out = np.repeat(a.value, k, axis=0)
    n = a.value.shape[0]

    def vjp(g):
        return (g.reshape((n, k) + a.value.shape[1:]).sum(axis=1),)

    return Node(a.tape, out, (a,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[Sequence[Param]], Node],
    params: Sequence[Param],
    eps: float = 1e-5,
) -> float:
    """Max relative error between backward() gradients and central differences.

    ``f`` must rebuild its computation from scratch on every call and be
    deterministic (freeze any noise draws outside of it).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.zero_grad()
    root = f(params)
    backward(root)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.value.ravel()
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params).value)
            flat[i] = orig - eps
            fm = float(f(params).value)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * eps)
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(an))):
            raise NumericError(f"grad-check: non-finite values for param {p.name}")
        err = np.abs(an.ravel() - num) / np.maximum(1.0, np.abs(num))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
