"""Reverse-mode automatic differentiation over float64 numpy storage.

A ``Tensor`` wraps a numpy array together with an optional gradient. Every
operation records a vector-Jacobian closure; ``Tensor.backward`` walks the
graph in reverse topological order and accumulates gradients additively, so
running backward twice doubles every gradient.

Design rules, enforced at op level:

* all storage is float64; inputs are coerced on construction,
* elementwise binary ops accept a scalar (python number or 0-d tensor) on
  either side, otherwise shapes must match exactly; there is no implicit
  numpy-style broadcasting (``add_bias`` is the explicit exception for a
  trailing-axis bias),
* ``relu`` has zero gradient at exactly 0; ``max``/``maximum`` route the
  gradient to the first maximal element on ties.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], Sequence[Array | None]] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- backward ------------------------------------------------------------

    def backward(self, grad: Array | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor.

        ``grad`` seeds the output cotangent; it defaults to 1 and is only
        optional for scalar outputs. Gradients from repeated calls add up.
        """
        if grad is None:
            if self.data.ndim != 0:
                raise ValueError("backward() without grad requires a scalar output")
            seed = np.ones((), dtype=np.float64)
        else:
            seed = _as_array(grad)
            if seed.shape != self.data.shape:
                raise ValueError(f"seed grad shape {seed.shape} != {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        # Per-call cotangent map keeps traversals independent, so repeated
        # backward calls accumulate into .grad without compounding.
        cotan: dict[int, Array] = {id(self): seed}
        lookup: dict[int, Tensor] = {id(n): n for n in topo}
        for node in reversed(topo):
            g = cotan.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ValueError(
                        f"vjp produced shape {pg.shape} for parent {parent.data.shape}"
                    )
                key = id(parent)
                if key in cotan:
                    cotan[key] = cotan[key] + pg
                else:
                    cotan[key] = pg
        del lookup

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return _getitem(self, key)

    # -- method shortcuts ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def make_node(
    data: Array,
    parents: Sequence[Tensor],
    vjp: Callable[[Array], Sequence[Array | None]],
) -> Tensor:
    """Create a graph node from precomputed forward data and a vjp closure.

    Shared by every op in this module and by the fused nodes (scans, bilinear
    sampling) defined elsewhere in the package.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _check_binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if _is_scalar(a) or _is_scalar(b):
        return
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} must match exactly "
            "(only scalar operands broadcast)"
        )


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a cotangent down to ``shape`` (scalar operand case)."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.sum(g).reshape(())
    raise ValueError(f"cannot reduce cotangent {g.shape} to {shape}")


# -- elementwise binary ops ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a, b, "add")
    data = a.data + b.data

    def vjp(g: Array):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return make_node(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a, b, "mul")
    data = a.data * b.data

    def vjp(g: Array):
        return (
            _reduce_to(g * b.data, a.data.shape),
            _reduce_to(g * a.data, b.data.shape),
        )

    return make_node(data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a, b, "div")
    data = a.data / b.data

    def vjp(g: Array):
        return (
            _reduce_to(g / b.data, a.data.shape),
            _reduce_to(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return make_node(data, (a, b), vjp)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; gradient goes to ``a`` on exact ties."""
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a, b, "maximum")
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)

    def vjp(g: Array):
        return (
            _reduce_to(g * take_a, a.data.shape),
            _reduce_to(g * ~take_a, b.data.shape),
        )

    return make_node(data, (a, b), vjp)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient goes to ``a`` on exact ties."""
    a, b = _wrap(a), _wrap(b)
    _check_binary_shapes(a, b, "minimum")
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)

    def vjp(g: Array):
        return (
            _reduce_to(g * take_a, a.data.shape),
            _reduce_to(g * ~take_a, b.data.shape),
        )

    return make_node(data, (a, b), vjp)


# -- elementwise unary ops -----------------------------------------------------


def power(x: Tensor, exponent: float) -> Tensor:
    x = _wrap(x)
    p = float(exponent)
    data = x.data**p

    def vjp(g: Array):
        return (g * p * x.data ** (p - 1.0),)

    return make_node(data, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.exp(x.data)

    def vjp(g: Array):
        return (g * data,)

    return make_node(data, (x,), vjp)


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.log(x.data)

    def vjp(g: Array):
        return (g / x.data,)

    return make_node(data, (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.sqrt(x.data)

    def vjp(g: Array):
        return (g * 0.5 / data,)

    return make_node(data, (x,), vjp)


def sin(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.sin(x.data)

    def vjp(g: Array):
        return (g * np.cos(x.data),)

    return make_node(data, (x,), vjp)


def cos(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.cos(x.data)

    def vjp(g: Array):
        return (g * -np.sin(x.data),)

    return make_node(data, (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    """|x| with sign gradient; 0 at exactly 0."""
    x = _wrap(x)
    data = np.abs(x.data)

    def vjp(g: Array):
        return (g * np.sign(x.data),)

    return make_node(data, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = _stable_sigmoid(x.data)

    def vjp(g: Array):
        return (g * data * (1.0 - data),)

    return make_node(data, (x,), vjp)


def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x: Tensor) -> Tensor:
    x = _wrap(x)
    data = np.tanh(x.data)

    def vjp(g: Array):
        return (g * (1.0 - data * data),)

    return make_node(data, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def vjp(g: Array):
        return (g * mask,)

    return make_node(data, (x,), vjp)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed as logaddexp(0, x) so large x cannot overflow."""
    x = _wrap(x)
    data = np.logaddexp(0.0, x.data)

    def vjp(g: Array):
        return (g * _stable_sigmoid(x.data),)

    return make_node(data, (x,), vjp)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    x = _wrap(x)
    mask = x.data > floor
    data = np.where(mask, x.data, floor)

    def vjp(g: Array):
        return (g * mask,)

    return make_node(data, (x,), vjp)


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ValueError("matmul expects at least (m,k) @ (k,n)")
    if b.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(
            f"matmul batch dims {a.data.shape[:-2]} and {b.data.shape[:-2]} differ"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def vjp(g: Array):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2:
            a2 = a.data.reshape(-1, a.data.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return make_node(data, (a, b), vjp)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b of shape (x.shape[-1],), broadcast over leading axes."""
    x, b = _wrap(x), _wrap(b)
    if b.data.shape != (x.data.shape[-1],):
        raise ValueError(f"bias shape {b.data.shape} != ({x.data.shape[-1]},)")
    data = x.data + b.data

    def vjp(g: Array):
        axes = tuple(range(g.ndim - 1))
        return g, g.sum(axis=axes)

    return make_node(data, (x, b), vjp)


# -- reductions -------------------------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _normalize_axes(axis, x.data.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g: Array):
        gg = g
        if not keepdims:
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return make_node(data, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _normalize_axes(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g: Array):
        gg = g
        if not keepdims:
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
        return (np.broadcast_to(gg / count, x.data.shape).copy(),)

    return make_node(data, (x,), vjp)


def tmax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient flows to the first maximal element."""
    x = _wrap(x)
    if axis is None:
        data = x.data.max()
        flat_idx = int(np.argmax(x.data))

        def vjp_all(g: Array):
            gx = np.zeros_like(x.data)
            gx.flat[flat_idx] = g
            return (gx,)

        return make_node(np.asarray(data), (x,), vjp_all)

    ax = axis % x.data.ndim
    data = x.data.max(axis=ax, keepdims=keepdims)
    arg = np.argmax(x.data, axis=ax)

    def vjp(g: Array):
        gg = g if keepdims else np.expand_dims(g, ax)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, ax), gg, axis=ax)
        return (gx,)

    return make_node(data, (x,), vjp)


# -- shape ops ----------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    data = x.data.reshape(shape)

    def vjp(g: Array):
        return (g.reshape(x.data.shape),)

    return make_node(data, (x,), vjp)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g: Array):
        return (g.transpose(inverse),)

    return make_node(data, (x,), vjp)


def flip(x: Tensor, axis: int) -> Tensor:
    x = _wrap(x)
    data = np.flip(x.data, axis=axis)

    def vjp(g: Array):
        return (np.flip(g, axis=axis),)

    return make_node(data, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(data, tuple(tensors), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    x = _wrap(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = x.data[index]

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return make_node(data, (x,), vjp)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with a 1-D integer index array (repeats allowed)."""
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("take supports 1-D index arrays")
    data = np.take(x.data, idx, axis=axis)

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return make_node(data, (x,), vjp)


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Repeat x along a new leading axis: shape S -> (n, *S). Grad sums over copies."""
    x = _wrap(x)
    data = np.broadcast_to(x.data, (n,) + x.data.shape).copy()

    def vjp(g: Array):
        return (g.sum(axis=0),)

    return make_node(data, (x,), vjp)


def _getitem(x: Tensor, key) -> Tensor:
    """Basic indexing only (ints and slices); gradient scatters back."""
    data = x.data[key]

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return make_node(data, (x,), vjp)


def expand_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast to ``shape``; the gradient sums over expanded axes.

    The binary ops refuse implicit broadcasting, so mixed-shape expressions
    spell the expansion out through this op.
    """
    x = _wrap(x)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as err:
        raise ValueError(f"cannot expand {x.data.shape} to {shape}") from err
    lead = len(shape) - x.data.ndim
    summed_axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(x.data.shape) if d == 1 and shape[lead + i] != 1
    )

    def vjp(g: Array):
        gx = g.sum(axis=summed_axes, keepdims=False) if summed_axes else g
        return (gx.reshape(x.data.shape),)

    return make_node(data, (x,), vjp)


# -- fused ops -----------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: Array):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return make_node(data, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per channel."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    dim = x.data.shape[-1]
    if gamma.data.shape != (dim,) or beta.data.shape != (dim,):
        raise ValueError("layer_norm gamma/beta must have shape (C,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def vjp(g: Array):
        axes = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gh = g * gamma.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gh - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return make_node(data, (x, gamma, beta), vjp)


def unfold3(x: Tensor) -> Tensor:
    """Stride-2 extraction of 3-wide windows, zero padded by one frame.

    (B, T, C) with even T -> (B, T // 2, 3 * C); window j covers input
    positions 2j - 1, 2j, 2j + 1. Feeding the result to a (3C, C) weight
    implements a kernel-3 stride-2 1-D convolution.
    """
    x = _wrap(x)
    b, t, c = x.data.shape
    if t % 2 != 0:
        raise ValueError(f"unfold3 needs an even length, got {t}")
    padded = np.zeros((b, t + 2, c), dtype=np.float64)
    padded[:, 1:-1] = x.data
    out = np.empty((b, t // 2, 3 * c), dtype=np.float64)
    centers = np.arange(0, t, 2)
    out[:, :, :c] = padded[:, centers]
    out[:, :, c : 2 * c] = padded[:, centers + 1]
    out[:, :, 2 * c :] = padded[:, centers + 2]

    def vjp(g: Array):
        gp = np.zeros((b, t + 2, c), dtype=np.float64)
        np.add.at(gp, (slice(None), centers), g[:, :, :c])
        np.add.at(gp, (slice(None), centers + 1), g[:, :, c : 2 * c])
        np.add.at(gp, (slice(None), centers + 2), g[:, :, 2 * c :])
        return (gp[:, 1:-1],)

    return make_node(out, (x,), vjp)


# -- initialization and checking --------------------------------------------------------


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int | None = None) -> Array:
    """Weight init: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)). Biases start at zero."""
    if fan_in is None:
        fan_in = shape[0]
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def grad_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    atol: float = 0.0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the input tensors to a scalar. Relative error per element is
    max(0, |analytic - numeric| - atol) / (|analytic| + |numeric| + 1e-12).
    ``atol`` discounts disagreements below the finite-difference noise floor
    (about 1e-7 for O(1) losses at the default eps); leave it at 0 unless the
    checked function is deep enough for rounding noise to reach that scale.
    """
    for t in inputs:
        t.zero_grad()
    out = fn(inputs)
    if out.data.ndim != 0:
        raise ValueError("grad_check expects a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = fn(inputs).item()
            flat[i] = orig - eps
            with no_grad():
                lo = fn(inputs).item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            a = float(ana.reshape(-1)[i])
            rel = max(0.0, abs(a - num) - atol) / (abs(a) + abs(num) + 1e-12)
            worst = max(worst, rel)
    return worst
