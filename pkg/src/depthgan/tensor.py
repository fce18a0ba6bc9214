"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
per-parent gradients. ``backward`` walks the recorded DAG once in reverse
topological order. Arrays are never mutated in place after construction;
the optimizer rebinds ``Tensor.data`` on parameter leaves instead.
"""

from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DTYPE = np.float64
EPS_VAR = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_K = 0.044715

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NumericDomainError(ArithmeticError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order) -> Tensor:
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# creation


@dataclass(frozen=True)
class InitSpec:
    kind: str  # zeros | ones | constant | uniform | normal | truncated_normal
    a: float = 0.0
    b: float = 1.0

    @staticmethod
    def zeros() -> InitSpec:
        return InitSpec("zeros")

    @staticmethod
    def ones() -> InitSpec:
        return InitSpec("ones")

    @staticmethod
    def constant(c: float) -> InitSpec:
        return InitSpec("constant", c)

    @staticmethod
    def uniform(lo: float, hi: float) -> InitSpec:
        if not lo < hi:
            raise ValueError(f"uniform init needs a < b, got ({lo}, {hi})")
        return InitSpec("uniform", lo, hi)

    @staticmethod
    def normal(mu: float, sigma: float) -> InitSpec:
        return InitSpec("normal", mu, sigma)

    @staticmethod
    def truncated_normal(sigma: float) -> InitSpec:
        return InitSpec("truncated_normal", 0.0, sigma)


class Rng:
    """Seeded stream on numpy's Philox-4x64 counter-based generator.

    Philox output depends only on (key, counter), so a given seed yields the
    same stream on every platform. ``counter`` counts draws made so far.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))
        self.counter = 0

    def uniform(self, lo: float, hi: float, shape) -> np.ndarray:
        self.counter += int(np.prod(shape, dtype=np.int64))
        return self._gen.uniform(lo, hi, size=shape)

    def normal(self, mu: float, sigma: float, shape) -> np.ndarray:
        self.counter += int(np.prod(shape, dtype=np.int64))
        return self._gen.normal(mu, sigma, size=shape)

    def truncated_normal(self, sigma: float, shape) -> np.ndarray:
        out = self.normal(0.0, sigma, shape)
        bad = np.abs(out) > 2 * sigma
        while bad.any():
            out[bad] = self.normal(0.0, sigma, int(bad.sum()))
            bad = np.abs(out) > 2 * sigma
        return out

    def integers(self, lo: int, hi: int, shape) -> np.ndarray:
        self.counter += int(np.prod(shape, dtype=np.int64))
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)


def tensor_create(shape, init: InitSpec, rng: Rng | None = None, requires_grad: bool = False) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative dimension in {shape}")
    if init.kind == "zeros":
        data = np.zeros(shape)
    elif init.kind == "ones":
        data = np.ones(shape)
    elif init.kind == "constant":
        data = np.full(shape, init.a)
    elif init.kind == "uniform":
        data = rng.uniform(init.a, init.b, shape)
    elif init.kind == "normal":
        data = rng.normal(init.a, init.b, shape)
    elif init.kind == "truncated_normal":
        data = rng.truncated_normal(init.b, shape)
    else:
        raise ValueError(f"unknown init kind {init.kind!r}")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + a
    pb = (1,) * (n - len(b)) + b
    out = []
    for x, y in zip(pa, pb):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0):
        raise NumericDomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericDomainError("log of non-positive value")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NumericDomainError("sqrt of negative value")
    out = np.sqrt(x.data)
    if np.any(out == 0) and _grad_enabled and x.requires_grad:
        raise NumericDomainError("sqrt gradient undefined at 0")
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def max0_shift(x, c: float) -> Tensor:
    """max(0, x + c), the hinge primitive."""
    x = as_tensor(x)
    shifted = x.data + c
    mask = shifted > 0
    return _result(np.where(mask, shifted, 0.0), (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    inner = GELU_C * (xd + GELU_K * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_K * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(out, (x,), backward)


def elementwise(kind: str, *operands, c: float | None = None) -> Tensor:
    """Dispatch by name; ``c`` parameterizes ``scale`` and ``max0_shift``."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"exp": exp, "log": log, "sqrt": sqrt, "tanh": tanh, "relu": relu, "gelu": gelu}
    if kind in binary:
        return binary[kind](*operands)
    if kind in unary:
        return unary[kind](*operands)
    if kind == "scale":
        return scale(operands[0], c)
    if kind == "max0_shift":
        return max0_shift(operands[0], c)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and linear algebra


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(out))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _result(x.data.mean(axis=axes, keepdims=keepdims), (x,), backward)


def joint_stats(x, axes, eps: float = EPS_VAR) -> tuple[Tensor, Tensor]:
    """Mean and std over ``axes`` (kept as size-1 dims); eps sits inside the root."""
    x = as_tensor(x)
    if axes is None or (not isinstance(axes, int) and len(axes) == 0):
        raise ShapeError("joint_stats needs at least one axis")
    mu = mean(x, axes, keepdims=True)
    centered = sub(x, mu)
    var = mean(square(centered), axes, keepdims=True)
    sigma = sqrt(add(var, eps))
    return mu, sigma


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    try:
        _broadcast_shape(a.shape[:-2], b.shape[:-2])
    except ShapeError:
        raise ShapeError(f"matmul batch dimension mismatch: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (p * g).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), backward)


# ---------------------------------------------------------------------------
# structural


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size and -1 not in shape:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from err
    src = x.shape
    return _result(out, (x,), lambda g: (g.reshape(src),))


def permute(x, order) -> Tensor:
    x = as_tensor(x)
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(x.ndim)):
        raise ShapeError(f"{order} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(order))
    return _result(np.ascontiguousarray(x.data.transpose(order)), (x,), lambda g: (g.transpose(inv),))


def reshape_permute(x, new_shape=None, axis_order=None) -> Tensor:
    if (new_shape is None) == (axis_order is None):
        raise ValueError("give exactly one of new_shape or axis_order")
    return reshape(x, new_shape) if new_shape is not None else permute(x, axis_order)


def roll(x, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _result(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),))


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather ``x`` along ``axis`` with an integer index array of any shape."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        moved = np.moveaxis(gx, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (gx,)

    return _result(np.take(x.data, idx, axis=axis), (x,), backward)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    axis = axis % xs[0].ndim
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def upsample_nearest2x(x) -> Tensor:
    """[C, H, W] -> [C, 2H, 2W] by 2x2 replication."""
    x = as_tensor(x)
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _result(out, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),))


def avg_pool2x(x) -> Tensor:
    """[C, H, W] -> [C, H//2, W//2] by 2x2 averaging (odd edges dropped)."""
    x = as_tensor(x)
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    crop = x.data[:, : 2 * h2, : 2 * w2]
    out = crop.reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))

    def backward(g):
        gx = np.zeros((c, h, w))
        gx[:, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g / 4.0, 2, axis=1), 2, axis=2)
        return (gx,)

    return _result(out, (x,), backward)


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [C_in, H, W] with ``weight`` [C_out, C_in, kh, kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output empty for input {x.shape}, kernel {kh}x{kw}, stride {stride}, pad {pad}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((cin, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols2 = cols.reshape(cin * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols2).reshape(cout, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(cout, 1, 1)
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(cout, ho * wo)
        gw = (g2 @ cols2.T).reshape(weight.shape)
        gcols = (wmat.T @ g2).reshape(cin, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
        gx = gxp[:, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Param] | None = None) -> None:
    """Populate ``.grad`` on every reachable leaf and on ``params``.

    Gradients are overwritten, not accumulated. Params not reached by the
    graph receive zero gradients.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a 0-d loss, got shape {loss.shape}")
    params = list(params) if params is not None else None
    for p in params or ():
        p.value.grad = None
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(())
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, dtype=DTYPE)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    if params is not None:
        for p in params:
            leaf = p.value
            if leaf.grad is None or leaf.grad.shape != leaf.shape:
                leaf.grad = np.zeros(leaf.shape)
            p.grad = leaf.grad


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    name: str
    value: Tensor
    grad: np.ndarray | None = None
    label_axis: int | None = None  # axis indexed by semantic label, if any

    def zero_grad(self) -> None:
        self.value.grad = None
        self.grad = np.zeros(self.value.shape)


@dataclass
class ParamStore:
    """Ordered, uniquely named parameter registry."""

    params: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, data, label_axis: int | None = None) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        leaf = Tensor(data, requires_grad=True)
        self.params[name] = Param(name, leaf, None, label_axis)
        return leaf

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Param]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def subset(self, prefix: str) -> list[Param]:
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.value.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for n, p in self.params.items():
            arr = np.asarray(state[n], dtype=DTYPE)
            if arr.shape != p.value.shape:
                raise ShapeError(f"{n}: checkpoint shape {arr.shape} != {p.value.shape}")
            p.value.data = arr.copy()


# ---------------------------------------------------------------------------
# checkpoint file

CHECKPOINT_MAGIC = b"DGT1"


def save_checkpoint(path, store: ParamStore) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for p in store:
            name = p.name.encode("utf-8")
            arr = np.asarray(p.value.data, dtype="<f8")  # tobytes() emits C order
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a DGT1 checkpoint")
    pos = 4
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise ValueError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(DTYPE)
            pos += 8 * count
    except struct.error as err:
        raise ValueError(f"{path}: truncated checkpoint") from err
    return out


# ---------------------------------------------------------------------------
# gradient check


def grad_check(fn: Callable[[], Tensor], params: Sequence[Param], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current parameter values. Every
    entry of every param is probed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = fn()
    if not np.isfinite(loss.data):
        raise NonFiniteError("non-finite loss at the base point")
    backward(loss, params)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = p.grad
            base = np.array(p.value.data, dtype=DTYPE)
            p.value.data = base
            for idx in np.ndindex(base.shape):
                orig = base[idx]
                plus = base.copy()
                plus[idx] = orig + h
                p.value.data = plus
                fp = fn().item()
                minus = base.copy()
                minus[idx] = orig - h
                p.value.data = minus
                fm = fn().item()
                p.value.data = base
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(f"non-finite loss probing {p.name}{list(idx)}")
                fd = (fp - fm) / (2 * h)
                a = float(analytic[idx])
                err = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
                worst = max(worst, err)
    return worst
