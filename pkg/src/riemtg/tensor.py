"""Dense float64 arrays with reverse-mode automatic differentiation.

Every trainable quantity in the package is a :class:`Tensor`.  Operations build
a graph of tensors; :meth:`Tensor.backward` walks it once in reverse
topological order and accumulates adjoints into ``.grad``.

Broadcasting follows numpy; adjoints are summed back to each operand's shape.
"""

from __future__ import annotations

import contextlib
import math
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording the differentiation graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the differentiation graph: value, adjoint and backward rule."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(value, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(value)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.value)

    # -- differentiation -----------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor.

        Leaves keep accumulating across calls; interior adjoints are reset on
        each call.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.value)
        order = _topological(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        seed = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            pgrads = node._backward(node.grad)
            for parent, g in zip(node._parents, pgrads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.shape)
                parent.grad = g if parent.grad is None else parent.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        _check_broadcast(self, other, "add")
        return Tensor._make(self.value + other.value, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        _check_broadcast(self, other, "sub")
        return Tensor._make(self.value - other.value, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        _check_broadcast(self, other, "mul")
        a, b = self.value, other.value
        ga, gb = self.requires_grad, other.requires_grad
        if a.ndim == b.ndim and a.ndim > 0 and a.shape[:-1] == b.shape[:-1] and a.shape[-1] != b.shape[-1]:
            # row scaling (..., 1) * (..., d): reduce the adjoint with einsum
            def bw(g):
                ra = np.einsum("...i,...i->...", g, b)[..., None] if ga and a.shape[-1] == 1 else None
                rb = np.einsum("...i,...i->...", g, a)[..., None] if gb and b.shape[-1] == 1 else None
                return (g * b if ga and ra is None else ra, g * a if gb and rb is None else rb)
            return Tensor._make(a * b, (self, other), bw)
        return Tensor._make(a * b, (self, other),
                            lambda g: (g * b if ga else None, g * a if gb else None))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        _check_broadcast(self, other, "div")
        a, b = self.value, other.value
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a / b
        ga, gb = self.requires_grad, other.requires_grad
        return Tensor._make(out, (self, other),
                            lambda g: (g / b if ga else None, -g * out / b if gb else None))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.value, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.value
        out = a ** p
        return Tensor._make(out, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self.value
        out = a[idx]

        def bw(g):
            full = np.zeros_like(a)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(out, (self,), bw)

    # -- shape -------------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.value.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.value.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        _check_axis(self, axis)
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.value.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        _check_axis(self, axis)
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=None, keepdims: bool = False):
        _check_axis(self, axis)
        a = self.value
        out = a.max(axis=axis, keepdims=True)
        mask = (a == out).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            elif axis is None and not keepdims:
                g = np.reshape(g, (1,) * a.ndim)
            return (g * mask,)

        res = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis))
        return Tensor._make(res, (self,), bw)

    def logsumexp(self, axis=None, keepdims: bool = False):
        """Stable log-sum-exp: the maximum is subtracted before exponentiating."""
        _check_axis(self, axis)
        a = self.value
        m = a.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.exp(a - m).sum(axis=axis, keepdims=True)
        full = np.log(s) + m
        soft = np.exp(a - full)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            elif axis is None and not keepdims:
                g = np.reshape(g, (1,) * a.ndim)
            return (g * soft,)

        res = full if keepdims else (full.reshape(()) if axis is None else np.squeeze(full, axis))
        return Tensor._make(res, (self,), bw)

    # convenience elementwise methods
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return abs_(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)


def make_op(value, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register a custom differentiable op.

    ``backward(g)`` receives the output adjoint and returns one adjoint (or
    ``None``) per parent.
    """
    return Tensor._make(value, parents, backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.value.shape == b.value.shape or b.value.ndim == 0 or a.value.ndim == 0:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _check_axis(t: Tensor, axis) -> None:
    if axis is None:
        if t.size == 0:
            raise ShapeError("reduction over an empty array")
        return
    for ax in np.atleast_1d(axis):
        if not -t.ndim <= ax < t.ndim:
            raise ShapeError(f"axis {ax} out of range for shape {t.shape}")
        if t.shape[ax] == 0:
            raise ShapeError(f"reduction over empty axis {ax} of shape {t.shape}")


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


# -- elementwise ops ---------------------------------------------------------------


def unary(fn: Callable, dfn: Callable) -> Callable[[Tensor], Tensor]:
    """Build a unary op from a value function and its derivative ``dfn(x, y)``."""

    def op(x):
        x = as_tensor(x)
        a = x.value
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            y = fn(a)
        return Tensor._make(y, (x,), lambda g: (g * dfn(a, y),))

    return op


exp = unary(np.exp, lambda a, y: y)
log = unary(np.log, lambda a, y: 1.0 / a)
tanh = unary(np.tanh, lambda a, y: 1.0 - y * y)
cos = unary(np.cos, lambda a, y: -np.sin(a))
sin = unary(np.sin, lambda a, y: np.cos(a))
cosh = unary(np.cosh, lambda a, y: np.sinh(a))
sinh = unary(np.sinh, lambda a, y: np.cosh(a))
asinh = unary(np.arcsinh, lambda a, y: 1.0 / np.sqrt(1.0 + a * a))
relu = unary(lambda a: np.maximum(a, 0.0), lambda a, y: (a > 0).astype(np.float64))
abs_ = unary(np.abs, lambda a, y: np.sign(a))
square = unary(np.square, lambda a, y: 2.0 * a)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


sigmoid = unary(_sigmoid, lambda a, y: y * (1.0 - y))


def sqrt(x):
    """Square root whose derivative is taken as 0 where the input is 0."""
    x = as_tensor(x)
    a = x.value
    y = np.sqrt(a)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
        return (g * d,)

    return Tensor._make(y, (x,), bw)


def clamp(x, lo=None, hi=None):
    """Clip to ``[lo, hi]``; the gradient is zero outside the bounds."""
    x = as_tensor(x)
    a = x.value
    y = np.clip(a, lo, hi)
    inside = np.ones_like(a, dtype=bool)
    if lo is not None:
        inside &= a >= lo
    if hi is not None:
        inside &= a <= hi
    return Tensor._make(y, (x,), lambda g: (g * inside,))


def where(cond, a, b):
    """Select elementwise; ``cond`` is a constant boolean array."""
    cond = np.asarray(cond.value if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.value, b.value)
    return Tensor._make(out, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``exp``, ``clamp``, ...)."""
    table = {
        "add": lambda a, b: as_tensor(a) + b,
        "sub": lambda a, b: as_tensor(a) - b,
        "mul": lambda a, b: as_tensor(a) * b,
        "div": lambda a, b: as_tensor(a) / b,
        "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid, "relu": relu,
        "cos": cos, "sin": sin, "sqrt": sqrt, "abs": abs_,
        "negate": lambda a: -as_tensor(a),
        "clamp": clamp,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args, **kwargs)


# -- structural ops ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul needs arrays, got shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    if bv.ndim <= 2 and av.ndim >= 2:
        # shared weight: flatten the batch axes so the weight adjoint is one GEMM
        def bw_shared(g):
            ga = gb = None
            if a.requires_grad:
                ga = g @ bv.T if bv.ndim == 2 else g[..., None] * bv
            if b.requires_grad:
                a2 = av.reshape(-1, ka)
                gb = a2.T @ (g.reshape(a2.shape[0], -1) if bv.ndim == 2 else g.reshape(-1))
            return (ga, gb)

        return Tensor._make(av @ bv, (a, b), bw_shared)

    def bw(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if bv.ndim == 1:
            g2 = g2[..., None]
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if av.ndim == 1:
            ga = np.squeeze(ga, -2)
        if bv.ndim == 1:
            gb = np.squeeze(gb, -1)
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return Tensor._make(av @ bv, (a, b), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    vals = [t.value for t in ts]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._make(out, ts, bw)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; adjoints scatter-add back."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    a = x.value
    out = np.take(a, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a)
        if axis == 0:
            np.add.at(full, idx.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        else:
            moved = np.moveaxis(full, axis, 0)
            gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
            np.add.at(moved, idx.reshape(-1), gm.reshape((-1,) + moved.shape[1:]))
        return (full,)

    return Tensor._make(out, (x,), bw)


def segment_sum(x, segments, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` buckets: ``out[s] = sum_{i: segments[i] = s} x[i]``."""
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.int64).reshape(-1)
    a = x.value
    if len(seg) != a.shape[0]:
        raise ShapeError(f"segment_sum: {len(seg)} segment ids for {a.shape[0]} rows")
    out = np.zeros((n,) + a.shape[1:])
    if len(seg):
        if np.all(seg[1:] >= seg[:-1]):
            starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
            out[seg[starts]] = np.add.reduceat(a, starts, axis=0)
        else:
            np.add.at(out, seg, a)

    def bw(g):
        return (g[seg],)

    return Tensor._make(out, (x,), bw)


def reduce(op: str, a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if op not in ("sum", "mean", "max", "logsumexp"):
        raise ValueError(f"unknown reduction {op!r}")
    return getattr(a, op)(axis=axis, keepdims=keepdims)


# -- optimisation -------------------------------------------------------------------


class Adam:
    """Adam with bias correction.

    A step whose gradients contain NaN or inf is skipped with a warning and
    recorded in ``last_skipped``.  Adjoints are cleared after every call.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.last_skipped = False

    def step(self) -> bool:
        grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            warnings.warn("non-finite gradient; optimizer step skipped", RuntimeWarning, stacklevel=2)
            self.last_skipped = True
            self.zero_grad()
            return False
        self.last_skipped = False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()
        return True

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(m, dtype=np.float64) for m in state["m"]]
        self.v = [np.array(v, dtype=np.float64) for v in state["v"]]


def sgd_adam_step(params: Sequence[Tensor], lr: float, state: Adam | None = None) -> Adam:
    """Apply one Adam update to ``params`` (creating the state on first use)."""
    if state is None:
        state = Adam(params, lr=lr)
    state.lr = lr
    state.step()
    return state


def grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most ``max_norm``; returns the old norm."""
    params = list(params)
    norm = grad_norm(params)
    if math.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``param``."""
    out = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            fp = fn().item()
        flat[i] = orig - step
        with no_grad():
            fm = fn().item()
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * step)
    return out


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6) -> float:
    """Largest relative error between autodiff and central differences.

    The relative error of one entry is ``|auto - fd| / (|fd| + 1e-8)``, but for
    entries where both are tiny (below ``1e-7``) the absolute difference is used.
    """
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        auto = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        fd = numerical_grad(fn, p, step)
        diff = np.abs(auto - fd)
        rel = np.where(np.maximum(np.abs(fd), np.abs(auto)) < 1e-7, diff, diff / (np.abs(fd) + 1e-8))
        worst = max(worst, float(rel.max(initial=0.0)))
        p.grad = None
    return worst
