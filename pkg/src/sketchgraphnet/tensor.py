"""Dense tensors with reverse-mode automatic differentiation.

Everything the model computes flows through :class:`Tensor`. Values are
numpy arrays (float32 by default, float64 for gradient certification);
each differentiable op records its parents and a vector-Jacobian product
closure, and ``Tensor.backward()`` replays the tape in reverse
topological order.

The engine is deliberately small: only the primitives the graph model
needs exist, and each one is certified against central finite
differences (see :mod:`sketchgraphnet.gradcheck`).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeMismatch",
    "NonFiniteError",
    "no_grad",
    "trap_nonfinite",
    "manual_seed",
    "concat",
    "relu",
    "matmul",
    "linear",
    "row_softmax",
    "mean_over_mask",
    "dropout",
    "batch_norm",
    "BatchNormState",
    "cross_entropy_label_smoothing",
    "apply_linear_map",
    "from_op",
]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while the non-finite trap was armed."""

    def __init__(self, op_name: str):
        super().__init__(f"non-finite value produced by op '{op_name}'")
        self.op_name = op_name


# ---------------------------------------------------------------------------
# global engine state
# ---------------------------------------------------------------------------

_GRAD_ENABLED = True
_TRAP_NONFINITE = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (eval-mode forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def trap_nonfinite(enabled: bool = True):
    """Raise :class:`NonFiniteError` from any op that emits NaN/Inf."""
    global _TRAP_NONFINITE
    prev = _TRAP_NONFINITE
    _TRAP_NONFINITE = enabled
    try:
        yield
    finally:
        _TRAP_NONFINITE = prev


class _RngState:
    """Counter-based PRNG stream for dropout masks.

    Each mask draw uses an independent Philox stream keyed by
    (seed, draw counter), so results depend only on the seed and the
    order of dropout calls, never on global numpy RNG state.
    """

    def __init__(self) -> None:
        self.seed = 0
        self.counter = 0

    def next_generator(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.Philox(key=[self.seed, self.counter]))
        self.counter += 1
        return gen


_RNG = _RngState()


def manual_seed(seed: int) -> None:
    """Reset the dropout RNG stream; identical seeds replay identical masks."""
    _RNG.seed = int(seed)
    _RNG.counter = 0


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense n-dimensional value with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op_name")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op_name = "leaf"

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this value into every requires_grad leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeMismatch(f"gradient shape {grad.shape} != value shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=False)
                else:
                    parent.grad = parent.grad + g

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported primitive")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def relu(self) -> "Tensor":
        return relu(self)


class Parameter(Tensor):
    """A learnable tensor addressed by a unique dotted-path name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------------------
# op construction helpers
# ---------------------------------------------------------------------------


def from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str,
) -> Tensor:
    """Wrap an op result, recording the tape edge when grad mode is on.

    ``vjp(upstream)`` must return one gradient (or None) per parent, in
    order. Custom composite ops (sparse matvec, tiled attention) build
    their tape nodes through this hook.
    """
    if _TRAP_NONFINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(name)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._vjp = vjp if track else None
    out._op_name = name
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_scalar(x) -> float | None:
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    c = _as_scalar(b)
    if c is not None:
        return from_op(a.data + np.asarray(c, dtype=a.data.dtype), [a], lambda g: (g,), "add_scalar")
    if not isinstance(b, Tensor):
        b = Tensor(b)
    data = a.data + b.data
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return from_op(data, [a, b], vjp, "add")


def mul(a: Tensor, b) -> Tensor:
    c = _as_scalar(b)
    if c is not None:
        return from_op(a.data * np.asarray(c, dtype=a.data.dtype), [a], lambda g: (g * c,), "mul_scalar")
    if not isinstance(b, Tensor):
        b = Tensor(b)
    data = a.data * b.data
    a_shape, b_shape = a.shape, b.shape
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * b_data, a_shape), _unbroadcast(g * a_data, b_shape)

    return from_op(data, [a, b], vjp, "mul")


def power(a: Tensor, p) -> Tensor:
    p = float(p)
    data = a.data**p
    a_data = a.data

    def vjp(g):
        return (g * p * a_data ** (p - 1.0),)

    return from_op(data, [a], vjp, "pow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims broadcast, last two contract."""
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    a_data, b_data = a.data, b.data
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a_shape)
        gb = _unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b_shape)
        return ga, gb

    return from_op(data, [a, b], vjp, "matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, 0)

    def vjp(g):
        # subgradient 0 at the kink
        return (g * mask,)

    return from_op(data, [a], vjp, "relu")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return from_op(data, [a], vjp, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return from_op(data, tensors, vjp, "concat")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, in_shape).copy(),)

    return from_op(np.asarray(data), [a], vjp, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    data = x.data @ w.data
    if b is not None:
        data = data + b.data
    x_data, w_data = x.data, w.data
    lead = x.shape[:-1]

    def vjp(g):
        gx = g @ w_data.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = x_data.reshape(-1, x_data.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = [x, w] if b is None else [x, w, b]
    return from_op(data, parents, vjp, "linear")


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stable under constant shifts."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return from_op(data, [a], vjp, "row_softmax")


def mean_over_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Per-row mean of valid entries: ``x`` is [B, N, d], ``mask`` [B, N] bool.

    Rows with zero valid entries are rejected; masked entries contribute
    nothing to value or gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeMismatch(f"mask shape {mask.shape} != {x.shape[:2]}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ShapeMismatch("mean_over_mask: a row has no valid entries")
    m = mask.astype(x.data.dtype)
    data = (x.data * m[:, :, None]).sum(axis=1) / counts[:, None]

    def vjp(g):
        return ((g[:, None, :] / counts[:, None, None]) * m[:, :, None],)

    return from_op(data, [x], vjp, "mean_over_mask")


def dropout(x: Tensor, p: float, training: bool) -> Tensor:
    """Inverted dropout with a counter-based seeded mask; identity if p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0 or not training:
        return x
    gen = _RNG.next_generator()
    keep = (gen.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    data = x.data * keep

    def vjp(g):
        return (g * keep,)

    return from_op(data, [x], vjp, "dropout")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNormState:
    """BatchNorm affine parameters plus running statistics.

    Normalization uses biased batch variance; running statistics follow
    the same convention so train and eval agree in the long-batch limit.
    """

    def __init__(self, dim: int, name: str, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(dim, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.name = name


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize [n, d] rows per feature; running stats updated in train mode."""
    if x.ndim != 2:
        raise ShapeMismatch(f"batch_norm expects [n, d], got {x.shape}")
    gamma, beta = state.gamma, state.beta
    eps = state.eps
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu.astype(
            state.running_mean.dtype
        )
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var.astype(
            state.running_var.dtype
        )
    else:
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = xhat * gamma.data + beta.data
    n = x.shape[0]

    def vjp(g):
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        if training:
            dxhat = g * gamma.data
            gx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            # frozen stats: pure affine map
            gx = g * (gamma.data * inv_std)
        return gx, ggamma, gbeta

    return from_op(data, [x, gamma, beta], vjp, "batch_norm")


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------


def cross_entropy_label_smoothing(logits: Tensor, targets: np.ndarray, eps: float = 0.0) -> Tensor:
    """Mean smoothed cross entropy: targets mixed with uniform mass eps / C."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be [B, C], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeMismatch(f"targets shape {targets.shape} != ({logits.shape[0]},)")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps}")
    b, c = logits.shape
    if np.any(targets < 0) or np.any(targets >= c):
        raise ShapeMismatch("target index out of range")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    q = np.full((b, c), eps / c, dtype=logits.data.dtype)
    q[np.arange(b), targets] += 1.0 - eps
    data = np.asarray(-(q * logp).sum(axis=-1).mean(), dtype=logits.data.dtype)
    softmax = np.exp(logp)

    def vjp(g):
        return (g * (softmax - q) / b,)

    return from_op(data, [logits], vjp, "cross_entropy_label_smoothing")


# ---------------------------------------------------------------------------
# generic linear maps (sparse matvec and friends)
# ---------------------------------------------------------------------------


def apply_linear_map(
    x: Tensor,
    forward: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
    name: str = "linear_map",
) -> Tensor:
    """Lift a fixed linear operator (e.g. a sparse matrix product) onto the tape."""
    data = forward(x.data)

    def vjp(g):
        return (adjoint(g),)

    return from_op(np.asarray(data), [x], vjp, name)


def parameters_of(obj) -> Iterable[Parameter]:
    """Yield Parameters reachable through .named_parameters()."""
    for _, p in obj.named_parameters():
        yield p
