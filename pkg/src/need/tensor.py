"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` walks the recorded graph
in reverse topological order, visiting each node once.

Only the primitives needed by the graph-attention and pair-inference models
are provided. Shapes follow numpy broadcasting; gradients of broadcast
operands are summed back to the operand's shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from need.errors import ContractError, InvalidMaskError, NumericError, ShapeError

_NEG_INF = -np.inf

# callables invoked with every softmax_rows output; used by invariant monitors
_softmax_observers: list = []


class softmax_observer:
    """Context manager that passes every ``softmax_rows`` output to ``fn``."""

    def __init__(self, fn: Callable[[np.ndarray], None]):
        self.fn = fn

    def __enter__(self):
        _softmax_observers.append(self.fn)
        return self.fn

    def __exit__(self, *exc):
        _softmax_observers.remove(self.fn)
        return False


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C") if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _raise_item(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


# -- reductions and shape ops ----------------------------------------------
def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x, a1: int, a2: int) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def take(x, index) -> Tensor:
    """``x[index]`` for basic or integer-array indexing."""
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    table = as_tensor(table)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"ids out of range for table with {table.shape[0]} rows")
    return take(table, ids)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, backward)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, backward)


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = np.einsum("...i,...ij->j", g, ad) if ad.ndim > 1 else g * ad
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = np.matmul(g[..., None, :], np.swapaxes(bd, -1, -2))[..., 0, :]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, bd.T if bd.ndim == 2 else np.swapaxes(bd, -1, -2)) if _needs_grad(a) else None
        if not _needs_grad(b):
            gb = None
        elif bd.ndim == 2 and ad.ndim > 2:
            # weight shared across leading axes: one 2-D product instead of a batched one
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return (None if ga is None else _unbroadcast(ga, a.shape)), gb

    return _make(out, (a, b), backward)


# -- activations -----------------------------------------------------------
def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data >= 0
    scale = np.where(pos, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def _check_mask(mask, shape):
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    if not mask.any(axis=-1).all():
        raise InvalidMaskError("softmax mask leaves a row with no unmasked entry")
    return mask


def softmax_rows(m, mask=None) -> Tensor:
    """Softmax along the last axis; ``mask`` False entries get probability 0."""
    m = as_tensor(m)
    z = m.data
    if mask is not None:
        mask = _check_mask(mask, z.shape)
        z = np.where(mask, z, _NEG_INF)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    for fn in _softmax_observers:
        fn(out)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (m,), backward)


def log_softmax(m, mask=None) -> Tensor:
    m = as_tensor(m)
    z = m.data
    if mask is not None:
        mask = _check_mask(mask, z.shape)
        z = np.where(mask, z, _NEG_INF)
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    for fn in _softmax_observers:
        fn(soft)

    def backward(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (m,), backward)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode, survivors scaled by 1/(1-rate)."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).sum(axis=-1, keepdims=True) / n)
        return (gx,)

    normed = _make(xhat, (x,), backward)
    return add(mul(normed, gamma), beta)


# -- losses ----------------------------------------------------------------
def binary_cross_entropy_from_logits(logits, labels) -> Tensor:
    """Mean of -[(1-y) log(1-p) + y log p] with p = softmax(logits)[..., 1].

    ``logits`` has a trailing axis of size 2; with two classes the softmax
    class-1 probability is ``sigmoid(l1 - l0)``, so this is exactly binary
    cross-entropy on p, computed through log-softmax for stability.
    """
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    flat = reshape(logits, (-1, 2))
    if flat.shape[0] != y.size:
        raise ShapeError(f"{flat.shape[0]} logit rows for {y.size} labels")
    if y.size == 0:
        raise ContractError("loss over zero examples")
    lp = log_softmax(flat)
    picked = take(lp, (np.arange(y.size), y))
    return mul(sum_(picked), -1.0 / y.size)


# -- verification helpers ----------------------------------------------------
def backward(loss: Tensor, params: Sequence[Tensor]) -> dict:
    """Gradient of ``loss`` w.r.t. each of ``params`` (zeros when unreachable)."""
    for p in params:
        p.grad = None
    loss.backward()
    return {p: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|).

    ``f`` re-evaluates the scalar loss from the current parameter values.
    With ``max_entries``, a random subset of that many entries per parameter
    is checked instead of every entry.
    """
    if not 0.0 < epsilon <= 1e-3:
        raise ContractError(f"epsilon must lie in (0, 1e-3], got {epsilon}")
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite")
    grads = backward(loss, params)
    worst = 0.0
    for p in params:
        analytic = grads[p]
        if not np.all(np.isfinite(analytic)):
            raise NumericError("analytic gradient is not finite")
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(f().data.sum())
            flat[i] = orig - epsilon
            down = float(f().data.sum())
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("loss became non-finite during finite differencing")
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
