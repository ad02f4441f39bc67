"""Layer building blocks on top of ``need.tensor``."""

from __future__ import annotations

import numpy as np

from need import tensor as T
from need.tensor import Tensor


def xavier(rng: np.random.Generator, shape, fan_in=None, fan_out=None) -> Tensor:
    fan_in = shape[0] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def normal(rng: np.random.Generator, shape, std=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise KeyError(f"state mismatch on {missing[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    # U(-1/sqrt(d_in), 1/sqrt(d_in)) for weight and bias; the larger Xavier range
    # made the visual encoder memorise pairs instead of comparing streams
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = fan_in_uniform(rng, (d_in, d_out), d_in)
        self.bias = fan_in_uniform(rng, (d_out,), d_in) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads.

    ``key_mask`` is boolean ``[B, Tk]`` (True = attend); queries come from
    ``x_q`` and keys/values from ``x_kv``.
    """

    def __init__(self, d, heads, rng):
        if d % heads:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def _split(self, x):
        b, t, d = x.shape
        return T.swapaxes(x.reshape(b, t, self.heads, d // self.heads), 1, 2)

    def __call__(self, x_q, x_kv=None, key_mask=None):
        x_kv = x_q if x_kv is None else x_kv
        b, tq, d = x_q.shape
        q, k, v = self._split(self.q(x_q)), self._split(self.k(x_kv)), self._split(self.v(x_kv))
        scores = T.matmul(q, T.swapaxes(k, 2, 3)) * (1.0 / np.sqrt(d // self.heads))
        mask = None
        if key_mask is not None:
            mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
        attn = T.softmax_rows(scores, mask)
        ctx = T.swapaxes(T.matmul(attn, v), 1, 2).reshape(b, tq, d)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d, hidden, rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x, train=False, rng=None, dropout=0.0):
        return self.fc2(T.dropout(T.relu(self.fc1(x)), dropout, train, rng))


class EncoderBlock(Module):
    """Pre-norm residual block: x + attn(LN(x)), then x + ff(LN(x)).

    With ``context`` given, attention is cross-attention: queries from ``x``,
    keys and values from ``context``.
    """

    def __init__(self, d, heads, rng, ff_mult=2):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, ff_mult * d, rng)

    def __call__(self, x, key_mask=None, context=None, train=False, rng=None, dropout=0.0):
        h = self.norm1(x)
        kv = h if context is None else self.norm1(context)
        x = x + T.dropout(self.attn(h, kv, key_mask), dropout, train, rng)
        return x + T.dropout(self.ff(self.norm2(x), train, rng, dropout), dropout, train, rng)
