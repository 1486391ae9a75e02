"""Parameter containers and the transformer building blocks shared by the model."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameters are Tensor attributes with ``requires_grad``; children are Module attributes
    or lists of Modules. Names follow attribute paths, e.g. ``decoder.blocks.0.attn.q.weight``.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(value.shape) != p.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(value.shape)} vs {p.shape}")
            p.data = np.array(value, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=T.get_default_dtype())


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "xavier"):
        if init == "zeros":
            w = np.zeros((d_in, d_out))
        elif init == "xavier":
            bound = math.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        else:
            w = trunc_normal(rng, (d_in, d_out), float(init))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight) if x.ndim > 1 else T.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-5):
        self.eps = eps
        self.gain = param(np.ones(dim)) if affine else None
        self.bias = param(np.zeros(dim)) if affine else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, d_out: int | None = None,
                 dropout: float = 0.0):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, d_out or dim, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = T.gelu(self.fc1(x))
        if self.training:
            h = T.dropout(h, self.dropout, rng)
        return self.fc2(h)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Scaled dot-product attention over (B, H, N, Dh) operands.

    ``mask`` is boolean, broadcastable to (B, H, Nq, Nk); True entries are blocked.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.matmul(q, T.swap_last(k)) * scale
    if mask is not None:
        scores = T.where_const(mask, scores, -np.inf)
    weights = T.softmax(scores, axis=-1)
    if dropout > 0.0:
        weights = T.dropout(weights, dropout, rng)
    return T.matmul(weights, v)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


class MultiHeadAttention(Module):
    """Self- or cross-attention with separate query/key/value projections."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: int | None = None,
                 attn_dropout: float = 0.0):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(kv_dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.attn_dropout = attn_dropout

    def __call__(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        context = x if context is None else context
        d = x.shape[-1]
        q = split_heads(self.q(x), self.heads)
        kv = self.kv(context)
        k = split_heads(kv[..., :d], self.heads)
        v = split_heads(kv[..., d:], self.heads)
        p = self.attn_dropout if self.training else 0.0
        out = attention(q, k, v, mask=mask, dropout=p, rng=rng)
        return self.proj(merge_heads(out))


class TransformerBlock(Module):
    """Pre-norm self-attention block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 attn_dropout: float = 0.0, resid_dropout: float = 0.0, mlp_dropout: float = 0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, attn_dropout=attn_dropout)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng, dropout=mlp_dropout)
        self.resid_dropout = resid_dropout

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        p = self.resid_dropout if self.training else 0.0
        x = x + T.dropout(self.attn(self.norm1(x), mask=mask, rng=rng), p, rng)
        x = x + T.dropout(self.mlp(self.norm2(x), rng=rng), p, rng)
        return x
