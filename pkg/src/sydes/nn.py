"""Transformer building blocks on top of the tensor module.

``Module`` gives a minimal registry: attributes that are ``Parameter``,
``Module``, or lists/dicts of ``Module`` are collected recursively and named
with dotted paths.  Names are unique within a model and drive both seeded
initialization and the checkpoint format.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Parameter, RngState, Tensor

NEG_INF = -np.inf


class Module:
    """Base class with recursive parameter collection."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{k}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        seen: set[str] = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ContractError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name

    def initialize(self, rng: RngState) -> None:
        """Fill every parameter from the stream derived from its name."""
        self.assign_names()
        for name, p in self.named_parameters():
            p.initialize(rng.split(f"init/{name}"))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()


class Linear(Module):
    """y = x @ W + b with W stored [in, out]."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        self.weight = Parameter((in_dim, out_dim), init="fan_in")
        self.bias = Parameter((out_dim,), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight.tensor)
        if self.bias is not None:
            y = y + self.bias.tensor
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter((dim,), init="ones")
        self.beta = Parameter((dim,), init="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma.tensor, self.beta.tensor, self.eps)


class MultiHeadAttention(Module):
    """Standard scaled dot-product attention over [B, T, C] tokens.

    ``mask`` is an optional additive array broadcast onto the score tensor
    [B, H, Tq, Tk]; use 0 for allowed and -inf for blocked entries.  Set
    ``record`` to a dict to capture the post-softmax attention weights.
    """

    def __init__(self, dim: int, heads: int):
        if dim % heads:
            raise ContractError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim)
        self.wk = Linear(dim, dim)
        self.wv = Linear(dim, dim)
        self.wo = Linear(dim, dim)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor,
                 mask: np.ndarray | None = None,
                 record: dict | None = None) -> Tensor:
        B, Tq, C = q_tokens.shape
        Tk = kv_tokens.shape[1]
        H, D = self.heads, self.head_dim

        def heads_first(x: Tensor, t: int) -> Tensor:
            return T.transpose(T.reshape(x, (B, t, H, D)), (0, 2, 1, 3))

        q = heads_first(self.wq(q_tokens), Tq)
        k = heads_first(self.wk(kv_tokens), Tk)
        v = heads_first(self.wv(kv_tokens), Tk)

        scores = T.matmul(q, T.swap_last2(k)) * (1.0 / np.sqrt(D))
        if mask is not None:
            scores = scores + Tensor(mask)
        attn = T.softmax(scores, axis=-1)
        if record is not None:
            record["weights"] = attn.data.copy()
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, Tq, C))
        return self.wo(out)


class Mlp(Module):
    def __init__(self, dim: int, ratio: int = 4):
        self.fc1 = Linear(dim, dim * ratio)
        self.fc2 = Linear(dim * ratio, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        x = x + self.mlp(self.ln2(x))
        return x


class DecoderBlock(Module):
    """Pre-norm block: self-attention, then cross-attention, then MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.ln_q = LayerNorm(dim)
        self.ln_kv = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def __call__(self, x: Tensor, kv: Tensor,
                 self_mask: np.ndarray | None = None,
                 record: dict | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_mask)
        x = x + self.cross_attn(self.ln_q(x), self.ln_kv(kv), record=record)
        x = x + self.mlp(self.ln2(x))
        return x


def causal_pad_mask(real: np.ndarray) -> np.ndarray:
    """Additive [B, 1, T, T] mask combining causality with pad blocking.

    ``real`` is a boolean [B, T] array marking non-pad positions.  Key k is
    visible to query t iff k <= t and (real[k] or k == t); the diagonal is
    always allowed so no attention row is fully blocked.
    """
    B, S = real.shape
    allowed = np.tril(np.ones((S, S), dtype=bool))[None, :, :] & real[:, None, :]
    allowed |= np.eye(S, dtype=bool)[None, :, :]
    mask = np.where(allowed, 0.0, NEG_INF)
    return mask[:, None, :, :]
