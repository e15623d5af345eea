"""Scaled dot-product and multi-head attention with optional weight capture."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class AttentionRecord:
    """Post-softmax weights of one head in one layer.

    ``weights`` has shape (batch, query_len, key_len). For decoder cross
    attention the query axis is the token sequence ([CLS] first) and the key
    axis is the flattened h*w pixel grid in row-major order.
    """

    layer_index: int
    head_index: int
    weights: np.ndarray
    role: str  # "self-visual" | "self-textual" | "cross"

    @property
    def query_len(self) -> int:
        return self.weights.shape[-2]

    @property
    def key_len(self) -> int:
        return self.weights.shape[-1]


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d)) v over the last two axes.

    ``mask`` is boolean, True at excluded keys, broadcastable to (..., q_len, k_len).
    Returns the mixed values and the attention weights.
    """
    if q.shape[-1] != k.shape[-1]:
        raise T.ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    d = q.shape[-1]
    scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(d))
    weights = T.softmax_rows(scores, mask)
    return weights @ v, weights


class MultiHeadAttention(Module):
    """Fused D x D projections, sliced into ``num_heads`` heads of width D / num_heads."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % num_heads:
            raise ValueError(f"model dim {dim} not divisible by {num_heads} heads")
        self.q_proj = Linear(dim, dim, rng, dtype)
        self.k_proj = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.out_proj = Linear(dim, dim, rng, dtype)
        self._dim = dim
        self._heads = num_heads

    @property
    def num_heads(self) -> int:
        return self._heads

    @property
    def head_dim(self) -> int:
        return self._dim // self._heads

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.transpose(x.reshape(b, n, self._heads, self.head_dim), (0, 2, 1, 3))

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_pad_mask=None,
                return_weights: bool = False):
        """Inputs are (batch, length, D). ``key_pad_mask`` is (batch, key_len), True at pads.

        Returns ``(out, weights)`` where ``weights`` is a (batch, heads, q_len, k_len)
        array when ``return_weights`` is set, else None.
        """
        for name, t in (("query", query), ("key", key), ("value", value)):
            if t.ndim != 3 or t.shape[-1] != self._dim:
                raise T.ShapeError(f"{name} must be (batch, length, {self._dim}), got {t.shape}")
        if key.shape[1] != value.shape[1]:
            raise T.ShapeError("key and value sequences differ in length")
        mask = None
        if key_pad_mask is not None:
            key_pad_mask = np.asarray(key_pad_mask, dtype=bool)
            if key_pad_mask.shape != (key.shape[0], key.shape[1]):
                raise T.ShapeError(
                    f"mask shape {key_pad_mask.shape} does not match keys {key.shape[:2]}")
            mask = key_pad_mask[:, None, None, :]
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        mixed, weights = scaled_dot_attention(q, k, v, mask)
        b, _, n, _ = mixed.shape
        merged = T.transpose(mixed, (0, 2, 1, 3)).reshape(b, n, self._dim)
        out = self.out_proj(merged)
        return out, (weights.data.copy() if return_weights else None)


def records_from(weights: np.ndarray, layer: int, role: str) -> list[AttentionRecord]:
    return [AttentionRecord(layer, h, weights[:, h], role) for h in range(weights.shape[1])]
