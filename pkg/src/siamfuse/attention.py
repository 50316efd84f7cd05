"""Single-head scaled dot-product attention over spatial tokens.

Feature maps [C,h,w] are flattened to token matrices [h*w, C]; attention
operates on rows. There is no positional encoding, so permuting the tokens
of every input by the same permutation permutes the output rows identically.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, linear, matmul, softmax_rows


def tokens_from_map(f: Tensor) -> Tensor:
    """[C,h,w] -> [h*w, C], row i is the channel vector at flat position i."""
    if f.ndim != 3:
        raise ShapeError(f"tokens_from_map needs [C,h,w], got {f.shape}")
    c = f.shape[0]
    return f.reshape(c, f.shape[1] * f.shape[2]).transpose2d()

def map_from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    """[h*w, C] -> [C,h,w], inverse of tokens_from_map."""
    if t.ndim != 2 or t.shape[0] != h * w:
        raise ShapeError(f"map_from_tokens: {t.shape} vs {h}x{w}")
    return t.transpose2d().reshape(t.shape[1], h, w)


def attend(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Return (output tokens, attention weights).

    weights = softmax_rows(q k^T / sqrt(d)), output = weights @ v. Rows of
    the weight matrix are a probability distribution over key positions.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attend needs 2-d token matrices")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"attend: query dim {q.shape[1]} vs key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attend: {k.shape[0]} keys vs {v.shape[0]} values")
    scale = 1.0 / math.sqrt(q.shape[1])
    weights = softmax_rows(matmul(q, k.transpose2d()) * scale)
    return matmul(weights, v), weights


def init_projection(channels: int, rng: np.random.Generator, use_bias: bool) -> tuple[Tensor, Tensor | None]:
    w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(channels), size=(channels, channels)), requires_grad=True)
    b = Tensor(np.zeros(channels), requires_grad=True) if use_bias else None
    return w, b


def project(tokens: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    return linear(tokens, w, b)
