"""Fusing the running template history into a single correlation kernel.

The tracker keeps three template feature maps: the one from the first frame
(initial), a running accumulated one, and the most recent one (current).
Cross-attention mixes accumulated into current, a zero-initialized conv
filters the mixture, and the result is added back onto the initial features.
At initialization the whole block is therefore exactly the identity on the
initial template.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import attend, init_projection, map_from_tokens, project, tokens_from_map
from .tensor import ShapeError, Tensor, conv2d


@dataclass
class TemplateTriple:
    """Feature maps [C,h,w] for the initial, accumulated, and current templates."""

    initial: Tensor
    accumulated: Tensor
    current: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.initial, self.accumulated, self.current)}
        if len(shapes) != 1:
            raise ShapeError(f"template triple shapes differ: {sorted(shapes)}")
        if self.initial.ndim != 3:
            raise ShapeError(f"template features must be [C,h,w], got {self.initial.shape}")


@dataclass
class FusionParams:
    w_query: Tensor
    w_key: Tensor
    w_value: Tensor
    filter_w: Tensor
    b_query: Tensor | None = None
    b_key: Tensor | None = None
    b_value: Tensor | None = None

    def named(self, prefix: str = "fusion") -> dict[str, Tensor]:
        out = {
            f"{prefix}.w_query": self.w_query,
            f"{prefix}.w_key": self.w_key,
            f"{prefix}.w_value": self.w_value,
            f"{prefix}.filter.w": self.filter_w,
        }
        for tag, b in (("b_query", self.b_query), ("b_key", self.b_key), ("b_value", self.b_value)):
            if b is not None:
                out[f"{prefix}.{tag}"] = b
        return out


def init_fusion_params(channels: int, rng: np.random.Generator, use_bias: bool = False) -> FusionParams:
    wq, bq = init_projection(channels, rng, use_bias)
    wk, bk = init_projection(channels, rng, use_bias)
    wv, bv = init_projection(channels, rng, use_bias)
    filter_w = Tensor(np.zeros((channels, channels, 3, 3)), requires_grad=True)
    return FusionParams(wq, wk, wv, filter_w, bq, bk, bv)


def encode_templates(accumulated: Tensor, current: Tensor, p: FusionParams, return_weights: bool = False):
    """Cross-attention: queries and values from current, keys from accumulated."""
    if accumulated.shape != current.shape:
        raise ShapeError(f"encode_templates: {accumulated.shape} vs {current.shape}")
    _, h, w = current.shape
    tok_cur = tokens_from_map(current)
    tok_acc = tokens_from_map(accumulated)
    q = project(tok_cur, p.w_query, p.b_query)
    k = project(tok_acc, p.w_key, p.b_key)
    v = project(tok_cur, p.w_value, p.b_value)
    out_tokens, weights = attend(q, k, v)
    mixed = map_from_tokens(out_tokens, h, w)
    if return_weights:
        return mixed, weights
    return mixed


def fuse_templates(triple: TemplateTriple, p: FusionParams) -> Tensor:
    """Residual update of the initial template from the newer two."""
    mixed = encode_templates(triple.accumulated, triple.current, p)
    filtered = conv2d(mixed, p.filter_w, stride=1, padding=1)
    return filtered + triple.initial
