"""Sharpening search features against the fused template before correlation.

Two attention stages build a mask over the search region: self-attention
relates search positions to each other, then cross-attention reads the fused
template from each (self-attended) search position. A small conv stack
filters the mask and the result is added back onto the search features.
The final conv is zero-initialized, so the block starts as the identity;
with a depth-2 filter stack only the last conv starts at zero (a fully
zero stack would block gradients to the earlier conv permanently) and a
leaky rectifier sits between the convs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import attend, init_projection, map_from_tokens, project, tokens_from_map
from .tensor import ShapeError, Tensor, conv2d


@dataclass
class AugmentParams:
    self_w_query: Tensor
    self_w_key: Tensor
    self_w_value: Tensor
    cross_w_query: Tensor
    cross_w_key: Tensor
    cross_w_value: Tensor
    filters: tuple[Tensor, ...]
    self_b_query: Tensor | None = None
    self_b_key: Tensor | None = None
    self_b_value: Tensor | None = None
    cross_b_query: Tensor | None = None
    cross_b_key: Tensor | None = None
    cross_b_value: Tensor | None = None

    def named(self, prefix: str = "augment") -> dict[str, Tensor]:
        out = {}
        for tag in (
            "self_w_query", "self_w_key", "self_w_value",
            "cross_w_query", "cross_w_key", "cross_w_value",
            "self_b_query", "self_b_key", "self_b_value",
            "cross_b_query", "cross_b_key", "cross_b_value",
        ):
            t = getattr(self, tag)
            if t is not None:
                out[f"{prefix}.{tag}"] = t
        for i, f in enumerate(self.filters):
            out[f"{prefix}.filter{i}.w"] = f
        return out


def init_augment_params(
    channels: int,
    rng: np.random.Generator,
    filter_depth: int = 1,
    use_bias: bool = False,
) -> AugmentParams:
    if filter_depth not in (1, 2):
        raise ShapeError(f"filter_depth must be 1 or 2, got {filter_depth}")
    sq, sbq = init_projection(channels, rng, use_bias)
    sk, sbk = init_projection(channels, rng, use_bias)
    sv, sbv = init_projection(channels, rng, use_bias)
    cq, cbq = init_projection(channels, rng, use_bias)
    ck, cbk = init_projection(channels, rng, use_bias)
    cv, cbv = init_projection(channels, rng, use_bias)
    filters = []
    if filter_depth == 2:
        std = float(np.sqrt(2.0 / (channels * 9))) * 0.1
        filters.append(Tensor(rng.normal(0.0, std, size=(channels, channels, 3, 3)), requires_grad=True))
    filters.append(Tensor(np.zeros((channels, channels, 3, 3)), requires_grad=True))
    return AugmentParams(sq, sk, sv, cq, ck, cv, tuple(filters), sbq, sbk, sbv, cbq, cbk, cbv)


def build_mask(fused_template: Tensor, search: Tensor, p: AugmentParams, return_weights: bool = False):
    """Attention mask over the search region, same shape as the search features."""
    if fused_template.ndim != 3 or search.ndim != 3:
        raise ShapeError(f"build_mask: {fused_template.shape} vs {search.shape}")
    if fused_template.shape[0] != search.shape[0]:
        raise ShapeError(
            f"build_mask: channel mismatch {fused_template.shape[0]} vs {search.shape[0]}"
        )
    _, hs, ws = search.shape
    tok_s = tokens_from_map(search)
    q1 = project(tok_s, p.self_w_query, p.self_b_query)
    k1 = project(tok_s, p.self_w_key, p.self_b_key)
    v1 = project(tok_s, p.self_w_value, p.self_b_value)
    attended, self_weights = attend(q1, k1, v1)

    tok_t = tokens_from_map(fused_template)
    q2 = project(attended, p.cross_w_query, p.cross_b_query)
    k2 = project(tok_t, p.cross_w_key, p.cross_b_key)
    v2 = project(tok_t, p.cross_w_value, p.cross_b_value)
    out_tokens, cross_weights = attend(q2, k2, v2)
    mask = map_from_tokens(out_tokens, hs, ws)
    if return_weights:
        return mask, self_weights, cross_weights
    return mask


def _leaky(x: Tensor, slope: float = 0.1) -> Tensor:
    # attention masks are nearly constant across positions, so a hard ReLU
    # between the filter convs can zero a whole channel and stall training
    return x.relu() - (x * -1.0).relu() * slope


def augment_search(fused_template: Tensor, search: Tensor, p: AugmentParams) -> Tensor:
    """Residual augmentation: filtered mask added onto the search features."""
    x = build_mask(fused_template, search, p)
    for i, f in enumerate(p.filters):
        if i > 0:
            x = _leaky(x)
        x = conv2d(x, f, stride=1, padding=1)
    return x + search
