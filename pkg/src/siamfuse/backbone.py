"""Feature extractor shared by template and search branches.

Four conv stages with total stride 8. The final conv has no ReLU so the
feature maps that feed the correlation are roughly zero-mean; without any
normalization layer a rectified output would give the response map a large
positive offset that the heads would have to unlearn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, channel_bias_add, conv2d, depthwise_correlate, maxpool2d

TOTAL_STRIDE = 8


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    stage_channels: tuple[int, int, int] = (32, 64, 96)
    out_channels: int = 64
    template_size: int = 127
    search_size: int = 287

    @property
    def total_stride(self) -> int:
        return TOTAL_STRIDE

    def feature_extent(self, n: int) -> int:
        """Spatial extent of the feature map for an n x n input."""
        n1 = (n - 5) // 2 + 1          # conv1 5x5 stride 2
        n2 = (n1 - 3) // 2 + 1         # conv2 3x3 stride 2
        n3 = n2 // 2                   # maxpool 2x2 stride 2
        return n3                      # conv3/conv4 are 3x3 stride 1 pad 1

    @property
    def template_extent(self) -> int:
        return self.feature_extent(self.template_size)

    @property
    def search_extent(self) -> int:
        return self.feature_extent(self.search_size)

    def validate(self) -> None:
        for label, n in (("template_size", self.template_size), ("search_size", self.search_size)):
            ext = self.feature_extent(n)
            if ext < 1:
                raise ShapeError(f"{label}={n} gives empty feature map")
            if ext % 2 == 0:
                raise ShapeError(f"{label}={n} gives even feature extent {ext}; need odd for a centered anchor grid")
        if self.template_extent >= self.search_extent:
            raise ShapeError(
                f"template extent {self.template_extent} must be smaller than search extent {self.search_extent}"
            )

    @staticmethod
    def desk() -> "BackboneConfig":
        """Small preset that trains in seconds on a laptop core."""
        return BackboneConfig(stage_channels=(8, 16, 24), out_channels=16, template_size=47, search_size=111)


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> Tensor:
    std = float(np.sqrt(2.0 / (cin * k * k)))
    return Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)


def init_backbone_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    c1, c2, c3 = cfg.stage_channels
    params = {
        "conv1.w": _he_conv(rng, c1, cfg.in_channels, 5),
        "conv1.b": Tensor(np.zeros(c1), requires_grad=True),
        "conv2.w": _he_conv(rng, c2, c1, 3),
        "conv2.b": Tensor(np.zeros(c2), requires_grad=True),
        "conv3.w": _he_conv(rng, c3, c2, 3),
        "conv3.b": Tensor(np.zeros(c3), requires_grad=True),
        "conv4.w": _he_conv(rng, cfg.out_channels, c3, 3),
        "conv4.b": Tensor(np.zeros(cfg.out_channels), requires_grad=True),
    }
    return params


def extract_features(image, params: dict[str, Tensor], cfg: BackboneConfig) -> Tensor:
    """Map an image [in_channels, n, n] to features [out_channels, m, m]."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 3 or x.shape[0] != cfg.in_channels:
        raise ShapeError(f"expected [{cfg.in_channels},H,W] image, got {x.shape}")
    x = channel_bias_add(conv2d(x, params["conv1.w"], stride=2), params["conv1.b"]).relu()
    x = channel_bias_add(conv2d(x, params["conv2.w"], stride=2), params["conv2.b"]).relu()
    x = maxpool2d(x)
    x = channel_bias_add(conv2d(x, params["conv3.w"], stride=1, padding=1), params["conv3.b"]).relu()
    x = channel_bias_add(conv2d(x, params["conv4.w"], stride=1, padding=1), params["conv4.b"])
    return x


def cross_correlate(template_feat: Tensor, search_feat: Tensor) -> Tensor:
    """Depthwise correlation response of a template over a search feature map."""
    if template_feat.ndim != 3 or search_feat.ndim != 3:
        raise ShapeError(f"cross_correlate: {template_feat.shape} vs {search_feat.shape}")
    if template_feat.shape[0] != search_feat.shape[0]:
        raise ShapeError(
            f"cross_correlate: channel mismatch {template_feat.shape[0]} vs {search_feat.shape[0]}"
        )
    if template_feat.shape[1] > search_feat.shape[1] or template_feat.shape[2] > search_feat.shape[2]:
        raise ShapeError(
            f"cross_correlate: template {template_feat.shape} does not fit in search {search_feat.shape}"
        )
    return depthwise_correlate(search_feat, template_feat)
