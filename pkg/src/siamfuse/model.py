"""Model assembly: backbone + template fusion + search augmentation + heads.

Holds every parameter under a dotted name so the optimizer, checkpoints,
and freeze logic can address them uniformly. The fusion and augmentation
blocks are optional; when disabled the model degenerates to a plain
Siamese RPN tracking off the initial template.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import BackboneConfig, cross_correlate, extract_features, init_backbone_params
from .rpn_head import AnchorConfig, AnchorGrid, HeadParams, generate_anchors, head_forward, init_head_params
from .search_augmentation import AugmentParams, augment_search, init_augment_params
from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    load_checkpoint,
    save_checkpoint,
)
from .template_fusion import FusionParams, TemplateTriple, fuse_templates, init_fusion_params

RESPONSE_GAIN = 4.0


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ratios: tuple[float, ...] = (0.33, 0.5, 1.0, 2.0, 3.0)
    anchor_scale: float = 8.0
    use_fusion: bool = True
    use_augmentation: bool = True
    augment_filter_depth: int = 1
    attention_bias: bool = False

    @property
    def anchor(self) -> AnchorConfig:
        return AnchorConfig(ratios=self.ratios, scale=self.anchor_scale, stride=self.backbone.total_stride)

    def validate(self) -> None:
        self.backbone.validate()
        if self.augment_filter_depth not in (1, 2):
            raise ContractError(f"augment_filter_depth must be 1 or 2, got {self.augment_filter_depth}")
        if not self.ratios:
            raise ContractError("need at least one anchor ratio")

    @staticmethod
    def desk() -> "ModelConfig":
        """Small preset: trains on a CPU in minutes, same code paths."""
        return ModelConfig(backbone=BackboneConfig.desk(), ratios=(0.5, 1.0, 2.0), anchor_scale=3.0)

    def to_dict(self) -> dict:
        return {
            "backbone": {
                "in_channels": self.backbone.in_channels,
                "stage_channels": list(self.backbone.stage_channels),
                "out_channels": self.backbone.out_channels,
                "template_size": self.backbone.template_size,
                "search_size": self.backbone.search_size,
            },
            "ratios": list(self.ratios),
            "anchor_scale": self.anchor_scale,
            "use_fusion": self.use_fusion,
            "use_augmentation": self.use_augmentation,
            "augment_filter_depth": self.augment_filter_depth,
            "attention_bias": self.attention_bias,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        bb = d["backbone"]
        return ModelConfig(
            backbone=BackboneConfig(
                in_channels=bb["in_channels"],
                stage_channels=tuple(bb["stage_channels"]),
                out_channels=bb["out_channels"],
                template_size=bb["template_size"],
                search_size=bb["search_size"],
            ),
            ratios=tuple(d["ratios"]),
            anchor_scale=d["anchor_scale"],
            use_fusion=d["use_fusion"],
            use_augmentation=d["use_augmentation"],
            augment_filter_depth=d["augment_filter_depth"],
            attention_bias=d["attention_bias"],
        )


class TrackerModel:
    def __init__(
        self,
        cfg: ModelConfig,
        backbone_params: dict[str, Tensor],
        fusion_params: FusionParams | None,
        augment_params: AugmentParams | None,
        head_params: HeadParams,
    ):
        cfg.validate()
        if cfg.use_fusion and fusion_params is None:
            raise ContractError("config enables fusion but no fusion parameters given")
        if cfg.use_augmentation and augment_params is None:
            raise ContractError("config enables augmentation but no augmentation parameters given")
        self.cfg = cfg
        self.backbone_params = backbone_params
        self.fusion_params = fusion_params
        self.augment_params = augment_params
        self.head_params = head_params

    # -- construction ------------------------------------------------------------

    @staticmethod
    def initialize(cfg: ModelConfig, seed: int = 0) -> "TrackerModel":
        cfg.validate()
        rng = np.random.default_rng(seed)
        c = cfg.backbone.out_channels
        backbone_params = init_backbone_params(cfg.backbone, rng)
        fusion = init_fusion_params(c, rng, use_bias=cfg.attention_bias) if cfg.use_fusion else None
        augment = (
            init_augment_params(c, rng, filter_depth=cfg.augment_filter_depth, use_bias=cfg.attention_bias)
            if cfg.use_augmentation
            else None
        )
        heads = init_head_params(c, cfg.anchor.num_anchors, rng)
        return TrackerModel(cfg, backbone_params, fusion, augment, heads)

    # -- parameter bookkeeping ------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone_params.items()}
        if self.fusion_params is not None:
            out.update(self.fusion_params.named("fusion"))
        if self.augment_params is not None:
            out.update(self.augment_params.named("augment"))
        out.update(self.head_params.named("head"))
        return out

    def backbone_param_names(self) -> frozenset[str]:
        return frozenset(f"backbone.{k}" for k in self.backbone_params)

    # -- forward pieces ----------------------------------------------------------------

    def extract(self, image) -> Tensor:
        return extract_features(image, self.backbone_params, self.cfg.backbone)

    def fuse(self, triple: TemplateTriple) -> Tensor:
        if not self.cfg.use_fusion:
            return triple.initial
        return fuse_templates(triple, self.fusion_params)

    def augment(self, fused_template: Tensor, search_feat: Tensor) -> Tensor:
        if not self.cfg.use_augmentation:
            return search_feat
        return augment_search(fused_template, search_feat, self.augment_params)

    def correlate(self, fused_template: Tensor, search_feat: Tensor) -> Tensor:
        """Depthwise response, scaled to keep head inputs O(1) regardless of size.

        The 1/sqrt(elements) factor makes the scale independent of template
        extent; the fixed gain lifts the response std toward unity for
        typical feature magnitudes so head gradients start at a useful size.
        """
        c, hz, wz = fused_template.shape
        scale = RESPONSE_GAIN / float(np.sqrt(c * hz * wz))
        return cross_correlate(fused_template, search_feat) * scale

    def predict(self, triple: TemplateTriple, search_feat: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Full pipeline from features: (pair, binary, reg) logits."""
        fused = self.fuse(triple)
        augmented = self.augment(fused, search_feat)
        response = self.correlate(fused, augmented)
        return head_forward(response, self.head_params)

    def anchor_grid(self) -> AnchorGrid:
        ext_s = self.cfg.backbone.search_extent
        ext_z = self.cfg.backbone.template_extent
        out = ext_s - ext_z + 1
        return generate_anchors(self.cfg.anchor, out, out, self.cfg.backbone.search_size)

    # -- persistence ------------------------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"config": self.cfg.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.parameters(), meta=meta)

    @staticmethod
    def load(path) -> "TrackerModel":
        arrays, meta = load_checkpoint(path)
        if "config" not in meta:
            raise ContractError("checkpoint has no model config in its meta block")
        cfg = ModelConfig.from_dict(meta["config"])
        model = TrackerModel.initialize(cfg, seed=0)
        params = model.parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ContractError(f"checkpoint parameter mismatch; missing {missing}, unexpected {extra}")
        for name, tensor in params.items():
            if arrays[name].shape != tensor.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} vs model {tensor.data.shape}")
            tensor.data = arrays[name]
        return model
