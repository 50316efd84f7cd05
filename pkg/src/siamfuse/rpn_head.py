"""Anchor grid, label assignment, prediction heads, and losses.

Three head branches read the correlation response:
  * pair:   2 logits per anchor, softmax positive/negative classification
  * binary: 1 logit per anchor, trained with BCE, used to corroborate
            confidence at inference
  * reg:    4 box offsets per anchor (dx, dy, dw, dh)

Channel layout is anchor-major: pair channel 2a+c is (anchor a, class c)
with c=1 the positive class; reg channel 4a+k is (anchor a, component k).

Label assignment comes in two flavours: classic IoU thresholds with an
ignore band, and a center-distance test on the feature lattice that marks
every anchor within a radius of the target center positive. The chosen
scheme drives both classification branches.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    bce_with_logits,
    channel_bias_add,
    conv2d,
    softmax_cross_entropy,
)

# -- box conversions ------------------------------------------------------------


def xywh_to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    out = b.copy()
    out[..., 2] = b[..., 0] + b[..., 2]
    out[..., 3] = b[..., 1] + b[..., 3]
    return out


def corners_to_xywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    out = b.copy()
    out[..., 2] = b[..., 2] - b[..., 0]
    out[..., 3] = b[..., 3] - b[..., 1]
    return out


def xywh_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    out = b.copy()
    out[..., 0] = b[..., 0] + b[..., 2] / 2.0
    out[..., 1] = b[..., 1] + b[..., 3] / 2.0
    return out


def cxcywh_to_xywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    out = b.copy()
    out[..., 0] = b[..., 0] - b[..., 2] / 2.0
    out[..., 1] = b[..., 1] - b[..., 3] / 2.0
    return out


def compute_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of corner-format boxes (x1,y1,x2,y2); broadcasts like numpy."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    iw = np.clip(ix2 - ix1, 0.0, None)
    ih = np.clip(iy2 - iy1, 0.0, None)
    inter = iw * ih
    area_a = np.clip(a[..., 2] - a[..., 0], 0.0, None) * np.clip(a[..., 3] - a[..., 1], 0.0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0.0, None) * np.clip(b[..., 3] - b[..., 1], 0.0, None)
    union = area_a + area_b - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def iou_xywh(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return compute_iou(xywh_to_corners(a), xywh_to_corners(b))


# -- anchors ----------------------------------------------------------------------


@dataclass(frozen=True)
class AnchorConfig:
    ratios: tuple[float, ...] = (0.33, 0.5, 1.0, 2.0, 3.0)
    scale: float = 8.0
    stride: int = 8

    @property
    def num_anchors(self) -> int:
        return len(self.ratios)

    @property
    def base_area(self) -> float:
        return float((self.scale * self.stride) ** 2)


@dataclass
class AnchorGrid:
    feat_h: int
    feat_w: int
    stride: int
    origin: float
    boxes: np.ndarray  # [A, feat_h, feat_w, 4] as (cx, cy, w, h) in search pixels

    @property
    def num_anchors(self) -> int:
        return self.boxes.shape[0]


def generate_anchors(cfg: AnchorConfig, feat_h: int, feat_w: int, search_size: int) -> AnchorGrid:
    """Anchor boxes centered on the feature lattice mapped into the search image.

    The lattice is centered: feature cell (0,0) sits at
    origin = (search_size - (feat - 1) * stride) / 2 in image pixels.
    """
    if feat_h < 1 or feat_w < 1:
        raise ShapeError(f"empty feature map {feat_h}x{feat_w}")
    origin = (search_size - (max(feat_h, feat_w) - 1) * cfg.stride) / 2.0
    a = cfg.num_anchors
    ws = np.array([np.sqrt(cfg.base_area / r) for r in cfg.ratios])
    hs = ws * np.asarray(cfg.ratios)
    boxes = np.zeros((a, feat_h, feat_w, 4))
    cols = origin + np.arange(feat_w) * cfg.stride
    rows = origin + np.arange(feat_h) * cfg.stride
    boxes[..., 0] = cols[None, None, :]
    boxes[..., 1] = rows[None, :, None]
    boxes[..., 2] = ws[:, None, None]
    boxes[..., 3] = hs[:, None, None]
    return AnchorGrid(feat_h, feat_w, cfg.stride, origin, boxes)


# -- box encoding -------------------------------------------------------------------

OFFSET_CLAMP = 4.0


def encode_boxes(gt_xywh, grid: AnchorGrid) -> np.ndarray:
    """Offsets (dx, dy, dw, dh) from every anchor to the ground-truth box."""
    gt = xywh_to_cxcywh(np.asarray(gt_xywh, dtype=np.float64))
    if gt.shape != (4,):
        raise ShapeError(f"encode_boxes wants one xywh box, got {gt.shape}")
    if gt[2] <= 0 or gt[3] <= 0:
        raise ContractError(f"ground-truth box has non-positive size: {gt_xywh}")
    anchors = grid.boxes
    out = np.zeros_like(anchors)
    out[..., 0] = (gt[0] - anchors[..., 0]) / anchors[..., 2]
    out[..., 1] = (gt[1] - anchors[..., 1]) / anchors[..., 3]
    out[..., 2] = np.log(gt[2] / anchors[..., 2])
    out[..., 3] = np.log(gt[3] / anchors[..., 3])
    return out


def decode_boxes(offsets: np.ndarray, grid: AnchorGrid, clamp: float = OFFSET_CLAMP) -> np.ndarray:
    """Inverse of encode_boxes; returns (cx, cy, w, h). Log-offsets are clamped."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != grid.boxes.shape:
        raise ShapeError(f"decode_boxes: offsets {offsets.shape} vs anchors {grid.boxes.shape}")
    anchors = grid.boxes
    out = np.zeros_like(anchors)
    out[..., 0] = anchors[..., 0] + offsets[..., 0] * anchors[..., 2]
    out[..., 1] = anchors[..., 1] + offsets[..., 1] * anchors[..., 3]
    out[..., 2] = anchors[..., 2] * np.exp(np.clip(offsets[..., 2], -clamp, clamp))
    out[..., 3] = anchors[..., 3] * np.exp(np.clip(offsets[..., 3], -clamp, clamp))
    return out


# -- label assignment ------------------------------------------------------------------


@dataclass
class LabelTargets:
    """Per-anchor training targets on the feature lattice.

    cls_pair:   int8 [A,fh,fw], 1 positive / 0 negative / -1 ignore
    cls_binary: float [A,fh,fw] in {0,1}
    reg:        float [A,fh,fw,4] encoded offsets to the ground truth
    """

    cls_pair: np.ndarray
    cls_binary: np.ndarray
    reg: np.ndarray
    scheme: str

    @property
    def num_positive(self) -> int:
        return int((self.cls_pair == 1).sum())


def assign_labels_iou(
    grid: AnchorGrid,
    gt_xywh,
    thr_pos: float = 0.6,
    thr_neg: float = 0.3,
) -> LabelTargets:
    """Classic scheme: IoU > thr_pos positive, < thr_neg negative, else ignored."""
    if thr_neg > thr_pos:
        raise ContractError(f"thr_neg {thr_neg} > thr_pos {thr_pos}")
    gt_corners = xywh_to_corners(np.asarray(gt_xywh, dtype=np.float64))
    anchor_corners = xywh_to_corners(cxcywh_to_xywh(grid.boxes))
    iou = compute_iou(anchor_corners, gt_corners[None, None, None, :])
    cls_pair = np.full(iou.shape, -1, dtype=np.int8)
    cls_pair[iou > thr_pos] = 1
    cls_pair[iou < thr_neg] = 0
    cls_binary = (cls_pair == 1).astype(np.float64)
    return LabelTargets(cls_pair, cls_binary, encode_boxes(gt_xywh, grid), scheme="iou")


def _mapped_center(gt_xywh, grid: AnchorGrid, eq5_literal: bool) -> tuple[float, float]:
    """Target center in feature-lattice coordinates (col, row)."""
    x, y, w, h = (float(v) for v in np.asarray(gt_xywh, dtype=np.float64))
    if w <= 0 or h <= 0:
        raise ContractError(f"ground-truth box has non-positive size: {gt_xywh}")
    # map corners from image pixels to lattice coordinates
    cx_lt = (x - grid.origin) / grid.stride
    cy_lt = (y - grid.origin) / grid.stride
    cx_rb = (x + w - grid.origin) / grid.stride
    cy_rb = (y + h - grid.origin) / grid.stride
    if eq5_literal:
        # divide corner sums by the mapped box extent instead of 2
        bw = cx_rb - cx_lt
        bh = cy_rb - cy_lt
        return (cx_lt + cx_rb) / bw, (cy_lt + cy_rb) / bh
    return (cx_lt + cx_rb) / 2.0, (cy_lt + cy_rb) / 2.0


def assign_labels_center_distance(
    grid: AnchorGrid,
    gt_xywh,
    thr: float = 4.0,
    eq5_literal: bool = False,
) -> LabelTargets:
    """Positive iff squared lattice distance to the target center is < thr.

    No ignore band: every anchor is either positive or negative, and all
    anchors at one lattice cell share the same label.
    """
    if thr < 0:
        raise ContractError(f"negative threshold {thr}")
    ccol, crow = _mapped_center(gt_xywh, grid, eq5_literal)
    rows = np.arange(grid.feat_h, dtype=np.float64)
    cols = np.arange(grid.feat_w, dtype=np.float64)
    d2 = (crow - rows)[:, None] ** 2 + (ccol - cols)[None, :] ** 2
    pos = d2 < thr
    cls_pair = np.where(pos, 1, 0).astype(np.int8)
    cls_pair = np.broadcast_to(cls_pair, (grid.num_anchors,) + cls_pair.shape).copy()
    cls_binary = cls_pair.astype(np.float64)
    return LabelTargets(cls_pair, cls_binary, encode_boxes(gt_xywh, grid), scheme="center_distance")


# -- heads ------------------------------------------------------------------------------


@dataclass
class HeadParams:
    pair_conv1_w: Tensor
    pair_conv1_b: Tensor
    pair_conv2_w: Tensor
    pair_conv2_b: Tensor
    binary_conv1_w: Tensor
    binary_conv1_b: Tensor
    binary_conv2_w: Tensor
    binary_conv2_b: Tensor
    reg_conv1_w: Tensor
    reg_conv1_b: Tensor
    reg_conv2_w: Tensor
    reg_conv2_b: Tensor

    def named(self, prefix: str = "head") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in self.__dataclass_fields__}


def init_head_params(channels: int, num_anchors: int, rng: np.random.Generator) -> HeadParams:
    def mid(cout):
        std = float(np.sqrt(2.0 / (channels * 9)))
        return (
            Tensor(rng.normal(0.0, std, size=(cout, channels, 3, 3)), requires_grad=True),
            Tensor(np.zeros(cout), requires_grad=True),
        )

    def out(cout):
        # small so initial logits sit near zero
        return (
            Tensor(rng.normal(0.0, 0.01, size=(cout, channels, 1, 1)), requires_grad=True),
            Tensor(np.zeros(cout), requires_grad=True),
        )

    pw1, pb1 = mid(channels)
    pw2, pb2 = out(2 * num_anchors)
    bw1, bb1 = mid(channels)
    bw2, bb2 = out(num_anchors)
    rw1, rb1 = mid(channels)
    rw2, rb2 = out(4 * num_anchors)
    return HeadParams(pw1, pb1, pw2, pb2, bw1, bb1, bw2, bb2, rw1, rb1, rw2, rb2)


def head_forward(response: Tensor, p: HeadParams) -> tuple[Tensor, Tensor, Tensor]:
    """Map the response [C,h,w] to (pair [2A,h,w], binary [A,h,w], reg [4A,h,w])."""

    def branch(w1, b1, w2, b2):
        x = channel_bias_add(conv2d(response, w1, stride=1, padding=1), b1).relu()
        return channel_bias_add(conv2d(x, w2, stride=1), b2)

    pair = branch(p.pair_conv1_w, p.pair_conv1_b, p.pair_conv2_w, p.pair_conv2_b)
    binary = branch(p.binary_conv1_w, p.binary_conv1_b, p.binary_conv2_w, p.binary_conv2_b)
    reg = branch(p.reg_conv1_w, p.reg_conv1_b, p.reg_conv2_w, p.reg_conv2_b)
    return pair, binary, reg


# -- losses ------------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    pair_weight: float = 1.0  # weights the pair CE inside the classification sum
    cls_weight: float = 1.0   # weights classification against regression


def smooth_l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean smooth-L1: 0.5 x^2 if |x|<1 else |x|-0.5, x = pred - target.

    An empty prediction contributes 0 (with a warning): there is nothing
    to regress when no anchor is positive.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        warnings.warn("smooth_l1 over an empty set; returning 0", stacklevel=2)
        return Tensor(0.0)
    d = pred - Tensor(target)
    absd = d.relu() + (d * -1.0).relu()
    quad_mask = (np.abs(d.data) < 1.0).astype(np.float64)
    quad = d * d * 0.5
    lin = absd - 0.5
    per_elem = quad * Tensor(quad_mask) + lin * Tensor(1.0 - quad_mask)
    return per_elem.mean()


def _gather_pair_rows(pair_logits: Tensor, a_idx, i_idx, j_idx, fh: int, fw: int) -> Tensor:
    neg = ((2 * a_idx + 0) * fh + i_idx) * fw + j_idx
    pos = ((2 * a_idx + 1) * fh + i_idx) * fw + j_idx
    idx = np.stack([neg, pos], axis=1)
    return pair_logits.take(idx)


def classification_losses(
    pair_logits: Tensor,
    binary_logits: Tensor,
    targets: LabelTargets,
    class_balanced: bool = True,
) -> tuple[Tensor, Tensor]:
    """(pair CE, binary BCE) over contributing anchors.

    class_balanced averages the positive-anchor mean and negative-anchor
    mean so a 99%-negative grid cannot drown the positives; the plain mode
    is a single mean over all contributing anchors.
    """
    a, fh, fw = targets.cls_pair.shape
    if pair_logits.shape != (2 * a, fh, fw):
        raise ShapeError(f"pair logits {pair_logits.shape} vs targets {(2 * a, fh, fw)}")
    if binary_logits.shape != (a, fh, fw):
        raise ShapeError(f"binary logits {binary_logits.shape} vs targets {(a, fh, fw)}")

    active = targets.cls_pair >= 0
    if not active.any():
        raise ContractError("all anchors are ignored; nothing to classify")

    groups = []
    for value in (1, 0):
        sel = targets.cls_pair == value
        if sel.any():
            ai, ii, ji = np.nonzero(sel)
            rows = _gather_pair_rows(pair_logits, ai, ii, ji, fh, fw)
            labels = np.full(ai.shape[0], value, dtype=np.int64)
            groups.append((rows, labels))
    if class_balanced and len(groups) == 2:
        pair_loss = (
            softmax_cross_entropy(groups[0][0], groups[0][1])
            + softmax_cross_entropy(groups[1][0], groups[1][1])
        ) * 0.5
    elif class_balanced:
        pair_loss = softmax_cross_entropy(groups[0][0], groups[0][1])
    else:
        ai, ii, ji = np.nonzero(active)
        rows = _gather_pair_rows(pair_logits, ai, ii, ji, fh, fw)
        pair_loss = softmax_cross_entropy(rows, targets.cls_pair[active].astype(np.int64))

    flat_logits = binary_logits.reshape(a * fh * fw)
    flat_labels = targets.cls_binary.reshape(-1)
    if class_balanced:
        parts = []
        for value in (1.0, 0.0):
            sel = np.nonzero(flat_labels == value)[0]
            if sel.size:
                parts.append(bce_with_logits(flat_logits.take(sel), flat_labels[sel]))
        binary_loss = (parts[0] + parts[1]) * 0.5 if len(parts) == 2 else parts[0]
    else:
        binary_loss = bce_with_logits(flat_logits, flat_labels)
    return pair_loss, binary_loss


def regression_loss(reg_logits: Tensor, targets: LabelTargets) -> Tensor:
    """Smooth-L1 over the offsets of positive anchors."""
    a, fh, fw = targets.cls_pair.shape
    if reg_logits.shape != (4 * a, fh, fw):
        raise ShapeError(f"reg logits {reg_logits.shape} vs targets {(4 * a, fh, fw)}")
    ai, ii, ji = np.nonzero(targets.cls_pair == 1)
    if ai.size == 0:
        warnings.warn("no positive anchors; regression loss is 0", stacklevel=2)
        return Tensor(0.0)
    idx = np.stack([((4 * ai + k) * fh + ii) * fw + ji for k in range(4)], axis=1)
    pred = reg_logits.take(idx)
    want = targets.reg[ai, ii, ji, :]
    return smooth_l1(pred, want)


def total_loss(pair_loss: Tensor, binary_loss: Tensor, reg_loss: Tensor, weights: LossWeights) -> Tensor:
    """cls = pair_weight * pair + binary; total = cls_weight * cls + reg."""
    cls = pair_loss * weights.pair_weight + binary_loss
    return cls * weights.cls_weight + reg_loss
