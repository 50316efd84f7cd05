"""Frame-by-frame inference with a threshold-gated template refresh.

State carries three template feature maps. The initial one is written once
and never touched again; the current one is re-extracted whenever the
confidence gate opens; the accumulated one is the fusion block's output and
serves as the correlation kernel history. Selection on each frame follows
the usual Siamese-RPN recipe: decode every anchor, damp implausible size
and ratio jumps, blend in a cosine window, take the argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .crops import search_crop, template_crop
from .model import TrackerModel
from .rpn_head import ContractError, cxcywh_to_xywh, decode_boxes, xywh_to_cxcywh
from .template_fusion import TemplateTriple
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class TrackerConfig:
    update_threshold: float = 1.18
    pair_weight: float = 1.0      # weight of the softmax branch in the confidence sum
    binary_weight: float = 1.0    # weight of the BCE branch
    window_influence: float = 0.30
    penalty_k: float = 0.16
    box_smoothing: float = 0.30
    update_score: str = "penalized"  # "penalized" or "raw"
    allow_updates: bool = True
    min_box_size: float = 4.0

    def validate(self) -> None:
        if self.update_score not in ("penalized", "raw"):
            raise ContractError(f"update_score must be 'penalized' or 'raw', got {self.update_score!r}")
        if not 0.0 <= self.window_influence <= 1.0:
            raise ContractError(f"window_influence outside [0,1]: {self.window_influence}")
        if self.pair_weight < 0 or self.binary_weight < 0:
            raise ContractError("confidence weights must be non-negative")

    @property
    def max_confidence(self) -> float:
        return self.pair_weight + self.binary_weight


@dataclass
class TrackState:
    box: np.ndarray                # (cx, cy, w, h) in frame pixels
    initial: np.ndarray            # template features, never mutated
    accumulated: np.ndarray
    current: np.ndarray
    frame_shape: tuple[int, int]   # (H, W)
    updates: int = 0


@dataclass
class FrameResult:
    box_xywh: np.ndarray
    confidence: float
    raw_confidence: float
    rejected: bool = False
    updated: bool = False


def init_state(frame: np.ndarray, gt_xywh, model: TrackerModel, tcfg: TrackerConfig) -> TrackState:
    tcfg.validate()
    gt = np.asarray(gt_xywh, dtype=np.float64)
    if gt.shape != (4,) or gt[2] <= 0 or gt[3] <= 0:
        raise ContractError(f"bad init box {gt_xywh}")
    box = xywh_to_cxcywh(gt)
    crop = template_crop(frame, box, model.cfg.backbone.template_size)
    feat = model.extract(crop).data
    feat.flags.writeable = False
    return TrackState(
        box=box,
        initial=feat,
        accumulated=feat.copy(),
        current=feat.copy(),
        frame_shape=frame.shape[:2],
    )


def _softmax_pos(pair: np.ndarray, num_anchors: int) -> np.ndarray:
    """Positive-class probability per anchor from [2A,h,w] logits."""
    z = pair.reshape(num_anchors, 2, pair.shape[1], pair.shape[2])
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _context_size(w, h):
    pad = (w + h) * 0.5
    return np.sqrt((w + pad) * (h + pad))


def _cosine_window(num_anchors: int, fh: int, fw: int) -> np.ndarray:
    win = np.outer(np.hanning(fh), np.hanning(fw))
    return np.broadcast_to(win, (num_anchors, fh, fw))


def track_frame(
    frame: np.ndarray,
    state: TrackState,
    model: TrackerModel,
    tcfg: TrackerConfig,
) -> FrameResult:
    """Locate the target in ``frame`` and advance ``state.box``."""
    if frame.shape[:2] != state.frame_shape:
        raise ShapeError(f"frame shape {frame.shape[:2]} changed from {state.frame_shape}")
    bb = model.cfg.backbone
    prev = state.box

    triple = TemplateTriple(Tensor(state.initial), Tensor(state.accumulated), Tensor(state.current))
    crop, scale = search_crop(frame, (prev[0], prev[1]), (prev[2], prev[3]), bb.template_size, bb.search_size)
    search_feat = model.extract(crop)
    pair, binary, reg = model.predict(triple, search_feat)

    grid = model.anchor_grid()
    a = grid.num_anchors
    p_pos = _softmax_pos(pair.data, a)
    p_bin = _sigmoid(binary.data)
    conf = tcfg.pair_weight * p_pos + tcfg.binary_weight * p_bin

    offsets = reg.data.reshape(a, 4, grid.feat_h, grid.feat_w).transpose(0, 2, 3, 1)
    cand = decode_boxes(offsets, grid)  # (cx, cy, w, h) in crop pixels

    prev_w_crop = prev[2] / scale
    prev_h_crop = prev[3] / scale
    sz_c = _context_size(cand[..., 2], cand[..., 3])
    sz_p = _context_size(prev_w_crop, prev_h_crop)
    s_c = np.maximum(sz_c / sz_p, sz_p / sz_c)
    ratio_p = prev_w_crop / prev_h_crop
    ratio_c = cand[..., 2] / cand[..., 3]
    r_c = np.maximum(ratio_p / ratio_c, ratio_c / ratio_p)
    penalty = np.exp(-(r_c * s_c - 1.0) * tcfg.penalty_k)

    pscore = penalty * conf
    if not (np.isfinite(pscore).all() and np.isfinite(cand).all()):
        return FrameResult(
            box_xywh=cxcywh_to_xywh(prev.copy()),
            confidence=0.0,
            raw_confidence=0.0,
            rejected=True,
        )

    windowed = pscore * (1.0 - tcfg.window_influence) + _cosine_window(
        a, grid.feat_h, grid.feat_w
    ) * tcfg.window_influence
    flat = int(np.argmax(windowed))
    idx = np.unravel_index(flat, windowed.shape)

    chosen = cand[idx]
    cx = (chosen[0] - bb.search_size / 2.0) * scale + prev[0]
    cy = (chosen[1] - bb.search_size / 2.0) * scale + prev[1]
    w_new = chosen[2] * scale
    h_new = chosen[3] * scale

    ema = float(np.clip(pscore[idx] * tcfg.box_smoothing, 0.0, 1.0))
    w_s = prev[2] * (1.0 - ema) + w_new * ema
    h_s = prev[3] * (1.0 - ema) + h_new * ema

    fh, fw = state.frame_shape
    box = np.array(
        [
            np.clip(cx, 0.0, fw - 1.0),
            np.clip(cy, 0.0, fh - 1.0),
            np.clip(w_s, tcfg.min_box_size, float(fw)),
            np.clip(h_s, tcfg.min_box_size, float(fh)),
        ]
    )
    state.box = box

    raw_conf = float(conf[idx])
    gated = float(pscore[idx]) if tcfg.update_score == "penalized" else raw_conf
    return FrameResult(
        box_xywh=cxcywh_to_xywh(box.copy()),
        confidence=gated,
        raw_confidence=raw_conf,
    )


def maybe_update_template(
    frame: np.ndarray,
    result: FrameResult,
    state: TrackState,
    model: TrackerModel,
    tcfg: TrackerConfig,
) -> bool:
    """Refresh templates when the gate opens. Returns whether an update ran.

    The new current features come from a fresh crop at the just-predicted
    box; the accumulated features are re-fused with that new current so the
    next frame correlates against the refreshed history.
    """
    if not tcfg.allow_updates or result.rejected:
        return False
    if result.confidence <= tcfg.update_threshold:
        return False
    crop = template_crop(frame, state.box, model.cfg.backbone.template_size)
    current_new = model.extract(crop).data
    fused = model.fuse(
        TemplateTriple(Tensor(state.initial), Tensor(state.accumulated), Tensor(current_new))
    ).data
    state.current = current_new
    state.accumulated = fused.copy()
    state.updates += 1
    result.updated = True
    return True


@dataclass
class TrackRun:
    boxes_xywh: np.ndarray        # [N,4], row 0 is the init box
    confidences: np.ndarray       # [N], 1.0 for the init frame
    updated: np.ndarray           # [N] bool
    rejected: np.ndarray          # [N] bool

    @property
    def num_frames(self) -> int:
        return self.boxes_xywh.shape[0]


def track_sequence(
    model: TrackerModel,
    frames,
    init_box_xywh,
    tcfg: TrackerConfig | None = None,
) -> TrackRun:
    """Track through an iterable of frames; the first frame carries the init box."""
    tcfg = tcfg or TrackerConfig()
    frames = iter(frames)
    try:
        first = next(frames)
    except StopIteration:
        raise ContractError("cannot track an empty sequence") from None
    state = init_state(first, init_box_xywh, model, tcfg)
    boxes = [np.asarray(init_box_xywh, dtype=np.float64)]
    confs = [1.0]
    updated = [False]
    rejected = [False]
    for frame in frames:
        res = track_frame(frame, state, model, tcfg)
        maybe_update_template(frame, res, state, model, tcfg)
        boxes.append(res.box_xywh)
        confs.append(res.confidence)
        updated.append(res.updated)
        rejected.append(res.rejected)
    return TrackRun(
        boxes_xywh=np.stack(boxes),
        confidences=np.asarray(confs),
        updated=np.asarray(updated, dtype=bool),
        rejected=np.asarray(rejected, dtype=bool),
    )
