"""Synthetic tracking sequences, training triplets, and dataset directory I/O.

Sequences are fully determined by their spec (seed included): a textured
target bounces around a textured background while its appearance slowly
drifts; optional attributes layer on deformation, occlusion, scale change,
clutter distractors, motion blur, or illumination swings. Ground truth is
the exact integer rectangle the target texture was painted into.

The directory layout matches the common OTB arrangement::

    <name>/img/000001.png, 000002.png, ...
    <name>/groundtruth_rect.txt       one "x,y,w,h" per line
    <name>/attributes.txt             optional, one attribute per line
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .crops import search_crop, search_side, template_crop
from .rpn_head import xywh_to_cxcywh
from .tensor import ContractError


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


ATTRIBUTES = (
    "deformation",
    "occlusion",
    "scale_variation",
    "background_clutter",
    "motion_blur",
    "illumination_variation",
)


@dataclass(frozen=True)
class SequenceSpec:
    length: int = 100
    height: int = 150
    width: int = 200
    seed: int = 0
    attributes: tuple[str, ...] = ()
    base_size: tuple[int, int] = (26, 22)  # (w, h) in pixels
    speed: float = 2.0
    background: str = "texture"  # or "flat"
    name: str = ""

    def resolved_name(self) -> str:
        return self.name or f"synth{self.seed:05d}"

    def validate(self) -> None:
        if self.length < 2:
            raise ContractError(f"sequence length must be >= 2, got {self.length}")
        unknown = set(self.attributes) - set(ATTRIBUTES)
        if unknown:
            raise ContractError(f"unknown attributes {sorted(unknown)}; known: {ATTRIBUTES}")
        if self.background not in ("texture", "flat"):
            raise ContractError(f"background must be 'texture' or 'flat', got {self.background!r}")
        max_w = int(self.base_size[0] * 1.7) + 2
        max_h = int(self.base_size[1] * 1.7) + 2
        if max_w >= self.width - 4 or max_h >= self.height - 4:
            raise ContractError(f"target {self.base_size} too large for {self.width}x{self.height} frames")


@dataclass
class SequenceRecord:
    name: str
    frames: list[np.ndarray]          # [H,W,3] float64 in [0,1]
    boxes: np.ndarray                 # [N,4] xywh, integer-valued floats
    attributes: tuple[str, ...]
    occluder_boxes: np.ndarray | None = None  # [N,4] when the occlusion attribute is on

    @property
    def length(self) -> int:
        return len(self.frames)


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [h,w,3] with edge clamping; centers aligned."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    tl = img[y0[:, None], x0[None, :]]
    tr = img[y0[:, None], x1[None, :]]
    bl = img[y1[:, None], x0[None, :]]
    br = img[y1[:, None], x1[None, :]]
    return tl * (1 - fx) * (1 - fy) + tr * fx * (1 - fy) + bl * (1 - fx) * fy + br * fx * fy


def _paint(frame: np.ndarray, x: int, y: int, texture: np.ndarray) -> None:
    h, w = texture.shape[:2]
    fh, fw = frame.shape[:2]
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, fw), min(y + h, fh)
    if x1 <= x0 or y1 <= y0:
        return
    frame[y0:y1, x0:x1] = texture[y0 - y : y1 - y, x0 - x : x1 - x]


def _box_blur_1d(frame: np.ndarray, axis: int, k: int = 3) -> np.ndarray:
    pad = [(0, 0), (0, 0), (0, 0)]
    pad[axis] = (k // 2, k // 2)
    padded = np.pad(frame, pad, mode="edge")
    out = np.zeros_like(frame)
    for i in range(k):
        sl = [slice(None)] * 3
        sl[axis] = slice(i, i + frame.shape[axis])
        out += padded[tuple(sl)]
    return out / k


def generate_sequence(spec: SequenceSpec) -> SequenceRecord:
    """Render a sequence; identical specs give bit-identical output."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, fh, fw = spec.length, spec.height, spec.width
    attrs = set(spec.attributes)

    if spec.background == "flat":
        background = np.full((fh, fw, 3), 0.5)
    else:
        low = rng.uniform(0.15, 0.75, size=(fh // 16 + 2, fw // 16 + 2, 3))
        background = _bilinear_resize(low, fh, fw)
        if "background_clutter" in attrs:
            background = np.clip((background - 0.45) * 1.6 + 0.45, 0.0, 1.0)

    distractors = []
    if "background_clutter" in attrs:
        for _ in range(3):
            dw = int(rng.integers(spec.base_size[0] - 6, spec.base_size[0] + 8))
            dh = int(rng.integers(spec.base_size[1] - 6, spec.base_size[1] + 8))
            dx = int(rng.integers(2, fw - dw - 2))
            dy = int(rng.integers(2, fh - dh - 2))
            tex = rng.uniform(0.25, 1.0, size=(dh, dw, 3))
            distractors.append((dx, dy, tex))

    base_w, base_h = spec.base_size
    tex_hi = int(base_h * 2)
    tex_wi = int(base_w * 2)
    tex_a = rng.uniform(0.25, 1.0, size=(tex_hi, tex_wi, 3))
    tex_b = rng.uniform(0.25, 1.0, size=(tex_hi, tex_wi, 3))

    angle = rng.uniform(0, 2 * math.pi)
    vx = spec.speed * math.cos(angle)
    vy = spec.speed * math.sin(angle)
    max_w = int(base_w * 1.7) + 1
    max_h = int(base_h * 1.7) + 1
    cx = rng.uniform(fw * 0.35, fw * 0.65)
    cy = rng.uniform(fh * 0.35, fh * 0.65)

    phase_scale = rng.uniform(0, 2 * math.pi)
    phase_deform = rng.uniform(0, 2 * math.pi)
    phase_light = rng.uniform(0, 2 * math.pi)

    occ = None
    if "occlusion" in attrs:
        occ_w = int(base_w * 1.3) + 2
        occ_h = int(base_h * 1.3) + 2
        occ_tex = rng.uniform(0.1, 0.6, size=(occ_h, occ_w, 3))
        occ_speed = max(spec.speed * 1.5, 2.5)
        occ_angle = angle + math.pi / 2
        occ = {
            "w": occ_w,
            "h": occ_h,
            "tex": occ_tex,
            "vx": occ_speed * math.cos(occ_angle),
            "vy": occ_speed * math.sin(occ_angle),
            "mid": n // 2,
        }

    frames: list[np.ndarray] = []
    boxes = np.zeros((n, 4))
    occ_boxes = np.zeros((n, 4)) if occ else None
    centers = np.zeros((n, 2))

    # precompute the trajectory so the occluder can aim at the midpoint center
    px, py = cx, cy
    for t in range(n):
        centers[t] = (px, py)
        px += vx
        py += vy
        margin_x = max_w / 2 + 2
        margin_y = max_h / 2 + 2
        if px < margin_x or px > fw - margin_x:
            vx = -vx
            px = float(np.clip(px, margin_x, fw - margin_x))
        if py < margin_y or py > fh - margin_y:
            vy = -vy
            py = float(np.clip(py, margin_y, fh - margin_y))

    for t in range(n):
        frame = background.copy()
        for dx, dy, tex in distractors:
            _paint(frame, dx, dy, tex)

        scale = 1.0
        if "scale_variation" in attrs:
            scale *= 1.0 + 0.3 * math.sin(2 * math.pi * t / 40.0 + phase_scale)
        deform = 1.0
        if "deformation" in attrs:
            deform = 1.0 + 0.25 * math.sin(2 * math.pi * t / 23.0 + phase_deform)
        w_t = max(6, int(round(base_w * scale * deform)))
        h_t = max(6, int(round(base_h * scale / deform)))

        drift = 0.5 * t / max(n - 1, 1)
        tex_t = (1.0 - drift) * tex_a + drift * tex_b
        target = _bilinear_resize(tex_t, h_t, w_t)

        x_t = int(round(centers[t, 0] - w_t / 2.0))
        y_t = int(round(centers[t, 1] - h_t / 2.0))
        x_t = int(np.clip(x_t, 0, fw - w_t))
        y_t = int(np.clip(y_t, 0, fh - h_t))
        _paint(frame, x_t, y_t, target)
        boxes[t] = (x_t, y_t, w_t, h_t)

        if occ is not None:
            mid = occ["mid"]
            ocx = centers[mid, 0] + (t - mid) * occ["vx"]
            ocy = centers[mid, 1] + (t - mid) * occ["vy"]
            ox = int(round(ocx - occ["w"] / 2.0))
            oy = int(round(ocy - occ["h"] / 2.0))
            _paint(frame, ox, oy, occ["tex"])
            occ_boxes[t] = (ox, oy, occ["w"], occ["h"])

        if "illumination_variation" in attrs:
            gain = 1.0 + 0.35 * math.sin(2 * math.pi * t / 31.0 + phase_light)
            frame = frame * gain
        if "motion_blur" in attrs:
            frame = _box_blur_1d(frame, axis=1 if abs(vx) >= abs(vy) else 0)

        frames.append(np.clip(frame, 0.0, 1.0))

    return SequenceRecord(
        name=spec.resolved_name(),
        frames=frames,
        boxes=boxes,
        attributes=tuple(spec.attributes),
        occluder_boxes=occ_boxes,
    )


def benchmark_specs(n_sequences: int = 8, base_seed: int = 1000, length: int = 60) -> list[SequenceSpec]:
    """A fixed battery of specs covering every attribute at least once."""
    combos = [
        ("deformation",),
        ("occlusion",),
        ("scale_variation",),
        ("background_clutter",),
        ("illumination_variation",),
        ("deformation", "scale_variation"),
        ("occlusion", "background_clutter"),
        ("motion_blur",),
    ]
    specs = []
    for i in range(n_sequences):
        specs.append(
            SequenceSpec(
                length=length,
                seed=base_seed + i,
                attributes=combos[i % len(combos)],
                speed=1.5 + 0.5 * (i % 3),
                name=f"bench{i:02d}",
            )
        )
    return specs


# -- training triplets ---------------------------------------------------------------


@dataclass(frozen=True)
class TripletConfig:
    window: int = 50
    noise_sigma: float = 0.05
    noise_prob: float = 0.3
    search_from_successor: bool = True
    center_jitter: float = 0.12  # search-center jitter as a fraction of the crop side

    def validate(self) -> None:
        if self.window < 3:
            raise ContractError(f"triplet window must be >= 3, got {self.window}")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ContractError(f"noise_prob outside [0,1]: {self.noise_prob}")


@dataclass
class TrainingTriplet:
    initial_crop: np.ndarray      # [3,T,T]
    accumulated_crop: np.ndarray  # [3,T,T]
    current_crop: np.ndarray      # [3,T,T]
    search_image: np.ndarray      # [3,S,S]
    search_gt_xywh: np.ndarray    # in search-crop pixels
    indices: tuple[int, int, int, int]  # (initial, accumulated, current, search)
    sequence_name: str
    noise_applied: tuple[bool, bool]


def draw_triplet_indices(
    n: int, tcfg: TripletConfig, rng: np.random.Generator, name: str = "?"
) -> tuple[int, int, int, int]:
    """Frame indices (initial, accumulated, current, search) for one sample.

    All four come from one window of at most ``tcfg.window`` consecutive
    frames, with (accumulated, current) a consecutive pair.
    """
    need = 3 if tcfg.search_from_successor else 2
    if n < need:
        raise DataError(f"sequence {name} has {n} frames; need at least {need}")
    window = min(tcfg.window, n)
    start = int(rng.integers(0, n - window + 1))
    end = start + window
    # the consecutive pair needs room for the search successor inside the window
    last_pair_start = end - (3 if tcfg.search_from_successor else 2)
    t_acc = int(rng.integers(start, last_pair_start + 1))
    t_cur = t_acc + 1
    t_init = int(rng.integers(start, end))
    t_search = t_cur + 1 if tcfg.search_from_successor else t_cur
    return t_init, t_acc, t_cur, t_search


def sample_triplet(
    record: SequenceRecord,
    template_size: int,
    search_size: int,
    tcfg: TripletConfig,
    rng: np.random.Generator,
) -> TrainingTriplet:
    """Draw (initial, consecutive pair) templates plus the following search frame.

    The search crop is centered on the current-template box (with a little
    jitter), the way inference sees the world.
    """
    tcfg.validate()
    t_init, t_acc, t_cur, t_search = draw_triplet_indices(
        record.length, tcfg, rng, name=record.name
    )

    crops = []
    noise_applied = []
    for which, t in (("initial", t_init), ("accumulated", t_acc), ("current", t_cur)):
        crop = template_crop(record.frames[t], xywh_to_cxcywh(record.boxes[t]), template_size)
        if which != "initial":
            hit = bool(rng.uniform() < tcfg.noise_prob)
            noise_applied.append(hit)
            if hit:
                crop = np.clip(crop + rng.normal(0.0, tcfg.noise_sigma, size=crop.shape), 0.0, 1.0)
        crops.append(crop)

    ref = record.boxes[t_cur]
    ref_center = np.array([ref[0] + ref[2] / 2.0, ref[1] + ref[3] / 2.0])
    jitter = rng.uniform(-1.0, 1.0, size=2)
    side = search_side(ref[2], ref[3], template_size, search_size)
    center = ref_center + jitter * tcfg.center_jitter * side
    crop, scale = search_crop(
        record.frames[t_search], (center[0], center[1]), (ref[2], ref[3]), template_size, search_size
    )
    gt = record.boxes[t_search]
    origin_x = center[0] - side / 2.0
    origin_y = center[1] - side / 2.0
    gt_crop = np.array(
        [
            (gt[0] - origin_x) / scale,
            (gt[1] - origin_y) / scale,
            gt[2] / scale,
            gt[3] / scale,
        ]
    )
    return TrainingTriplet(
        initial_crop=crops[0],
        accumulated_crop=crops[1],
        current_crop=crops[2],
        search_image=crop,
        search_gt_xywh=gt_crop,
        indices=(t_init, t_acc, t_cur, t_search),
        sequence_name=record.name,
        noise_applied=tuple(noise_applied),
    )


# -- directory I/O -------------------------------------------------------------------------


def write_sequence_dir(record: SequenceRecord, root) -> Path:
    """Write PNG frames plus ground truth; returns the sequence directory."""
    seq_dir = Path(root) / record.name
    img_dir = seq_dir / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(record.frames):
        arr = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(img_dir / f"{i + 1:06d}.png")
    lines = []
    for b in record.boxes:
        vals = [int(v) if float(v).is_integer() else float(v) for v in b]
        lines.append(",".join(str(v) for v in vals))
    (seq_dir / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
    if record.attributes:
        (seq_dir / "attributes.txt").write_text("\n".join(record.attributes) + "\n")
    return seq_dir


def parse_box_line(line: str, path: str, lineno: int) -> np.ndarray:
    """One 'x,y,w,h' row; commas, tabs, or whitespace all accepted."""
    raw = line.replace(",", " ").replace("\t", " ").split()
    if len(raw) != 4:
        raise DataError(f"{path}:{lineno}: expected 4 values, got {len(raw)}")
    try:
        vals = [float(v) for v in raw]
    except ValueError as e:
        raise DataError(f"{path}:{lineno}: {e}") from None
    return np.asarray(vals)


def load_ground_truth(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing ground-truth file {path}")
    boxes = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        boxes.append(parse_box_line(line, str(path), i))
    if not boxes:
        raise DataError(f"{path}: no boxes")
    return np.stack(boxes)


def load_sequence_dir(path) -> SequenceRecord:
    seq_dir = Path(path)
    img_dir = seq_dir / "img"
    if not img_dir.is_dir():
        raise DataError(f"{seq_dir}: no img/ directory")
    files = sorted(img_dir.glob("*.png"))
    if not files:
        raise DataError(f"{img_dir}: no PNG frames")
    boxes = load_ground_truth(seq_dir / "groundtruth_rect.txt")
    if len(files) != boxes.shape[0]:
        raise DataError(
            f"{seq_dir}: {len(files)} frames but {boxes.shape[0]} ground-truth rows"
        )
    frames = []
    for f in files:
        with Image.open(f) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
    attrs: tuple[str, ...] = ()
    attr_file = seq_dir / "attributes.txt"
    if attr_file.is_file():
        attrs = tuple(a.strip() for a in attr_file.read_text().splitlines() if a.strip())
    return SequenceRecord(name=seq_dir.name, frames=frames, boxes=boxes, attributes=attrs)
