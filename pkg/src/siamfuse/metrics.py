"""Tracking metrics, aggregation, reports, and result-file I/O.

Success and SR use strict IoU > threshold; precision uses center error <= tau.
A perfect run therefore scores success AUC 20/21 (IoU 1.0 fails the last
threshold 1.0) while precision, AO, and SR all reach 1.0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .data_synth import DataError, parse_box_line
from .rpn_head import iou_xywh
from .tensor import ContractError

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.linspace(0.0, 50.0, 51)
PRECISION_TAU = 20.0

METRIC_KEYS = ("success_auc", "precision", "ao", "sr50", "sr75")


def _as_nonempty_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ContractError(f"{name} must be nonempty")
    return arr


def success_curve(ious) -> np.ndarray:
    """Fraction of frames with IoU strictly above each of 21 thresholds."""
    arr = _as_nonempty_array(ious, "ious")
    return np.array([(arr > t).mean() for t in SUCCESS_THRESHOLDS])


def success_auc(ious) -> float:
    return float(success_curve(ious).mean())


def precision_curve(errors) -> np.ndarray:
    arr = _as_nonempty_array(errors, "center errors")
    return np.array([(arr <= t).mean() for t in PRECISION_THRESHOLDS])


def precision_at(errors, tau: float = PRECISION_TAU) -> float:
    arr = _as_nonempty_array(errors, "center errors")
    return float((arr <= tau).mean())


def ao_sr(ious) -> tuple[float, float, float]:
    """Average overlap plus strict success rates at 0.5 and 0.75."""
    arr = _as_nonempty_array(ious, "ious")
    return float(arr.mean()), float((arr > 0.5).mean()), float((arr > 0.75).mean())


def center_errors(pred_xywh: np.ndarray, gt_xywh: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred_xywh, dtype=np.float64)
    gt = np.asarray(gt_xywh, dtype=np.float64)
    dp = (pred[:, :2] + pred[:, 2:] / 2.0) - (gt[:, :2] + gt[:, 2:] / 2.0)
    return np.sqrt((dp**2).sum(axis=1))


@dataclass
class RunResult:
    """One tracked sequence with everything needed to score it."""

    sequence: str
    pred_xywh: np.ndarray
    gt_xywh: np.ndarray
    ious: np.ndarray
    errors: np.ndarray
    attributes: tuple[str, ...] = ()

    @staticmethod
    def from_boxes(sequence: str, pred_xywh, gt_xywh, attributes: tuple[str, ...] = ()) -> "RunResult":
        pred = np.asarray(pred_xywh, dtype=np.float64)
        gt = np.asarray(gt_xywh, dtype=np.float64)
        if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 4:
            raise ContractError(f"box arrays must both be [N,4]; got {pred.shape} vs {gt.shape}")
        ious = np.array([iou_xywh(p, g) for p, g in zip(pred, gt)])
        return RunResult(
            sequence=sequence,
            pred_xywh=pred,
            gt_xywh=gt,
            ious=ious,
            errors=center_errors(pred, gt),
            attributes=tuple(attributes),
        )

    def metrics(self) -> dict[str, float]:
        ao, sr50, sr75 = ao_sr(self.ious)
        return {
            "success_auc": success_auc(self.ious),
            "precision": precision_at(self.errors),
            "ao": ao,
            "sr50": sr50,
            "sr75": sr75,
        }


def aggregate(runs: list[RunResult]) -> dict[str, float]:
    """Equal-weight mean of per-sequence metrics, regardless of length."""
    if not runs:
        raise ContractError("no runs to aggregate")
    per_seq = [r.metrics() for r in runs]
    return {k: float(np.mean([m[k] for m in per_seq])) for k in METRIC_KEYS}


def aggregate_curves(runs: list[RunResult]) -> tuple[np.ndarray, np.ndarray]:
    """Equal-weight mean success and precision curves over sequences."""
    if not runs:
        raise ContractError("no runs to aggregate")
    succ = np.mean([success_curve(r.ious) for r in runs], axis=0)
    prec = np.mean([precision_curve(r.errors) for r in runs], axis=0)
    return succ, prec


def attribute_breakdown(runs: list[RunResult]) -> dict[str, dict[str, float]]:
    """Aggregate metrics restricted to sequences tagged with each attribute."""
    out: dict[str, dict[str, float]] = {}
    tags = sorted({a for r in runs for a in r.attributes})
    for tag in tags:
        subset = [r for r in runs if tag in r.attributes]
        stats = aggregate(subset)
        stats["num_sequences"] = float(len(subset))
        out[tag] = stats
    return out


# -- report files -----------------------------------------------------------


def report_rows(runs: list[RunResult], config_name: str = "default") -> list[dict[str, Any]]:
    """One row per sequence plus an equal-weight aggregate row."""
    rows = []
    for r in runs:
        row: dict[str, Any] = {
            "config": config_name,
            "sequence": r.sequence,
            "frames": int(r.ious.size),
        }
        row.update(r.metrics())
        rows.append(row)
    agg: dict[str, Any] = {
        "config": config_name,
        "sequence": "ALL",
        "frames": int(sum(r.ious.size for r in runs)),
    }
    agg.update(aggregate(runs))
    rows.append(agg)
    return rows


def write_report(base_path, rows: list[dict[str, Any]]) -> tuple[Path, Path]:
    """Write rows to <base>.json and <base>.csv; returns both paths."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path = base.with_suffix(".json")
    csv_path = base.with_suffix(".csv")
    json_path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with csv_path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
    return json_path, csv_path


def write_curve_csv(path, thresholds: np.ndarray, values: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["threshold,value"]
    for t, v in zip(thresholds, values):
        lines.append(f"{float(t)!r},{float(v)!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


# -- tracker result files -----------------------------------------------------


def write_result_boxes(path, boxes_xywh: np.ndarray) -> Path:
    """One "x,y,w,h" line per frame; the first line is the init box."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(repr(float(v)) for v in row) for row in np.asarray(boxes_xywh)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_result_boxes(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing results file {path}")
    boxes = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        boxes.append(parse_box_line(line, str(path), i))
    if not boxes:
        raise DataError(f"{path}: no boxes")
    return np.stack(boxes)


def write_confidences(path, confidences: np.ndarray) -> Path:
    """Sidecar "frame_index,confidence" rows, frame indices starting at 1."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["frame_index,confidence"]
    for i, c in enumerate(np.asarray(confidences).ravel(), start=1):
        lines.append(f"{i},{float(c)!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_confidences(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing confidence file {path}")
    values = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("frame_index"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DataError(f"{path}:{i}: expected 'frame_index,confidence', got {line!r}")
        try:
            idx = int(parts[0])
            val = float(parts[1])
        except ValueError as e:
            raise DataError(f"{path}:{i}: {e}") from None
        if idx != len(values) + 1:
            raise DataError(f"{path}:{i}: frame index {idx}, expected {len(values) + 1}")
        values.append(val)
    if not values:
        raise DataError(f"{path}: no confidence rows")
    return np.asarray(values)


# -- configuration comparison --------------------------------------------------


@dataclass
class AblationRow:
    name: str
    failed: bool = False
    error: str = ""
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class AblationTable:
    rows: list[AblationRow]
    deltas: dict[str, dict[str, float]]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "rows": [
                {"name": r.name, "failed": r.failed, "error": r.error, "metrics": r.metrics}
                for r in self.rows
            ],
            "deltas": self.deltas,
        }

    def to_csv_lines(self) -> list[str]:
        header = ["name", "failed"] + list(METRIC_KEYS)
        lines = [",".join(header)]
        for r in self.rows:
            cells = [r.name, str(r.failed).lower()]
            for k in METRIC_KEYS:
                cells.append(repr(r.metrics[k]) if k in r.metrics else "")
            lines.append(",".join(cells))
        return lines


def ablation_report(
    configs: list[tuple[str, Any]],
    runner: Callable[[Any], list[RunResult]],
) -> AblationTable:
    """Score every named config with ``runner`` on the same data.

    A config whose run raises is recorded as a failed row and the remaining
    configs still run. Deltas are pairwise differences of aggregate metrics
    between every ordered pair of successful rows.
    """
    if len(configs) < 2:
        raise ContractError(f"need at least 2 configs to compare, got {len(configs)}")
    rows: list[AblationRow] = []
    for name, cfg in configs:
        try:
            runs = runner(cfg)
            rows.append(AblationRow(name=name, metrics=aggregate(runs)))
        except Exception as e:  # noqa: BLE001 - a broken config must not sink the table
            rows.append(AblationRow(name=name, failed=True, error=f"{type(e).__name__}: {e}"))
    deltas: dict[str, dict[str, float]] = {}
    ok = [r for r in rows if not r.failed]
    for a in ok:
        for b in ok:
            if a.name == b.name:
                continue
            deltas[f"{a.name}-{b.name}"] = {
                k: a.metrics[k] - b.metrics[k] for k in METRIC_KEYS
            }
    return AblationTable(rows=rows, deltas=deltas)
