"""Split evaluation: per-frame predictions, aggregate metrics, canonical reports.

A report always carries two trivial baselines next to the model numbers:
the zero predictor (count 0 everywhere, whose MAE is the split's mean
ground-truth count) and the mean predictor (the split's mean ground-truth
count for every frame).  Desk-scale results are only meaningful relative
to those.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics
from .model import FlowRegressor, IncompatibleCheckpointError, load_checkpoint
from .training import predict_density


def manifest_hash(manifest) -> str:
    doc = json.dumps(manifest.to_dict(), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


@dataclass
class FrameRecord:
    frame_id: tuple  # (sequence, index)
    gt_count: float
    pred_count: float
    abs_error: float
    game_cells_error: float  # per-cell L1 distance of this frame's maps


@dataclass
class EvalReport:
    split: str
    checkpoint: str
    manifest_hash: str
    records: list
    mae: float
    rmse: float
    game: dict  # level -> value
    game_fixed_grid: float
    baselines: dict
    grid_size: tuple  # (width, height)
    created: float = field(default_factory=time.time)

    def to_dict(self, include_timestamp: bool = True) -> dict:
        doc = {
            "split": self.split,
            "checkpoint": self.checkpoint,
            "manifest_hash": self.manifest_hash,
            "mae": self.mae,
            "rmse": self.rmse,
            "game": {str(k): v for k, v in self.game.items()},
            "game_fixed_grid": self.game_fixed_grid,
            "baselines": self.baselines,
            "grid_size": list(self.grid_size),
            "frames": [
                {
                    "sequence": r.frame_id[0],
                    "index": r.frame_id[1],
                    "gt_count": r.gt_count,
                    "pred_count": r.pred_count,
                    "abs_error": r.abs_error,
                    "game_cells_error": r.game_cells_error,
                }
                for r in self.records
            ],
        }
        if include_timestamp:
            doc["created"] = self.created
        return doc


def _round_floats(obj, digits=6):
    if isinstance(obj, float):
        return float(f"{obj:.{digits}g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, digits) for v in obj]
    return obj


def canonical_report_json(report: EvalReport) -> str:
    """Stable serialization: sorted keys, 6 significant digits, no timestamp."""
    return json.dumps(_round_floats(report.to_dict(include_timestamp=False)),
                      sort_keys=True, indent=2) + "\n"


@dataclass
class EvalResult:
    report: EvalReport
    gt_maps: list
    pred_maps: list
    frame_keys: list  # (sequence, index) aligned with the maps


def _check_checkpoint_against_manifest(config, manifest) -> None:
    mismatched = []
    if config.in_width != manifest.image_size[0]:
        mismatched.append("in_width")
    if config.in_height != manifest.image_size[1]:
        mismatched.append("in_height")
    if mismatched:
        raise IncompatibleCheckpointError(
            "checkpoint incompatible with dataset preprocessing, field(s): "
            + ", ".join(mismatched))


def evaluate(checkpoint, manifest, split: str = "test", game_levels=(0, 1, 2, 3),
             sigma: float = 1.0, max_frames: int = 0,
             predictor=None, grid=None) -> EvalResult:
    """Run the model over a split's frame pairs and aggregate the metrics.

    ``checkpoint`` is a path or an already constructed FlowRegressor.  For
    testing, ``predictor`` may replace the model with any callable mapping
    (prev_image, curr_image, gt_density) to a predicted density array, with
    ``grid`` fixing the GT rasterization resolution.
    """
    ckpt_name = "<in-memory>"
    if predictor is None:
        if isinstance(checkpoint, FlowRegressor):
            regressor = checkpoint
        else:
            regressor, _ = load_checkpoint(checkpoint)
            ckpt_name = str(checkpoint)
        _check_checkpoint_against_manifest(regressor.config, manifest)
        eval_grid = regressor.config.grid_shape

        def predictor(prev_img, curr_img, gt_density):
            prev_n = data_mod.normalize_image(prev_img, manifest.mean, manifest.std)
            curr_n = data_mod.normalize_image(curr_img, manifest.mean, manifest.std)
            density, _ = predict_density(regressor, prev_n, curr_n)
            return density.values
    else:
        eval_grid = grid if grid is not None else _default_eval_grid(manifest)

    keys = data_mod.pair_centers(manifest, split)
    if not keys:
        raise ValueError(f"split {split!r} has no evaluable frame pairs")
    if max_frames and len(keys) > max_frames:
        keys = keys[:max_frames]

    records, gt_maps, pred_maps, frame_keys = [], [], [], []
    for seq, t in keys:
        prev_img, curr_img, _, gt_density = data_mod.load_pair(
            manifest, seq, t, eval_grid, sigma)
        pred_values = np.asarray(predictor(prev_img, curr_img, gt_density),
                                 dtype=np.float64)
        gt_values = gt_density.values
        gt_count = float(gt_values.sum())
        pred_count = float(pred_values.sum())
        records.append(FrameRecord(
            frame_id=(seq, t),
            gt_count=gt_count,
            pred_count=pred_count,
            abs_error=abs(gt_count - pred_count),
            game_cells_error=float(np.abs(gt_values - pred_values).sum()),
        ))
        gt_maps.append(gt_values)
        pred_maps.append(pred_values)
        frame_keys.append((seq, t))

    gt_counts = [r.gt_count for r in records]
    pred_counts = [r.pred_count for r in records]
    zero_counts = [0.0] * len(records)
    mean_gt = float(np.mean(gt_counts))
    mean_counts = [mean_gt] * len(records)

    report = EvalReport(
        split=split,
        checkpoint=ckpt_name,
        manifest_hash=manifest_hash(manifest),
        records=records,
        mae=metrics.mae(gt_counts, pred_counts),
        rmse=metrics.rmse(gt_counts, pred_counts),
        game=metrics.game_levels(gt_maps, pred_maps, game_levels),
        game_fixed_grid=metrics.game_per_cell(gt_maps, pred_maps),
        baselines={
            "zero_mae": metrics.mae(gt_counts, zero_counts),
            "zero_rmse": metrics.rmse(gt_counts, zero_counts),
            "mean_mae": metrics.mae(gt_counts, mean_counts),
            "mean_rmse": metrics.rmse(gt_counts, mean_counts),
        },
        grid_size=(np.asarray(gt_maps[0]).shape[1], np.asarray(gt_maps[0]).shape[0]),
    )
    return EvalResult(report=report, gt_maps=gt_maps, pred_maps=pred_maps,
                      frame_keys=frame_keys)


def _default_eval_grid(manifest):
    from .flowgrid import GridShape
    w, h = manifest.image_size
    return GridShape(width=max(w // 8, 1), height=max(h // 8, 1))


def write_report(result: EvalResult, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(canonical_report_json(result.report))
    return path
