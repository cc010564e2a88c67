"""Heatmap and overlay rendering for evaluated frames.

Every emitted PNG carries text metadata with the color-scale maximum and
the counts, so downstream checks can read the scale back without decoding
pixels.  GT and prediction of one frame always share a color scale.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from . import data as data_mod
from .evaluation import EvalResult


def _upsample_nearest(values: np.ndarray, size) -> np.ndarray:
    w, h = size
    im = Image.fromarray(values.astype(np.float32), mode="F")
    return np.asarray(im.resize((w, h), Image.NEAREST), dtype=np.float64)


def colorize(values: np.ndarray, vmax: float, cmap: str = "viridis") -> np.ndarray:
    """Map non-negative values to RGB uint8 with a fixed maximum."""
    cm = matplotlib.colormaps[cmap]
    normed = np.clip(values / vmax, 0.0, 1.0) if vmax > 0 else np.zeros_like(values)
    return (cm(normed)[..., :3] * 255.0 + 0.5).astype(np.uint8)


def _save_png(path: Path, rgb: np.ndarray, meta: dict) -> None:
    info = PngInfo()
    for k, v in meta.items():
        info.add_text(k, str(v))
    Image.fromarray(rgb).save(path, pnginfo=info)


def _overlay_png(path, frame, gt_up, pred_up, vmax, gt_count, pred_count, meta, cmap):
    fig, axes = plt.subplots(1, 2, figsize=(8, 4.2))
    for ax, heat, title, cnt in (
        (axes[0], gt_up, "ground truth", gt_count),
        (axes[1], pred_up, "prediction", pred_count),
    ):
        ax.imshow(frame)
        ax.imshow(heat, cmap=cmap, vmin=0.0, vmax=max(vmax, 1e-12), alpha=0.55)
        ax.set_title(f"{title}: {cnt:.2f}")
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, metadata={k: str(v) for k, v in meta.items()})
    plt.close(fig)


def emit_visuals(result: EvalResult, manifest, out_dir, frames=None,
                 cmap: str = "viridis") -> list:
    """Write per-frame GT/prediction heatmaps and a side-by-side overlay.

    ``frames`` selects (sequence, index) keys; default is every evaluated
    frame.  File names follow <seq>_<idx>_{gt,pred,overlay}.png.  Returns
    the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wanted = set(map(tuple, frames)) if frames is not None else None
    image_size = manifest.image_size
    written = []
    for (seq, idx), gt_map, pred_map in zip(result.frame_keys, result.gt_maps,
                                            result.pred_maps):
        if wanted is not None and (seq, idx) not in wanted:
            continue
        gt_v = np.asarray(gt_map, dtype=np.float64)
        pred_v = np.asarray(pred_map, dtype=np.float64)
        vmax = float(max(gt_v.max(), pred_v.max()))
        gt_count = float(gt_v.sum())
        pred_count = float(pred_v.sum())
        meta = {"vmax": repr(vmax), "gt_count": repr(gt_count),
                "pred_count": repr(pred_count), "sequence": seq, "index": idx}
        frame = data_mod.load_frame(manifest.root, seq, idx)
        frame = data_mod.resize_image(frame, image_size)
        gt_up = _upsample_nearest(gt_v, image_size)
        pred_up = _upsample_nearest(pred_v, image_size)
        stem = f"{seq}_{idx:04d}"
        p_gt = out_dir / f"{stem}_gt.png"
        p_pred = out_dir / f"{stem}_pred.png"
        p_overlay = out_dir / f"{stem}_overlay.png"
        _save_png(p_gt, colorize(gt_up, vmax, cmap), meta)
        _save_png(p_pred, colorize(pred_up, vmax, cmap), meta)
        _overlay_png(p_overlay, frame, gt_up, pred_up, vmax, gt_count, pred_count,
                     meta, cmap)
        written.extend([p_gt, p_pred, p_overlay])
    return written
