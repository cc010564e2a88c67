"""Weakly-supervised optimization of the flow regressor.

The loss never sees ground-truth flows, only per-frame density maps: each
triplet yields four directed flow predictions whose reconstructed densities
must match the ground truth, whose consecutive intervals must conserve
people (with exits read off the backward prediction's exterior channel),
and whose forward/backward pairs must be temporal mirrors of each other.

The loop is deterministic for a fixed seed: data order and augmentation
draws are derived statelessly from (seed, epoch, position), so resuming
from a checkpoint replays the exact remaining schedule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .flowgrid import (
    EXTERIOR,
    DensityMap,
    channel_sum,
    conservation_values,
    symmetry_values,
)
from .model import (
    FlowRegressor,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)


@dataclass(frozen=True)
class LossWeights:
    lambda_density: float = 1.0
    lambda_conservation: float = 1.0
    lambda_symmetry: float = 1.0

    def __post_init__(self):
        for name in ("lambda_density", "lambda_conservation", "lambda_symmetry"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    batch_size: int = 4
    max_steps: int = 1000
    eval_interval: int = 200
    checkpoint_interval: int = 500
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    fusion_mode: str = None  # overrides the model's mode when set
    sigma: float = 1.0  # GT rasterization kernel width, grid cells
    augment: bool = True
    crop_fraction: float = 0.9
    eval_max_pairs: int = 0  # 0 = use every validation pair

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.fusion_mode is not None and self.fusion_mode != self.model.fusion_mode:
            object.__setattr__(self, "model", replace(self.model, fusion_mode=self.fusion_mode))


@dataclass
class TrainState:
    step: int = 0
    best_val_mae: float = math.inf

    def rng_record(self, config: TrainConfig) -> dict:
        # Data order and augmentation draws are pure functions of
        # (seed, epoch, position), so the seed plus the step counter is the
        # complete rng state.
        return {"scheme": "stateless-per-epoch", "seed": config.seed, "step": self.step}


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    initial_loss: float
    final_loss: float
    best_val_mae: float
    steps_run: int


def flow_losses(flow_fwd1, flow_fwd2, flow_bwd1, flow_bwd2,
                gt_prev, gt_curr, gt_next, weights: LossWeights):
    """Loss terms from four directed flow predictions and three GT densities.

    All flows are INCOMING-layout tensors (..., H, W, 10); the ground truth
    densities are (..., H, W).  Returns (total, breakdown) where the
    breakdown holds the unweighted per-term means and the total is their
    weighted sum.
    """
    density = (
        ((channel_sum(flow_fwd1) - gt_curr) ** 2).mean()
        + ((channel_sum(flow_fwd2) - gt_next) ** 2).mean()
        + ((channel_sum(flow_bwd1) - gt_prev) ** 2).mean()
        + ((channel_sum(flow_bwd2) - gt_curr) ** 2).mean()
    )
    exits_next = flow_bwd2[..., EXTERIOR]
    conservation = (conservation_values(flow_fwd1, flow_fwd2, exits_next) ** 2).mean()
    symmetry = ((symmetry_values(flow_fwd1, flow_bwd1) ** 2).mean()
                + (symmetry_values(flow_fwd2, flow_bwd2) ** 2).mean())
    total = (weights.lambda_density * density
             + weights.lambda_conservation * conservation
             + weights.lambda_symmetry * symmetry)
    def _scalar(x):
        return float(x.detach()) if torch.is_tensor(x) else float(x)

    breakdown = {
        "density": _scalar(density),
        "conservation": _scalar(conservation),
        "symmetry": _scalar(symmetry),
        "total": _scalar(total),
    }
    return total, breakdown


def _images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images])
    return torch.as_tensor(arr, dtype=dtype).permute(0, 3, 1, 2)


def _densities_to_tensor(densities, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([d.values if isinstance(d, DensityMap) else np.asarray(d)
                    for d in densities])
    return torch.as_tensor(arr, dtype=dtype)


def triplet_loss(regressor, triplet, weights: LossWeights = LossWeights()):
    """Surrogate loss of one (normalized) frame triplet; (total, breakdown)."""
    dtype = next(regressor.parameters()).dtype if hasattr(regressor, "parameters") \
        else torch.float32
    prev = _images_to_tensor(triplet.images[:1], dtype)
    curr = _images_to_tensor(triplet.images[1:2], dtype)
    nxt = _images_to_tensor(triplet.images[2:3], dtype)
    gt_prev = _densities_to_tensor(triplet.densities[:1], dtype)
    gt_curr = _densities_to_tensor(triplet.densities[1:2], dtype)
    gt_next = _densities_to_tensor(triplet.densities[2:3], dtype)
    f1, f2, b1, b2 = regressor.triplet_flows(prev, curr, nxt)
    return flow_losses(f1, f2, b1, b2, gt_prev, gt_curr, gt_next, weights)


def predict_density(regressor: FlowRegressor, frame_prev, frame_curr):
    """Inference path: density map reconstructed from the predicted flow.

    Returns (DensityMap, count); frames must already be normalized the same
    way the training data was.
    """
    flow = regressor.regress_flow(frame_prev, frame_curr)
    density = DensityMap(flow.shape, channel_sum(flow.values))
    return density, float(density.values.sum())


def validation_counts(regressor, manifest, split, sigma, max_pairs=0):
    """Count MAE / RMSE of the regressor over a split's frame pairs."""
    grid = regressor.config.grid_shape
    keys = data_mod.pair_centers(manifest, split)
    if max_pairs and len(keys) > max_pairs:
        stride = len(keys) / max_pairs
        keys = [keys[int(i * stride)] for i in range(max_pairs)]
    if not keys:
        return math.nan, math.nan
    errors = []
    for seq, t in keys:
        prev_img, curr_img, pts, _ = data_mod.load_pair(manifest, seq, t, grid, sigma)
        prev_img = data_mod.normalize_image(prev_img, manifest.mean, manifest.std)
        curr_img = data_mod.normalize_image(curr_img, manifest.mean, manifest.std)
        _, pred_count = predict_density(regressor, prev_img, curr_img)
        errors.append(pred_count - float(len(pts)))
    errors = np.asarray(errors)
    return float(np.abs(errors).mean()), float(np.sqrt((errors ** 2).mean()))


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _load_batch(manifest, keys, grid, config: TrainConfig, epoch: int, positions):
    triplets = []
    for pos, (seq, t) in zip(positions, keys):
        tri = data_mod.load_triplet(manifest, seq, t, grid, config.sigma)
        if config.augment:
            rng = np.random.default_rng([config.seed, epoch, pos])
            tri = data_mod.augment(tri, rng, crop_fraction=config.crop_fraction,
                                   mean=manifest.mean, std=manifest.std)
        else:
            tri = data_mod.normalize_triplet(tri, manifest.mean, manifest.std)
        triplets.append(tri)
    prev = _images_to_tensor([t.images[0] for t in triplets])
    curr = _images_to_tensor([t.images[1] for t in triplets])
    nxt = _images_to_tensor([t.images[2] for t in triplets])
    gt_prev = _densities_to_tensor([t.densities[0] for t in triplets])
    gt_curr = _densities_to_tensor([t.densities[1] for t in triplets])
    gt_next = _densities_to_tensor([t.densities[2] for t in triplets])
    return prev, curr, nxt, gt_prev, gt_curr, gt_next


def _make_optimizer(config: TrainConfig, regressor) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(regressor.parameters(), lr=config.learning_rate)
    return torch.optim.Adam(regressor.parameters(), lr=config.learning_rate)


def _dump_diagnostic(out_dir: Path, step, breakdown, regressor, batch_keys):
    doc = {
        "step": step,
        "loss": breakdown,
        "batch": [list(k) for k in batch_keys],
        "parameter_norms": {
            name: float(p.detach().norm()) for name, p in regressor.named_parameters()
        },
    }
    path = out_dir / "diagnostic.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def train(config: TrainConfig, manifest, out_dir, resume_from=None) -> TrainResult:
    """Run the optimization loop; returns paths to checkpoints and the log.

    Writes ``train_log.jsonl`` (one record per step, one per evaluation),
    ``best.ckpt`` (lowest validation MAE so far) and ``final.ckpt``.
    Aborts with FloatingPointError and a diagnostic dump when the loss
    stops being finite.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    state = TrainState()
    if resume_from is not None:
        regressor, ckpt_manifest = load_checkpoint(resume_from)
        if regressor.config != config.model:
            raise ValueError("resume checkpoint was trained with a different model config")
        state.step = ckpt_manifest["step"]
        state.best_val_mae = ckpt_manifest.get("meta", {}).get("best_val_mae", math.inf)
        optimizer = _make_optimizer(config, regressor)
        opt_state = ckpt_manifest.get("optimizer")
        if opt_state is not None:
            _restore_optimizer(optimizer, regressor, opt_state)
    else:
        regressor = FlowRegressor(config.model)
        optimizer = _make_optimizer(config, regressor)

    grid = regressor.config.grid_shape
    keys = data_mod.triplet_centers(manifest, "train")
    if not keys and config.max_steps > state.step:
        raise ValueError("training split has no usable triplets")
    steps_per_epoch = max(1, math.ceil(len(keys) / config.batch_size)) if keys else 1

    log_path = out_dir / "train_log.jsonl"
    log_file = log_path.open("a")
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"

    def _checkpoint(path):
        meta = {"best_val_mae": state.best_val_mae,
                "normalization": {"mean": list(manifest.mean), "std": list(manifest.std)},
                "image_size": list(manifest.image_size),
                "sigma": config.sigma}
        save_checkpoint(path, regressor, step=state.step, optimizer=optimizer,
                        rng_record=state.rng_record(config), meta=meta)

    initial_loss = math.nan
    final_loss = math.nan
    try:
        while state.step < config.max_steps:
            epoch = state.step // steps_per_epoch
            batch_index = state.step % steps_per_epoch
            perm = _epoch_permutation(config.seed, epoch, len(keys))
            lo = batch_index * config.batch_size
            batch_ids = perm[lo:lo + config.batch_size]
            batch_keys = [keys[i] for i in batch_ids]
            tensors = _load_batch(manifest, batch_keys, grid, config, epoch, batch_ids)

            optimizer.zero_grad()
            quad = regressor.triplet_flows(tensors[0], tensors[1], tensors[2])
            total, breakdown = flow_losses(*quad, tensors[3], tensors[4], tensors[5],
                                           config.loss_weights)
            if not math.isfinite(breakdown["total"]):
                path = _dump_diagnostic(out_dir, state.step, breakdown, regressor, batch_keys)
                raise FloatingPointError(
                    f"non-finite loss at step {state.step}; diagnostic at {path}")
            total.backward()
            optimizer.step()
            state.step += 1

            if math.isnan(initial_loss):
                initial_loss = breakdown["total"]
            final_loss = breakdown["total"]
            log_file.write(json.dumps({
                "step": state.step,
                "loss_total": breakdown["total"],
                "loss_density": breakdown["density"],
                "loss_conservation": breakdown["conservation"],
                "loss_symmetry": breakdown["symmetry"],
                "lr": config.learning_rate,
            }) + "\n")
            log_file.flush()

            if config.eval_interval and state.step % config.eval_interval == 0:
                val_mae, val_rmse = validation_counts(
                    regressor, manifest, "val", config.sigma, config.eval_max_pairs)
                log_file.write(json.dumps(
                    {"step": state.step, "val_mae": val_mae, "val_rmse": val_rmse}) + "\n")
                log_file.flush()
                if math.isfinite(val_mae) and val_mae < state.best_val_mae:
                    state.best_val_mae = val_mae
                    _checkpoint(best_path)

            if config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                _checkpoint(out_dir / "latest.ckpt")

        _checkpoint(final_path)
        if not best_path.exists():
            _checkpoint(best_path)
    finally:
        log_file.close()

    return TrainResult(
        final_checkpoint=final_path,
        best_checkpoint=best_path,
        log_path=log_path,
        initial_loss=initial_loss,
        final_loss=final_loss,
        best_val_mae=state.best_val_mae,
        steps_run=state.step,
    )


def _restore_optimizer(optimizer, regressor, opt_state) -> None:
    params = list(regressor.parameters())
    state_dict = optimizer.state_dict()
    new_state = {}
    for idx, slots in enumerate(opt_state["state"]):
        if slots is None or idx >= len(params):
            continue
        new_state[idx] = {
            "step": torch.tensor(float(slots["step"])),
            "exp_avg": slots["exp_avg"].clone(),
            "exp_avg_sq": slots["exp_avg_sq"].clone(),
        }
    state_dict["state"] = new_state
    optimizer.load_state_dict(state_dict)
