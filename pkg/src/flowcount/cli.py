"""Command-line entry points: synth, train, eval, predict, oracle-check.

All subcommands accept --config pointing at one JSON file whose sections
(synth/model/train/eval plus shared "out", "dataset", "seed") drive the
whole pipeline; individual flags override the file.  Exit codes: 0 on
success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation, visuals
from .data import RenderStyle, build_synthetic_dataset, load_manifest, resize_image
from .flowgrid import DensityMap, GridShape, channel_sum, save_grid
from .model import ModelConfig, load_checkpoint
from .oracle import DEFAULT_MOVE_DISTRIBUTION, WorldConfig, invariant_violations
from .training import LossWeights, TrainConfig, predict_density, train


def _load_config(path):
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _apply_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def _resolve_paths(cfg, args):
    out = Path(args.out or cfg.get("out", "runs/flowcount"))
    dataset = Path(getattr(args, "data", None) or cfg.get("dataset", out / "data"))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    return out, dataset, seed


def _world_config(doc: dict, seed: int) -> WorldConfig:
    return WorldConfig(
        shape=GridShape(width=int(doc.get("width", 8)), height=int(doc.get("height", 8))),
        n_particles=int(doc.get("n_particles", 14)),
        n_steps=int(doc.get("n_steps", 129)),
        move_distribution=tuple(doc.get("move_distribution", DEFAULT_MOVE_DISTRIBUTION)),
        exit_probability=float(doc.get("exit_probability", 0.0)),
        entry_rate=float(doc.get("entry_rate", 0.0)),
        seed=int(doc.get("seed", seed)),
    )


def _model_config(doc: dict, seed: int) -> ModelConfig:
    doc = dict(doc)
    doc.setdefault("seed", seed)
    return ModelConfig.from_dict(doc)


def _train_config(doc: dict, model: ModelConfig, seed: int) -> TrainConfig:
    doc = dict(doc)
    weights = LossWeights(**doc.pop("loss_weights", {}))
    doc.setdefault("seed", seed)
    return TrainConfig(model=model, loss_weights=weights, **doc)


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    out, dataset, seed = _resolve_paths(cfg, args)
    synth = cfg.get("synth", {})
    world = _world_config(synth.get("world", {}), seed)
    render = RenderStyle(seed=seed, **synth.get("render", {}))
    splits = {k: int(v) for k, v in synth.get(
        "splits", {"train": 2, "val": 1, "test": 1}).items()}
    manifest = build_synthetic_dataset(
        dataset,
        base_config=world,
        n_sequences=int(synth.get("n_sequences", sum(splits.values()))),
        split_counts=splits,
        image_size=tuple(synth.get("image_size", (64, 64))),
        style=render,
        offset=int(synth.get("offset", 1)),
    )
    print(f"wrote dataset with {len(manifest.sequences)} sequences under {dataset}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out, dataset, seed = _resolve_paths(cfg, args)
    if args.deterministic:
        _apply_determinism(seed)
    manifest = load_manifest(dataset)
    model_doc = dict(cfg.get("model", {}))
    model_doc.setdefault("in_width", manifest.image_size[0])
    model_doc.setdefault("in_height", manifest.image_size[1])
    model = _model_config(model_doc, seed)
    tcfg = _train_config(cfg.get("train", {}), model, seed)
    if args.steps is not None:
        from dataclasses import replace
        tcfg = replace(tcfg, max_steps=args.steps)
    result = train(tcfg, manifest, out / "train", resume_from=args.resume)
    print(f"trained {result.steps_run} steps; loss {result.initial_loss:.4g} -> "
          f"{result.final_loss:.4g}; best val MAE {result.best_val_mae:.4g}")
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"best checkpoint:  {result.best_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    out, dataset, seed = _resolve_paths(cfg, args)
    if args.deterministic:
        _apply_determinism(seed)
    manifest = load_manifest(dataset)
    edoc = cfg.get("eval", {})
    ckpt = args.ckpt or edoc.get("checkpoint") or (out / "train" / "best.ckpt")
    split = args.split or edoc.get("split", "test")
    result = evaluation.evaluate(
        ckpt, manifest, split=split,
        game_levels=tuple(edoc.get("game_levels", (0, 1, 2, 3))),
        sigma=float(edoc.get("sigma", 1.0)),
        max_frames=int(edoc.get("max_frames", 0)),
    )
    report_path = evaluation.write_report(result, out / "eval")
    rep = result.report
    print(f"split {split}: {len(rep.records)} frames")
    print(f"mae {rep.mae:.4f}  rmse {rep.rmse:.4f}  game_fixed {rep.game_fixed_grid:.4f}")
    for lv, v in sorted(rep.game.items()):
        print(f"game({lv}) {v:.4f}")
    print(f"baselines: zero mae {rep.baselines['zero_mae']:.4f}, "
          f"mean mae {rep.baselines['mean_mae']:.4f}")
    print(f"report: {report_path}")
    n_vis = args.visuals if args.visuals is not None else int(edoc.get("visuals", 0))
    if n_vis:
        frames = result.frame_keys[:n_vis]
        paths = visuals.emit_visuals(result, manifest, out / "eval" / "visuals",
                                     frames=frames)
        print(f"wrote {len(paths)} visuals under {out / 'eval' / 'visuals'}")
    return 0


def _load_image(path, size) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return resize_image(arr, size)


def cmd_predict(args) -> int:
    cfg = _load_config(args.config)
    out, dataset, seed = _resolve_paths(cfg, args)
    ckpt = args.ckpt or (out / "train" / "best.ckpt")
    regressor, manifest_doc = load_checkpoint(ckpt)
    meta = manifest_doc.get("meta", {})
    size = (regressor.config.in_width, regressor.config.in_height)
    prev_img = _load_image(args.frames[0], size)
    curr_img = _load_image(args.frames[1], size)
    norm = meta.get("normalization")
    if norm:
        mean = np.asarray(norm["mean"], dtype=np.float32)
        std = np.asarray(norm["std"], dtype=np.float32)
        prev_img = (prev_img - mean) / std
        curr_img = (curr_img - mean) / std
    flow = regressor.regress_flow(prev_img, curr_img)
    density = DensityMap(flow.shape, channel_sum(flow.values))
    count = float(density.values.sum())
    pred_dir = Path(args.out or out / "predict")
    pred_dir.mkdir(parents=True, exist_ok=True)
    save_grid(flow, pred_dir / "flow.bin")
    save_grid(density, pred_dir / "density.bin")
    print(f"count: {count}")
    print(f"dumps: {pred_dir / 'flow.bin'} {pred_dir / 'density.bin'}")
    return 0


def cmd_oracle_check(args) -> int:
    n = args.worlds
    seed = args.seed if args.seed is not None else 0
    violations = invariant_violations(n_worlds=n, seed=seed)
    if violations:
        for v in violations:
            print(f"VIOLATION {v}", file=sys.stderr)
        print(f"{len(violations)} invariant violation(s) over {n} worlds", file=sys.stderr)
        return 1
    print(f"all flow invariants hold on {n} random worlds (seed {seed})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file driving all stages")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--out", default=None, help="run output directory")

    parser = argparse.ArgumentParser(prog="flowcount",
                                     description="people-flow video counting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="simulate worlds and write a synthetic dataset")
    p.add_argument("--data", default=None, help="dataset root (default <out>/data)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the flow regressor")
    p.add_argument("--data", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--steps", type=int, default=None, help="override max steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--visuals", type=int, default=None,
                   help="emit heatmaps for the first N frames")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common],
                       help="predict the count for one frame pair")
    p.add_argument("frames", nargs=2, help="previous and current frame image files")
    p.add_argument("--ckpt", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("oracle-check", parents=[common],
                       help="verify the exact flow invariants on random worlds")
    p.add_argument("--worlds", type=int, default=100)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point for exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
