"""``earseg`` command-line entry point.

Exit codes: 0 success, 2 input error, 3 state/parse error, 1 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import Checkpoint, CheckpointError
from .config import COMMANDS, LAYOUTS, ConfigError, RunConfig
from .dataio import DatasetError, load_dataset, save_dataset, synth_vessels
from .evaluation import cross_validate, crossval_csv, evaluate, predict_masks
from .trainer import (
    TrainingDiverged,
    build_error_maps,
    generate_initial_masks,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("earseg")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_STATE = 0, 1, 2, 3

# stage-1 epochs when neither the config file nor --epochs sets them
STAGE1_EPOCHS = {"drive": 50, "stare": 40, "generic": 50}


class InputError(RuntimeError):
    pass


class StateError(RuntimeError):
    pass


def build_parser():
    p = argparse.ArgumentParser(prog="earseg", description="Two-stage error-attention vessel segmentation")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="stage-1 epochs for train, stage-2 epochs for refine")
    p.add_argument("--layout", choices=LAYOUTS)
    p.add_argument("--out", help="output directory")
    p.add_argument("--train-root", help="training dataset root")
    p.add_argument("--test-root", help="test dataset root")
    p.add_argument("--no-fov", action="store_true", help="count metrics over all pixels")
    p.add_argument("--folds", type=int, help="run k-fold cross-validation")
    p.add_argument("--checkpoint", help="explicit checkpoint path")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.command = args.command
    if args.seed is not None:
        cfg.seed = args.seed
    if args.layout:
        cfg.layout = args.layout
    if args.out:
        cfg.out = args.out
    if args.train_root:
        cfg.train_root = args.train_root
    if args.test_root:
        cfg.test_root = args.test_root
    if args.no_fov:
        cfg.use_fov = False
    if args.folds is not None:
        cfg.folds = args.folds
    if not _sets_stage1_epochs(args.config):
        cfg.train = replace(cfg.train, stage1_epochs=STAGE1_EPOCHS[cfg.layout])
    if args.epochs is not None:
        field_name = "stage2_epochs" if args.command == "refine" else "stage1_epochs"
        cfg.train = replace(cfg.train, **{field_name: args.epochs})
    # re-run validation after overrides
    return RunConfig.from_dict(cfg.to_dict())


def _sets_stage1_epochs(path) -> bool:
    if not path:
        return False
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return "stage1_epochs" in (raw.get("train") or {})


def cache_dir(cfg: RunConfig) -> Path:
    return Path(os.environ.get("EARSEG_CACHE_DIR") or Path(cfg.out) / "cache")


def _load(root, layout, what="dataset"):
    if not root:
        raise InputError(f"no {what} root configured")
    if not Path(root).is_dir():
        raise InputError(f"{what} path does not exist: {root}")
    return load_dataset(root, layout)


def latest_checkpoint(out: Path, stage: str) -> Path | None:
    d = out / "checkpoints" / stage
    if not d.is_dir():
        return None
    found = [(int(m.group(1)), p) for p in d.glob("*.ckpt") if (m := re.fullmatch(r"(\d+)\.ckpt", p.name))]
    return max(found)[1] if found else None


def _snapshot(cfg: RunConfig):
    cfg.save(Path(cfg.out) / "config.resolved.json")


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    rng = np.random.default_rng(cfg.seed)
    s = cfg.synth
    train = synth_vessels(s.n_train, s.size, rng, prefix="train")
    test = synth_vessels(s.n_test, s.size, rng, prefix="test")
    cfg.train_root = str(save_dataset(train, out / "data" / "train"))
    cfg.test_root = str(save_dataset(test, out / "data" / "test"))
    cfg.layout = "generic"
    cfg.save(out / "config.json")
    _snapshot(cfg)
    print(f"wrote {len(train)} training and {len(test)} test samples; config at {out / 'config.json'}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    samples = _load(cfg.train_root, cfg.layout, "training dataset")
    out = Path(cfg.out)
    _snapshot(cfg)
    ckpt = train_stage1(samples, cfg.train, log_path=out / "logs" / "train.csv",
                        ckpt_dir=out / "checkpoints" / "stage1")
    print(f"stage1 done: {ckpt.epoch} epochs, checkpoint "
          f"{out / 'checkpoints' / 'stage1' / f'{cfg.train.stage1_epochs}.ckpt'}")
    return EXIT_OK


def _read_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc


def cmd_refine(cfg: RunConfig, checkpoint=None) -> int:
    out = Path(cfg.out)
    path = Path(checkpoint) if checkpoint else latest_checkpoint(out, "stage1")
    if path is None or not path.is_file():
        raise InputError(f"no stage-1 checkpoint found under {out / 'checkpoints' / 'stage1'}")
    ck1 = _read_checkpoint(path)
    samples = _load(cfg.train_root, cfg.layout, "training dataset")
    _snapshot(cfg)
    cache = cache_dir(cfg)
    masks = generate_initial_masks(ck1, samples, cache / "masks")
    ems = build_error_maps(samples, masks.masks, cache / "errormaps", masks.key)
    stats = {"mask_forward_passes": masks.forward_passes, "mask_cache_hit": masks.cache_hit,
             "cache_key": masks.key, "stage1_checkpoint": str(path)}
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "logs" / "refine.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    print(f"stage-1 masks: {masks.forward_passes} forward passes"
          + (" (cache hit)" if masks.cache_hit else ""))
    ck2 = train_stage2(ck1, samples, ems, cfg.train, log_path=out / "logs" / "train.csv",
                       ckpt_dir=out / "checkpoints" / "stage2")
    print(f"stage2 done: {cfg.train.stage2_epochs} epochs, final "
          f"ea_loss {ck2.meta['history'][-1]['lea'] if cfg.train.stage2_epochs else float('nan'):.4f}")
    return EXIT_OK


def _eval_targets(out: Path, checkpoint=None):
    if checkpoint:
        ck = _read_checkpoint(checkpoint)
        name = "refined" if ck.has_eam() else "baseline"
        return [(name, ck)]
    targets = []
    for stage, name in (("stage1", "baseline"), ("stage2", "refined")):
        p = latest_checkpoint(out, stage)
        if p is not None:
            targets.append((name, _read_checkpoint(p)))
    if not targets:
        raise InputError(f"no checkpoints found under {out / 'checkpoints'}")
    return targets


def cmd_evaluate(cfg: RunConfig, checkpoint=None) -> int:
    out = Path(cfg.out)
    if cfg.folds:
        return cmd_crossval(cfg)
    targets = _eval_targets(out, checkpoint)
    samples = _load(cfg.test_root or cfg.train_root, cfg.layout, "evaluation dataset")
    _snapshot(cfg)
    print(f"{'model':<10} ACC     SP      SE      mIoU")
    for name, ck in targets:
        rep = evaluate(ck, samples, fuse=name == "refined", use_fov=cfg.use_fov,
                       overlay_dir=out / "reports" / "overlays" / name)
        rep.write(out / "reports" / name)
        a = rep.aggregate
        print(f"{name:<10} {a['acc']:.4f}  {a['sp']:.4f}  {a['se']:.4f}  {a['miou_pct']:.2f}")
    return EXIT_OK


def cmd_crossval(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    samples = _load(cfg.train_root, cfg.layout, "dataset")
    k = cfg.folds or 4
    _snapshot(cfg)
    result = cross_validate(samples, k, cfg.train, cfg.use_fov, workdir=out / "crossval")
    result["fov_restricted"] = cfg.use_fov
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / "crossval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    (out / "reports" / "crossval.csv").write_text(crossval_csv(result))
    print(f"{'row':<8}{'model':<10} ACC     SP      SE      mIoU")
    for f in result["folds"] + [dict(result["mean"], fold="mean")]:
        label = f"fold{f['fold']}" if f["fold"] != "mean" else "mean"
        for model in ("baseline", "refined"):
            m = f[model]
            print(f"{label:<8}{model:<10} {m['acc']:.4f}  {m['sp']:.4f}  {m['se']:.4f}  {m['miou_pct']:.2f}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, checkpoint=None) -> int:
    out = Path(cfg.out)
    samples = _load(cfg.test_root or cfg.train_root, cfg.layout, "dataset")
    name, ck = _eval_targets(out, checkpoint)[-1]
    preds = predict_masks(ck, samples, fuse=name == "refined")
    dest = out / "predictions" / name
    dest.mkdir(parents=True, exist_ok=True)
    for sid, m in preds.items():
        Image.fromarray(m.astype(np.uint8) * 255).save(dest / f"{sid}.png")
    print(f"wrote {len(preds)} masks to {dest}")
    return EXIT_OK


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cmd = cfg.command
        if cmd == "synth":
            return cmd_synth(cfg)
        if cmd == "train":
            return cmd_train(cfg)
        if cmd == "refine":
            return cmd_refine(cfg, args.checkpoint)
        if cmd == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
        if cmd == "crossval":
            return cmd_crossval(cfg)
        return cmd_predict(cfg, args.checkpoint)
    except (InputError, DatasetError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CheckpointError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except TrainingDiverged as exc:
        path = Path(resolve_config(args).out) / "checkpoints" / "diverged.ckpt"
        exc.checkpoint.save(path)
        print(f"error: {exc}; last good checkpoint saved to {path}", file=sys.stderr)
        return EXIT_STATE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
