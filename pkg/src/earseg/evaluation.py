"""Confusion-matrix metrics, reports, cross-validation and overlays."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import Checkpoint
from .dataio import make_folds
from .errormaps import binarize

log = logging.getLogger(__name__)

METRIC_KEYS = ("acc", "sp", "se", "miou")
CSV_COLUMNS = ["id", "tp", "tn", "fp", "fn", "acc", "sp", "se", "miou", "miou_pct"]

TP_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)
# TN pixels show the image dimmed to this ceiling so they never equal a marker color
TN_CEILING = 191


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred, gt, fov=None) -> ConfusionCounts:
    """Count TP/TN/FP/FN, restricted to ``fov == 1`` when a FOV mask is given."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != gt shape {gt.shape}")
    if fov is None:
        sel = np.ones(gt.shape, dtype=bool)
    else:
        sel = np.asarray(fov).astype(bool)
        if sel.shape != gt.shape:
            raise ValueError(f"fov shape {sel.shape} != gt shape {gt.shape}")
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & gt & sel)),
        tn=int(np.count_nonzero(~pred & ~gt & sel)),
        fp=int(np.count_nonzero(pred & ~gt & sel)),
        fn=int(np.count_nonzero(~pred & gt & sel)),
    )


def _ratio(num, den, name, degenerate):
    if den == 0:
        degenerate.append(name)
        return 1.0
    return num / den


def metrics(c: ConfusionCounts) -> dict:
    """ACC, SE, SP and two-class mIoU (fraction and percent).

    A zero denominator means there was nothing to get wrong, so the metric
    is set to 1 and its name is listed under ``degenerate``.
    """
    if c.total <= 0:
        raise ValueError("no pixels were evaluated")
    deg: list[str] = []
    iou_fg = _ratio(c.tp, c.tp + c.fp + c.fn, "iou_vessel", deg)
    iou_bg = _ratio(c.tn, c.tn + c.fp + c.fn, "iou_background", deg)
    out = {
        "acc": (c.tp + c.tn) / c.total,
        "se": _ratio(c.tp, c.tp + c.fn, "se", deg),
        "sp": _ratio(c.tn, c.tn + c.fp, "sp", deg),
        "miou": 0.5 * (iou_fg + iou_bg),
    }
    out["miou_pct"] = 100.0 * out["miou"]
    if deg:
        log.debug("degenerate metrics: %s", ", ".join(deg))
    out["degenerate"] = deg
    return out


def mean_metrics(rows: list[dict]) -> dict:
    """Macro average of metric dicts (used across folds)."""
    if not rows:
        raise ValueError("nothing to average")
    out = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS}
    out["miou_pct"] = 100.0 * out["miou"]
    return out


def _counts_dict(c: ConfusionCounts):
    return {"tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn}


@dataclass
class MetricsReport:
    per_image: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    aggregate_all_pixels: dict | None = None

    @classmethod
    def from_counts(cls, counts: dict, meta=None, all_pixel_counts: dict | None = None):
        if not counts:
            raise ValueError("no samples")
        rows, total = [], ConfusionCounts()
        for sid in sorted(counts):
            c = counts[sid]
            rows.append({"id": sid, **_counts_dict(c), **metrics(c)})
            total = total + c
        agg = {"id": "aggregate", **_counts_dict(total), **metrics(total)}
        rep = cls(rows, agg, dict(meta or {}))
        if all_pixel_counts is not None:
            t = ConfusionCounts()
            for c in all_pixel_counts.values():
                t = t + c
            rep.aggregate_all_pixels = {"id": "aggregate_all_pixels", **_counts_dict(t), **metrics(t)}
        return rep

    def to_dict(self):
        d = {"meta": self.meta, "per_image": self.per_image, "aggregate": self.aggregate}
        if self.aggregate_all_pixels is not None:
            d["aggregate_all_pixels"] = self.aggregate_all_pixels
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        rows = self.per_image + [self.aggregate]
        if self.aggregate_all_pixels is not None:
            rows.append(self.aggregate_all_pixels)
        for r in rows:
            w.writerow([r["id"], r["tp"], r["tn"], r["fp"], r["fn"]]
                       + [f"{r[k]:.6f}" for k in ("acc", "sp", "se", "miou")]
                       + [f"{r['miou_pct']:.2f}"])
        return buf.getvalue()

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        jp, cp = stem.with_suffix(".json"), stem.with_suffix(".csv")
        jp.write_text(self.to_json())
        cp.write_text(self.to_csv())
        return jp, cp

    def summary_line(self) -> str:
        a = self.aggregate
        return f"ACC {a['acc']:.4f}  SP {a['sp']:.4f}  SE {a['se']:.4f}  mIoU {a['miou_pct']:.2f}"


def predict_masks(ckpt: Checkpoint, samples, fuse=False, lam=None, mu=None) -> dict:
    """Eval-mode binary predictions keyed by sample id."""
    from .trainer import SegModel, predict_logits

    if fuse and not ckpt.has_eam():
        raise ValueError("checkpoint has no attention weights; cannot evaluate with fusion")
    cfg = ckpt.meta.get("config", {})
    lam = cfg.get("lam", 0.5) if lam is None else lam
    mu = cfg.get("mu", 0.5) if mu is None else mu
    model = SegModel.from_tensors(ckpt.tensors, with_eam=fuse)
    return {s.id: binarize(predict_logits(model, s.image, fuse, lam, mu)[0]) for s in samples}


def evaluate(ckpt: Checkpoint, samples, fuse=False, use_fov=True, overlay_dir=None) -> MetricsReport:
    """Run inference on every sample and report per-image and micro-aggregated metrics.

    With ``use_fov`` and at least one FOV mask present, the report also carries
    an all-pixel aggregate so both counting modes can be compared.
    """
    if not samples:
        raise ValueError("no samples")
    preds = predict_masks(ckpt, samples, fuse)
    counts, all_counts = {}, {}
    for s in samples:
        fov = s.fov if use_fov else None
        counts[s.id] = confusion(preds[s.id], s.gt, fov)
        all_counts[s.id] = confusion(preds[s.id], s.gt)
        if overlay_dir is not None:
            save_overlay(Path(overlay_dir) / f"{s.id}.png", s.image, preds[s.id], s.gt)
    has_fov = any(s.fov is not None for s in samples)
    meta = {
        "fuse": bool(fuse),
        "fov_restricted": bool(use_fov and has_fov),
        "stage": ckpt.meta.get("stage"),
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "n_samples": len(samples),
    }
    return MetricsReport.from_counts(
        counts, meta, all_counts if (use_fov and has_fov) else None)


def cross_validate(samples, k: int, cfg, use_fov=True, workdir=None) -> dict:
    """Two-stage protocol on each of ``k`` contiguous folds; macro mean across folds.

    Returns ``{"folds": [...], "mean": {"baseline": ..., "refined": ...}}``
    where each fold entry holds its test ids and both aggregates.
    """
    from .trainer import build_error_maps, generate_initial_masks, train_stage1, train_stage2

    by_id = {s.id: s for s in samples}
    folds = []
    for i, (train_ids, test_ids) in enumerate(make_folds(samples, k)):
        train = [by_id[t] for t in train_ids]
        test = [by_id[t] for t in test_ids]
        fold_dir = None if workdir is None else Path(workdir) / f"fold{i}"
        log_path = None if fold_dir is None else fold_dir / "logs" / "train.csv"
        ck1 = train_stage1(train, cfg, log_path=log_path)
        masks = generate_initial_masks(ck1, train)
        ems = build_error_maps(train, masks.masks)
        ck2 = train_stage2(ck1, train, ems, cfg, log_path=log_path)
        base = evaluate(ck1, test, fuse=False, use_fov=use_fov)
        refined = evaluate(ck2, test, fuse=True, use_fov=use_fov)
        if fold_dir is not None:
            base.write(fold_dir / "baseline")
            refined.write(fold_dir / "refined")
        folds.append({"fold": i, "test_ids": test_ids,
                      "baseline": _strip(base.aggregate), "refined": _strip(refined.aggregate)})
    mean = {name: mean_metrics([f[name] for f in folds]) for name in ("baseline", "refined")}
    return {"k": k, "folds": folds, "mean": mean}


def _strip(agg: dict) -> dict:
    return {k: agg[k] for k in (*METRIC_KEYS, "miou_pct", "tp", "tn", "fp", "fn")}


def crossval_csv(result: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "model", "acc", "sp", "se", "miou_pct"])
    rows = [(f"fold{f['fold']}", f) for f in result["folds"]] + [("mean", result["mean"])]
    for label, r in rows:
        for model in ("baseline", "refined"):
            m = r[model]
            w.writerow([label, model, f"{m['acc']:.6f}", f"{m['sp']:.6f}",
                        f"{m['se']:.6f}", f"{m['miou_pct']:.2f}"])
    return buf.getvalue()


def render_overlay(image, pred, gt) -> np.ndarray:
    """uint8 RGB overlay: TP green, FP red, FN blue, TN the dimmed image."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape or np.asarray(image).shape[:2] != gt.shape:
        raise ValueError("image, prediction and gt must share H×W")
    base = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    out = np.round(base * TN_CEILING).astype(np.uint8)
    out[pred & gt] = TP_COLOR
    out[pred & ~gt] = FP_COLOR
    out[~pred & gt] = FN_COLOR
    return out


def save_overlay(path, image, pred, gt) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_overlay(image, pred, gt)).save(path)
    return path


def count_colors(overlay: np.ndarray) -> ConfusionCounts:
    """Read confusion counts back off an overlay (TN = everything untinted)."""
    def n(color):
        return int(np.all(overlay == np.array(color, dtype=np.uint8), axis=-1).sum())

    tp, fp, fn = n(TP_COLOR), n(FP_COLOR), n(FN_COLOR)
    return ConfusionCounts(tp, overlay.shape[0] * overlay.shape[1] - tp - fp - fn, fp, fn)
