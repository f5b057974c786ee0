"""Two-stage training: plain segmentation, then joint fine-tuning with error attention."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import FEATURE_STRIDE, Backbone, BackboneConfig
from .checkpoint import Checkpoint, config_hash
from .dataio import RetinalSample, augment_arrays
from .eam import ErrorAttention, check_fusion_weights, refine_logits, refine_logits_backward
from .errormaps import (
    align_error_map,
    binarize,
    generate_error_map,
    load_error_maps,
    save_error_maps,
)
from .layers import upsample_bilinear, upsample_bilinear_backward
from .losses import LossWeights, ce_loss, ea_loss, hm_loss, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ["stage", "epoch", "step", "lce", "lhm", "lea", "total"]


@dataclass
class TrainConfig:
    stage1_epochs: int = 50
    stage2_epochs: int = 15
    lr_stage1: float = 0.005
    lr_stage2: float = 0.001
    momentum: float = 0.9
    poly_power: float = 0.9
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    lam: float = 0.5
    mu: float = 0.5
    batch_size: int = 4
    channels: int = 32
    augment: bool = True
    detach_attention: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        check_fusion_weights(self.lam, self.mu)
        if self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise ValueError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def lr_schedule(base: float, epoch: int, total: int, power: float = 0.9) -> float:
    """Polynomial decay ``base * (1 - epoch/total) ** power``."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch must be in [0, {total}), got {epoch}")
    return base * (1.0 - epoch / total) ** power


class SegModel:
    """Trunk plus optional error-attention head, with a joint backward pass."""

    def __init__(self, channels=32, with_eam=False):
        self.backbone = Backbone(BackboneConfig(channels))
        self.eam = ErrorAttention(channels) if with_eam else None
        self._cache = None

    def leaves(self):
        out = [(f"backbone.{n}", l) for n, l in self.backbone.leaves()]
        if self.eam is not None:
            out += [(f"eam.{n}", l) for n, l in self.eam.leaves()]
        return out

    def state_dict(self):
        d = self.backbone.state_dict()
        if self.eam is not None:
            d.update(self.eam.state_dict())
        return {k: v.copy() for k, v in d.items()}

    @classmethod
    def from_tensors(cls, tensors, with_eam=None):
        channels = tensors["backbone.up.conv.weight"].shape[0]
        has_eam = any(k.startswith("eam.") for k in tensors)
        model = cls(channels, has_eam if with_eam is None else with_eam)
        model.backbone.load_state_dict(tensors)
        if model.eam is not None and has_eam:
            model.eam.load_state_dict(tensors)
        return model

    def forward(self, x, train=True, fuse=False, lam=0.5, mu=0.5):
        out = self.backbone.forward(x, train)
        if fuse:
            am = self.eam.forward(out["features"], train)
            am_up = upsample_bilinear(am, FEATURE_STRIDE)
            out.update(am=am, am_up=am_up, base_logits=out["logits"],
                       logits=refine_logits(out["logits"], am_up, lam, mu))
        self._cache = (out, fuse, lam, mu)
        return out

    def backward(self, d_logits, d_aux4, d_am=None, detach_attention=False):
        out, fuse, lam, mu = self._cache
        if not fuse:
            return self.backbone.backward(d_logits, d_aux4)
        dl, dam_up = refine_logits_backward(out["base_logits"], out["am_up"], d_logits, lam, mu)
        dam = np.zeros_like(out["am"])
        if not detach_attention:
            dam += upsample_bilinear_backward(dam_up, FEATURE_STRIDE)
        if d_am is not None:
            dam += d_am
        d_fm = self.eam.backward(dam)
        return self.backbone.backward(dl, d_aux4, d_fm)


class SGD:
    """Momentum SGD: ``v = m * v + g``, ``p -= lr * v``."""

    def __init__(self, leaves, momentum=0.9):
        self.leaves = leaves
        self.momentum = momentum
        self.buffers = {}
        for name, leaf in leaves:
            for k, p in leaf.params.items():
                self.buffers[f"{name}.{k}"] = np.zeros_like(p)

    def step(self, lr):
        for name, leaf in self.leaves:
            for k in leaf.params:
                v = self.buffers[f"{name}.{k}"]
                v *= self.momentum
                v += leaf.grads[k]
                leaf.params[k] -= lr * v

    def state_dict(self):
        return {f"opt.{k}": v.copy() for k, v in self.buffers.items()}

    def load_state_dict(self, tensors):
        for k in self.buffers:
            key = f"opt.{k}"
            if key in tensors:
                self.buffers[k] = np.asarray(tensors[key], dtype=np.float64).copy()


def pad_to_multiple(arr, multiple=8):
    """Zero-pad the first two axes (H, W) at the bottom/right."""
    h, w = arr.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return arr
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad)


def standardize(image):
    """Per-image, per-channel zero mean and unit variance."""
    mean = image.mean(axis=(0, 1), keepdims=True)
    std = image.std(axis=(0, 1), keepdims=True)
    return (image - mean) / np.maximum(std, 1e-6)


def _stack(images, masks_list):
    x = np.stack([pad_to_multiple(standardize(im)).transpose(2, 0, 1) for im in images])
    ms = [np.stack([pad_to_multiple(m) for m in ms]) for ms in masks_list]
    return x, ms


def _make_checkpoint(model, opt, cfg, stage, epoch, history):
    tensors = model.state_dict()
    if opt is not None:
        tensors.update(opt.state_dict())
    meta = {
        "stage": stage,
        "epoch": epoch,
        "channels": model.backbone.config.channels,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "history": history,
    }
    return Checkpoint(tensors, meta)


class TrainLog:
    """Per-step CSV log; rows are also kept in memory."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists() or self.path.stat().st_size == 0:
                with self.path.open("w", newline="") as f:
                    csv.writer(f).writerow(LOG_COLUMNS)

    def add(self, **row):
        self.rows.append(row)
        if self.path is not None:
            with self.path.open("a", newline="") as f:
                csv.writer(f).writerow([_fmt(row[c]) for c in LOG_COLUMNS])


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else v


def _run_epochs(model, opt, samples, cfg, stage, epochs, base_lr, rng,
                error_maps=None, log_path=None, ckpt_dir=None, history=None):
    fuse = stage == "stage2"
    w = cfg.weights if fuse else LossWeights(cfg.weights.eta, cfg.weights.gamma, 0.0)
    history = [] if history is None else history
    tlog = TrainLog(log_path)
    last_good = _make_checkpoint(model, opt, cfg, stage, 0, list(history))
    step = 0
    for epoch in range(epochs):
        lr = lr_schedule(base_lr, epoch, epochs, cfg.poly_power)
        order = rng.permutation(len(samples))
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            images, gts, ems = [], [], []
            for s in batch:
                masks = [s.gt, error_maps[s.id] if fuse else None]
                if cfg.augment:
                    image, masks = augment_arrays(s.image, masks, rng)
                else:
                    image = s.image
                images.append(image)
                gts.append(masks[0])
                ems.append(masks[1])
            if fuse:
                x, (gt, em) = _stack(images, [gts, ems])
                em4 = align_error_map(em, FEATURE_STRIDE)[:, None].astype(np.float64)
            else:
                x, (gt,) = _stack(images, [gts])

            out = model.forward(x, train=True, fuse=fuse, lam=cfg.lam, mu=cfg.mu)
            lce, g_ce = ce_loss(out["logits"], gt)
            lhm, g_hm = hm_loss(out["aux4"], gt, FEATURE_STRIDE)
            lea, g_ea = (ea_loss(em4, out["am"]) if fuse else (0.0, None))
            total = total_loss(lce, lhm, lea, w)
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at {stage} epoch {epoch} step {step}", last_good)
            model.backward(
                w.eta * g_ce,
                w.gamma * g_hm,
                None if g_ea is None else w.epsilon * g_ea,
                detach_attention=cfg.detach_attention,
            )
            opt.step(lr)
            tlog.add(stage=stage, epoch=epoch, step=step, lce=lce, lhm=lhm, lea=lea, total=total)
            sums += (lce, lhm, lea, total)
            n_batches += 1
            step += 1
        means = sums / max(n_batches, 1)
        row = {"stage": stage, "epoch": epoch, "lr": lr, "lce": float(means[0]),
               "lhm": float(means[1]), "lea": float(means[2]), "total": float(means[3])}
        history.append(row)
        log.info("%s epoch %d/%d lr=%.3g lce=%.4f lhm=%.4f lea=%.4f total=%.4f",
                 stage, epoch + 1, epochs, lr, *means)
        last_good = _make_checkpoint(model, opt, cfg, stage, epoch + 1, list(history))
    if ckpt_dir is not None:
        last_good.save(Path(ckpt_dir) / f"{epochs}.ckpt")
    return last_good


def train_stage1(samples: list[RetinalSample], cfg: TrainConfig = TrainConfig(),
                 log_path=None, ckpt_dir=None) -> Checkpoint:
    """Train the trunk with cross-entropy plus the auxiliary head (no attention term)."""
    if not samples:
        raise ValueError("no samples to train on")
    model = SegModel(cfg.channels)
    model.backbone.init(np.random.default_rng([cfg.seed, 1, 0]))
    opt = SGD(model.leaves(), cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 1, 1])
    return _run_epochs(model, opt, samples, cfg, "stage1", cfg.stage1_epochs,
                       cfg.lr_stage1, rng, log_path=log_path, ckpt_dir=ckpt_dir)


@dataclass
class MaskResult:
    masks: dict  # id -> (H, W) uint8
    forward_passes: int
    cache_hit: bool = False
    key: str = ""


def predict_logits(model: SegModel, image: np.ndarray, fuse=False, lam=0.5, mu=0.5):
    """Eval-mode forward on one H×W×3 image; returns stride-1 logits (2, H, W) and the output dict."""
    h, w = image.shape[:2]
    x = pad_to_multiple(standardize(image)).transpose(2, 0, 1)[None]
    out = model.forward(x, train=False, fuse=fuse, lam=lam, mu=mu)
    return out["logits"][0, :, :h, :w], out


def _mask_cache_key(ckpt: Checkpoint, samples) -> str:
    return config_hash({"ckpt": ckpt.digest(), "ids": [s.id for s in samples]})


def generate_initial_masks(ckpt: Checkpoint, samples, cache_dir=None) -> MaskResult:
    """Binary stage-1 predictions for every sample, cached on disk when ``cache_dir`` is set.

    The cache is keyed by the checkpoint content and the sample ids; a key
    mismatch regenerates.
    """
    key = _mask_cache_key(ckpt, samples)
    if cache_dir is not None:
        cached = load_error_maps(cache_dir, key)
        if cached is not None and set(cached) == {s.id for s in samples}:
            return MaskResult(cached, 0, True, key)
    model = SegModel.from_tensors(ckpt.tensors, with_eam=False)
    masks, n = {}, 0
    for s in samples:
        logits, _ = predict_logits(model, s.image)
        masks[s.id] = binarize(logits)
        n += 1
    if cache_dir is not None:
        save_error_maps(masks, cache_dir, key, suffix="_m1")
    return MaskResult(masks, n, False, key)


def build_error_maps(samples, masks: dict, cache_dir=None, key: str = "") -> dict:
    """Full-resolution error maps for every sample, optionally cached."""
    if cache_dir is not None:
        cached = load_error_maps(cache_dir, key)
        if cached is not None and set(cached) == {s.id for s in samples}:
            return cached
    maps = {}
    for s in samples:
        if s.id not in masks:
            raise KeyError(f"no stage-1 mask for sample {s.id!r}")
        maps[s.id] = generate_error_map(s.gt, masks[s.id])
    if cache_dir is not None:
        save_error_maps(maps, cache_dir, key)
    return maps


def train_stage2(ckpt: Checkpoint, samples, error_maps: dict, cfg: TrainConfig = TrainConfig(),
                 log_path=None, ckpt_dir=None) -> Checkpoint:
    """Fine-tune the stage-1 trunk jointly with a freshly initialised attention head."""
    if not samples:
        raise ValueError("no samples to train on")
    missing = [s.id for s in samples if s.id not in error_maps]
    if missing:
        raise KeyError(f"missing error map for sample {missing[0]!r}")
    model = SegModel.from_tensors(ckpt.tensors, with_eam=True)
    model.eam.init(np.random.default_rng([cfg.seed, 2, 0]))
    opt = SGD(model.leaves(), cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 2, 1])
    history = list(ckpt.meta.get("history", []))
    # local copies so augmentation never touches the cached maps
    ems = {k: np.array(v, copy=True) for k, v in error_maps.items()}
    return _run_epochs(model, opt, samples, cfg, "stage2", cfg.stage2_epochs,
                       cfg.lr_stage2, rng, error_maps=ems, log_path=log_path,
                       ckpt_dir=ckpt_dir, history=history)


def mean_attention(ckpt: Checkpoint, samples, lam=0.5, mu=0.5) -> float:
    """Mean eval-mode attention value over all samples."""
    model = SegModel.from_tensors(ckpt.tensors)
    vals = [predict_logits(model, s.image, True, lam, mu)[1]["am"].mean() for s in samples]
    return float(np.mean(vals))
