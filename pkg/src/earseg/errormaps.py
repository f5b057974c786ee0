"""Stage-1 masks to error maps, and alignment to the attention stride."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def binarize(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis (-3); ties go to background."""
    logits = np.asarray(logits)
    if logits.shape[-3] != 2:
        raise ValueError(f"expected 2-channel logits, got shape {logits.shape}")
    return (logits[..., 1, :, :] > logits[..., 0, :, :]).astype(np.uint8)


def _check_binary(name, a):
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")


def generate_error_map(gt: np.ndarray, m1: np.ndarray) -> np.ndarray:
    """Mark missed vessels: 1 where gt exceeds the stage-1 prediction, else 0."""
    gt = np.asarray(gt)
    m1 = np.asarray(m1)
    if gt.shape != m1.shape:
        raise ValueError(f"gt shape {gt.shape} != prediction shape {m1.shape}")
    _check_binary("gt", gt)
    _check_binary("prediction", m1)
    return (gt > m1).astype(np.uint8)


def align_error_map(em: np.ndarray, stride: int = 4) -> np.ndarray:
    """Max-pool the last two axes with a ``stride``×``stride`` window."""
    em = np.asarray(em)
    h, w = em.shape[-2:]
    if h % stride or w % stride:
        raise ValueError(f"error map {h}x{w} is not divisible by stride {stride}")
    lead = em.shape[:-2]
    blocks = em.reshape(*lead, h // stride, stride, w // stride, stride)
    return blocks.max(axis=(-3, -1)).astype(np.uint8)


def save_error_maps(maps: dict, cache_dir, key: str, suffix: str = "_em") -> Path:
    """Write ``<id><suffix>.png`` files plus ``index.json`` tagged with ``key``."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for sid in sorted(maps):
        em = np.asarray(maps[sid], dtype=np.uint8)
        fname = f"{sid}{suffix}.png"
        Image.fromarray(em * 255).save(cache_dir / fname)
        entries[sid] = {"file": fname, "shape": list(em.shape), "count": int(em.sum())}
    index = cache_dir / "index.json"
    index.write_text(json.dumps({"key": key, "maps": entries}, indent=2, sort_keys=True))
    return index


def load_error_maps(cache_dir, key: str | None = None) -> dict | None:
    """Read cached maps; ``None`` when absent or when ``key`` does not match."""
    index = Path(cache_dir) / "index.json"
    if not index.exists():
        return None
    meta = json.loads(index.read_text())
    if key is not None and meta.get("key") != key:
        return None
    out = {}
    for sid, entry in meta["maps"].items():
        arr = np.asarray(Image.open(Path(cache_dir) / entry["file"]).convert("L"))
        out[sid] = (arr > 127).astype(np.uint8)
    return out
