"""Dataset loading, fold splitting, augmentation and synthetic vessel images."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

IMAGE_EXTS = {".png", ".tif", ".tiff", ".gif", ".ppm", ".jpg", ".jpeg", ".bmp"}
NOISE_SIGMA = 0.02


class DatasetError(ValueError):
    """Unreadable, incomplete or inconsistent dataset."""


@dataclass
class RetinalSample:
    id: str
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    gt: np.ndarray  # (H, W) uint8 in {0, 1}
    fov: np.ndarray | None = None  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        hw = self.image.shape[:2]
        for name in ("gt", "fov"):
            m = getattr(self, name)
            if m is None:
                continue
            if m.shape != hw:
                raise DatasetError(f"{self.id}: {name} shape {m.shape} != image shape {hw}")
            if not np.isin(m, (0, 1)).all():
                raise DatasetError(f"{self.id}: {name} must be binary")


@dataclass
class DatasetManifest:
    root: str
    split: str  # "train", "test" or "fold<k>"
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise DatasetError("duplicate sample ids in manifest")
        self.ids = sorted(self.ids)


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    # threshold at half the 8-bit range
    return (arr > 127.5).astype(np.uint8)


def _files(d: Path, exts=IMAGE_EXTS):
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in exts)


def _drive_key(p: Path):
    m = re.match(r"(\d+)", p.name)
    return m.group(1) if m else None


def _stem_key(p: Path):
    return p.name.split(".")[0]


_LAYOUTS = {
    # layout: (image dir, gt dirs, fov dirs, key fn)
    "drive": ("images", ("1st_manual",), ("mask",), _drive_key),
    "stare": ("images", ("labels",), ("mask",), _stem_key),
    "generic": ("images", ("gt",), ("fov", "mask"), _stem_key),
}


def _index(files, key):
    out = {}
    for p in files:
        k = key(p)
        if k is None:
            continue
        if k in out:
            raise DatasetError(f"duplicate file for id {k!r}: {out[k].name}, {p.name}")
        out[k] = p
    return out


def load_dataset(root, layout: str = "generic") -> list[RetinalSample]:
    """Load every image/mask pair under ``root``, sorted by id."""
    root = Path(root)
    if layout not in _LAYOUTS:
        raise DatasetError(f"unknown layout {layout!r}; expected one of {sorted(_LAYOUTS)}")
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    img_dir, gt_dirs, fov_dirs, key = _LAYOUTS[layout]
    images = _index(_files(root / img_dir), key)
    gts = {}
    for d in gt_dirs:
        gts.update(_index(_files(root / d), key))
    fovs = {}
    for d in fov_dirs:
        if (root / d).is_dir():
            fovs = _index(_files(root / d), key)
            break
    if not images and not gts:
        raise DatasetError(f"no samples found under {root}")
    for sid in sorted(set(images) ^ set(gts)):
        what = "ground-truth mask" if sid in images else "image"
        raise DatasetError(f"sample {sid!r} has no matching {what} under {root}")

    samples = []
    for sid in sorted(images):
        image = _read_image(images[sid])
        gt = _read_mask(gts[sid])
        fov = _read_mask(fovs[sid]) if sid in fovs else None
        if gt.shape != image.shape[:2] or (fov is not None and fov.shape != gt.shape):
            raise DatasetError(
                f"sample {sid!r}: dimension mismatch between image {image.shape[:2]}, "
                f"gt {gt.shape}" + (f", fov {fov.shape}" if fov is not None else "")
            )
        samples.append(RetinalSample(sid, image, gt, fov))
    return samples


def save_dataset(samples, root) -> Path:
    """Write samples in the generic layout (images/, gt/, and fov/ when present)."""
    root = Path(root)
    for sub in ("images", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.gt.astype(np.uint8) * 255).save(root / "gt" / f"{s.id}.png")
        if s.fov is not None:
            (root / "fov").mkdir(exist_ok=True)
            Image.fromarray(s.fov.astype(np.uint8) * 255).save(root / "fov" / f"{s.id}.png")
    return root


def make_folds(samples, k: int):
    """Contiguous k-fold split of the sorted ids.

    Earlier folds take the remainder, so sizes differ by at most one.
    Accepts samples or bare id strings. Returns ``[(train_ids, test_ids), ...]``.
    """
    ids = sorted(s if isinstance(s, str) else s.id for s in samples)
    if k < 2:
        raise DatasetError(f"need k >= 2 folds, got {k}")
    if k > len(ids):
        raise DatasetError(f"cannot make {k} folds from {len(ids)} samples")
    base, extra = divmod(len(ids), k)
    folds, start = [], 0
    for i in range(k):
        stop = start + base + (1 if i < extra else 0)
        test = ids[start:stop]
        folds.append((ids[:start] + ids[stop:], test))
        start = stop
    return folds


def augment_arrays(image, masks, rng):
    """Apply the random flip/rotate/noise pipeline to an image and aligned masks.

    Four independent coin flips at p=0.5, always drawn in this order:
    horizontal flip, vertical flip, rotation by k·90° (k uniform in 1..3),
    additive Gaussian noise (sigma 0.02, image only, clipped to [0, 1]).
    ``None`` entries in ``masks`` pass through.
    """
    masks = list(masks)

    def geo(fn):
        nonlocal image
        image = fn(image)
        for i, m in enumerate(masks):
            if m is not None:
                masks[i] = fn(m)

    if rng.random() < 0.5:
        geo(lambda a: a[:, ::-1])
    if rng.random() < 0.5:
        geo(lambda a: a[::-1])
    if rng.random() < 0.5:
        k = int(rng.integers(1, 4))
        geo(lambda a: np.rot90(a, k, axes=(0, 1)))
    if rng.random() < 0.5:
        noise = rng.normal(0.0, NOISE_SIGMA, size=image.shape)
        image = np.clip(image + noise, 0.0, 1.0)
    image = np.ascontiguousarray(image)
    masks = [None if m is None else np.ascontiguousarray(m) for m in masks]
    return image, masks


def augment(sample: RetinalSample, rng: np.random.Generator) -> RetinalSample:
    image, (gt, fov) = augment_arrays(sample.image, [sample.gt, sample.fov], rng)
    return replace(sample, image=image, gt=gt, fov=fov)


def _segment_distance(yy, xx, p0, p1):
    d = p1 - p0
    L2 = float(d @ d)
    if L2 == 0.0:
        return np.hypot(yy - p0[0], xx - p0[1])
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / L2
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def _random_polyline(rng, size):
    n_pts = int(rng.integers(3, 6))
    pts = [rng.uniform(0, size, 2)]
    angle = rng.uniform(0, 2 * np.pi)
    for _ in range(n_pts - 1):
        angle += rng.normal(0, 0.6)
        step = rng.uniform(size / 5, size / 2.5)
        pts.append(pts[-1] + step * np.array([np.sin(angle), np.cos(angle)]))
    return np.array(pts)


def _background(rng, size):
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    texture /= np.abs(texture).max() + 1e-12
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    illum = 1.0 - 0.5 * (yy ** 2 + xx ** 2) + 0.1 * rng.uniform(-1, 1) * xx
    tint = np.array([0.78, 0.42, 0.20]) * rng.uniform(0.85, 1.1, 3)
    lum = np.clip(0.8 * illum + 0.08 * texture, 0.2, 1.0)
    return lum[..., None] * tint


def synth_vessels(n: int, size: int = 64, rng: np.random.Generator | None = None,
                  prefix: str = "synth") -> list[RetinalSample]:
    """Random dark polylines (2-5 per image, 1-3 px wide) on a textured fundus-like background.

    The gt is the exact rasterized mask (pixel centres within half the width
    of a polyline); the image uses an anti-aliased coverage of the same lines.
    Draws are redone until the foreground fraction lies in [0.02, 0.20].
    """
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(0) if rng is None else rng
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    width = len(str(max(n - 1, 0)))
    out = []
    for i in range(n):
        while True:
            gt = np.zeros((size, size), dtype=bool)
            cover = np.zeros((size, size))
            for _ in range(int(rng.integers(2, 6))):
                pts = _random_polyline(rng, size)
                w = rng.uniform(1.0, 3.0)
                dist = np.full((size, size), np.inf)
                for a, b in zip(pts[:-1], pts[1:]):
                    dist = np.minimum(dist, _segment_distance(yy, xx, a, b))
                gt |= dist <= w / 2
                cover = np.maximum(cover, np.clip(w / 2 + 0.5 - dist, 0.0, 1.0))
            frac = gt.mean()
            if 0.02 <= frac <= 0.20:
                break
        bg = _background(rng, size)
        contrast = rng.uniform(0.4, 0.6)
        img = bg * (1.0 - contrast * cover)[..., None]
        img = np.clip(img + rng.normal(0, 0.01, img.shape), 0.0, 1.0)
        out.append(RetinalSample(f"{prefix}{i:0{width}d}", img, gt.astype(np.uint8)))
    return out
