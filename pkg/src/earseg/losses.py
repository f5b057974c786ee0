"""Training objectives. Every loss returns ``(value, gradient)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import upsample_bilinear, upsample_bilinear_backward


@dataclass(frozen=True)
class LossWeights:
    eta: float = 1.0  # cross-entropy
    gamma: float = 0.4  # auxiliary heatmap head
    epsilon: float = 0.5  # error attention

    def __post_init__(self):
        for name in ("eta", "gamma", "epsilon"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


def ce_loss(logits, gt):
    """Mean 2-class softmax cross-entropy over all pixels.

    logits: (N, 2, H, W); gt: (N, H, W) with values in {0, 1}.
    """
    logits = np.asarray(logits, dtype=np.float64)
    gt = np.asarray(gt)
    if logits.shape[-3] != 2 or logits.shape[:-3] + logits.shape[-2:] != gt.shape:
        raise ValueError(f"logits {logits.shape} do not match gt {gt.shape}")
    # log-softmax of a 2-class problem reduces to softplus of the margin
    z = logits[..., 1, :, :] - logits[..., 0, :, :]
    sign = np.where(gt > 0, 1.0, -1.0)
    m = sign * z
    per_pixel = np.logaddexp(0.0, -m)
    n = per_pixel.size
    loss = float(per_pixel.sum() / n)
    # d/dz softplus(-sign*z) = -sign * sigmoid(-m)
    dz = -sign * np.exp(-np.logaddexp(0.0, m)) / n
    grad = np.stack([-dz, dz], axis=-3)
    return loss, grad


def hm_loss(aux_logits, gt, stride: int = 4):
    """Deep-supervision cross-entropy on the stride-``stride`` auxiliary head.

    The auxiliary logits are bilinearly upsampled to the gt resolution first;
    the returned gradient is w.r.t. the low-resolution ``aux_logits``.
    """
    up = upsample_bilinear(np.asarray(aux_logits, dtype=np.float64), stride)
    loss, g = ce_loss(up, gt)
    return loss, upsample_bilinear_backward(g, stride)


def ea_loss(em, am):
    """Mean squared difference between error map and attention map."""
    em = np.asarray(em, dtype=np.float64)
    am = np.asarray(am, dtype=np.float64)
    if em.shape != am.shape:
        raise ValueError(f"error map {em.shape} and attention map {am.shape} differ")
    diff = am - em
    n = diff.size
    return float((diff * diff).sum() / n), 2.0 * diff / n


def total_loss(lce: float, lhm: float, lea: float, w: LossWeights = LossWeights()) -> float:
    return w.eta * lce + w.gamma * lhm + w.epsilon * lea
