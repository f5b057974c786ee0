"""Error-attention subnetwork and logit refinement.

The attention head is two conv3×3-BN-ReLU units (C→C) followed by a
conv1×1 (C→1) and a sigmoid, all at the feature stride. Its single-channel
map reweights the semantic logits::

    l_a     = Am * l
    l_final = lam * l + mu * l_a = (lam + mu * Am) * l
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import load_state_dict, state_dict
from .layers import Conv2d, ConvBNReLU, collect, sigmoid


@dataclass
class AttentionMap:
    data: np.ndarray  # (N, 1, h, w), values in (0, 1)
    stride: int


class ErrorAttention:
    def __init__(self, channels: int = 32):
        self.channels = channels
        self.unit1 = ConvBNReLU(channels, channels)
        self.unit2 = ConvBNReLU(channels, channels)
        self.proj = Conv2d(channels, 1, 1, bias=True)
        self._am = None

    def children(self):
        return {"unit1": self.unit1, "unit2": self.unit2, "proj": self.proj}

    def leaves(self):
        return collect("", self)

    def init(self, rng: np.random.Generator):
        """He init for the 3×3 units; zero projection so attention starts at exactly 0.5."""
        self.unit1.conv.init(rng)
        self.unit2.conv.init(rng)
        self.proj.params["weight"][...] = 0.0
        self.proj.params["bias"][...] = 0.0

    def forward(self, fm, train=True):
        if fm.shape[1] != self.channels:
            raise ValueError(
                f"feature map has {fm.shape[1]} channels, attention expects {self.channels}"
            )
        o = self.unit2.forward(self.unit1.forward(fm, train), train)
        self._am = sigmoid(self.proj.forward(o, train))
        return self._am

    def backward(self, d_am):
        am = self._am
        g = self.proj.backward(d_am * am * (1.0 - am))
        return self.unit1.backward(self.unit2.backward(g))

    def state_dict(self, prefix="eam"):
        return state_dict(prefix, self.leaves())

    def load_state_dict(self, tensors, prefix="eam"):
        load_state_dict(prefix, self.leaves(), tensors)


def eam_param_count(channels: int) -> int:
    return 18 * channels * channels + 5 * channels + 1


def eam_forward(fm, params: dict, mode: str = "eval", stride: int = 4) -> AttentionMap:
    """Functional attention pass. ``fm`` is (N, C, h, w); ``params`` holds ``eam.*`` tensors."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    fm = np.asarray(fm, dtype=np.float64)
    net = ErrorAttention(params["eam.proj.weight"].shape[1])
    net.load_state_dict(params)
    return AttentionMap(net.forward(fm, train=mode == "train"), stride)


def check_fusion_weights(lam: float, mu: float):
    if lam < 0 or mu < 0:
        raise ValueError(f"fusion weights must be non-negative, got lam={lam}, mu={mu}")
    if abs(lam + mu - 1.0) > 1e-9:
        raise ValueError(f"fusion weights must sum to 1, got lam+mu={lam + mu}")


def refine_logits(l, am, lam: float = 0.5, mu: float = 0.5):
    """Blend logits with their attention-weighted copy.

    ``am`` has a single channel at the logits' resolution and is broadcast
    over the class channel.
    """
    check_fusion_weights(lam, mu)
    l = np.asarray(l)
    am = np.asarray(am)
    if am.shape[-2:] != l.shape[-2:]:
        raise ValueError(f"attention {am.shape} and logits {l.shape} differ spatially")
    l_a = am * l
    return lam * l + mu * l_a


def refine_logits_backward(l, am, dout, lam: float = 0.5, mu: float = 0.5):
    """Gradients of :func:`refine_logits` w.r.t. ``l`` and ``am`` (summed over channels)."""
    dl = (lam + mu * am) * dout
    dam = mu * (l * dout).sum(axis=-3, keepdims=True)
    return dl, dam
