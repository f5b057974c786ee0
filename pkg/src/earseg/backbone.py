"""Compact encoder-decoder trunk and the two-scale relative-attention fusion.

Trunk layout for a C-channel configuration (widths a=C/4, b=C/2, C)::

    down1  stride 2   conv3x3(3→a, s2)-BN-ReLU, conv3x3(a→a)-BN-ReLU
    down2  stride 4   conv3x3(a→b, s2)-BN-ReLU, conv3x3(b→b)-BN-ReLU
    down3  stride 8   conv3x3(b→C, s2)-BN-ReLU, conv3x3(C→C)-BN-ReLU
    up     stride 4   concat(up2(down3), down2) → conv3x3(C+b→C)-BN-ReLU   = feature tap
    dec2   stride 2   concat(up2(tap), down1)   → conv3x3(C+a→a)-BN-ReLU
    dec1   stride 1   concat(up2(dec2), image)  → conv3x3(a+3→a)-BN-ReLU
    head   stride 1   conv1x1(a→2) + bias                                   = logits
    aux    stride 4   conv1x1(b→2) + bias on down2 (deep-supervision head)

``up2`` is 2× bilinear upsampling. Convolutions feeding a BN carry no bias.
Trainable parameter count for three input channels::

    P(C) = 549·C²/16 + 25·C + 4          (P(8) = 2400, P(32) = 35940)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    Conv2d,
    ConvBNReLU,
    collect,
    upsample_bilinear,
    upsample_bilinear_backward,
)

FEATURE_STRIDE = 4


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 32
    in_channels: int = 3

    def __post_init__(self):
        if self.channels < 4 or self.channels % 4:
            raise ValueError("channels must be a positive multiple of 4")

    @property
    def widths(self):
        c = self.channels
        return c // 4, c // 2, c


def param_count(channels: int) -> int:
    """Closed-form trainable parameter count of the trunk (see module docstring)."""
    c = channels
    return (549 * c * c) // 16 + 25 * c + 4


@dataclass
class FeatureMap:
    data: np.ndarray  # (N, C, h, w)
    stride: int


@dataclass
class SemanticLogits:
    data: np.ndarray  # (N, 2, h, w); channel 0 background, 1 vessel
    stride: int


class Backbone:
    def __init__(self, config: BackboneConfig = BackboneConfig()):
        self.config = config
        a, b, c = config.widths
        self.down1 = [ConvBNReLU(config.in_channels, a, 2), ConvBNReLU(a, a)]
        self.down2 = [ConvBNReLU(a, b, 2), ConvBNReLU(b, b)]
        self.down3 = [ConvBNReLU(b, c, 2), ConvBNReLU(c, c)]
        self.up = ConvBNReLU(c + b, c)
        self.dec2 = ConvBNReLU(c + a, a)
        self.dec1 = ConvBNReLU(a + config.in_channels, a)
        self.head = Conv2d(a, 2, 1, bias=True)
        self.aux = Conv2d(b, 2, 1, bias=True)

    def children(self):
        kids = {}
        for name in ("down1", "down2", "down3"):
            for i, unit in enumerate(getattr(self, name)):
                kids[f"{name}.{i}"] = unit
        kids.update(up=self.up, dec2=self.dec2, dec1=self.dec1, head=self.head, aux=self.aux)
        return kids

    def leaves(self):
        return collect("", self)

    def init(self, rng: np.random.Generator):
        for _, leaf in self.leaves():
            if isinstance(leaf, Conv2d):
                leaf.init(rng)

    @staticmethod
    def check_input(shape):
        h, w = shape[-2:]
        if h % 8 or w % 8:
            ph, pw = (-h) % 8, (-w) % 8
            raise ValueError(
                f"input {h}x{w} is not divisible by 8; pad by ({ph}, {pw}) pixels "
                f"to {h + ph}x{w + pw}"
            )

    def forward(self, x, train=True):
        """Run the trunk on an (N, 3, H, W) batch.

        Returns a dict with ``features`` (stride 4), ``logits`` (stride 1)
        and ``aux4`` (stride 4).
        """
        self.check_input(x.shape)
        h = x
        for unit in self.down1:
            h = unit.forward(h, train)
        d1 = h
        for unit in self.down2:
            h = unit.forward(h, train)
        d2 = h
        for unit in self.down3:
            h = unit.forward(h, train)
        cat = np.concatenate([upsample_bilinear(h, 2), d2], axis=1)
        fm = self.up.forward(cat, train)
        h = self.dec2.forward(np.concatenate([upsample_bilinear(fm, 2), d1], axis=1), train)
        h = self.dec1.forward(np.concatenate([upsample_bilinear(h, 2), x], axis=1), train)
        return {
            "features": fm,
            "logits": self.head.forward(h, train),
            "aux4": self.aux.forward(d2, train),
        }

    def backward(self, d_logits, d_aux4=None, d_features=None):
        """Backpropagate; returns the gradient w.r.t. the input batch."""
        a, _, c = self.config.widths
        g = self.dec1.backward(self.head.backward(d_logits))
        d_x = g[:, a:]
        g = self.dec2.backward(upsample_bilinear_backward(g[:, :a], 2))
        d_d1 = g[:, c:]
        d_fm = upsample_bilinear_backward(g[:, :c], 2)
        if d_features is not None:
            d_fm = d_fm + d_features
        d_cat = self.up.backward(d_fm)
        g = upsample_bilinear_backward(d_cat[:, :c], 2)
        for unit in reversed(self.down3):
            g = unit.backward(g)
        g = g + d_cat[:, c:]
        if d_aux4 is not None:
            g = g + self.aux.backward(d_aux4)
        for unit in reversed(self.down2):
            g = unit.backward(g)
        g = g + d_d1
        for unit in reversed(self.down1):
            g = unit.backward(g)
        return g + d_x

    def state_dict(self, prefix="backbone"):
        return state_dict(prefix, self.leaves())

    def load_state_dict(self, tensors, prefix="backbone"):
        load_state_dict(prefix, self.leaves(), tensors)


def state_dict(prefix, leaves):
    out = {}
    for name, leaf in leaves:
        for kind in (leaf.params, leaf.buffers):
            for k, v in kind.items():
                out[f"{prefix}.{name}.{k}"] = v
    return out


def load_state_dict(prefix, leaves, tensors):
    for name, leaf in leaves:
        for kind in (leaf.params, leaf.buffers):
            for k in kind:
                key = f"{prefix}.{name}.{k}"
                if key not in tensors:
                    raise KeyError(f"missing tensor {key!r}")
                src = np.asarray(tensors[key])
                if src.shape != kind[k].shape:
                    raise ValueError(f"{key}: expected shape {kind[k].shape}, got {src.shape}")
                kind[k] = src.astype(np.float64).copy()


def init_params(seed: int, config: BackboneConfig = BackboneConfig()) -> dict:
    """He fan-in init for every conv; BN scale 1, shift 0, running stats (0, 1)."""
    net = Backbone(config)
    net.init(np.random.default_rng(seed))
    return {k: v.copy() for k, v in net.state_dict().items()}


def _config_from_params(params) -> BackboneConfig:
    c = params["backbone.up.conv.weight"].shape[0]
    cin = params["backbone.down1.0.conv.weight"].shape[1]
    return BackboneConfig(channels=c, in_channels=cin)


def backbone_forward(image: np.ndarray, params: dict, train=False):
    """Functional trunk pass on one H×W×3 image.

    Returns ``(FeatureMap, SemanticLogits)``: features at stride 4 shaped
    (1, C, H/4, W/4) and logits at stride 1 shaped (1, 2, H, W).
    """
    net = Backbone(_config_from_params(params))
    net.load_state_dict(params)
    x = np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None]
    out = net.forward(x, train=train)
    return FeatureMap(out["features"], FEATURE_STRIDE), SemanticLogits(out["logits"], 1)


def scale_attention_fuse(l_low, l_full, a_low):
    """Combine half-scale and full-scale logits with a relative scale attention.

    ``out = U(l_low * a_low) + (1 - U(a_low)) * l_full`` where U is 2×
    bilinear upsampling and ``a_low`` (one channel) broadcasts over the logit
    channels. Arrays are (..., C, h, w) for the half-scale inputs and
    (..., C, 2h, 2w) for ``l_full``.
    """
    l_low, l_full, a_low = (np.asarray(v, dtype=np.float64) for v in (l_low, l_full, a_low))
    if l_low.shape[-2:] != a_low.shape[-2:]:
        raise ValueError(f"l_low {l_low.shape} and a_low {a_low.shape} differ spatially")
    h, w = l_low.shape[-2:]
    if l_full.shape[-2:] != (2 * h, 2 * w):
        raise ValueError(f"l_full must be {2 * h}x{2 * w}, got {l_full.shape[-2:]}")
    if a_low.ndim >= 3 and a_low.shape[-3] != 1:
        raise ValueError("scale attention must have a single channel")
    return upsample_bilinear(l_low * a_low, 2) + (1.0 - upsample_bilinear(a_low, 2)) * l_full
