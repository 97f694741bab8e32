"""Reference architectures."""

from __future__ import annotations

import numpy as np

from ..rng import Rng
from .layers import BatchNorm, Conv2d, Dense, GlobalAvgPool, Normalize, ReLU, Residual
from .network import Network


def miniresnet(
    input_shape,
    num_classes,
    widths=(16, 32, 64),
    blocks_per_stage=2,
    norm_mean=None,
    norm_std=None,
    seed=0,
):
    """Small residual classifier trainable on CPU in minutes.

    Stem conv (widths[0] channels) + one residual stage per width (the
    second and later stages downsample by 2) + global average pool + dense
    head. Taps sit after the stem and after each stage, so the tap count is
    1 + len(widths); the pooled head input is deliberately not tapped.
    """
    ch, h, w = input_shape
    rng = Rng(seed).spawn(0xA11C)
    if norm_mean is None:
        norm_mean = np.zeros(ch, dtype=np.float32)
    if norm_std is None:
        norm_std = np.ones(ch, dtype=np.float32)

    layers = [Normalize(norm_mean, norm_std)]
    stem = Conv2d(ch, widths[0], 3, 1, 1)
    stem.init_params(rng)
    layers += [stem, BatchNorm(widths[0]), ReLU()]
    taps = [("stem", len(layers) - 1)]

    in_ch = widths[0]
    for s, out_ch in enumerate(widths):
        stride = 1 if s == 0 else 2
        for b in range(blocks_per_stage):
            block = Residual(in_ch, out_ch, stride if b == 0 else 1)
            block.init_params(rng)
            layers.append(block)
            in_ch = out_ch
        taps.append((f"stage{s + 1}", len(layers) - 1))

    layers.append(GlobalAvgPool())
    head = Dense(in_ch, num_classes)
    head.init_params(rng)
    layers.append(head)
    return Network(layers, taps, num_classes, input_shape)
