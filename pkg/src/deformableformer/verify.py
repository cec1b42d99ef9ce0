"""Finite-difference gradient checks over every layer type at float64."""
from __future__ import annotations

import numpy as np

from .deform import DeformConv2d, DeformConvCore
from .model import Block, ModelConfig, StageConfig, build_model, make_mixer
from .tensor import (WIDE, ChannelNorm, Conv2d, Linear, Mlp, PoolMixer,
                     finite_diff_check, initialize)

DEFAULT_TOLERANCE = 1e-4


def off_grid_offsets(rng, shape, margin=0.1, span=2):
    """Offsets whose fractional part stays in [margin, 1 - margin]."""
    whole = rng.integers(-span, span, size=shape)
    return whole + rng.uniform(margin, 1 - margin, size=shape)


def _randomize(layer, seed, std=0.5):
    # unit-scale weights; the 0.02 training init makes gradients too small to compare
    rng = np.random.default_rng(seed + 1)
    for _, p in layer.named_parameters():
        p.value[...] = rng.normal(0.0, std, p.value.shape)
    return layer


def tiny_config(mixer_kind="deformable"):
    return ModelConfig(stages=[StageConfig(3, 2, 8, 1)], mixer_kind=mixer_kind,
                       input_size=16)


def tiny_model(seed=0, mixer_kind="deformable"):
    """One stage of width 8; deformable offsets sit at a fixed off-grid bias."""
    model = build_model(tiny_config(mixer_kind), seed, dtype=WIDE)
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if "offset_conv.bias" in name:
            p.value[...] = off_grid_offsets(rng, p.value.shape, margin=0.3, span=1)
        elif "offset_conv.weight" in name:
            p.value[...] = 0.0
        elif p.init == "trunc_normal":
            p.value[...] = rng.normal(0.0, 0.3, p.value.shape)
    return model


def gradcheck_suite(seed=0, epsilon=1e-4, channels=4, kernel=3, size=6):
    """Worst relative error per layer type."""
    rng = np.random.default_rng(seed)

    def x(*shape):
        return rng.standard_normal(shape)

    results = {}
    results["conv2d"] = finite_diff_check(
        _randomize(Conv2d(channels, channels + 1, kernel, 1, kernel // 2, WIDE), seed),
        x(2, channels, size, size), epsilon, seed)
    results["conv2d_strided"] = finite_diff_check(
        _randomize(Conv2d(3, channels, 7, 4, 3, WIDE), seed), x(1, 3, 16, 16), epsilon, seed)
    results["linear"] = finite_diff_check(
        _randomize(Linear(8, 4, WIDE), seed), x(3, 8), epsilon, seed)
    results["norm"] = finite_diff_check(
        _randomize(ChannelNorm(channels, dtype=WIDE), seed), x(2, channels, 3, 3), epsilon, seed)
    results["mlp"] = finite_diff_check(
        _randomize(Mlp(channels, 4 * channels, WIDE), seed), x(2, channels, 3, 3), epsilon, seed)
    results["pool_mixer"] = finite_diff_check(PoolMixer(kernel), x(2, channels, size, size),
                                              epsilon, seed)

    core = _randomize(DeformConvCore(channels, channels, kernel, dtype=WIDE), seed)
    offsets = off_grid_offsets(rng, (2, 2 * kernel * kernel, size, size))
    results["deformable_conv"] = finite_diff_check(
        core, (x(2, channels, size, size), offsets), epsilon, seed)

    dcn = DeformConv2d(channels, channels, kernel, dtype=WIDE)
    initialize(dcn.named_parameters(), seed, std=0.5)
    dcn.offset_conv.bias.value[...] = off_grid_offsets(rng, dcn.offset_conv.bias.value.shape,
                                                       margin=0.3, span=1)
    results["deformable_mixer"] = finite_diff_check(dcn, x(1, channels, size, size),
                                                    epsilon, seed)

    blk = Block(channels, make_mixer("pooling", channels, kernel, dtype=WIDE), 4, WIDE)
    results["block"] = finite_diff_check(_randomize(blk, seed), x(1, channels, 4, 4),
                                         epsilon, seed)

    model = tiny_model(seed)
    results["model"] = finite_diff_check(model, x(1, 3, 16, 16), epsilon, seed)
    return results
