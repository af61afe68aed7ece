"""Miniature densely connected encoder-decoder producing per-pixel embeddings.

Layout for ``depth = 2``::

    image -> dense(enc0) -> down -> dense(enc1) -> down -> dense(bottleneck)
    bottleneck -> up -> [., enc1] -> dense(dec1) -> up -> [., enc0] -> dense(dec0)
    embed = 1x1 conv over [dec0, up2(dec1)]  ->  flatten to (H*W) x F

``down`` is a stride-2 3x3 conv, ``up`` a nearest x2 upsample followed by a
3x3 conv. Each decoder block already carries the matching encoder block
through its skip concatenation, so the final fusion sees the first encoder
block as well as every decoder level. No conv has a bias, so an all-zero
region stays zero through every layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class DsfeConfig:
    in_channels: int = 3
    growth: int = 8
    layers_per_block: int = 2
    depth: int = 2
    embed_dim: int = 16

    def __post_init__(self):
        if min(self.in_channels, self.growth, self.depth, self.embed_dim) < 1 or self.layers_per_block < 0:
            raise ConfigurationError(f"invalid DSFE configuration {self}")

    @property
    def up_channels(self) -> int:
        return max(self.growth * self.layers_per_block, self.growth)

    def check_dims(self, h: int, w: int):
        m = 2 ** self.depth
        if h % m or w % m:
            ph, pw = (-h) % m, (-w) % m
            raise ConfigurationError(
                f"image {h}x{w} must be divisible by {m}; pad by {ph} rows and {pw} columns"
            )


@dataclass
class DsfeParams:
    """Conv kernels keyed by name; insertion order is the canonical parameter order."""

    kernels: dict = field(default_factory=dict)

    def tensors(self) -> dict:
        return dict(self.kernels)


def _kernel(rng, k_out, k_in, size):
    fan_in, fan_out = k_in * size * size, k_out * size * size
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(k_out, k_in, size, size)), requires_grad=True)


def _block_shapes(prefix, c_in, cfg):
    shapes = []
    c = c_in
    for i in range(cfg.layers_per_block):
        shapes.append((f"{prefix}.layer{i}", cfg.growth, c, 3))
        c += cfg.growth
    return shapes, c


def param_shapes(cfg: DsfeConfig) -> list:
    """(name, out, in, k) for every kernel, as a pure function of the config."""
    shapes = []
    skips = []
    c = cfg.in_channels
    for lvl in range(cfg.depth):
        s, c = _block_shapes(f"enc{lvl}", c, cfg)
        shapes += s
        skips.append(c)
        shapes.append((f"down{lvl}", c, c, 3))
    s, c = _block_shapes("bottleneck", c, cfg)
    shapes += s
    dec_channels = []
    for lvl in reversed(range(cfg.depth)):
        shapes.append((f"up{lvl}", cfg.up_channels, c, 3))
        s, c = _block_shapes(f"dec{lvl}", cfg.up_channels + skips[lvl], cfg)
        shapes += s
        dec_channels.append(c)
    shapes.append(("embed", cfg.embed_dim, sum(dec_channels), 1))
    return shapes


def param_count(cfg: DsfeConfig) -> int:
    return sum(o * i * k * k for _, o, i, k in param_shapes(cfg))


def init_params(cfg: DsfeConfig, rng: np.random.Generator) -> DsfeParams:
    return DsfeParams({name: _kernel(rng, o, i, k) for name, o, i, k in param_shapes(cfg)})


def dense_block(x: Tensor, kernels: list) -> Tensor:
    """Each layer sees the concatenation of the block input and all earlier outputs."""
    feats = [x]
    for w in kernels:
        inp = ad.concat(feats, axis=0)
        if w.shape[1] != inp.shape[0]:
            raise DimensionError(f"dense layer expects {w.shape[1]} channels, got {inp.shape[0]}")
        feats.append(ad.relu(ad.conv2d(inp, w, stride=1, pad=1)))
    return ad.concat(feats, axis=0)


def _block(params: DsfeParams, prefix: str, cfg: DsfeConfig, x: Tensor) -> Tensor:
    return dense_block(x, [params.kernels[f"{prefix}.layer{i}"] for i in range(cfg.layers_per_block)])


def dsfe_feature_map(cfg: DsfeConfig, params: DsfeParams, image: Tensor) -> Tensor:
    """F x H x W embedding map."""
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise DimensionError(f"expected {cfg.in_channels} x H x W image, got {image.shape}")
    cfg.check_dims(image.shape[1], image.shape[2])
    k = params.kernels
    x = image
    skips = []
    for lvl in range(cfg.depth):
        x = _block(params, f"enc{lvl}", cfg, x)
        skips.append(x)
        x = ad.relu(ad.conv2d(x, k[f"down{lvl}"], stride=2, pad=1))
    x = _block(params, "bottleneck", cfg, x)
    levels = []
    for lvl in reversed(range(cfg.depth)):
        x = ad.relu(ad.conv2d(ad.upsample_nearest(x, 2), k[f"up{lvl}"], stride=1, pad=1))
        x = _block(params, f"dec{lvl}", cfg, ad.concat([x, skips[lvl]], axis=0))
        levels.append((lvl, x))
    fused = ad.concat([ad.upsample_nearest(f, 2 ** lvl) for lvl, f in reversed(levels)], axis=0)
    return ad.conv2d(fused, k["embed"], stride=1, pad=0)


def dsfe_forward(cfg: DsfeConfig, params: DsfeParams, image: Tensor) -> Tensor:
    """Per-pixel embeddings as an (H*W) x F matrix in row-major node order."""
    fmap = dsfe_feature_map(cfg, params, image)
    F, H, W = fmap.shape
    return ad.transpose(ad.reshape(fmap, (F, H * W)))
