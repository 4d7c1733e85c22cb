"""Embedding backbones: a small conv net, a reduced residual net, and a
bypass mode that passes precomputed feature rows straight through.

The conv backbone stacks blocks of conv3x3 (same padding), per-channel
batch norm, relu, and 2x2 max pooling. Batch norm uses the statistics of
the episode batch while training and running averages at eval; the running
buffers are plain arrays, saved alongside the weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class BackboneConfig:
    kind: str = "conv4"            # conv4 | resnet_small | bypass
    in_channels: int = 3
    channels: int = 64
    blocks: int = 4                # conv4 only
    image_size: int = 32
    feature_rows: int = 4          # bypass only: r of the stored rows

    def output_geometry(self) -> tuple[int, int, int]:
        """(d, h, w) of the emitted feature map."""
        if self.kind == "bypass":
            return self.channels, self.feature_rows, 1
        size = self.image_size
        if self.kind == "conv4":
            for _ in range(self.blocks):
                size //= 2
        elif self.kind == "resnet_small":
            for _ in range(3):
                size //= 2
        else:
            raise ShapeError(f"unknown backbone kind {self.kind!r}")
        if size < 1:
            raise ShapeError(f"image size {self.image_size} too small for "
                             f"{self.kind} pooling schedule")
        return self.channels, size, size


@dataclass
class ConvBlockParams:
    conv_w: Tensor
    conv_b: Tensor
    bn_gain: Tensor
    bn_bias: Tensor
    bn_mean: np.ndarray   # running buffers, not learnable
    bn_var: np.ndarray


@dataclass
class BackboneParams:
    config: BackboneConfig
    blocks: list = field(default_factory=list)        # ConvBlockParams
    skips: list = field(default_factory=list)         # 1x1 projection per residual stage

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for i, blk in enumerate(self.blocks):
            yield f"backbone.block{i}.conv_w", blk.conv_w
            yield f"backbone.block{i}.conv_b", blk.conv_b
            yield f"backbone.block{i}.bn_gain", blk.bn_gain
            yield f"backbone.block{i}.bn_bias", blk.bn_bias
        for i, w in enumerate(self.skips):
            yield f"backbone.skip{i}.w", w

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, blk in enumerate(self.blocks):
            yield f"backbone.block{i}.bn_mean", blk.bn_mean
            yield f"backbone.block{i}.bn_var", blk.bn_var

    def load_buffers(self, records: dict) -> None:
        for i, blk in enumerate(self.blocks):
            blk.bn_mean = records[f"backbone.block{i}.bn_mean"].copy()
            blk.bn_var = records[f"backbone.block{i}.bn_var"].copy()


def _conv_block(rng, cin, cout, dtype) -> ConvBlockParams:
    std = 1.0 / np.sqrt(cin * 9)
    return ConvBlockParams(
        conv_w=Tensor(rng.standard_normal((cout, cin, 3, 3)) * std,
                      requires_grad=True, dtype=dtype),
        conv_b=Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
        bn_gain=Tensor(np.ones(cout), requires_grad=True, dtype=dtype),
        bn_bias=Tensor(np.zeros(cout), requires_grad=True, dtype=dtype),
        bn_mean=np.zeros(cout, dtype=dtype),
        bn_var=np.ones(cout, dtype=dtype),
    )


def init_backbone(rng: np.random.Generator, config: BackboneConfig,
                  dtype=np.float32) -> BackboneParams:
    params = BackboneParams(config=config)
    if config.kind == "bypass":
        return params
    if config.kind == "conv4":
        cin = config.in_channels
        for _ in range(config.blocks):
            params.blocks.append(_conv_block(rng, cin, config.channels, dtype))
            cin = config.channels
    elif config.kind == "resnet_small":
        # 3 stages x 2 conv blocks, identity skip inside each stage
        cin = config.in_channels
        for _ in range(3):
            params.blocks.append(_conv_block(rng, cin, config.channels, dtype))
            params.blocks.append(_conv_block(rng, config.channels, config.channels, dtype))
            std = 1.0 / np.sqrt(cin)
            params.skips.append(Tensor(rng.standard_normal((config.channels, cin, 1, 1)) * std,
                                       requires_grad=True, dtype=dtype))
            cin = config.channels
    else:
        raise ShapeError(f"unknown backbone kind {config.kind!r}")
    return params


def batch_norm(x: Tensor, blk: ConvBlockParams, training: bool) -> Tensor:
    """Per-channel normalization of (N, C, H, W) activations."""
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if training:
        mu = T.tmean(x, axis=(0, 2, 3), keepdims=True)
        xc = T.sub(x, mu)
        var = T.tmean(T.mul(xc, xc), axis=(0, 2, 3), keepdims=True)
        # running averages track the batch statistics outside the graph
        blk.bn_mean += BN_MOMENTUM * (mu.data.reshape(c) - blk.bn_mean)
        blk.bn_var += BN_MOMENTUM * (var.data.reshape(c) - blk.bn_var)
        xhat = T.div(xc, T.sqrt(T.add(var, BN_EPS)))
    else:
        mu = Tensor(blk.bn_mean.reshape(shape))
        var = Tensor(blk.bn_var.reshape(shape))
        xhat = T.div(T.sub(x, mu), T.sqrt(T.add(var, BN_EPS)))
    gain = T.reshape(blk.bn_gain, shape)
    bias = T.reshape(blk.bn_bias, shape)
    return T.add(T.mul(xhat, gain), bias)


def _block_forward(x: Tensor, blk: ConvBlockParams, training: bool,
                   pool: bool = True) -> Tensor:
    y = T.conv2d(x, blk.conv_w, padding=1)
    y = T.add(y, T.reshape(blk.conv_b, (1, blk.conv_b.shape[0], 1, 1)))
    y = T.relu(batch_norm(y, blk, training))
    return T.max_pool2d(y, 2) if pool else y


def embed(images: Tensor, params: BackboneParams, training: bool = False) -> Tensor:
    """Map an image batch (N, C, H, W) to feature maps (N, d, h, w).

    In bypass mode the input already holds feature rows (N, r, d) and is
    returned untouched.
    """
    cfg = params.config
    if cfg.kind == "bypass":
        if images.ndim != 3 or images.shape[-1] != cfg.channels:
            raise ShapeError(f"bypass expects (N, r, d={cfg.channels}) rows, "
                             f"got {images.shape}")
        return images
    if images.ndim != 4 or images.shape[1] != cfg.in_channels \
            or images.shape[2] != cfg.image_size or images.shape[3] != cfg.image_size:
        raise ShapeError(f"backbone expects (N, {cfg.in_channels}, {cfg.image_size}, "
                         f"{cfg.image_size}) images, got {images.shape}")
    x = images
    if cfg.kind == "conv4":
        for blk in params.blocks:
            x = _block_forward(x, blk, training)
        return x
    # resnet_small: stages of conv-bn-relu, conv-bn, + projected skip, relu, pool
    for stage in range(3):
        b1, b2 = params.blocks[2 * stage], params.blocks[2 * stage + 1]
        y = _block_forward(x, b1, training, pool=False)
        y = T.conv2d(y, b2.conv_w, padding=1)
        y = T.add(y, T.reshape(b2.conv_b, (1, b2.conv_b.shape[0], 1, 1)))
        y = batch_norm(y, b2, training)
        skip = T.conv2d(x, params.skips[stage], padding=0)
        x = T.max_pool2d(T.relu(T.add(y, skip)), 2)
    return x


def reshape_local_features(fmap: Tensor) -> Tensor:
    """(N, d, h, w) -> (N, r, d) with r = h*w; row j is spatial position j
    in row-major order. Also accepts a single (d, h, w) map."""
    single = fmap.ndim == 3
    if single:
        fmap = T.reshape(fmap, (1,) + fmap.shape)
    if fmap.ndim != 4:
        raise ShapeError(f"feature map must be 3-D or 4-D, got {fmap.shape}")
    n, d, h, w = fmap.shape
    rows = T.reshape(T.transpose(fmap, (0, 2, 3, 1)), (n, h * w, d))
    return T.reshape(rows, (h * w, d)) if single else rows


def restore_feature_map(rows: Tensor, h: int, w: int) -> Tensor:
    """Inverse of reshape_local_features for a single (r, d) block."""
    if rows.ndim != 2 or rows.shape[0] != h * w:
        raise ShapeError(f"cannot restore {rows.shape} to {h}x{w} map")
    d = rows.shape[1]
    return T.transpose(T.reshape(rows, (h, w, d)), (2, 0, 1))
