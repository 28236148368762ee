"""Strided convolutional stack producing the face feature map.

Four 3x3 conv + rectifier blocks reduce an (B, S, S, 3) image to the
(B, S/8, S/8, C) channels-last grid the AU head consumes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import zeros_param, he_normal_conv
from .tensor import Tensor


@dataclass
class ConvLayer:
    w: Tensor  # (3, 3, cin, cout)
    b: Tensor
    stride: int


@dataclass
class BackboneParams:
    layers: list[ConvLayer]


def backbone_strides(image_size: int, out_size: int, depth: int) -> list[int]:
    """Stride schedule: enough stride-2 layers to reach out_size, then stride 1."""
    n2 = int(np.log2(image_size // out_size))
    if image_size != out_size * (2**n2) or n2 > depth:
        raise ValueError(f"cannot reduce {image_size} to {out_size} within {depth} conv layers")
    return [2] * n2 + [1] * (depth - n2)


def init_backbone(channels: tuple[int, ...], image_size: int, out_size: int, seed: int, dtype=np.float64) -> BackboneParams:
    rng = np.random.Generator(np.random.PCG64(seed))
    strides = backbone_strides(image_size, out_size, len(channels))
    layers = []
    cin = 3
    for cout, stride in zip(channels, strides):
        layers.append(
            ConvLayer(w=he_normal_conv(rng, 3, 3, cin, cout, dtype), b=zeros_param((cout,), dtype), stride=stride)
        )
        cin = cout
    return BackboneParams(layers=layers)


def backbone_forward(x, params: BackboneParams):
    """(B, S, S, 3) image tensor -> (B, S/8, S/8, channels[-1]) feature map."""
    for layer in params.layers:
        x = T.relu(T.conv2d(x, layer.w, layer.b, stride=layer.stride, padding=1))
    return x
