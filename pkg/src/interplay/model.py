"""Parameter container, stand-in backbones and raw input rasterization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import DecoderConfig, DecoderLayerParams
from .geometry import BevGrid, bev_index_many
from .interaction import EncoderConfig, EncoderLayerParams
from .nn import Conv2d, Linear, relu
from .rng import SplitMix64

BEV_IN_CHANNELS = 3  # occupancy, max height, mean intensity
IMG_IN_CHANNELS = 3
MAX_HEIGHT = 3.0


@dataclass
class Stem:
    """Two 3x3 convolutions: the first strided, ReLU in between."""

    conv1: Conv2d
    conv2: Conv2d

    @classmethod
    def init(cls, rng: SplitMix64, c_in: int, c_out: int, stride: int) -> "Stem":
        return cls(Conv2d.init(rng, c_in, c_out, 3, stride), Conv2d.init(rng, c_out, c_out, 3, 1))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.conv2(relu(self.conv1(x)))


@dataclass
class ModelParams:
    stem_bev: Stem
    stem_img: Stem
    encoder: list[EncoderLayerParams]
    heat: Linear
    decoder: list[DecoderLayerParams]

    @classmethod
    def init(cls, seed: int, enc: EncoderConfig, dec: DecoderConfig, stride: int = 2) -> "ModelParams":
        """Draw all weights from one SplitMix64 stream in field order."""
        rng = SplitMix64(seed)
        c = enc.channels
        stem_bev = Stem.init(rng, BEV_IN_CHANNELS, c, stride)
        stem_img = Stem.init(rng, IMG_IN_CHANNELS, c, stride)
        encoder = [EncoderLayerParams.init(rng, enc) for _ in range(enc.num_layers)]
        heat = Linear.init(rng, c, 1)
        decoder = [DecoderLayerParams.init(rng, c, dec) for _ in range(dec.num_layers)]
        return cls(stem_bev, stem_img, encoder, heat, decoder)


def bev_raster(points: np.ndarray, grid: BevGrid) -> np.ndarray:
    """(H, W, 3) raw BEV input: occupancy, max height / 3 m clipped to [0, 1], mean intensity."""
    H, W = grid.shape
    out = np.zeros((H * W, BEV_IN_CHANNELS))
    if len(points):
        i, j, ok = bev_index_many(points[:, 0], points[:, 1], grid)
        flat = (i * W + j)[ok]
        z = np.clip(points[ok, 2] / MAX_HEIGHT, 0.0, 1.0)
        counts = np.bincount(flat, minlength=H * W)
        out[:, 0] = counts > 0
        zmax = np.zeros(H * W)
        np.maximum.at(zmax, flat, z)
        out[:, 1] = zmax
        inten = np.bincount(flat, weights=points[ok, 3], minlength=H * W)
        out[:, 2] = np.where(counts > 0, inten / np.maximum(counts, 1), 0.0)
    return out.reshape(H, W, BEV_IN_CHANNELS)
