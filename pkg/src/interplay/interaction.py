"""Local-attention encoder: cross-modal interaction, intra-modal windows, integration.

All attention here is single-head scaled dot-product attention over an
explicit neighbor list. Reductions over channels and over neighbors are
accumulated one term at a time in ascending index order, so the batched
(padded, gathered) path and a per-location call of :func:`local_attention`
execute the same floating-point operations and agree bit for bit.
Neighbor lists are always ordered by ascending source coordinate: view,
then row, then column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .correspondence import BevToImgMap, ImgToBevMap, csr_to_padded
from .errors import ConfigError
from .nn import FFN, LayerNorm, uniform_init
from .rng import SplitMix64

# rows per batch when gathering neighbors; bounds the padded temporaries
_CHUNK = 512


@dataclass
class AttentionParams:
    wq: np.ndarray  # (C, d)
    wk: np.ndarray  # (C, d)
    wv: np.ndarray  # (C, d)
    wo: np.ndarray  # (d, C)

    @property
    def d(self) -> int:
        return self.wq.shape[1]

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng: SplitMix64, channels: int, d: int) -> "AttentionParams":
        return cls(
            uniform_init(rng, (channels, d), channels),
            uniform_init(rng, (channels, d), channels),
            uniform_init(rng, (channels, d), channels),
            uniform_init(rng, (d, channels), d),
        )

    @classmethod
    def identity(cls, channels: int) -> "AttentionParams":
        eye = np.eye(channels)
        return cls(eye.copy(), eye.copy(), eye.copy(), eye.copy())

    def check(self) -> None:
        c, d = self.wq.shape
        if d < 1:
            raise ConfigError("attention key dimension must be >= 1")
        for name, arr, shape in (
            ("wk", self.wk, (c, d)), ("wv", self.wv, (c, d)), ("wo", self.wo, (d, c))
        ):
            if arr.shape != shape:
                raise ConfigError(f"attention {name} has shape {arr.shape}, expected {shape}")


@dataclass
class EncoderConfig:
    num_layers: int = 2  # production value: 2 stacked layers
    channels: int = 16  # artifact choice
    key_dim: int = 16  # artifact choice
    ffn_hidden: int = 32  # artifact choice
    k_corr: int = 2  # artifact choice: 5x5 image window
    k_iml: int = 3  # artifact choice: 3x3 grid neighborhood

    def validate(self) -> None:
        if self.num_layers < 0:
            raise ConfigError("encoder num_layers must be >= 0")
        if self.k_iml < 1 or self.k_iml % 2 == 0:
            raise ConfigError(f"k_iml must be odd and positive, got {self.k_iml}")
        if self.k_corr < 0:
            raise ConfigError("k_corr must be >= 0")
        if self.channels < 1 or self.key_dim < 1 or self.ffn_hidden < 1:
            raise ConfigError("channels, key_dim and ffn_hidden must be positive")


@dataclass
class EncoderLayerParams:
    c2p: AttentionParams
    p2c: AttentionParams
    c2c: AttentionParams
    p2p: AttentionParams
    inner_p: FFN
    outer_p: FFN
    inner_c: FFN
    outer_c: FFN
    norm_p: LayerNorm
    norm_c: LayerNorm

    @classmethod
    def init(cls, rng: SplitMix64, cfg: EncoderConfig) -> "EncoderLayerParams":
        c, d, hid = cfg.channels, cfg.key_dim, cfg.ffn_hidden
        return cls(
            c2p=AttentionParams.init(rng, c, d),
            p2c=AttentionParams.init(rng, c, d),
            c2c=AttentionParams.init(rng, c, d),
            p2p=AttentionParams.init(rng, c, d),
            inner_p=FFN.init(rng, 2 * c, hid, c),
            outer_p=FFN.init(rng, 2 * c, hid, c),
            inner_c=FFN.init(rng, 2 * c, hid, c),
            outer_c=FFN.init(rng, 2 * c, hid, c),
            norm_p=LayerNorm.init(c),
            norm_c=LayerNorm.init(c),
        )


def ordered_project(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` with the contraction accumulated term by term in index order."""
    out = x[..., 0:1] * w[0]
    for c in range(1, w.shape[0]):
        out = out + x[..., c : c + 1] * w[c]
    return out


def softmax_weights(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked softmax over the last axis; rows with no valid entry give zeros.

    Normalizer sums run over slots in ascending order.
    """
    logits = np.where(mask, logits, -np.inf)
    peak = logits.max(axis=-1, keepdims=True) if logits.shape[-1] else np.zeros(logits.shape[:-1] + (1,))
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.ascontiguousarray(np.exp(logits - peak))
    total = np.zeros(logits.shape[:-1])
    for s in range(logits.shape[-1]):
        total = total + e[..., s]
    safe = np.where(total > 0, total, 1.0)
    return e / safe[..., None]


def attention_logits(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``q . k / sqrt(d)`` for q (B, d) against k (B, L, d), ordered over d."""
    d = q.shape[-1]
    acc = q[:, None, 0] * k[:, :, 0]
    for c in range(1, d):
        acc = acc + q[:, None, c] * k[:, :, c]
    return acc / math.sqrt(d)


def attend_projected(q, k, v, mask, wo):
    """Attention on already-projected q (B, d), k/v (B, L, d); returns (B, C)."""
    weights = softmax_weights(attention_logits(q, k), mask)
    acc = np.zeros(q.shape)
    for s in range(k.shape[1]):
        acc = acc + weights[:, s, None] * v[:, s, :]
    return ordered_project(acc, wo)


def local_attention(query_feat: np.ndarray, neighbors: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Attend from one C-vector over a list of C-vector neighbors.

    An empty neighbor list yields the zero vector.
    """
    params.check()
    query_feat = np.asarray(query_feat, dtype=np.float64)
    nb = np.asarray(neighbors, dtype=np.float64)
    if query_feat.shape != (params.channels,):
        raise ConfigError(f"query has shape {query_feat.shape}, expected ({params.channels},)")
    if nb.size == 0:
        return np.zeros(params.channels)
    if nb.ndim != 2 or nb.shape[1] != params.channels:
        raise ConfigError(f"neighbors have shape {nb.shape}, expected (n, {params.channels})")
    q = ordered_project(query_feat[None], params.wq)
    k = ordered_project(nb, params.wk)[None]
    v = ordered_project(nb, params.wv)[None]
    return attend_projected(q, k, v, np.ones((1, len(nb)), dtype=bool), params.wo)[0]


def gathered_attention(
    queries: np.ndarray, sources: np.ndarray, index: np.ndarray, params: AttentionParams
) -> np.ndarray:
    """Batched local attention.

    ``queries`` (T, C); ``sources`` (S, C); ``index`` (T, L) source rows per
    target in attention order, padded with -1. Returns (T, C).
    """
    params.check()
    if queries.shape[1] != params.channels or sources.shape[1] != params.channels:
        raise ConfigError("feature channels do not match attention parameters")
    T = len(queries)
    out = np.zeros((T, params.channels))
    if T == 0 or index.shape[1] == 0:
        return out
    q_all = ordered_project(queries, params.wq)
    k_src = np.vstack([ordered_project(sources, params.wk), np.zeros((1, params.d))])
    v_src = np.vstack([ordered_project(sources, params.wv), np.zeros((1, params.d))])
    counts = (index >= 0).sum(axis=1)
    # group targets of similar neighbor count so padding stays small
    order = np.argsort(counts, kind="stable")
    for start in range(0, T, _CHUNK):
        rows = order[start : start + _CHUNK]
        width = int(counts[rows].max())
        if width == 0:
            continue
        idx = index[rows, :width]
        mask = idx >= 0
        gather = np.where(mask, idx, len(sources))
        out[rows] = attend_projected(q_all[rows], k_src[gather], v_src[gather], mask, params.wo)
    return out


def mmri_image_to_lidar(
    h_c: Sequence[np.ndarray], h_p: np.ndarray, img_to_bev: ImgToBevMap, params: AttentionParams
) -> np.ndarray:
    """BEV cells attend over the image pixels whose correspondence sets contain them."""
    H, W, C = h_p.shape
    if (H, W) != tuple(img_to_bev.grid_shape):
        raise ConfigError(f"BEV map {H}x{W} does not match correspondence grid {img_to_bev.grid_shape}")
    for v, (hc, shp) in enumerate(zip(h_c, img_to_bev.view_shapes)):
        if hc.shape[:2] != tuple(shp):
            raise ConfigError(f"view {v} features {hc.shape[:2]} do not match map {shp}")
    ptr, src = img_to_bev.inverted()
    table = np.concatenate([hc.reshape(-1, C) for hc in h_c], axis=0)
    out = gathered_attention(h_p.reshape(-1, C), table, csr_to_padded(ptr, src), params)
    return out.reshape(H, W, C)


def mmri_lidar_to_image(
    h_p: np.ndarray, h_c: Sequence[np.ndarray], bev_to_img: BevToImgMap, params: AttentionParams
) -> list[np.ndarray]:
    """Image pixels attend over the BEV cells whose pillars project onto them."""
    H, W, C = h_p.shape
    if (H, W) != tuple(bev_to_img.grid_shape):
        raise ConfigError(f"BEV map {H}x{W} does not match correspondence grid {bev_to_img.grid_shape}")
    shapes = [hc.shape[:2] for hc in h_c]
    if [tuple(s) for s in shapes] != [tuple(s) for s in bev_to_img.view_shapes]:
        raise ConfigError(f"image feature shapes {shapes} do not match map {bev_to_img.view_shapes}")
    ptr, src = bev_to_img.transposed()
    queries = np.concatenate([hc.reshape(-1, C) for hc in h_c], axis=0)
    out = gathered_attention(queries, h_p.reshape(-1, C), csr_to_padded(ptr, src), params)
    result = []
    pos = 0
    for h, w in shapes:
        result.append(out[pos : pos + h * w].reshape(h, w, C))
        pos += h * w
    return result


def window_index(height: int, width: int, size: int) -> np.ndarray:
    """(H*W, size*size) flat neighbor ids of each location's clipped window, row-major, -1 padded.

    Valid entries are packed to the front so their slot order is ascending.
    """
    r = size // 2
    rows, cols = np.divmod(np.arange(height * width), width)
    slots = []
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            ni, nj = rows + di, cols + dj
            ok = (ni >= 0) & (ni < height) & (nj >= 0) & (nj < width)
            slots.append(np.where(ok, ni * width + nj, -1))
    idx = np.stack(slots, axis=1)
    # stable pack of valid slots to the front keeps row-major order
    key = np.where(idx >= 0, 0, 1)
    perm = np.argsort(key, axis=1, kind="stable")
    return np.take_along_axis(idx, perm, axis=1)


def iml(h: np.ndarray, params: AttentionParams, k_iml: int) -> np.ndarray:
    """Each location attends over its ``k_iml x k_iml`` window, clipped at the borders."""
    if k_iml < 1 or k_iml % 2 == 0:
        raise ConfigError(f"k_iml must be odd and positive, got {k_iml}")
    H, W, C = h.shape
    flat = h.reshape(-1, C)
    out = gathered_attention(flat, flat, window_index(H, W, k_iml), params)
    return out.reshape(H, W, C)


def integrate(h: np.ndarray, h_intra: np.ndarray, h_cross: np.ndarray, inner: FFN, outer: FFN) -> np.ndarray:
    """``outer(concat(inner(concat(h_intra, h_cross)), h))`` at every location."""
    if not (h.shape == h_intra.shape == h_cross.shape):
        raise ConfigError(f"integration shapes differ: {h.shape}, {h_intra.shape}, {h_cross.shape}")
    mixed = inner(np.concatenate([h_intra, h_cross], axis=-1))
    return outer(np.concatenate([mixed, h], axis=-1))


@dataclass
class EncoderTrace:
    """Intermediate maps of one encoder layer, kept for inspection and oracles."""

    p_cross: np.ndarray
    c_cross: list[np.ndarray]
    p_intra: np.ndarray
    c_intra: list[np.ndarray]
    h_p: np.ndarray
    h_c: list[np.ndarray] = field(default_factory=list)


def encoder_layer(h_p, h_c, img_to_bev, bev_to_img, cfg: EncoderConfig, p: EncoderLayerParams):
    p_cross = mmri_image_to_lidar(h_c, h_p, img_to_bev, p.c2p)
    c_cross = mmri_lidar_to_image(h_p, h_c, bev_to_img, p.p2c)
    p_intra = iml(h_p, p.p2p, cfg.k_iml)
    c_intra = [iml(hc, p.c2c, cfg.k_iml) for hc in h_c]
    new_p = p.norm_p(integrate(h_p, p_intra, p_cross, p.inner_p, p.outer_p))
    new_c = [
        p.norm_c(integrate(hc, ci, cc, p.inner_c, p.outer_c))
        for hc, ci, cc in zip(h_c, c_intra, c_cross)
    ]
    return new_p, new_c, EncoderTrace(p_cross, c_cross, p_intra, c_intra, new_p, new_c)


def encoder_forward(
    h_p: np.ndarray,
    h_c: Sequence[np.ndarray],
    img_to_bev: ImgToBevMap,
    bev_to_img: BevToImgMap,
    cfg: EncoderConfig,
    layers: Sequence[EncoderLayerParams],
    traces: list | None = None,
):
    """Run ``cfg.num_layers`` layers; returns refined ``(h_p, h_c)`` with unchanged shapes.

    The correspondence maps are computed once per scene and reused by all layers.
    """
    if len(layers) < cfg.num_layers:
        raise ConfigError(f"{cfg.num_layers} encoder layers configured, {len(layers)} given")
    h_c = list(h_c)
    for p in layers[: cfg.num_layers]:
        h_p, h_c, trace = encoder_layer(h_p, h_c, img_to_bev, bev_to_img, cfg, p)
        if traces is not None:
            traces.append(trace)
    return h_p, h_c
