"""Alternating image/BEV query decoder.

Layer ``l`` (1-based) reads image features when ``l`` is odd and BEV
features when ``l`` is even. Each layer crops an ``S x S`` RoI per query
around its current box, turns the query embedding into the weights of two
1x1 convolutions applied to that RoI, folds the result back into the
embedding, and predicts a refined box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .geometry import BevGrid, project_points
from .nn import FFN, LayerNorm, Linear, relu, sigmoid, uniform_init
from .rng import SplitMix64
from .scene import Box3D, CameraRig, CameraView

DEFAULT_DIMS = (4.0, 2.0, 1.5)
# head output layout after the class logits
BOX_FIELDS = ("dx", "dy", "dz", "dl", "dw", "dh", "sin", "cos", "vx", "vy")
IMAGE, BEV = "img", "bev"


@dataclass
class DecoderConfig:
    num_layers: int = 5  # production value
    num_queries: int = 16  # production value 200; toy default
    roi_size: int = 7  # artifact choice
    bev_enlarge: float = 2.0  # fixed BEV box enlargement
    num_classes: int = 3
    bottleneck: int | None = None  # C_r; None means max(1, C // 4)
    ffn_hidden: int = 32

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("decoder num_layers must be >= 1")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")
        if self.roi_size < 1:
            raise ConfigError("roi_size must be >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.bottleneck is not None and self.bottleneck < 1:
            raise ConfigError("bottleneck must be >= 1")

    def reduced(self, channels: int) -> int:
        return self.bottleneck if self.bottleneck is not None else max(1, channels // 4)


@dataclass
class DecoderLayerParams:
    generator: Linear  # C -> C*C_r + C_r*C_r
    project: Linear  # S*S*C_r -> C, no bias
    update: FFN  # C -> hidden -> C, residual
    head: FFN  # C -> hidden -> classes + 10
    norm_conv1: LayerNorm  # over C_r after P1
    norm_conv2: LayerNorm  # over C_r after P2
    norm_query: LayerNorm  # after adding the RoI term
    norm_update: LayerNorm  # after the FFN residual

    @classmethod
    def init(cls, rng: SplitMix64, channels: int, cfg: DecoderConfig) -> "DecoderLayerParams":
        c, cr, s = channels, cfg.reduced(channels), cfg.roi_size
        generator = Linear.init(rng, c, c * cr + cr * cr)
        project = Linear.init(rng, s * s * cr, c, bias=False)
        update = FFN.init(rng, c, cfg.ffn_hidden, c)
        fc1 = Linear.init(rng, c, cfg.ffn_hidden)
        out = cfg.num_classes + len(BOX_FIELDS)
        fc2 = Linear(uniform_init(rng, (cfg.ffn_hidden, out), cfg.ffn_hidden), np.zeros(out))
        # cos bias 1 keeps yaw = atan2(0, 1) = 0 under a zero-weight head
        fc2.bias[cfg.num_classes + BOX_FIELDS.index("cos")] = 1.0
        return cls(generator, project, update, FFN(fc1, fc2),
                   LayerNorm.init(cr), LayerNorm.init(cr), LayerNorm.init(c), LayerNorm.init(c))

    @property
    def channels(self) -> int:
        return self.generator.weight.shape[0]

    @property
    def reduced(self) -> int:
        c = self.channels
        total = self.generator.weight.shape[1]
        # total = c*r + r*r  ->  r = (-c + sqrt(c^2 + 4 total)) / 2
        return int(round((-c + math.sqrt(c * c + 4 * total)) / 2))

    @property
    def num_classes(self) -> int:
        return self.head.fc2.weight.shape[1] - len(BOX_FIELDS)


@dataclass
class Query:
    embedding: np.ndarray
    box: Box3D


@dataclass
class Detection:
    box: Box3D
    scores: np.ndarray

    def to_record(self, layer: int, query: int) -> dict:
        return {
            "layer": layer,
            "query": query,
            "box": self.box.as_list(),
            "scores": [float(s) for s in self.scores],
        }


def layer_modality(layer: int) -> str:
    """Modality read by 1-based decoder layer ``layer``: odd -> image, even -> BEV."""
    return IMAGE if layer % 2 == 1 else BEV


def heatmap(h_p: np.ndarray, heat: Linear) -> np.ndarray:
    """Class-agnostic objectness per BEV cell, ``sigmoid(h . w + b)``."""
    return sigmoid(heat(h_p)[..., 0])


def local_maxima(values: np.ndarray) -> np.ndarray:
    """Cells not smaller than any of their 8 neighbors."""
    h, w = values.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = values
    keep = np.ones((h, w), dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                keep &= values >= padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
    return keep


def select_peaks(values: np.ndarray, n: int) -> list[tuple[int, int]]:
    """Top-``n`` cells: local maxima by descending value, ties by ascending (row, col).

    If there are fewer than ``n`` local maxima the remaining cells follow in
    the same order.
    """
    h, w = values.shape
    if n > h * w:
        raise ConfigError(f"{n} queries requested but the BEV map has only {h * w} cells")
    flat = values.ravel()
    peak = local_maxima(values).ravel()
    # lexsort: last key is primary
    order = np.lexsort((np.arange(h * w), -flat, ~peak))
    return [(int(c) // w, int(c) % w) for c in order[:n]]


def init_queries(h_p: np.ndarray, grid: BevGrid, n: int, heat: Linear) -> list[Query]:
    """Seed queries at heatmap peaks: embedding is the BEV feature, box a default prior."""
    if h_p.shape[:2] != grid.shape:
        raise ConfigError(f"BEV features {h_p.shape[:2]} do not match grid {grid.shape}")
    cells = select_peaks(heatmap(h_p, heat), n)
    queries = []
    for i, j in cells:
        x, y = grid.cell_center(i, j)
        queries.append(Query(h_p[i, j].copy(), Box3D(x, y, 0.0, *DEFAULT_DIMS)))
    return queries


def project_box_to_image_roi(box: Box3D, view: CameraView):
    """Clipped axis-aligned rectangle ``(u0, v0, u1, v1)`` around the projected corners.

    Corners behind the camera are ignored; returns ``None`` when all are
    behind or the rectangle misses the image.
    """
    uv, _, front = project_points(box.corners(), view)
    if not front.any():
        return None
    pts = uv[front]
    u0 = max(float(pts[:, 0].min()), 0.0)
    u1 = min(float(pts[:, 0].max()), float(view.width))
    v0 = max(float(pts[:, 1].min()), 0.0)
    v1 = min(float(pts[:, 1].max()), float(view.height))
    if u0 > u1 or v0 > v1:
        return None
    return u0, v0, u1, v1


def bev_footprint_extent(box: Box3D, grid: BevGrid, enlarge: float = 1.0):
    """Continuous ``(col0, row0, col1, row1)`` bounds of the (enlarged) footprint, in cells."""
    fp = box.footprint(enlarge)
    cols, rows = grid.to_continuous(fp[:, 0], fp[:, 1])
    return float(cols.min()), float(rows.min()), float(cols.max()), float(rows.max())


def project_box_to_bev_roi(box: Box3D, grid: BevGrid, enlarge: float = 2.0):
    """Inclusive cell rectangle ``(i0, j0, i1, j1)`` covering the enlarged footprint.

    A bound lying exactly on a cell edge belongs to the cell above it, so a
    max bound of 24.0 covers up to cell 23. Returns ``None`` if the
    footprint misses the grid.
    """
    c0, r0, c1, r1 = bev_footprint_extent(box, grid, enlarge)
    H, W = grid.shape
    if c1 <= 0 or r1 <= 0 or c0 >= W or r0 >= H:
        return None
    j0, i0 = math.floor(c0), math.floor(r0)
    j1, i1 = max(math.ceil(c1) - 1, j0), max(math.ceil(r1) - 1, i0)
    return max(i0, 0), max(j0, 0), min(i1, H - 1), min(j1, W - 1)


def bev_rect_to_continuous(rect):
    i0, j0, i1, j1 = rect
    return float(j0), float(i0), float(j1 + 1), float(i1 + 1)


def ensure_min_extent(rect, minimum: float = 1.0):
    """Grow a continuous rectangle about its center so each side is at least ``minimum``."""
    x0, y0, x1, y1 = rect
    if x1 - x0 < minimum:
        cx = (x0 + x1) / 2
        x0, x1 = cx - minimum / 2, cx + minimum / 2
    if y1 - y0 < minimum:
        cy = (y0 + y1) / 2
        y0, y1 = cy - minimum / 2, cy + minimum / 2
    return x0, y0, x1, y1


def bilinear(fmap: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) map at continuous coords; pixel centers sit at +0.5, edges clamp."""
    H, W, _ = fmap.shape
    px = np.clip(np.asarray(x, dtype=np.float64) - 0.5, 0.0, W - 1)
    py = np.clip(np.asarray(y, dtype=np.float64) - 0.5, 0.0, H - 1)
    x0 = np.minimum(np.floor(px).astype(np.int64), W - 1)
    y0 = np.minimum(np.floor(py).astype(np.int64), H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    top = fmap[y0, x0] * (1 - fx) + fmap[y0, x1] * fx
    bottom = fmap[y1, x0] * (1 - fx) + fmap[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def extract_roi(fmap: np.ndarray, rect, size: int) -> np.ndarray:
    """``size x size x C`` bilinear crop of ``rect = (x0, y0, x1, y1)``; zeros when ``rect`` is None.

    Samples sit at fractions ``(a + 0.5) / size`` of the rectangle.
    """
    C = fmap.shape[2]
    if rect is None:
        return np.zeros((size, size, C))
    x0, y0, x1, y1 = rect
    frac = (np.arange(size) + 0.5) / size
    xs = x0 + frac * (x1 - x0)
    ys = y0 + frac * (y1 - y0)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear(fmap, gx, gy)


def dynamic_interaction(query: Query, roi: np.ndarray, params: DecoderLayerParams) -> np.ndarray:
    """Updated embedding from query-generated 1x1 convolutions over the RoI.

    ``P1 (C x C_r)`` and ``P2 (C_r x C_r)`` come from the generator. Every
    RoI position goes through ``relu(norm(x @ P1))`` then
    ``relu(norm(. @ P2))``; the result is flattened, projected back to C
    and added to the embedding, followed by a residual FFN, each addition
    post-normalized.
    """
    c, cr = params.channels, params.reduced
    if roi.shape[-1] != c:
        raise ConfigError(f"RoI has {roi.shape[-1]} channels, expected {c}")
    dyn = params.generator(query.embedding)
    p1 = dyn[: c * cr].reshape(c, cr)
    p2 = dyn[c * cr :].reshape(cr, cr)
    mixed = relu(params.norm_conv1(roi @ p1))
    mixed = relu(params.norm_conv2(mixed @ p2))
    emb = params.norm_query(query.embedding + params.project(mixed.reshape(-1)))
    return params.norm_update(emb + params.update(emb))


def _wrap_angle(a: float) -> float:
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


def predict(query: Query, params: DecoderLayerParams) -> Detection:
    """Refine ``query.box`` from the head: offsets, log-scale dims, sin/cos yaw, absolute velocity."""
    out = params.head(query.embedding)
    k = params.num_classes
    logits, d = out[:k], out[k:]
    b = query.box
    box = Box3D(
        b.x + d[0], b.y + d[1], b.z + d[2],
        b.l * math.exp(d[3]), b.w * math.exp(d[4]), b.h * math.exp(d[5]),
        _wrap_angle(math.atan2(d[6], d[7])),
        float(d[8]), float(d[9]),
    )
    return Detection(box, sigmoid(logits))


def select_view_roi(box: Box3D, rig: CameraRig):
    """``(view_id, rect)`` of the view with the largest clipped rectangle; ties go to the lower id."""
    best = None
    for v, view in enumerate(rig.views):
        rect = project_box_to_image_roi(box, view)
        if rect is None:
            continue
        area = (rect[2] - rect[0]) * (rect[3] - rect[1])
        if best is None or area > best[0]:
            best = (area, v, rect)
    if best is None:
        return None
    return best[1], best[2]


def layer_roi(query: Query, layer: int, h_p, h_c, rig: CameraRig, grid: BevGrid, cfg: DecoderConfig):
    """RoI block for one query in one layer, by the parity rule."""
    if layer_modality(layer) == IMAGE:
        sel = select_view_roi(query.box, rig)
        if sel is None:
            return extract_roi(h_c[0], None, cfg.roi_size)
        v, rect = sel
        return extract_roi(h_c[v], ensure_min_extent(rect), cfg.roi_size)
    rect = project_box_to_bev_roi(query.box, grid, cfg.bev_enlarge)
    cont = None if rect is None else bev_rect_to_continuous(rect)
    return extract_roi(h_p, cont, cfg.roi_size)


@dataclass
class DecoderOutput:
    detections: list[list[Detection]]
    modalities: list[str]
    queries: list[Query]


def decoder_forward(
    queries: Sequence[Query],
    h_p: np.ndarray,
    h_c: Sequence[np.ndarray],
    rig: CameraRig,
    grid: BevGrid,
    cfg: DecoderConfig,
    layers: Sequence[DecoderLayerParams],
) -> DecoderOutput:
    """Run all decoder layers; every layer's N detections are returned in query order.

    ``rig`` and ``grid`` must describe the feature maps' resolution.
    """
    if len(layers) < cfg.num_layers:
        raise ConfigError(f"{cfg.num_layers} decoder layers configured, {len(layers)} given")
    current = list(queries)
    all_dets, modalities = [], []
    for layer in range(1, cfg.num_layers + 1):
        params = layers[layer - 1]
        modalities.append(layer_modality(layer))
        dets, nxt = [], []
        for q in current:
            roi = layer_roi(q, layer, h_p, h_c, rig, grid, cfg)
            emb = dynamic_interaction(q, roi, params)
            det = predict(Query(emb, q.box), params)
            dets.append(det)
            nxt.append(Query(emb, det.box))
        all_dets.append(dets)
        current = nxt
    return DecoderOutput(all_dets, modalities, current)
