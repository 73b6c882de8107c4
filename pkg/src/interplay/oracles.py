"""Brute-force reference paths.

Each function recomputes a vectorized result with plain loops over
locations, built only from scalar public operations, so it can be
compared exactly against the fast path.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .correspondence import BevToImgMap, ImgToBevMap, pixel_to_bev
from .decoder import (
    Query,
    dynamic_interaction,
    layer_roi,
    predict,
)
from .geometry import BevGrid, bev_index, world_to_image
from .interaction import AttentionParams, local_attention


def naive_pillars(points: np.ndarray, grid: BevGrid) -> dict[tuple[int, int], list[int]]:
    """Cell -> point ids by testing every point against every cell's bounds."""
    H, W = grid.shape
    out: dict[tuple[int, int], list[int]] = {}
    for i in range(H):
        y0 = grid.y_min + i * grid.cell
        y1 = min(grid.y_min + (i + 1) * grid.cell, grid.y_max)
        rows = [n for n in range(len(points)) if y0 <= points[n, 1] < y1]
        if not rows:
            continue
        for j in range(W):
            x0 = grid.x_min + j * grid.cell
            x1 = min(grid.x_min + (j + 1) * grid.cell, grid.x_max)
            hit = [n for n in rows if x0 <= points[n, 0] < x1]
            if hit:
                out[(i, j)] = hit
    return out


def naive_cell_map(depths, rig, grid: BevGrid) -> list[np.ndarray]:
    """T(i, j) per pixel via the scalar pixel_to_bev; entries are (i_p, j_p) or None."""
    maps = []
    for v, depth in enumerate(depths):
        t = np.empty((depth.height, depth.width), dtype=object)
        for i in range(depth.height):
            for j in range(depth.width):
                t[i, j] = pixel_to_bev(v, i, j, depths, rig, grid) if depth.valid[i, j] else None
        maps.append(t)
    return maps


def naive_img_to_bev(cell_maps: list[np.ndarray], k: int) -> list[list[list[set]]]:
    """Per pixel, the set of T values over its in-bounds (2k+1)^2 window."""
    out = []
    for t in cell_maps:
        h, w = t.shape
        view = []
        for i in range(h):
            row = []
            for j in range(w):
                s = set()
                for di in range(-k, k + 1):
                    for dj in range(-k, k + 1):
                        a, b = i + di, j + dj
                        if 0 <= a < h and 0 <= b < w and t[a, b] is not None:
                            s.add(t[a, b])
                row.append(s)
            view.append(row)
        out.append(view)
    return out


def naive_bev_to_img(points: np.ndarray, rig, grid: BevGrid) -> dict[tuple[int, int], set]:
    """Cell -> {(view, row, col)} by projecting each point on its own."""
    out: dict[tuple[int, int], set] = defaultdict(set)
    for n in range(len(points)):
        cell = bev_index(points[n, 0], points[n, 1], grid)
        if cell is None:
            continue
        for v, view in enumerate(rig.views):
            proj = world_to_image(points[n, :3], view)
            if proj is None:
                continue
            u, vv, _ = proj
            if 0 <= u < view.width and 0 <= vv < view.height:
                out[cell].add((v, int(np.floor(vv)), int(np.floor(u))))
    return dict(out)


def first_img_to_bev_mismatch(m: ImgToBevMap, reference) -> tuple | None:
    """First (view, i, j) where the map's set differs from the reference sets."""
    for v, view in enumerate(reference):
        for i, row in enumerate(view):
            for j, s in enumerate(row):
                if m.cells(v, i, j) != s:
                    return (v, i, j)
    return None


def first_bev_to_img_mismatch(m: BevToImgMap, reference: dict) -> tuple | None:
    H, W = m.grid_shape
    for i in range(H):
        for j in range(W):
            if m.pixels_of(i, j) != reference.get((i, j), set()):
                return (i, j)
    return None


def naive_mmri_image_to_lidar(h_c, h_p, m: ImgToBevMap, params: AttentionParams) -> np.ndarray:
    H, W, C = h_p.shape
    sources = defaultdict(list)
    for v, hc in enumerate(h_c):
        for i in range(hc.shape[0]):
            for j in range(hc.shape[1]):
                for cell in sorted(m.cells(v, i, j)):
                    sources[cell].append(hc[i, j])
    out = np.zeros_like(h_p)
    for i in range(H):
        for j in range(W):
            nb = np.array(sources.get((i, j), [])).reshape(-1, C)
            out[i, j] = local_attention(h_p[i, j], nb, params)
    return out


def naive_mmri_lidar_to_image(h_p, h_c, m: BevToImgMap, params: AttentionParams) -> list[np.ndarray]:
    H, W, C = h_p.shape
    sources = defaultdict(list)
    for i in range(H):
        for j in range(W):
            for px in sorted(m.pixels_of(i, j)):
                sources[px].append(h_p[i, j])
    out = []
    for v, hc in enumerate(h_c):
        res = np.zeros_like(hc)
        for i in range(hc.shape[0]):
            for j in range(hc.shape[1]):
                nb = np.array(sources.get((v, i, j), [])).reshape(-1, C)
                res[i, j] = local_attention(hc[i, j], nb, params)
        out.append(res)
    return out


def naive_iml(h: np.ndarray, params: AttentionParams, k_iml: int) -> np.ndarray:
    H, W, _ = h.shape
    r = k_iml // 2
    out = np.zeros_like(h)
    for i in range(H):
        for j in range(W):
            nb = [
                h[a, b]
                for a in range(max(i - r, 0), min(i + r + 1, H))
                for b in range(max(j - r, 0), min(j + r + 1, W))
            ]
            out[i, j] = local_attention(h[i, j], np.array(nb), params)
    return out


def naive_decoder(queries, h_p, h_c, rig, grid, cfg, layers):
    """Layer-by-layer, query-by-query composition of the decoder primitives."""
    per_layer = []
    state = [(q.embedding, q.box) for q in queries]
    for layer in range(1, cfg.num_layers + 1):
        params = layers[layer - 1]
        dets = []
        new_state = []
        for emb, box in state:
            q = Query(emb, box)
            roi = layer_roi(q, layer, h_p, h_c, rig, grid, cfg)
            new_emb = dynamic_interaction(q, roi, params)
            det = predict(Query(new_emb, box), params)
            dets.append(det)
            new_state.append((new_emb, det.box))
        per_layer.append(dets)
        state = new_state
    return per_layer
