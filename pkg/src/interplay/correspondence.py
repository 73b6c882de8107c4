"""Image <-> BEV correspondence maps.

``ImgToBevMap`` holds, for every pixel of every view, the set of BEV cells
hit by back-projecting the pixels of its ``(2k+1) x (2k+1)`` window through
the dense depth. ``BevToImgMap`` holds, for every BEV cell, the set of
``(view, row, col)`` pixels that the LiDAR points of its pillar project to.

Sets are stored as sorted arrays: BEV cells as flat ids ``i_p * W_p + j_p``
and pixels as global ids ``offset[view] + row * width + col``, so ascending
id order is (view, row, col) order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError
from .geometry import (
    BevGrid,
    DepthMap,
    PillarIndex,
    back_project,
    back_project_many,
    bev_index,
    bev_index_many,
    project_points,
)
from .scene import CameraRig


def pixel_offsets(shapes: Sequence[tuple[int, int]]) -> np.ndarray:
    """Global pixel id offset of each view, plus the total as the last entry."""
    sizes = [h * w for h, w in shapes]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def csr_to_padded(ptr: np.ndarray, src: np.ndarray):
    """Expand CSR rows into a (rows, max_len) index array padded with -1."""
    counts = np.diff(ptr)
    rows = len(counts)
    width = int(counts.max()) if rows and counts.size else 0
    idx = np.full((rows, width), -1, dtype=np.int64)
    if len(src):
        row_of = np.repeat(np.arange(rows), counts)
        slot = np.arange(len(src)) - np.repeat(ptr[:-1], counts)
        idx[row_of, slot] = src
    return idx


def _csr_from_pairs(target: np.ndarray, source: np.ndarray, num_targets: int):
    """Group (target, source) pairs by target with sources ascending."""
    order = np.lexsort((source, target))
    counts = np.bincount(target, minlength=num_targets)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return ptr, source[order].astype(np.int64)


def pixel_to_bev(
    view_id: int, i: int, j: int, depths: Sequence[DepthMap], rig: CameraRig, grid: BevGrid
):
    """BEV cell under pixel ``(i, j)`` of ``view_id``, or ``None`` if out of range.

    The pixel center ``(j + 0.5, i + 0.5)`` is back-projected at the dense depth.
    """
    d = depths[view_id].values[i, j]
    if not d > 0:
        raise DomainError(f"no valid depth at view {view_id} pixel ({i}, {j})")
    p = back_project(j + 0.5, i + 0.5, d, rig[view_id])
    return bev_index(p[0], p[1], grid)


def pixel_to_bev_map(depth: DepthMap, view, grid: BevGrid) -> np.ndarray:
    """Flat BEV cell id under every pixel; -1 where out of range or depth invalid."""
    h, w = depth.height, depth.width
    out = np.full((h, w), -1, dtype=np.int64)
    ok = depth.valid
    if not ok.any():
        return out
    rows, cols = np.nonzero(ok)
    p = back_project_many(cols + 0.5, rows + 0.5, depth.values[rows, cols], view)
    bi, bj, inr = bev_index_many(p[:, 0], p[:, 1], grid)
    out[rows, cols] = np.where(inr, bi * grid.width + bj, -1)
    return out


@dataclass(frozen=True)
class ImgToBevMap:
    k: int
    grid_shape: tuple[int, int]
    # per view: (H, W, (2k+1)^2) ascending unique flat cell ids, padded with -1
    targets: tuple[np.ndarray, ...]

    @property
    def view_shapes(self) -> list[tuple[int, int]]:
        return [t.shape[:2] for t in self.targets]

    def cells(self, view: int, i: int, j: int) -> set[tuple[int, int]]:
        w = self.grid_shape[1]
        return {(int(c) // w, int(c) % w) for c in self.targets[view][i, j] if c >= 0}

    def set_sizes(self) -> np.ndarray:
        return np.concatenate([(t >= 0).sum(axis=2).ravel() for t in self.targets])

    def inverted(self):
        """CSR over BEV cells listing global source pixel ids in ascending order."""
        offsets = pixel_offsets(self.view_shapes)
        tgt, src = [], []
        for v, t in enumerate(self.targets):
            h, w, n = t.shape
            gid = offsets[v] + np.arange(h * w).repeat(n)
            flat = t.reshape(-1)
            keep = flat >= 0
            tgt.append(flat[keep])
            src.append(gid[keep])
        tgt = np.concatenate(tgt) if tgt else np.zeros(0, np.int64)
        src = np.concatenate(src) if src else np.zeros(0, np.int64)
        return _csr_from_pairs(tgt, src, self.grid_shape[0] * self.grid_shape[1])


def _window_sets(cell_ids: np.ndarray, k: int, sentinel: int) -> np.ndarray:
    h, w = cell_ids.shape
    padded = np.full((h + 2 * k, w + 2 * k), -1, dtype=np.int64)
    padded[k : k + h, k : k + w] = cell_ids
    stack = np.stack(
        [
            padded[k + di : k + di + h, k + dj : k + dj + w]
            for di in range(-k, k + 1)
            for dj in range(-k, k + 1)
        ],
        axis=2,
    )
    stack = np.where(stack < 0, sentinel, stack)
    stack.sort(axis=2)
    dup = np.zeros_like(stack, dtype=bool)
    dup[:, :, 1:] = stack[:, :, 1:] == stack[:, :, :-1]
    stack[dup] = sentinel
    stack.sort(axis=2)
    stack[stack == sentinel] = -1
    return stack


def build_img_to_bev(
    depths: Sequence[DepthMap], rig: CameraRig, grid: BevGrid, k: int
) -> ImgToBevMap:
    """M_{c->p}: per pixel, the deduplicated cells of its window's back-projections."""
    if k < 0:
        raise ValueError("window radius k must be >= 0")
    sentinel = grid.num_cells
    targets = []
    for view, depth in zip(rig.views, depths):
        cells = pixel_to_bev_map(depth, view, grid)
        targets.append(_window_sets(cells, k, sentinel))
    return ImgToBevMap(k=k, grid_shape=grid.shape, targets=tuple(targets))


@dataclass(frozen=True)
class BevToImgMap:
    grid_shape: tuple[int, int]
    view_shapes: tuple[tuple[int, int], ...]
    # CSR over flat cell ids; pixels[ptr[c]:ptr[c+1]] rows are (view, row, col), ascending
    ptr: np.ndarray
    pixels: np.ndarray

    def pixels_of(self, i_p: int, j_p: int) -> set[tuple[int, int, int]]:
        c = i_p * self.grid_shape[1] + j_p
        return {tuple(int(x) for x in row) for row in self.pixels[self.ptr[c] : self.ptr[c + 1]]}

    def set_sizes(self) -> np.ndarray:
        return np.diff(self.ptr)

    def global_ids(self) -> np.ndarray:
        offsets = pixel_offsets(self.view_shapes)
        widths = np.array([w for _, w in self.view_shapes], dtype=np.int64)
        if len(self.pixels) == 0:
            return np.zeros(0, dtype=np.int64)
        v, r, c = self.pixels.T
        return offsets[v] + r * widths[v] + c

    def transposed(self):
        """CSR over global pixel ids listing source flat cell ids in ascending order."""
        offsets = pixel_offsets(self.view_shapes)
        cells = np.repeat(np.arange(len(self.ptr) - 1), np.diff(self.ptr))
        return _csr_from_pairs(self.global_ids(), cells, int(offsets[-1]))


def build_bev_to_img(
    pillars: PillarIndex, points: np.ndarray, rig: CameraRig,
    view_shapes: Sequence[tuple[int, int]] | None = None,
) -> BevToImgMap:
    """M_{p->c}: per cell, the in-bounds pixels its pillar's points project to in any view."""
    if view_shapes is None:
        view_shapes = [(v.height, v.width) for v in rig.views]
    num_cells = pillars.shape[0] * pillars.shape[1]
    point_ids = pillars.order
    cell_of = np.repeat(np.arange(num_cells), np.diff(pillars.ptr))
    rows_out = []
    if len(point_ids):
        pts = np.asarray(points)[point_ids]
        for v, view in enumerate(rig.views):
            uv, _, front = project_points(pts, view)
            with np.errstate(invalid="ignore"):
                inside = (
                    front & (uv[:, 0] >= 0) & (uv[:, 0] < view.width)
                    & (uv[:, 1] >= 0) & (uv[:, 1] < view.height)
                )
            col = np.floor(uv[inside, 0]).astype(np.int64)
            row = np.floor(uv[inside, 1]).astype(np.int64)
            rows_out.append(
                np.column_stack([cell_of[inside], np.full(len(row), v), row, col])
            )
    table = np.concatenate(rows_out) if rows_out else np.zeros((0, 4), dtype=np.int64)
    if len(table):
        table = np.unique(table, axis=0)
    counts = np.bincount(table[:, 0], minlength=num_cells) if len(table) else np.zeros(num_cells, np.int64)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return BevToImgMap(
        grid_shape=pillars.shape,
        view_shapes=tuple(tuple(s) for s in view_shapes),
        ptr=ptr,
        pixels=table[:, 1:].astype(np.int64),
    )


def summary_stats(sizes: np.ndarray) -> dict:
    sizes = np.asarray(sizes)
    if sizes.size == 0:
        return {"locations": 0, "mean": 0.0, "max": 0, "empty_fraction": 1.0}
    return {
        "locations": int(sizes.size),
        "mean": float(sizes.mean()),
        "max": int(sizes.max()),
        "empty_fraction": float((sizes == 0).mean()),
    }


def img_to_bev_records(m: ImgToBevMap):
    w = m.grid_shape[1]
    for v, t in enumerate(m.targets):
        h, wi, _ = t.shape
        for i in range(h):
            for j in range(wi):
                cells = t[i, j]
                yield {
                    "target": [v, i, j],
                    "sources": [[int(c) // w, int(c) % w] for c in cells if c >= 0],
                }


def bev_to_img_records(m: BevToImgMap):
    h, w = m.grid_shape
    for c in range(h * w):
        rows = m.pixels[m.ptr[c] : m.ptr[c + 1]]
        yield {"target": [c // w, c % w], "sources": rows.tolist()}
