"""Projective geometry, BEV quantization, pillars and depth completion.

Pixel convention: pixel ``(i, j)`` is row ``i``, column ``j`` and covers the
continuous square ``u in [j, j+1), v in [i, i+1)``; its center is
``(j + 0.5, i + 0.5)``. BEV cell ``(i_p, j_p)`` is row (y) then column (x).

The camera transforms are written out coefficient by coefficient rather than
as matrix products so that a single point and a batch of points go through
identical floating-point operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .scene import CameraView

EPS_Z = 1e-6


@dataclass(frozen=True)
class BevGrid:
    x_min: float = -54.0
    x_max: float = 54.0
    y_min: float = -54.0
    y_max: float = 54.0
    cell: float = 0.075

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.cell > 0):
            raise ConfigError(f"invalid BEV grid {self}")

    @property
    def height(self) -> int:
        # tolerance absorbs spans that are an exact multiple of the cell up to rounding
        return int(math.ceil((self.y_max - self.y_min) / self.cell - 1e-9))

    @property
    def width(self) -> int:
        return int(math.ceil((self.x_max - self.x_min) / self.cell - 1e-9))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def coarsened(self, factor: int) -> "BevGrid":
        return BevGrid(self.x_min, self.x_max, self.y_min, self.y_max, self.cell * factor)

    def cell_center(self, i_p: int, j_p: int) -> tuple[float, float]:
        """World (x, y) of a cell center."""
        return self.x_min + (j_p + 0.5) * self.cell, self.y_min + (i_p + 0.5) * self.cell

    def to_continuous(self, x, y):
        """World (x, y) to continuous (column, row) in cell units."""
        return (np.asarray(x) - self.x_min) / self.cell, (np.asarray(y) - self.y_min) / self.cell


def project_points(points: np.ndarray, view: CameraView):
    """Project (N, >=3) world points.

    Returns ``(uv, depth, in_front)``: (N, 2) continuous pixel coordinates,
    (N,) camera-frame z, and a mask of points with z > EPS_Z. ``uv`` of
    points behind the camera is NaN.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, np.shape(points)[-1])
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    R, t, K = view.T[:3, :3], view.T[:3, 3], view.K
    xc = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
    yc = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
    zc = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
    front = zc > EPS_Z
    safe = np.where(front, zc, 1.0)
    a, b = xc / safe, yc / safe
    u = K[0, 0] * a + K[0, 1] * b + K[0, 2]
    v = K[1, 1] * b + K[1, 2]
    uv = np.stack([u, v], axis=1)
    uv[~front] = np.nan
    return uv, zc, front


def world_to_image(p, view: CameraView):
    """Project one point; returns ``(u, v, depth)`` or ``None`` if behind the camera."""
    uv, depth, front = project_points(np.asarray(p, dtype=np.float64)[None, :3], view)
    if not front[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def back_project_many(u, v, depth, view: CameraView) -> np.ndarray:
    """Vectorized inverse of :func:`project_points`; returns (N, 3) world points."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    d = np.asarray(depth, dtype=np.float64).ravel()
    if np.any(~(d > 0)):
        raise DomainError("back-projection needs depth > 0")
    K, R, t = view.K, view.T[:3, :3], view.T[:3, 3]
    b = (v - K[1, 2]) / K[1, 1]
    a = (u - K[0, 2] - K[0, 1] * b) / K[0, 0]
    xc, yc, zc = a * d - t[0], b * d - t[1], d - t[2]
    # R is orthonormal: world = R^T (p_cam - t)
    x = R[0, 0] * xc + R[1, 0] * yc + R[2, 0] * zc
    y = R[0, 1] * xc + R[1, 1] * yc + R[2, 1] * zc
    z = R[0, 2] * xc + R[1, 2] * yc + R[2, 2] * zc
    return np.stack([x, y, z], axis=1)


def back_project(u: float, v: float, depth: float, view: CameraView) -> np.ndarray:
    if not depth > 0:
        raise DomainError(f"back-projection needs depth > 0, got {depth}")
    return back_project_many([u], [v], [depth], view)[0]


def bev_index_many(x, y, grid: BevGrid):
    """Vectorized BEV quantization; returns ``(i_p, j_p, in_range)``.

    The range is half-open: points on ``x_max`` or ``y_max`` are out of range.
    Indices of out-of-range points are -1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        fj = np.floor((x - grid.x_min) / grid.cell)
        fi = np.floor((y - grid.y_min) / grid.cell)
        ok = (
            (x >= grid.x_min) & (x < grid.x_max) & (y >= grid.y_min) & (y < grid.y_max)
            & (fj >= 0) & (fj < grid.width) & (fi >= 0) & (fi < grid.height)
        )
    i = np.where(ok, fi, -1).astype(np.int64)
    j = np.where(ok, fj, -1).astype(np.int64)
    return i, j, ok


def bev_index(x: float, y: float, grid: BevGrid):
    """``(i_p, j_p)`` of the cell containing ``(x, y)``, or ``None`` when out of range."""
    i, j, ok = bev_index_many([x], [y], grid)
    if not ok[0]:
        return None
    return int(i[0]), int(j[0])


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth, ``(height, width)``; invalid pixels hold NaN."""

    values: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @classmethod
    def invalid(cls, height: int, width: int) -> "DepthMap":
        return cls(np.full((height, width), np.nan))

    def to_bytes_image(self) -> np.ndarray:
        """8-bit rendering for PGM dumps: invalid = 0, valid scaled into 1..255."""
        out = np.zeros(self.values.shape, dtype=np.uint8)
        ok = self.valid
        if ok.any():
            vals = self.values[ok]
            lo, hi = vals.min(), vals.max()
            scale = (vals - lo) / (hi - lo) if hi > lo else np.zeros_like(vals)
            out[ok] = (1 + np.rint(scale * 254)).astype(np.uint8)
        return out


def build_sparse_depth(points: np.ndarray, view: CameraView) -> DepthMap:
    """Rasterize projected points; pixel ``(floor v, floor u)``, nearest depth wins."""
    depth = np.full((view.height, view.width), np.inf)
    if len(points):
        uv, z, front = project_points(points, view)
        with np.errstate(invalid="ignore"):
            inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < view.width) & (uv[:, 1] >= 0) & (uv[:, 1] < view.height)
        cols = np.floor(uv[inside, 0]).astype(np.int64)
        rows = np.floor(uv[inside, 1]).astype(np.int64)
        np.minimum.at(depth, (rows, cols), z[inside])
    depth[np.isinf(depth)] = np.nan
    return DepthMap(depth)


def _neighbor_min(values: np.ndarray) -> np.ndarray:
    """Minimum over the 8-neighborhood ignoring NaN; NaN where no valid neighbor."""
    h, w = values.shape
    padded = np.full((h + 2, w + 2), np.inf)
    padded[1:-1, 1:-1] = np.where(np.isnan(values), np.inf, values)
    best = np.full((h, w), np.inf)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            best = np.minimum(best, padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w])
    best[np.isinf(best)] = np.nan
    return best


def complete_depth(sparse: DepthMap) -> DepthMap:
    """Fill invalid pixels by repeated 3x3 dilation.

    Each round, every invalid pixel with at least one valid 8-neighbor takes
    the minimum of those neighbors' depths (all pixels updated from the
    previous round's values). Valid pixels never change. Rounds repeat until
    the map is dense.
    """
    values = np.array(sparse.values, dtype=np.float64)
    if not (~np.isnan(values)).any():
        raise DomainError("depth completion needs at least one valid pixel")
    while np.isnan(values).any():
        hole = np.isnan(values)
        values = np.where(hole, _neighbor_min(values), values)
    return DepthMap(values)


@dataclass(frozen=True)
class PillarIndex:
    """Cell -> point indices, stored CSR-style over flattened cell ids.

    ``ptr`` has ``H * W + 1`` entries; the points of flat cell ``c`` are
    ``order[ptr[c]:ptr[c + 1]]`` in ascending point order.
    """

    shape: tuple[int, int]
    ptr: np.ndarray
    order: np.ndarray

    def get(self, i_p: int, j_p: int) -> np.ndarray:
        c = i_p * self.shape[1] + j_p
        return self.order[self.ptr[c] : self.ptr[c + 1]]

    def nonempty(self) -> list[tuple[int, int]]:
        counts = np.diff(self.ptr)
        flat = np.nonzero(counts)[0]
        return [(int(c) // self.shape[1], int(c) % self.shape[1]) for c in flat]

    def __len__(self) -> int:
        return len(self.order)

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "cells": [
                {"cell": [i, j], "points": self.get(i, j).tolist()} for i, j in self.nonempty()
            ],
        }


def pillarize(points: np.ndarray, grid: BevGrid) -> PillarIndex:
    """Assign every in-range point to the vertical column of its BEV cell."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, np.shape(points)[-1] if len(points) else 4)
    i, j, ok = bev_index_many(pts[:, 0], pts[:, 1], grid)
    flat = i * grid.width + j
    idx = np.nonzero(ok)[0]
    order = idx[np.argsort(flat[idx], kind="stable")]
    counts = np.bincount(flat[idx], minlength=grid.num_cells)
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return PillarIndex(shape=grid.shape, ptr=ptr, order=order.astype(np.int64))
