"""Scene data model and the seeded synthetic scene generator.

World frame: x forward, y left, z up, meters. Camera frame: x right, y down,
z along the optical axis. Point clouds are ``(N, 4)`` float64 arrays with
columns ``x, y, z, intensity``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .io import to_unit_bytes, write_pgm
from .rng import SplitMix64


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.l, self.w, self.h, self.yaw, self.vx, self.vy]

    @classmethod
    def from_list(cls, values) -> "Box3D":
        return cls(*(float(v) for v in values))

    def corners(self) -> np.ndarray:
        """The 8 corners as a (8, 3) array; bottom face first."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        sx = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (self.l / 2)
        sy = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * (self.w / 2)
        sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * (self.h / 2)
        return np.stack(
            [self.x + c * sx - s * sy, self.y + s * sx + c * sy, self.z + sz], axis=1
        )

    def footprint(self, scale: float = 1.0) -> np.ndarray:
        """The 4 yawed ground-plane corners as (4, 2), l and w scaled about the center."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        sx = np.array([1, 1, -1, -1]) * (self.l * scale / 2)
        sy = np.array([1, -1, -1, 1]) * (self.w * scale / 2)
        return np.stack([self.x + c * sx - s * sy, self.y + s * sx + c * sy], axis=1)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Point-in-box test for (N, >=3) points with the box inflated by ``tol``."""
        d = np.asarray(points)[:, :3] - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = c * d[:, 0] + s * d[:, 1]
        ly = -s * d[:, 0] + c * d[:, 1]
        return (
            (np.abs(lx) <= self.l / 2 + tol)
            & (np.abs(ly) <= self.w / 2 + tol)
            & (np.abs(d[:, 2]) <= self.h / 2 + tol)
        )


@dataclass(frozen=True)
class GtBox:
    box: Box3D
    label: int


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera: ``K`` (3x3) intrinsics, ``T`` (4x4) world->camera transform."""

    K: np.ndarray
    T: np.ndarray
    width: int
    height: int

    @property
    def R(self) -> np.ndarray:
        return self.T[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[:3, 3]

    @classmethod
    def looking(
        cls,
        yaw: float,
        width: int,
        height: int,
        fx: float,
        fy: float | None = None,
        position: tuple[float, float, float] = (0.0, 0.0, 1.6),
    ) -> "CameraView":
        """Level camera at ``position`` whose optical axis points along ``yaw`` in the ground plane."""
        fy = fx if fy is None else fy
        fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        R = np.stack([right, down, fwd])
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ np.asarray(position, dtype=np.float64)
        K = np.array([[fx, 0.0, width / 2], [0.0, fy, height / 2], [0.0, 0.0, 1.0]])
        return cls(K=K, T=T, width=int(width), height=int(height))

    def scaled(self, factor: float) -> "CameraView":
        """Same camera observed at ``factor`` times the pixel resolution."""
        S = np.diag([factor, factor, 1.0])
        return CameraView(
            K=S @ self.K,
            T=self.T.copy(),
            width=int(math.ceil(self.width * factor)),
            height=int(math.ceil(self.height * factor)),
        )


@dataclass(frozen=True)
class CameraRig:
    views: tuple[CameraView, ...]

    def __len__(self) -> int:
        return len(self.views)

    def __getitem__(self, i: int) -> CameraView:
        return self.views[i]

    def scaled(self, factor: float) -> "CameraRig":
        return CameraRig(tuple(v.scaled(factor) for v in self.views))


def validate_rig(rig: CameraRig) -> list[str]:
    """Return human-readable invariant violations; empty means valid."""
    problems = []
    if len(rig.views) == 0:
        problems.append("rig has no views")
    for n, view in enumerate(rig.views):
        K = np.asarray(view.K, dtype=np.float64)
        T = np.asarray(view.T, dtype=np.float64)
        if K.shape != (3, 3):
            problems.append(f"view {n}: intrinsics shape {K.shape} != (3, 3)")
            continue
        if T.shape != (4, 4):
            problems.append(f"view {n}: extrinsics shape {T.shape} != (4, 4)")
            continue
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(T))):
            problems.append(f"view {n}: non-finite camera parameters")
            continue
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            problems.append(f"view {n}: intrinsics not upper-triangular with K[2,2] = 1")
        if not K[0, 0] > 0:
            problems.append(f"view {n}: focal length fx = {K[0, 0]} not positive")
        if not K[1, 1] > 0:
            problems.append(f"view {n}: focal length fy = {K[1, 1]} not positive")
        R = T[:3, :3]
        err = np.max(np.abs(R.T @ R - np.eye(3)))
        if err >= 1e-9:
            problems.append(f"view {n}: rotation not orthonormal (|R^T R - I|_inf = {err:.3g})")
        elif np.linalg.det(R) <= 0:
            problems.append(f"view {n}: rotation has det <= 0 (reflection)")
        if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
            problems.append(f"view {n}: extrinsics bottom row is not [0, 0, 0, 1]")
        if view.width <= 0 or view.height <= 0:
            problems.append(f"view {n}: non-positive image size {view.width}x{view.height}")
    return problems


@dataclass
class ViewSpec:
    yaw_deg: float = 0.0
    width: int = 96
    height: int = 64
    fx: float = 48.0
    fy: float = 48.0
    position: tuple[float, float, float] = (0.0, 0.0, 1.6)

    def build(self) -> CameraView:
        return CameraView.looking(
            math.radians(self.yaw_deg), self.width, self.height, self.fx, self.fy, tuple(self.position)
        )


def _default_views() -> list[ViewSpec]:
    return [ViewSpec(yaw_deg=0.0), ViewSpec(yaw_deg=180.0)]


@dataclass
class SceneSpec:
    num_objects: int = 3
    points_per_object: int = 200
    clutter_points: int = 400
    length_range: tuple[float, float] = (1.5, 4.0)
    width_range: tuple[float, float] = (1.0, 2.0)
    height_range: tuple[float, float] = (1.0, 2.0)
    # objects sit at this distance from the origin, in any direction
    radius_range: tuple[float, float] = (4.0, 12.0)
    # clutter is spread over the square [-extent, extent]^2 on the ground
    clutter_extent: float = 16.0
    num_classes: int = 3
    views: list[ViewSpec] = field(default_factory=_default_views)

    def validate(self) -> None:
        if not self.views:
            raise ConfigError("scene spec has zero views")
        for n, v in enumerate(self.views):
            if v.width <= 0 or v.height <= 0:
                raise ConfigError(f"view {n}: non-positive image dims {v.width}x{v.height}")
        for name in ("num_objects", "points_per_object", "clutter_points"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("length_range", "width_range", "height_range", "radius_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        if self.clutter_extent <= 0:
            raise ConfigError("clutter_extent must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "views" in d:
            d["views"] = [ViewSpec(**v) for v in d["views"]]
        for key in ("length_range", "width_range", "height_range", "radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Scene:
    points: np.ndarray
    images: list[np.ndarray]
    rig: CameraRig
    boxes: list[GtBox]
    # per-object surface point ranges into ``points`` (start, stop)
    object_slices: list[tuple[int, int]] = field(default_factory=list)


# Rendered color per class id (cycled), values in (0, 1].
PALETTE = np.array(
    [[1.0, 0.85, 0.6], [0.6, 1.0, 0.75], [0.7, 0.75, 1.0], [1.0, 0.6, 0.95]]
)


def _sample_surface(box: Box3D, n: int, rng: SplitMix64) -> np.ndarray:
    """Area-weighted uniform samples on the 6 faces of ``box``; returns (n, 3)."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    cdf = np.cumsum(areas) / areas.sum()
    face = np.minimum(np.searchsorted(cdf, rng.uniform(n), side="right"), 5)
    a = rng.uniform(n, -0.5, 0.5)
    b = rng.uniform(n, -0.5, 0.5)
    local = np.empty((n, 3))
    # faces: +x, -x, +y, -y, +z, -z
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    dims = np.array([l, w, h])
    for ax in range(3):
        other = [o for o in range(3) if o != ax]
        sel = axis == ax
        local[sel, ax] = sign[sel] * dims[ax]
        local[sel, other[0]] = a[sel] * dims[other[0]]
        local[sel, other[1]] = b[sel] * dims[other[1]]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = np.empty_like(local)
    out[:, 0] = box.x + c * local[:, 0] - s * local[:, 1]
    out[:, 1] = box.y + s * local[:, 0] + c * local[:, 1]
    out[:, 2] = box.z + local[:, 2]
    return out


def render_images(boxes: list[GtBox], rig: CameraRig) -> list[np.ndarray]:
    """Paint each object as a filled rectangle in every view where its center is visible.

    The rectangle circumscribes the projections of the box corners in front
    of the camera. Farther objects are painted first.
    """
    from .geometry import project_points

    images = []
    for view in rig.views:
        img = np.zeros((view.height, view.width, 3))
        if boxes:
            centers = np.array([g.box.center for g in boxes])
            uv, depth, front = project_points(centers, view)
            order = sorted(range(len(boxes)), key=lambda n: (-depth[n], n))
            for n in order:
                u, v = uv[n]
                if not (front[n] and 0 <= u < view.width and 0 <= v < view.height):
                    continue
                cuv, _, cfront = project_points(boxes[n].box.corners(), view)
                pts = cuv[cfront]
                c0 = max(int(math.floor(pts[:, 0].min())), 0)
                c1 = min(int(math.ceil(pts[:, 0].max())), view.width)
                r0 = max(int(math.floor(pts[:, 1].min())), 0)
                r1 = min(int(math.ceil(pts[:, 1].max())), view.height)
                img[r0:r1, c0:c1] = PALETTE[boxes[n].label % len(PALETTE)]
        images.append(img)
    return images


def generate_synthetic_scene(spec: SceneSpec, seed: int) -> Scene:
    """Deterministic scene from ``(spec, seed)``.

    Draw order from a single SplitMix64 stream: per object 9 uniforms
    (angle, radius, l, w, h, yaw, class, vx, vy) followed by its surface
    samples (face, a, b, intensity blocks); then clutter (x, y, intensity).
    """
    spec.validate()
    rng = SplitMix64(seed)
    rig = CameraRig(tuple(v.build() for v in spec.views))
    boxes: list[GtBox] = []
    chunks = []
    slices = []
    offset = 0
    for _ in range(spec.num_objects):
        u = rng.uniform(9)
        theta = 2 * math.pi * u[0] - math.pi
        r = spec.radius_range[0] + u[1] * (spec.radius_range[1] - spec.radius_range[0])
        l = spec.length_range[0] + u[2] * (spec.length_range[1] - spec.length_range[0])
        w = spec.width_range[0] + u[3] * (spec.width_range[1] - spec.width_range[0])
        h = spec.height_range[0] + u[4] * (spec.height_range[1] - spec.height_range[0])
        yaw = math.pi - 2 * math.pi * u[5]  # (-pi, pi]
        label = min(int(u[6] * spec.num_classes), spec.num_classes - 1)
        box = Box3D(
            r * math.cos(theta), r * math.sin(theta), h / 2, l, w, h, yaw,
            4 * u[7] - 2, 4 * u[8] - 2,
        )
        boxes.append(GtBox(box, label))
        n = spec.points_per_object
        xyz = _sample_surface(box, n, rng)
        inten = rng.uniform(n, 0.7, 1.0)
        chunks.append(np.column_stack([xyz, inten]))
        slices.append((offset, offset + n))
        offset += n
    m = spec.clutter_points
    e = spec.clutter_extent
    cx = rng.uniform(m, -e, e)
    cy = rng.uniform(m, -e, e)
    ci = rng.uniform(m, 0.0, 0.3)
    chunks.append(np.column_stack([cx, cy, np.zeros(m), ci]))
    points = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 4))
    images = render_images(boxes, rig)
    return Scene(points=points, images=images, rig=rig, boxes=boxes, object_slices=slices)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "points": scene.points.tolist(),
        "views": [
            {
                "K": np.asarray(v.K, dtype=np.float64).ravel().tolist(),
                "T": np.asarray(v.T, dtype=np.float64).ravel().tolist(),
                "w": v.width,
                "h": v.height,
            }
            for v in scene.rig.views
        ],
        "boxes": [{"box": g.box.as_list(), "label": g.label} for g in scene.boxes],
        "object_slices": [list(s) for s in scene.object_slices],
    }


def scene_from_dict(d: dict) -> Scene:
    views = tuple(
        CameraView(
            K=np.array(v["K"], dtype=np.float64).reshape(3, 3),
            T=np.array(v["T"], dtype=np.float64).reshape(4, 4),
            width=int(v["w"]),
            height=int(v["h"]),
        )
        for v in d["views"]
    )
    rig = CameraRig(views)
    problems = validate_rig(rig)
    if problems:
        raise ConfigError("invalid rig in scene file: " + "; ".join(problems))
    pts = np.array(d["points"], dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(pts)):
        raise ConfigError("scene file contains non-finite point coordinates")
    boxes = [GtBox(Box3D.from_list(b["box"]), int(b["label"])) for b in d.get("boxes", [])]
    slices = [tuple(s) for s in d.get("object_slices", [])]
    return Scene(points=pts, images=render_images(boxes, rig), rig=rig, boxes=boxes,
                 object_slices=slices)


def save_scene(scene: Scene, out_dir: str | Path) -> list[Path]:
    """Write ``scene.json`` plus one P5 PGM per view and color channel."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "scene.json"
    path.write_text(json.dumps(scene_to_dict(scene)))
    written = [path]
    for v, img in enumerate(scene.images):
        for ch in range(img.shape[2]):
            p = out / f"view{v}_c{ch}.pgm"
            write_pgm(p, to_unit_bytes(img[:, :, ch]))
            written.append(p)
    return written


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
