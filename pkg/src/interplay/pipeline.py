"""End-to-end orchestration: configuration, forward run, oracle suite, heatmaps."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import oracles
from .correspondence import (
    BevToImgMap,
    ImgToBevMap,
    build_bev_to_img,
    build_img_to_bev,
    summary_stats,
)
from .decoder import DecoderConfig, DecoderOutput, decoder_forward, heatmap, init_queries
from .errors import ConfigError, StageError
from .geometry import (
    BevGrid,
    DepthMap,
    PillarIndex,
    back_project,
    build_sparse_depth,
    complete_depth,
    pillarize,
    world_to_image,
)
from .interaction import (
    EncoderConfig,
    EncoderTrace,
    encoder_forward,
    iml,
    mmri_image_to_lidar,
    mmri_lidar_to_image,
)
from .io import normalize_bytes, write_jsonl, write_pgm
from .model import ModelParams, bev_raster
from .nn import Linear, load_checkpoint
from .rng import SplitMix64
from .scene import CameraRig, Scene, SceneSpec, generate_synthetic_scene, load_scene, validate_rig

log = logging.getLogger(__name__)

ORACLE_MAX_CELLS = 64 * 64
ORACLE_MAX_POINTS = 5000


def _default_grid() -> BevGrid:
    # toy grid: 64 x 64 cells of 0.5 m (production: +-54 m at 0.075 m)
    return BevGrid(-16.0, 16.0, -16.0, 16.0, 0.5)


@dataclass
class PipelineConfig:
    seed: int = 0
    grid: BevGrid = field(default_factory=_default_grid)
    stride: int = 2  # backbone downsampling; features live on the coarsened grid / scaled rig
    scene: SceneSpec = field(default_factory=SceneSpec)
    scene_file: str | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    checkpoint: str | None = None
    out_dir: str = "out"
    oracle: bool = False

    @property
    def feature_grid(self) -> BevGrid:
        return self.grid.coarsened(self.stride)

    def validate(self) -> None:
        """Reject shape-inconsistent configurations before any heavy work."""
        if not (0 <= int(self.seed) < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        self.encoder.validate()
        self.decoder.validate()
        if self.scene_file is None:
            self.scene.validate()
        elif not Path(self.scene_file).exists():
            raise ConfigError(f"scene file {self.scene_file} does not exist")
        cells = self.feature_grid.num_cells
        if self.decoder.num_queries > cells:
            raise ConfigError(
                f"num_queries {self.decoder.num_queries} exceeds {cells} feature-grid cells"
            )
        if self.scene_file is None:
            problems = validate_rig(CameraRig(tuple(v.build() for v in self.scene.views)))
            if problems:
                raise ConfigError("invalid rig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "grid" in d:
                d["grid"] = BevGrid(**d["grid"])
            if "scene" in d:
                d["scene"] = SceneSpec.from_dict(d["scene"])
            if "encoder" in d:
                d["encoder"] = EncoderConfig(**d["encoder"])
            if "decoder" in d:
                d["decoder"] = DecoderConfig(**d["decoder"])
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"malformed config: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(data)

    @classmethod
    def production(cls) -> "PipelineConfig":
        """Full-scale constants: +-54 m at 0.075 m, 2 encoder / 5 decoder layers, 200 queries."""
        from .scene import ViewSpec

        views = [ViewSpec(yaw_deg=60.0 * n, width=800, height=448, fx=560.0, fy=560.0) for n in range(6)]
        return cls(
            grid=BevGrid(-54.0, 54.0, -54.0, 54.0, 0.075),
            scene=SceneSpec(views=views, radius_range=(5.0, 50.0), clutter_extent=54.0),
            encoder=EncoderConfig(num_layers=2),
            decoder=DecoderConfig(num_layers=5, num_queries=200),
        )


def param_seed(seed: int) -> int:
    """Weights use a child stream of the run seed so scene and weights stay independent."""
    return SplitMix64(seed).derive(1).state


def build_params(config: PipelineConfig) -> ModelParams:
    params = ModelParams.init(param_seed(config.seed), config.encoder, config.decoder, config.stride)
    if config.checkpoint:
        params = load_checkpoint(params, config.checkpoint)
    return params


@dataclass
class Prepared:
    """Everything computed for one scene up to and including the encoder."""

    scene: Scene
    grid: BevGrid  # feature-level grid
    rig: CameraRig  # feature-level rig
    sparse: list[DepthMap]
    dense: list[DepthMap]
    pillars: PillarIndex
    img_to_bev: ImgToBevMap
    bev_to_img: BevToImgMap
    h_p0: np.ndarray
    h_c0: list[np.ndarray]
    h_p: np.ndarray
    h_c: list[np.ndarray]
    traces: list[EncoderTrace]
    timings_ms: dict[str, float]


@contextmanager
def _stage(name: str, timings: dict[str, float]):
    t0 = time.perf_counter()
    try:
        yield
    except (StageError, KeyboardInterrupt):
        raise
    except Exception as e:
        raise StageError(name, e) from e
    finally:
        timings[name] = (time.perf_counter() - t0) * 1000.0


def load_or_generate_scene(config: PipelineConfig) -> Scene:
    if config.scene_file:
        return load_scene(config.scene_file)
    return generate_synthetic_scene(config.scene, config.seed)


def prepare(config: PipelineConfig, params: ModelParams, scene: Scene | None = None) -> Prepared:
    timings: dict[str, float] = {}
    with _stage("scene", timings):
        if scene is None:
            scene = load_or_generate_scene(config)
    with _stage("geometry", timings):
        grid = config.feature_grid
        rig = scene.rig.scaled(1.0 / config.stride)
        sparse = [build_sparse_depth(scene.points, v) for v in rig.views]
        # a view with no projected points stays all-invalid and gets no correspondences
        dense = [complete_depth(s) if s.valid.any() else s for s in sparse]
        pillars = pillarize(scene.points, grid)
    with _stage("correspondence", timings):
        img_to_bev = build_img_to_bev(dense, rig, grid, config.encoder.k_corr)
        bev_to_img = build_bev_to_img(pillars, scene.points, rig)
    with _stage("backbone", timings):
        h_p0 = params.stem_bev(bev_raster(scene.points, config.grid))
        h_c0 = [params.stem_img(img) for img in scene.images]
        if h_p0.shape[:2] != grid.shape:
            raise ConfigError(f"BEV stem output {h_p0.shape[:2]} != feature grid {grid.shape}")
        for v, (hc, view) in enumerate(zip(h_c0, rig.views)):
            if hc.shape[:2] != (view.height, view.width):
                raise ConfigError(f"view {v} stem output {hc.shape[:2]} != {(view.height, view.width)}")
    with _stage("encoder", timings):
        traces: list[EncoderTrace] = []
        h_p, h_c = encoder_forward(
            h_p0, h_c0, img_to_bev, bev_to_img, config.encoder, params.encoder, traces
        )
    return Prepared(scene, grid, rig, sparse, dense, pillars, img_to_bev, bev_to_img,
                    h_p0, h_c0, h_p, h_c, traces, timings)


def run_decoder(prep: Prepared, config: PipelineConfig, params: ModelParams) -> DecoderOutput:
    queries = init_queries(prep.h_p, prep.grid, config.decoder.num_queries, params.heat)
    return decoder_forward(queries, prep.h_p, prep.h_c, prep.rig, prep.grid, config.decoder, params.decoder)


def correspondence_stats(prep: Prepared) -> dict:
    return {
        "img_to_bev": summary_stats(prep.img_to_bev.set_sizes()),
        "bev_to_img": summary_stats(prep.bev_to_img.set_sizes()),
    }


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def heatmap_image(h_p: np.ndarray, heat: Linear) -> np.ndarray:
    return normalize_bytes(heatmap(h_p, heat))


@dataclass
class RunReport:
    timings_ms: dict[str, float]
    correspondence: dict
    files: dict[str, str]  # name -> path
    digests: dict[str, str]
    checks: dict[str, bool]
    modalities: list[str]
    oracle: dict | None = None

    def deterministic_dict(self) -> dict:
        """Report content written to disk; timings are excluded so reruns are byte-identical."""
        return {
            "correspondence": self.correspondence,
            "files": {k: Path(v).name for k, v in self.files.items()},
            "digests": self.digests,
            "checks": self.checks,
            "modalities": self.modalities,
            "oracle": self.oracle,
        }


def _invariant_checks(prep: Prepared, out: DecoderOutput, config: PipelineConfig) -> dict[str, bool]:
    n = config.decoder.num_queries
    dets = [d for layer in out.detections for d in layer]
    return {
        "encoder_shapes_preserved": prep.h_p.shape == prep.h_p0.shape
        and all(a.shape == b.shape for a, b in zip(prep.h_c, prep.h_c0)),
        "encoder_finite": bool(np.all(np.isfinite(prep.h_p)))
        and all(bool(np.all(np.isfinite(h))) for h in prep.h_c),
        "detections_per_layer": all(len(layer) == n for layer in out.detections),
        "box_dims_positive": all(d.box.l > 0 and d.box.w > 0 and d.box.h > 0 for d in dets),
        "yaw_wrapped": all(-math.pi < d.box.yaw <= math.pi for d in dets),
        "scores_in_unit_interval": all(bool(np.all((d.scores >= 0) & (d.scores <= 1))) for d in dets),
    }


def _loop_equivalence(prep: Prepared, config: PipelineConfig, params: ModelParams) -> dict:
    """Compare the gathered layer-1 attention paths with the per-location loops."""
    if not params.encoder or config.encoder.num_layers == 0:
        return {"passed": True, "mismatches": 0, "detail": "no encoder layers"}
    p = params.encoder[0]
    h_p, h_c = prep.h_p0, prep.h_c0
    pairs = [
        ("mmri_image_to_lidar", [mmri_image_to_lidar(h_c, h_p, prep.img_to_bev, p.c2p)],
         [oracles.naive_mmri_image_to_lidar(h_c, h_p, prep.img_to_bev, p.c2p)]),
        ("mmri_lidar_to_image", mmri_lidar_to_image(h_p, h_c, prep.bev_to_img, p.p2c),
         oracles.naive_mmri_lidar_to_image(h_p, h_c, prep.bev_to_img, p.p2c)),
        ("iml_bev", [iml(h_p, p.p2p, config.encoder.k_iml)],
         [oracles.naive_iml(h_p, p.p2p, config.encoder.k_iml)]),
        ("iml_image", [iml(h, p.c2c, config.encoder.k_iml) for h in h_c],
         [oracles.naive_iml(h, p.c2c, config.encoder.k_iml) for h in h_c]),
    ]
    mismatches = 0
    first = None
    for name, fast, slow in pairs:
        for n, (a, b) in enumerate(zip(fast, slow)):
            bad = np.argwhere(np.any(a != b, axis=-1))
            mismatches += len(bad)
            if len(bad) and first is None:
                first = {"path": name, "map": n, "location": bad[0].tolist()}
    return {"passed": mismatches == 0, "mismatches": mismatches, "first_mismatch": first}


def run_forward(config: PipelineConfig, params: ModelParams | None = None) -> RunReport:
    """Scene -> geometry -> correspondence -> encoder -> decoder, writing all artifacts."""
    config.validate()
    if params is None:
        params = build_params(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prep = prepare(config, params)
    timings = dict(prep.timings_ms)
    with _stage("decoder", timings):
        out = run_decoder(prep, config, params)
    files: dict[str, str] = {}
    with _stage("write", timings):
        det_path = out_dir / "detections.jsonl"
        write_jsonl(det_path, (
            det.to_record(layer, n)
            for layer, dets in enumerate(out.detections, start=1)
            for n, det in enumerate(dets)
        ))
        files["detections"] = str(det_path)
        for tag, h in (("before", prep.h_p0), ("after", prep.h_p)):
            p = out_dir / f"heatmap_{tag}.pgm"
            write_pgm(p, heatmap_image(h, params.heat))
            files[f"heatmap_{tag}"] = str(p)
    oracle = None
    if config.oracle:
        with _stage("oracle", timings):
            oracle = _loop_equivalence(prep, config, params)
    report = RunReport(
        timings_ms=timings,
        correspondence=correspondence_stats(prep),
        files=files,
        digests={k: sha256_file(v) for k, v in files.items()},
        checks=_invariant_checks(prep, out, config),
        modalities=out.modalities,
        oracle=oracle,
    )
    rpath = out_dir / "report.json"
    rpath.write_text(json.dumps(report.deterministic_dict(), indent=1, sort_keys=True))
    report.files["report"] = str(rpath)
    for stage, ms in timings.items():
        log.info("%-15s %9.1f ms", stage, ms)
    return report


@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str
    first_mismatch: object = None


@dataclass
class OracleReport:
    results: list[OracleResult]
    notes: list[str]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "notes": self.notes,
            "results": [dataclasses.asdict(r) for r in self.results],
        }


def _check_budget(config: PipelineConfig, scene: Scene) -> None:
    cells = config.grid.num_cells
    points = len(scene.points)
    if cells > ORACLE_MAX_CELLS or points > ORACLE_MAX_POINTS:
        raise ConfigError(
            f"oracle suite is limited to {ORACLE_MAX_CELLS} cells and {ORACLE_MAX_POINTS} points; "
            f"config has {cells} cells ({config.grid.height}x{config.grid.width}) and {points} points"
        )


def corrupt_img_to_bev(m: ImgToBevMap) -> tuple[ImgToBevMap, tuple | None]:
    """Test hook: drop the first entry of the first non-empty pixel set."""
    targets = [t.copy() for t in m.targets]
    for v, t in enumerate(targets):
        hits = np.argwhere(t[:, :, 0] >= 0)
        if len(hits):
            i, j = hits[0]
            t[i, j, 0] = (t[i, j, 0] + 1) % (m.grid_shape[0] * m.grid_shape[1])
            return ImgToBevMap(m.k, m.grid_shape, tuple(targets)), (v, int(i), int(j))
    return m, None


def run_oracle_suite(
    config: PipelineConfig, params: ModelParams | None = None, corrupt_correspondence: bool = False
) -> OracleReport:
    """Check every fast path against its brute-force reference on a toy-scale scene."""
    config.validate()
    scene = load_or_generate_scene(config)
    _check_budget(config, scene)
    if params is None:
        params = build_params(config)
    prep = prepare(config, params, scene)
    results: list[OracleResult] = []
    notes: list[str] = []
    pts = scene.points
    if len(pts) == 0:
        notes.append("empty point cloud: geometric oracles pass vacuously")

    # projection round-trip over every point in front of some view
    worst = 0.0
    count = 0
    for view in scene.rig.views:
        for p in pts[:, :3]:
            proj = world_to_image(p, view)
            if proj is None:
                continue
            q = back_project(proj[0], proj[1], proj[2], view)
            worst = max(worst, float(np.linalg.norm(q - p)))
            count += 1
    results.append(OracleResult("projection_round_trip", worst < 1e-6,
                                f"{count} projections, max error {worst:.3g} m"))

    ref = oracles.naive_pillars(pts, prep.grid)
    first = None
    H, W = prep.grid.shape
    for i in range(H):
        for j in range(W):
            if prep.pillars.get(i, j).tolist() != ref.get((i, j), []):
                first = (i, j)
                break
        if first:
            break
    total = sum(len(v) for v in ref.values())
    ok = first is None and len(prep.pillars) == total
    results.append(OracleResult("pillar_partition", ok, f"{len(prep.pillars)} points indexed", first))

    img_to_bev = prep.img_to_bev
    corrupted_at = None
    if corrupt_correspondence:
        img_to_bev, corrupted_at = corrupt_img_to_bev(img_to_bev)
        notes.append(f"correspondence corrupted at {corrupted_at}")
    cell_maps = oracles.naive_cell_map(prep.dense, prep.rig, prep.grid)
    ref_sets = oracles.naive_img_to_bev(cell_maps, config.encoder.k_corr)
    mis_c = oracles.first_img_to_bev_mismatch(img_to_bev, ref_sets)
    mis_p = oracles.first_bev_to_img_mismatch(
        prep.bev_to_img, oracles.naive_bev_to_img(pts, prep.rig, prep.grid)
    )
    results.append(OracleResult(
        "correspondence_composition", mis_c is None and mis_p is None,
        "image->BEV and BEV->image sets against scalar composition",
        {"img_to_bev": mis_c, "bev_to_img": mis_p} if (mis_c or mis_p) else None,
    ))

    eq = _loop_equivalence(prep, config, params)
    results.append(OracleResult("attention_loop_equivalence", eq["passed"],
                                f"{eq['mismatches']} mismatching locations", eq.get("first_mismatch")))

    queries = init_queries(prep.h_p, prep.grid, config.decoder.num_queries, params.heat)
    fast = decoder_forward(queries, prep.h_p, prep.h_c, prep.rig, prep.grid, config.decoder, params.decoder)
    slow = oracles.naive_decoder(queries, prep.h_p, prep.h_c, prep.rig, prep.grid, config.decoder, params.decoder)
    first = None
    for l, (a, b) in enumerate(zip(fast.detections, slow)):
        for n, (da, db) in enumerate(zip(a, b)):
            if da.box != db.box or not np.array_equal(da.scores, db.scores):
                first = (l + 1, n)
                break
        if first:
            break
    results.append(OracleResult("decoder_composition", first is None,
                                f"{len(fast.detections)} layers x {len(queries)} queries", first))
    return OracleReport(results, notes)


def true_cell(scene: Scene, grid: BevGrid):
    from .geometry import bev_index

    b = scene.boxes[0].box
    return bev_index(b.x, b.y, grid)


def _margin(logits: np.ndarray, cell) -> float:
    """Best logit within Chebyshev distance 1 of ``cell`` minus the best logit elsewhere."""
    i, j = cell
    near = np.zeros(logits.shape, dtype=bool)
    near[max(i - 1, 0) : i + 2, max(j - 1, 0) : j + 2] = True
    if near.all():
        return math.inf
    return float(logits[near].max() - logits[~near].max())


def calibrate_heatmap(
    features: list[np.ndarray], cells: list[tuple[int, int]], heat: Linear,
    steps: int = 200, seed: int = 0, sigma: float = 0.5,
) -> tuple[Linear, list[float]]:
    """Seeded random search over the heatmap's linear map.

    Maximizes the mean of ``tanh(margin)`` over the calibration maps, where
    the margin compares the best logit near the true cell with the best
    logit elsewhere. Each step perturbs the incumbent weights with Gaussian
    noise of scale ``sigma`` (annealed linearly to ``sigma / 10``) and
    keeps the candidate only if it scores strictly higher.
    """
    rng = SplitMix64(seed)
    flat = [f.reshape(-1, f.shape[-1]) for f in features]

    def score(w: np.ndarray) -> float:
        vals = []
        for f, h, cell in zip(flat, features, cells):
            logits = (f @ w).reshape(h.shape[:2])
            vals.append(math.tanh(_margin(logits, cell)))
        return float(np.mean(vals)) if vals else 0.0

    best = heat.weight[:, 0].copy()
    best_score = score(best)
    history = [best_score]
    for step in range(steps):
        scale = sigma * (1.0 - 0.9 * step / max(steps - 1, 1))
        cand = best + scale * rng.normal(len(best))
        s = score(cand)
        if s > best_score:
            best, best_score = cand, s
        history.append(best_score)
    return Linear(best[:, None].copy(), heat.bias.copy()), history


def single_object_spec(spec: SceneSpec) -> SceneSpec:
    return dataclasses.replace(spec, num_objects=1)


def calibration_set(config: PipelineConfig, params: ModelParams, seeds) -> tuple[list, list]:
    """Post-encoder BEV features and true object cells for single-object scenes."""
    feats, cells = [], []
    spec = single_object_spec(config.scene)
    for s in seeds:
        cfg = dataclasses.replace(config, seed=int(s), scene=spec, scene_file=None)
        prep = prepare(cfg, params)
        feats.append(prep.h_p)
        cells.append(true_cell(prep.scene, prep.grid))
    return feats, cells


def heatmap_argmax(h_p: np.ndarray, heat: Linear) -> tuple[int, int]:
    """Cell of the largest heatmap value; ties go to the smallest (row, col)."""
    values = heatmap(h_p, heat)
    flat = int(np.argmax(values))
    return flat // values.shape[1], flat % values.shape[1]


def dump_heatmaps(config: PipelineConfig, params: ModelParams | None = None,
                  which: tuple[str, ...] = ("before", "after"), prep: Prepared | None = None) -> list[Path]:
    """Render the query-initialization heatmap from BEV features before/after the encoder."""
    config.validate()
    if params is None:
        params = build_params(config)
    if prep is None:
        prep = prepare(config, params)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for tag in which:
        h = {"before": prep.h_p0, "after": prep.h_p}[tag]
        p = out_dir / f"heatmap_{tag}.pgm"
        write_pgm(p, heatmap_image(h, params.heat))
        written.append(p)
    return written
