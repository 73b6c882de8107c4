from __future__ import annotations

import json
import time

import numpy as np
import pytest

from interplay import cli
from interplay.errors import ConfigError, StageError
from interplay.geometry import BevGrid
from interplay.io import read_jsonl, read_pgm
from interplay.nn import Linear, load_checkpoint, named_arrays, read_checkpoint, save_checkpoint
from interplay.pipeline import (
    PipelineConfig,
    build_params,
    dump_heatmaps,
    heatmap_image,
    run_forward,
    run_oracle_suite,
)
from interplay.scene import SceneSpec, generate_synthetic_scene, save_scene


@pytest.fixture
def cfg(tmp_path) -> PipelineConfig:
    return PipelineConfig(out_dir=str(tmp_path / "out"))


class TestForward:
    def test_toy_default(self, cfg):
        t0 = time.perf_counter()
        report = run_forward(cfg)
        assert time.perf_counter() - t0 < 50.0
        recs = read_jsonl(report.files["detections"])
        assert len(recs) == 5 * 16
        assert [r["layer"] for r in recs[::16]] == [1, 2, 3, 4, 5]
        assert report.modalities == ["img", "bev", "img", "bev", "img"]
        assert all(report.checks.values())
        for path in report.files.values():
            assert open(path, "rb").read()
        assert read_pgm(report.files["heatmap_after"]).shape == (32, 32)

    def test_report_json(self, cfg):
        report = run_forward(cfg)
        d = json.loads(open(report.files["report"]).read())
        assert d["digests"] == report.digests
        assert set(d["correspondence"]) == {"img_to_bev", "bev_to_img"}
        assert "timings_ms" not in d
        assert set(report.timings_ms) >= {"scene", "geometry", "correspondence", "encoder", "decoder"}

    def test_same_seed_same_digests(self, tmp_path):
        a = run_forward(PipelineConfig(out_dir=str(tmp_path / "a")))
        b = run_forward(PipelineConfig(out_dir=str(tmp_path / "b")))
        assert a.digests == b.digests
        assert open(a.files["report"], "rb").read() == open(b.files["report"], "rb").read()

    def test_other_seed_differs(self, tmp_path):
        a = run_forward(PipelineConfig(out_dir=str(tmp_path / "a")))
        b = run_forward(PipelineConfig(seed=1, out_dir=str(tmp_path / "b")))
        assert a.digests["detections"] != b.digests["detections"]

    def test_oracle_toggle(self, cfg):
        cfg.oracle = True
        report = run_forward(cfg)
        assert report.oracle["passed"] and report.oracle["mismatches"] == 0

    def test_empty_scene_forward(self, cfg):
        cfg.scene = SceneSpec(num_objects=0, clutter_points=0)
        report = run_forward(cfg)
        assert all(report.checks.values())
        assert report.correspondence["bev_to_img"]["empty_fraction"] == 1.0

    def test_scene_file(self, cfg, tmp_path):
        save_scene(generate_synthetic_scene(SceneSpec(), 0), tmp_path / "scene")
        cfg.scene_file = str(tmp_path / "scene" / "scene.json")
        from_file = run_forward(cfg)
        generated = run_forward(PipelineConfig(out_dir=str(tmp_path / "gen")))
        assert from_file.digests == generated.digests

    def test_stage_attribution(self, cfg, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"points": [], "views": [{"K": [1, 0, 0, 0, 1, 0, 0, 0, 1], "T": [2] * 16, "w": 4, "h": 4}]}))
        cfg.scene_file = str(bad)
        with pytest.raises(StageError) as info:
            run_forward(cfg)
        assert info.value.stage == "scene" and isinstance(info.value.cause, ConfigError)


class TestOracleSuite:
    def test_default_passes(self, cfg):
        report = run_oracle_suite(cfg)
        assert [r.name for r in report.results] == [
            "projection_round_trip", "pillar_partition", "correspondence_composition",
            "attention_loop_equivalence", "decoder_composition"]
        assert report.passed

    def test_corruption_detected(self, cfg):
        report = run_oracle_suite(cfg, corrupt_correspondence=True)
        comp = {r.name: r for r in report.results}["correspondence_composition"]
        assert not comp.passed
        corrupted = tuple(int(x) for x in report.notes[0].split("at ")[1].strip("()").split(", "))
        assert comp.first_mismatch["img_to_bev"] == corrupted

    def test_empty_scene(self, cfg):
        cfg.scene = SceneSpec(num_objects=0, clutter_points=0)
        report = run_oracle_suite(cfg)
        assert report.passed
        assert any("empty" in n for n in report.notes)

    def test_over_budget_refused(self, cfg):
        cfg.grid = BevGrid(-54.0, 54.0, -54.0, 54.0, 0.075)
        with pytest.raises(ConfigError, match="1440x1440"):
            run_oracle_suite(cfg)


class TestHeatmaps:
    def test_zero_features_uniform(self):
        img = heatmap_image(np.zeros((8, 8, 4)), Linear(np.ones((4, 1)), np.zeros(1)))
        assert np.all(img == img[0, 0])

    def test_deterministic_files(self, tmp_path):
        a = dump_heatmaps(PipelineConfig(out_dir=str(tmp_path / "a")))
        b = dump_heatmaps(PipelineConfig(out_dir=str(tmp_path / "b")))
        assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
        assert [p.name for p in a] == ["heatmap_before.pgm", "heatmap_after.pgm"]


class TestConfig:
    def test_round_trip(self):
        cfg = PipelineConfig(seed=5)
        again = PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"sede": 3})

    def test_malformed_section(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"encoder": {"layers": 2}})

    def test_too_many_queries(self):
        cfg = PipelineConfig()
        cfg.decoder.num_queries = 32 * 32 + 1
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_missing_scene_file(self):
        with pytest.raises(ConfigError):
            PipelineConfig(scene_file="/nonexistent/scene.json").validate()

    def test_production_constants(self):
        cfg = PipelineConfig.production()
        cfg.validate()
        assert cfg.grid.shape == (1440, 1440)
        assert (cfg.encoder.num_layers, cfg.decoder.num_layers, cfg.decoder.num_queries) == (2, 5, 200)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = build_params(PipelineConfig())
        bin_path, manifest = save_checkpoint(params, tmp_path / "w.bin")
        raw = bin_path.read_bytes()
        assert raw[:4] == b"IPCK"
        stored = read_checkpoint(bin_path)
        meta = json.loads(manifest.read_text())
        assert [t["name"] for t in meta["tensors"]] == list(stored)
        for name, arr in named_arrays(params):
            assert np.array_equal(stored[name], arr.astype(np.float32).astype(np.float64))
        loaded = load_checkpoint(params, bin_path)
        assert np.array_equal(loaded.heat.weight, stored["heat.weight"])

    def test_forward_with_checkpoint(self, tmp_path):
        params = build_params(PipelineConfig())
        save_checkpoint(params, tmp_path / "w.bin")
        cfg = PipelineConfig(checkpoint=str(tmp_path / "w.bin"), out_dir=str(tmp_path / "o"))
        assert all(run_forward(cfg).checks.values())

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(build_params(PipelineConfig()), tmp_path / "w.bin")
        cfg = PipelineConfig()
        cfg.encoder.channels = 8
        cfg.encoder.key_dim = 8
        with pytest.raises(ConfigError):
            load_checkpoint(build_params(cfg), tmp_path / "w.bin")


class TestCli:
    def test_synth(self, tmp_path, capsys):
        assert cli.main(["synth", "--seed", "3", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "scene.json").exists() and (tmp_path / "view1_c2.pgm").exists()
        assert json.loads(capsys.readouterr().out)["points"] == 1000

    def test_forward(self, tmp_path):
        assert cli.main(["forward", "--out", str(tmp_path), "--oracle", "--dump-params"]) == 0
        assert (tmp_path / "detections.jsonl").exists() and (tmp_path / "params.bin.json").exists()

    def test_corr(self, tmp_path):
        assert cli.main(["corr", "--out", str(tmp_path)]) == 0
        recs = read_jsonl(tmp_path / "corr_img_to_bev.jsonl")
        assert len(recs) == 2 * 32 * 48 and set(recs[0]) == {"target", "sources"}
        assert len(read_jsonl(tmp_path / "corr_bev_to_img.jsonl")) == 32 * 32
        assert read_pgm(tmp_path / "depth_dense_view0.pgm").min() > 0
        assert json.loads((tmp_path / "pillars.json").read_text())["shape"] == [32, 32]

    def test_oracle(self, tmp_path):
        assert cli.main(["oracle", "--out", str(tmp_path)]) == 0
        assert cli.main(["oracle", "--out", str(tmp_path), "--corrupt"]) == 1

    def test_heatmap(self, tmp_path):
        assert cli.main(["heatmap", "--out", str(tmp_path)]) == 0
        assert read_pgm(tmp_path / "heatmap_before.pgm").shape == (32, 32)

    def test_invalid_config_exit_2(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"decoder": {"num_queries": 5000}}))
        assert cli.main(["forward", "--config", str(path), "--out", str(tmp_path)]) == 2
        path.write_text("{not json")
        assert cli.main(["forward", "--config", str(path)]) == 2
        assert cli.main(["forward", "--seed", "-1"]) == 2

    def test_runtime_error_exit_1(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert cli.main(["forward", "--out", str(blocker / "sub")]) == 1
