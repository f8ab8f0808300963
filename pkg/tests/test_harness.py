import json
import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pillars3d import cli
from pillars3d.bench import BAND, param_report, runtime_report
from pillars3d.checks import run_gradcheck, run_oracles
from pillars3d.config import ConfigError, RunConfig
from pillars3d.estimators import Detector, VoxelEncoder
from pillars3d.geometry import Box3D
from pillars3d.model import STAGES, StageError, build_weights, count_weights, forward, module_totals, \
    parameter_table
from pillars3d.records import DetectionRecord, dumps, loads
from pillars3d.synth import PlantedBox, SynthSpec, load_points, parse_spec, synth_scene
from pillars3d.voxelizer import SceneConfig, write_bin


@pytest.fixture
def small_cfg(small_scene):
    return RunConfig(scene=small_scene)


@pytest.fixture
def cfg_path(tmp_path, small_cfg):
    path = tmp_path / "cfg.json"
    small_cfg.save(path)
    return str(path)


@pytest.fixture
def scene_path(tmp_path, small_scene):
    spec = SynthSpec([PlantedBox(Box3D((5.0, 0.0, -1.0), (3.9, 1.6, 1.56)), 800)], clutter=1200)
    path = tmp_path / "scene.npz"
    synth_scene(spec, 3, small_scene).save(path)
    return str(path)


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = RunConfig()
        again = RunConfig.from_dict(json.loads(cfg.to_json()))
        assert again == cfg
        path = tmp_path / "c.json"
        cfg.save(path)
        assert RunConfig.load(path) == cfg

    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.scene.grid_dims == (440, 500, 16)
        assert (cfg.memory.num_keys, cfg.memory.num_values) == (10, 50)
        assert cfg.roi.lambda_mem == 0.5 and cfg.post.k_post == 100
        assert (cfg.rpn_loss.reg, cfg.rpn_loss.dir, cfg.rpn_loss.cls) == (2.0, 0.2, 1.0)

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="lamda"):
            RunConfig.from_dict({"roi": {"lamda_mem": 1.0}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"typo": 1})

    def test_partial_override(self):
        cfg = RunConfig.from_dict({"memory": {"num_keys": 20, "num_values": 200}, "seed": 5})
        assert cfg.memory.num_keys == 20 and cfg.seed == 5 and cfg.scene == SceneConfig()

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"scene": {"range_x": [1.0, 0.0]}})


class TestRecords:
    def test_roundtrip(self, rng):
        recs = [DetectionRecord(f"{i:06d}", "Car", tuple(rng.normal(size=7)), float(rng.random()))
                for i in range(20)]
        assert loads(dumps(recs)) == recs
        assert dumps(loads(dumps(recs))) == dumps(recs)

    def test_validation(self):
        with pytest.raises(ValueError):
            DetectionRecord("0", "Car", (0,) * 7, 1.5)
        with pytest.raises(ValueError):
            DetectionRecord("0", "Car", (0,) * 6, 0.5)
        with pytest.raises(ValueError):
            DetectionRecord.from_json('{"frame": "0", "class_name": "Car", "box": [0,0,0,1,1,1,0], '
                                      '"score": 0.5, "extra": 1}')

    def test_kitti_line(self):
        line = DetectionRecord("0", "Car", (1, 2, 3, 4, 5, 6, 0.5), 0.25).to_kitti_line()
        assert line.split()[0] == "Car" and len(line.split()) == 16


class TestSynth:
    BOX = Box3D((5.0, 1.0, -1.0), (4.0, 2.0, 1.5), 0.4)

    def test_containment(self, small_scene):
        scene = synth_scene(SynthSpec([PlantedBox(self.BOX, 500)], clutter=0), 0, small_scene)
        pts = scene.points[:, :3] - np.array(self.BOX.center)
        c, s = math.cos(self.BOX.yaw), math.sin(self.BOX.yaw)
        local = np.column_stack([c * pts[:, 0] + s * pts[:, 1], -s * pts[:, 0] + c * pts[:, 1], pts[:, 2]])
        assert len(local) == 500
        assert np.all(np.abs(local) <= np.array(self.BOX.size) / 2 + 1e-9)

    def test_clutter_only(self, small_scene):
        scene = synth_scene(SynthSpec([], clutter=300), 0, small_scene)
        assert scene.points.shape == (300, 4) and scene.gt_boxes.shape == (0, 7)

    def test_deterministic_and_statistics(self, small_scene):
        spec = SynthSpec([PlantedBox(self.BOX, 2000)], clutter=2000)
        a = synth_scene(spec, 1, small_scene).points
        assert np.array_equal(a, synth_scene(spec, 1, small_scene).points)
        b = synth_scene(spec, 2, small_scene).points
        assert not np.array_equal(a, b)
        assert len(a) == len(b)
        for col in range(4):
            # location is compared on the column's own spread, spread relatively
            sd_a, sd_b = a[:, col].std(), b[:, col].std()
            assert abs(a[:, col].mean() - b[:, col].mean()) <= 0.1 * max(sd_a, sd_b)
            assert abs(sd_a - sd_b) <= 0.1 * max(sd_a, sd_b)

    def test_out_of_range(self, small_scene):
        with pytest.raises(ValueError):
            synth_scene(SynthSpec([PlantedBox(Box3D((50, 0, -1), (4, 2, 1.5)))]), 0, small_scene)

    def test_parse_spec(self):
        spec = parse_spec({"boxes": [{"center": [5, 0, -1], "size": [4, 2, 1.5]}], "clutter": 10})
        assert len(spec.boxes) == 1 and spec.clutter == 10
        with pytest.raises(ValueError):
            parse_spec({"boxs": []})

    def test_load_points(self, tmp_path, rng):
        pts = rng.normal(size=(5, 4)).astype(np.float32)
        write_bin(tmp_path / "a.bin", pts)
        np.testing.assert_array_equal(load_points(tmp_path / "a.bin"), pts)


class TestModel:
    def test_small_forward(self, small_cfg, scene_path):
        pts = load_points(scene_path)
        res = forward(pts, build_weights(small_cfg), small_cfg)
        assert set(res.timings) == set(STAGES)
        assert res.shapes["pseudo_image"] == (32, 16, 64, 64)
        assert res.shapes["neck"] == (576, 32, 32)
        assert len(res.detections) <= 100
        assert res.shapes["sub_roi"] == (216, 160) and res.shapes["context"] == (216, 320)

    def test_stage_error(self, small_cfg):
        with pytest.raises(StageError, match=r"\[Pseudo images\]"):
            forward(np.full((2, 4), np.nan), build_weights(small_cfg), small_cfg)

    def test_param_table_matches_weights(self):
        cfg = RunConfig()
        totals = module_totals(parameter_table(cfg))
        measured = count_weights(build_weights(cfg))
        assert totals == measured


class TestBench:
    def test_param_report(self):
        rep = param_report(RunConfig())
        assert sum(r.count for r in rep.rows) == rep.total
        assert BAND[0] <= rep.total <= BAND[1]
        text = "\n".join(rep.lines())
        assert "110,592" in text and "hypothetical all-3D total" in text and "8.1M" in text

    def test_runtime_report(self, small_cfg, scene_path):
        rep = runtime_report(load_points(scene_path), build_weights(small_cfg), small_cfg, runs=1)
        assert list(rep.stage_ms) == list(STAGES)
        assert rep.consistent
        assert any("GPU" in line and "12.4" in line for line in rep.lines())
        with pytest.raises(ValueError):
            runtime_report(np.zeros((0, 4)), None, small_cfg, runs=0)


class TestChecks:
    def test_oracles_pass(self):
        assert all(r.passed for r in run_oracles(7))

    def test_gradcheck_rows(self):
        rows = run_gradcheck(0, 3)
        assert len(rows) == 3 and all(r.max_rel_err < 1e-5 for r in rows)
        assert all(r.max_rel_err > 0.1 for r in run_gradcheck(0, 3, inject_bug=True))


class TestCli:
    def test_voxelize_report(self, capsys, tmp_path):
        pts = tmp_path / "one.bin"
        write_bin(pts, [[10.0, 0.0, -1.0, 0.5]])
        assert cli.main(["voxelize", "--input", str(pts)]) == 0
        out = capsys.readouterr().out
        assert "grid dims 440 500 16" in out and "voxels 1" in out

    def test_voxelize_empty_and_malformed(self, capsys, tmp_path):
        empty = tmp_path / "e.bin"
        empty.write_bytes(b"")
        assert cli.main(["voxelize", "--input", str(empty)]) == 0
        assert "points 0" in capsys.readouterr().out
        bad = tmp_path / "b.bin"
        bad.write_bytes(b"\0" * 17)
        assert cli.main(["voxelize", "--input", str(bad)]) == 2
        assert "malformed bin" in capsys.readouterr().err

    def test_input_errors(self, tmp_path):
        assert cli.main(["voxelize", "--input", str(tmp_path / "missing.bin")]) == 2
        assert cli.main(["voxelize"]) == 2
        assert cli.main(["nope"]) == 2
        assert cli.main(["oracle", "--seed", "-1"]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text('{"sceen": {}}')
        assert cli.main(["bench-params", "--config", str(bad)]) == 2

    def test_forward_deterministic(self, tmp_path, cfg_path, scene_path):
        outs = []
        for i in range(2):
            out = tmp_path / f"det{i}.jsonl"
            assert cli.main(["forward", "--config", cfg_path, "--input", scene_path, "--seed", "4",
                             "--out", str(out), "--kitti", str(tmp_path / "k.txt")]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        recs = loads(outs[0].decode())
        assert len(recs) <= 100

    def test_forward_stage_error(self, tmp_path, cfg_path):
        pts = tmp_path / "nan.bin"
        write_bin(pts, [[np.nan, 0, 0, 0]])
        assert cli.main(["forward", "--config", cfg_path, "--input", str(pts)]) == 2

    def test_gradcheck_and_bug(self, tmp_path, capsys):
        assert cli.main(["gradcheck", "--count", "2"]) == 0
        out = capsys.readouterr().out
        assert "M_k" in out and "M_v" in out and "PASS" in out
        assert cli.main(["gradcheck", "--count", "2", "--inject-bug"]) == 1

    def test_bench_params(self, capsys):
        assert cli.main(["bench-params"]) == 0
        assert "TOTAL" in capsys.readouterr().out

    def test_synth_roundtrip(self, tmp_path, capsys):
        out = tmp_path / "s.bin"
        assert cli.main(["synth", "--out", str(out), "--seed", "2"]) == 0
        assert load_points(out).shape == (20000, 4)
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"boxes": [{"center": [90, 0, -1], "size": [4, 2, 1.5]}]}))
        assert cli.main(["synth", "--out", str(out), "--spec", str(spec)]) == 2
        assert cli.main(["synth"]) == 2


class TestEstimators:
    def test_voxel_encoder(self, rng):
        enc = VoxelEncoder(vfe_channels=8)
        pts = np.column_stack([rng.uniform(0, 10, 50), rng.uniform(-5, 5, 50), rng.uniform(-2, 0, 50),
                               rng.random(50)])
        with pytest.raises(NotFittedError):
            enc.transform(pts)
        feats = enc.fit(pts).transform(pts)
        coords, f2 = enc.encode(pts)
        assert feats.shape == (len(coords), 8) and np.array_equal(feats, f2)
        assert clone(enc).get_params() == enc.get_params()
        with pytest.raises(ValueError):
            enc.transform(np.zeros((3, 3)))

    def test_detector(self, small_cfg, scene_path):
        pts = load_points(scene_path)
        det = Detector(config=small_cfg, seed=1)
        with pytest.raises(NotFittedError):
            det.predict([pts])
        det.fit()
        a = det.predict([pts])[0]
        b = Detector(config=small_cfg, seed=1).fit().predict([pts])[0]
        assert [d.box for d in a] == [d.box for d in b]
        recs = det.predict_records([pts], frames=["f"])
        assert all(r.frame == "f" for r in recs)
        assert det.get_params()["seed"] == 1

    def test_detector_memory_steps(self, small_cfg, scene_path):
        pts = load_points(scene_path)
        det = Detector(config=small_cfg, memory_steps=3, memory_lr=0.05).fit([pts])
        assert len(det.memory_history_) == 3
        assert all(math.isfinite(v) for v in det.memory_history_)
        assert not np.array_equal(det.weights_.memory.keys, build_weights(small_cfg).memory.keys)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            Detector(weights="trained").fit()
