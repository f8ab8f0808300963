import math

import numpy as np
import pytest

from pillars3d import oracles
from pillars3d.geometry import Box3D
from pillars3d.numerics import LinearParams
from pillars3d.s2cfm import (MemoryModule, apply_memory_step, PoolConfig, PoolParams, RoiFeature, SparseSceneFeature,
                             assign_scene_to_keys, build_scene_feature, context_aware_roi, key_address,
                             manhattan_offsets, memory_grad_check, memory_losses, query_neighbors,
                             step_sweep, sub_region_centers, value_pairs, value_read, voxel_roi_pool)


def orthonormal(rng, k, c):
    q, _ = np.linalg.qr(rng.normal(size=(c, k)))
    return q.T


class TestSceneFeature:
    def test_zero_multiscale(self, rng, small_scene):
        coords = np.array([[0, 0, 0], [4, 6, 2], [9, 3, 5]])
        init = rng.normal(size=(3, 4))
        ms = [np.zeros((2, 8, 32, 32)), np.zeros((3, 4, 16, 16))]
        red = LinearParams(rng.normal(size=(6, 9)), rng.normal(size=6))
        sf = build_scene_feature(init, coords, ms, (2, 4), red, small_scene)
        stacked = np.concatenate([init, np.zeros((3, 5))], axis=1)
        np.testing.assert_allclose(sf.features, stacked @ red.weight.T + red.bias, atol=1e-14)

    def test_node_aligned_and_oracle(self, rng, small_scene):
        vol = rng.normal(size=(3, 8, 32, 32))
        coords = np.stack([rng.integers(0, 62, 40), rng.integers(0, 62, 40), rng.integers(0, 15, 40)], axis=1)
        coords[0] = [4, 6, 2]  # node (2, 3, 1) of the stride-2 grid
        red = LinearParams(np.hstack([np.zeros((3, 1)), np.eye(3)]), np.zeros(3))
        sf = build_scene_feature(np.zeros((40, 1)), coords, [vol], (2,), red, small_scene)
        np.testing.assert_array_equal(sf.features[0], vol[:, 1, 3, 2])
        ref = np.stack([oracles.trilinear_naive(vol, c / 2.0) for c in coords])
        assert np.max(np.abs(sf.features - ref)) < 1e-12

    def test_empty_scene(self, small_scene):
        red = LinearParams(np.ones((2, 3)), np.zeros(2))
        sf = build_scene_feature(np.zeros((0, 1)), np.zeros((0, 3), int), [np.zeros((2, 1, 2, 2))], (2,),
                                 red, small_scene)
        assert sf.features.shape == (0, 2)


class TestNeighbors:
    def test_offsets_count(self):
        # octahedral numbers: 1, 7, 25, 63, 129
        assert [len(manhattan_offsets(r)) for r in range(5)] == [1, 7, 25, 63, 129]

    def test_matches_bruteforce(self, rng):
        for _ in range(200):
            dims = (int(rng.integers(4, 10)), int(rng.integers(4, 10)), int(rng.integers(2, 6)))
            total = dims[0] * dims[1] * dims[2]
            flat = rng.choice(total, size=int(rng.integers(1, min(120, total))), replace=False)
            coords = np.stack(np.unravel_index(flat, (dims[2], dims[1], dims[0]))[::-1], axis=1)
            grid = np.full((dims[2], dims[1], dims[0]), -1, np.int64)
            grid[coords[:, 2], coords[:, 1], coords[:, 0]] = np.arange(len(coords))
            cells = np.stack([rng.integers(0, d, 4) for d in dims], axis=1)
            for r in (2, 4):
                rows, dist = query_neighbors(grid, cells, r, 32)
                for q, cell in enumerate(cells):
                    got = [int(v) for v in rows[q] if v >= 0]
                    assert got == oracles.manhattan_neighbors_bruteforce(coords, cell, r, 32)
                    assert len(got) <= 32 and np.all(dist[q][rows[q] >= 0] <= r)


def make_scene(small_scene, coords, feats):
    return SparseSceneFeature(np.asarray(coords), np.asarray(feats, dtype=float), small_scene)


class TestPool:
    def test_empty_scene(self, rng, small_scene):
        scene = make_scene(small_scene, np.zeros((0, 3), int), np.zeros((0, 4)))
        roi = voxel_roi_pool(scene, Box3D((5, 0, -1), (3.9, 1.6, 1.56)), PoolParams.random(rng, 4, PoolConfig()))
        assert roi.sub_features.shape == (216, 4) and not roi.sub_features.any()

    def test_outside_flagged(self, rng, small_scene):
        scene = make_scene(small_scene, [[0, 0, 0]], np.ones((1, 4)))
        roi = voxel_roi_pool(scene, Box3D((50, 0, -1), (3.9, 1.6, 1.56)), PoolParams.random(rng, 4, PoolConfig()))
        assert roi.flagged and not roi.sub_features.any()

    def test_single_voxel_at_center(self, rng, small_scene):
        cfg = PoolConfig(grid_size=1)
        box = Box3D((5.04, 0.08, -0.875), (0.16, 0.16, 0.25))
        cell = np.floor((np.array(box.center) - small_scene.range_min) / small_scene.voxel_size).astype(int)
        feat = rng.normal(size=(1, 4))
        scene = make_scene(small_scene, [cell], feat)
        params = PoolParams.random(rng, 4, cfg)
        roi = voxel_roi_pool(scene, box, params, cfg)
        offset = small_scene.voxel_centers([cell])[0] - np.array(box.center)
        np.testing.assert_allclose(offset, 0.0, atol=1e-12)
        h = np.concatenate([offset, feat[0]])
        pooled = []
        for mlp in params.mlps:
            x = h
            for layer in mlp:
                x = np.maximum(layer(x), 0)
            pooled.append(x)
        np.testing.assert_allclose(roi.sub_features[0], np.concatenate(pooled) @ params.proj.T, atol=1e-12)

    def test_sub_centers_inside_box(self, rng):
        for _ in range(20):
            b = Box3D(rng.normal(size=3), rng.uniform(0.5, 4, 3), rng.uniform(-math.pi, math.pi))
            c = sub_region_centers(b, 6) - np.array(b.center)
            cs, sn = math.cos(b.yaw), math.sin(b.yaw)
            u = cs * c[:, 0] + sn * c[:, 1]
            v = -sn * c[:, 0] + cs * c[:, 1]
            assert np.all(np.abs(u) < b.size[0] / 2) and np.all(np.abs(v) < b.size[1] / 2)
            assert np.all(np.abs(c[:, 2]) < b.size[2] / 2)


class TestMemoryRead:
    def test_single_key(self, rng):
        np.testing.assert_array_equal(key_address(rng.normal(size=(5, 3)), rng.normal(size=(1, 3))), 1.0)

    def test_one_hot_limit(self, rng):
        keys = orthonormal(rng, 4, 8)
        w = key_address(50 * keys[2:3], keys)
        assert w[0, 2] > 1 - 1e-12

    def test_zero_feature_uniform(self, rng):
        np.testing.assert_allclose(key_address(np.zeros((2, 6)), rng.normal(size=(5, 6))), 0.2, atol=1e-15)

    def test_rows_sum_and_orthogonal_invariance(self, rng):
        keys = np.hstack([rng.normal(size=(4, 5)), np.zeros((4, 2))])
        f = rng.normal(size=(10, 7))
        w = key_address(f, keys)
        assert np.max(np.abs(w.sum(axis=1) - 1)) < 1e-12
        f2 = f.copy()
        f2[:, 5:] += rng.normal(size=2)
        assert np.max(np.abs(key_address(f2, keys) - w)) < 1e-12

    def test_matches_loop_oracles(self, rng):
        keys = rng.normal(size=(4, 6))
        vals = rng.normal(size=(4, 5, 6))
        f = rng.normal(size=(9, 6))
        w = key_address(f, keys)
        assert np.max(np.abs(w - oracles.key_address_loops(f, keys))) < 1e-12
        g = oracles.context_read_loops(w, oracles.value_mean_loops(vals))
        assert np.max(np.abs(value_read(w, vals) - g)) < 1e-12

    def test_single_value_and_uniform(self, rng):
        vals = rng.normal(size=(3, 1, 4))
        np.testing.assert_allclose(value_read(np.eye(3), vals), vals[:, 0])
        np.testing.assert_allclose(value_read(np.full((1, 3), 1 / 3), vals)[0], vals[:, 0].mean(axis=0))

    def test_value_read_linear(self, rng):
        w = key_address(rng.normal(size=(3, 4)), rng.normal(size=(2, 4)))
        vals = rng.normal(size=(2, 3, 4))
        assert np.array_equal(value_read(w, 2.0 * vals), 2.0 * value_read(w, vals))

    def test_context_width_and_zero_values(self, rng):
        mem = MemoryModule(rng.normal(size=(10, 160)), np.zeros((10, 50, 160)))
        roi = RoiFeature(rng.normal(size=(216, 160)), np.zeros((216, 3)))
        out = context_aware_roi(roi, mem)
        assert out.shape == (216, 320)
        np.testing.assert_array_equal(out[:, :160], roi.sub_features)
        assert not out[:, 160:].any()
        np.testing.assert_array_equal(context_aware_roi(roi, mem), out)


class TestAssignment:
    def test_empty(self, rng):
        a = assign_scene_to_keys(np.zeros((0, 3)), rng.normal(size=(2, 3)))
        assert a.sizes.tolist() == [0, 0]

    def test_equal_to_key(self, rng):
        keys = orthonormal(rng, 3, 5)
        assert assign_scene_to_keys(keys[1:2], keys).assignment.tolist() == [1]

    def test_partition(self, rng):
        a = assign_scene_to_keys(rng.normal(size=(40, 5)), rng.normal(size=(4, 5)))
        joined = np.concatenate(a.groups)
        assert a.sizes.sum() == 40 and sorted(joined.tolist()) == list(range(40))

    def test_value_pairs_tie_break(self):
        keys = np.array([[1.0, 0.0], [0.0, 1.0]])
        feats = np.array([[2.0, 0.0], [3.0, 0.0], [2.0, 0.0]])
        a = assign_scene_to_keys(feats, keys)
        assert value_pairs(a, 0, 5).tolist() == [1, 0, 2]
        assert value_pairs(a, 0, 2).tolist() == [1, 0]


class TestLosses:
    def test_ortho_zero_iff_orthonormal(self, rng):
        keys = orthonormal(rng, 3, 6)
        assert memory_losses(rng.normal(size=(5, 6)), MemoryModule(keys, np.zeros((3, 2, 6)))).ortho < 1e-14
        bent = keys.copy()
        bent[0] *= 1.1
        assert memory_losses(rng.normal(size=(5, 6)), MemoryModule(bent, np.zeros((3, 2, 6)))).ortho > 1e-3

    def test_key_loss_zero_when_means_match(self):
        keys = np.array([[1.0, 0.0], [0.0, 1.0]])
        feats = np.array([[0.5, 0.0], [1.5, 0.0], [0.0, 1.0]])
        assert memory_losses(feats, MemoryModule(keys, np.zeros((2, 1, 2)))).key == 0.0

    def test_hand_placed(self):
        keys = np.array([[1.0, 0.0], [0.0, 1.0]])
        vals = np.array([[[1.0, 0.0], [0.0, 0.0]], [[0.0, 2.0], [0.0, 0.0]]])
        feats = np.array([[2.0, 0.5], [1.0, 0.0], [0.0, 3.0]])
        ml = memory_losses(feats, MemoryModule(keys, vals))
        # key 0: members {0, 1}, mean (1.5, 0.25); key 1: member {2}
        assert ml.key == pytest.approx(math.hypot(0.5, 0.25) + 2.0, abs=1e-14)
        assert ml.ortho == 0.0
        # key 0 pairs feature 0 then 1; key 1 pairs feature 2
        assert ml.value == pytest.approx(math.hypot(1.0, 0.5) + 1.0 + 1.0, abs=1e-14)
        ref = oracles.memory_loss_bruteforce(feats, keys, vals)
        assert np.allclose((ml.key, ml.ortho, ml.value), ref, atol=1e-12)

    def test_matches_bruteforce(self, rng):
        for _ in range(100):
            k, v, c, n = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 31))
            mem = MemoryModule.random(rng, k, v, c)
            feats = rng.normal(size=(n, c))
            ml = memory_losses(feats, mem)
            ref = oracles.memory_loss_bruteforce(feats, mem.keys, mem.values)
            assert max(abs(ml.key - ref[0]), abs(ml.ortho - ref[1]), abs(ml.value - ref[2])) < 1e-10

    def test_permutation_within_group(self, rng):
        mem = MemoryModule.random(rng, 3, 4, 5)
        feats = rng.normal(size=(20, 5))
        base = memory_losses(feats, mem)
        perm = memory_losses(feats[rng.permutation(20)], mem)
        assert abs(base.key - perm.key) < 1e-12 and abs(base.value - perm.value) < 1e-12

    def test_nonfinite(self, rng):
        with pytest.raises(ValueError):
            memory_losses(np.full((2, 3), np.nan), MemoryModule.random(rng, 2, 2, 3))


def test_memory_step_descends_at_fixed_assignment(rng):
    mem = MemoryModule.random(rng, 3, 4, 8)
    feats = 3.0 * mem.keys[rng.integers(0, 3, 40)] + rng.normal(0, 0.05, (40, 8))
    before = memory_losses(feats, mem)
    apply_memory_step(mem, feats, 1e-3)
    after = memory_losses(feats, mem)
    assert after.total < before.total


class TestGradCheck:
    def test_small_config(self, rng):
        mem = MemoryModule.random(rng, 3, 4, 8)
        res = memory_grad_check(mem, rng.normal(size=(20, 8)), rng=rng)
        assert res.max_rel_err < 1e-5

    def test_zeroed_gradient_detected(self, rng):
        mem = MemoryModule.random(rng, 3, 4, 8)
        res = memory_grad_check(mem, rng.normal(size=(20, 8)), corrupt=0.0, rng=rng)
        assert res.max_rel_err == pytest.approx(1.0)

    def test_step_sweep_records_curve(self, rng):
        mem = MemoryModule.random(rng, 3, 4, 8)
        out = step_sweep(mem, rng.normal(size=(20, 8)))
        assert set(out) == {1e-4, 1e-5, 1e-6}
        assert all(np.isfinite(v) for v in out.values())
        assert out[1e-5] < out[1e-4]
