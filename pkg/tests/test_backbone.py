import numpy as np
import pytest

from pillars3d import oracles
from pillars3d.backbone import (VARIANTS, BackboneConfig, BackboneParams, ParamEntry, backbone_forward,
                                bev_squeeze, bev_unsqueeze, downsampled_shape, make_svfm, neck, param_count,
                                scale_shapes, svfm_forward, view_conv)
from pillars3d.numerics import BatchNormParams, Conv2DParams, ShapeError


def eye_conv(c):
    return Conv2DParams(np.eye(c)[:, :, None, None])


@pytest.mark.parametrize("axis", ["x", "y", "z"])
def test_view_conv_identity(rng, axis):
    vol = rng.normal(size=(3, 2, 4, 5))
    np.testing.assert_array_equal(view_conv(vol, axis, eye_conv(3)), vol)


@pytest.mark.parametrize("axis", ["x", "y", "z"])
def test_view_conv_matches_3d_oracle(rng, axis):
    for _ in range(10):
        vol = rng.normal(size=(2, 4, 5, 6))
        conv = Conv2DParams(rng.normal(size=(3, 2, 3, 3)), stride=(int(rng.integers(1, 3)), 1), padding=1)
        ss = int(rng.integers(1, 3))
        w3, s3, p3 = oracles.view_as_conv3d(axis, conv.weight, conv.stride, conv.padding, ss)
        ref = oracles.conv3d_naive(vol, w3, s3, p3)
        got = view_conv(vol, axis, conv, ss)
        assert got.shape == ref.shape
        assert np.max(np.abs(got - ref)) < 1e-12


def test_view_conv_errors(rng):
    with pytest.raises(ValueError):
        view_conv(np.zeros((1, 2, 3, 3)), "w", eye_conv(1))
    with pytest.raises(ShapeError):
        view_conv(np.zeros((1, 0, 3, 3)), "z", eye_conv(1))
    with pytest.raises(ShapeError):
        view_conv(np.zeros((2, 2, 3, 3)), "z", eye_conv(1))


def identity_svfm(variant, c):
    m = make_svfm(np.random.default_rng(0), variant, c, c, k=1)
    for v in m.convs:
        m.convs[v] = eye_conv(c)
    return m


def test_sequential_identity(rng):
    vol = rng.normal(size=(4, 3, 5, 6))
    np.testing.assert_array_equal(svfm_forward(vol, identity_svfm("sequential", 4), linear=True), vol)


def test_variants_differ(rng):
    seq = make_svfm(rng, "sequential", 3, 3)
    par = make_svfm(rng, "parallel", 3, 3)
    par.convs = dict(seq.convs)
    vol = rng.normal(size=(3, 4, 5, 5))
    assert not np.allclose(svfm_forward(vol, seq), svfm_forward(vol, par))


@pytest.mark.parametrize("variant", VARIANTS)
def test_downsampling_halves_every_axis(rng, variant):
    m = make_svfm(rng, variant, 2, 4, downsample=True)
    out = svfm_forward(rng.normal(size=(2, 5, 7, 8)), m)
    assert out.shape == (4, 3, 4, 4)


def test_equal_param_counts_when_channels_match(rng):
    counts = {v: make_svfm(rng, v, 8, 8).conv_params for v in VARIANTS}
    assert len(set(counts.values())) == 1
    assert counts["sequential"] == 3 * 8 * 8 * 9


def test_block_entry_counts_depend_on_wiring(rng):
    seq = make_svfm(rng, "sequential", 4, 8).conv_params
    par = make_svfm(rng, "parallel", 4, 8).conv_params
    assert seq == 9 * (4 * 8 + 8 * 8 + 8 * 8)
    assert par == 9 * 3 * 4 * 8


def test_svfm_param_formula():
    rows = param_count(BackboneConfig(in_channels=64, out_channels=(64, 128, 256)), (8, 4, 2))
    assert rows[2].name == "block1.svfm2.conv"
    assert rows[2].count == 3 * 64 * 64 * 9 == 110_592
    assert rows[2].conv3d_equivalent == 64 * 64 * 27 == 110_592


def test_param_count_matches_instantiated(rng):
    cfg = BackboneConfig()
    z = [downsampled_shape((16, 500, 440), i + 1)[0] for i in range(3)]
    params = BackboneParams.random(rng, cfg, z)
    assert sum(r.count for r in param_count(cfg, z)) == params.num_params
    assert all(isinstance(r, ParamEntry) for r in param_count(cfg, z))


def test_kitti_scale_shapes():
    assert scale_shapes((16, 500, 440), BackboneConfig()) == [(64, 8, 250, 220), (128, 4, 125, 110),
                                                             (256, 2, 63, 55)]


def test_ceil_division_law_small_forward(rng):
    cfg = BackboneConfig(in_channels=4, out_channels=(4, 6, 8), num_svfm=(1, 1, 1), neck_channels=3)
    for zyx in [(5, 9, 11), (4, 8, 8), (3, 13, 10)]:
        z = [downsampled_shape(zyx, i + 1)[0] for i in range(3)]
        params = BackboneParams.random(rng, cfg, z)
        outs = backbone_forward(rng.normal(size=(4,) + zyx), params)
        assert [o.shape for o in outs] == scale_shapes(zyx, cfg)


def test_zero_input_gives_zero_output(rng):
    cfg = BackboneConfig(in_channels=2, out_channels=(2, 3, 4), num_svfm=(1, 1, 1), neck_channels=2)
    z = [downsampled_shape((4, 16, 16), i + 1)[0] for i in range(3)]
    params = BackboneParams.random(rng, cfg, z)
    outs = backbone_forward(np.zeros((2, 4, 16, 16)), params)
    assert all(not o.any() for o in outs)
    bev = neck([bev_squeeze(o) for o in outs], params)
    assert bev.shape == (6, 8, 8) and not bev.any()


def test_too_small_input(rng):
    cfg = BackboneConfig(in_channels=1, out_channels=(1, 1, 1), num_svfm=(1, 1, 1))
    params = BackboneParams.random(rng, cfg, (1, 1, 1))
    with pytest.raises(ShapeError):
        backbone_forward(np.zeros((1, 2, 4, 4)), params)


def test_bev_squeeze_index_mapping(rng):
    f = rng.normal(size=(2, 2, 3, 3))
    out = bev_squeeze(f)
    assert out.shape == (4, 3, 3)
    for c in range(2):
        for z in range(2):
            np.testing.assert_array_equal(out[c * 2 + z], f[c, z])
    np.testing.assert_array_equal(bev_unsqueeze(out, 2), f)
    ids = np.arange(36).reshape(2, 2, 3, 3)
    assert sorted(bev_squeeze(ids).ravel().tolist()) == list(range(36))
    one = rng.normal(size=(3, 1, 2, 2))
    np.testing.assert_array_equal(bev_squeeze(one), one[:, 0])


def test_neck_kitti_shape_arithmetic(rng):
    cfg = BackboneConfig(in_channels=2, out_channels=(2, 2, 2), num_svfm=(1, 1, 1), neck_channels=4)
    params = BackboneParams.random(rng, cfg, (1, 1, 1))
    maps = [rng.normal(size=(2, 250, 220)), rng.normal(size=(2, 125, 110)), rng.normal(size=(2, 63, 55))]
    assert neck(maps, params).shape == (12, 250, 220)


def test_neck_rejects_misaligned(rng):
    cfg = BackboneConfig(in_channels=2, out_channels=(2, 2, 2), num_svfm=(1, 1, 1), neck_channels=1)
    params = BackboneParams.random(rng, cfg, (1, 1, 1))
    with pytest.raises(ShapeError):
        neck([np.zeros((2, 10, 10)), np.zeros((2, 4, 5)), np.zeros((2, 3, 3))], params)


def test_bn_defaults_are_identity():
    bn = BatchNormParams.identity(3)
    assert bn.num_params == 6
