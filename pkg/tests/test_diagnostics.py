"""Single-layer distortion curves: hand values, identities, and caching."""
from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import f32, rand_batches, single_conv_net
from spnr import forward, gen_toynet, init_bn_stats
from spnr.diagnostics import (DEFAULT_GRID, CurveBuilder, DiagnosticCurves,
                              distortion, raw_shift, repair_residual, rr_ratio)
from spnr.masking import apply_masks, magnitude_mask
from spnr.repair import EPSILON, RepairConfig


def test_distortion_hand_value():
    a = f32([[[3.0, 4.0]]])          # one channel, ||a||^2 = 25
    b = f32([[[1.0, 1.0]]])          # diff^2 = 4 + 9 = 13
    assert distortion(a, b) == 13.0 / (25.0 + EPSILON)


def test_distortion_of_identical_tensors_is_zero():
    a = f32(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    assert distortion(a, a) == 0.0


def test_distortion_is_not_symmetric():
    a = f32([[[2.0]]])
    b = f32([[[1.0]]])
    assert distortion(a, b) != distortion(b, a)
    assert distortion(a, b) == 1.0 / (4.0 + EPSILON)


def test_distortion_averages_channels_then_samples():
    # sample 1: channels give 1/(1+eps) and 0 -> 0.5-ish
    # sample 2: both channels zero diff -> 0
    a = f32([[[[1.0]], [[2.0]]], [[[1.0]], [[1.0]]]])
    b = f32([[[[0.0]], [[2.0]]], [[[1.0]], [[1.0]]]])
    per_sample_1 = 0.5 * (1.0 / (1.0 + EPSILON))
    assert distortion(a, b) == pytest.approx(per_sample_1 / 2, rel=1e-12)


def test_distortion_validates_inputs():
    a = f32(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        distortion(a, f32(np.zeros((2, 2, 2))))
    with pytest.raises(ValueError):
        distortion(f32(np.zeros(4)), f32(np.zeros(4)))
    with pytest.raises(ValueError):
        distortion(a, a, epsilon=0.0)


def test_rr_ratio_definition_and_validation():
    assert rr_ratio(2.0, 1.0) == (1.0 + EPSILON) / (2.0 + EPSILON)
    assert rr_ratio(0.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        rr_ratio(-1.0, 0.0)
    with pytest.raises(ValueError):
        rr_ratio(1.0, 1.0, epsilon=0.0)


def fixed_point_setup(seed=0):
    """Toy net whose running stats equal its calib-batch stats exactly."""
    net = gen_toynet(seed=seed, blocks=2, channels=6, input_shape=(3, 8, 8))
    calib = rand_batches(seed + 100, 1, 16, (3, 8, 8))
    net = init_bn_stats(net, calib)
    cfg = RepairConfig(bn_batches=3, bn_batch_size=16)
    return net, calib, cfg


def test_zero_sparsity_leaves_no_trace():
    net, calib, cfg = fixed_point_setup()
    builder = CurveBuilder(net, calib, cfg)
    point = builder.evaluate(net.prunable[0], 0.0)
    assert point.d_raw == 0.0
    assert point.d_repair == 0.0
    assert point.rr == 1.0


def test_full_sparsity_saturates_the_raw_shift():
    # bias-free conv: masking everything zeroes the tap, d -> ||a||^2/(||a||^2+eps)
    rng = np.random.default_rng(1)
    net = single_conv_net(rng.standard_normal((4, 3, 3, 3)), padding=1,
                          input_hw=(6, 6))
    calib = rand_batches(2, 1, 8, (3, 6, 6))
    d = raw_shift(net, "conv", 1.0, calib)
    assert 0.999999 < d <= 1.0


def test_raw_shift_grows_statistically_with_sparsity():
    wins = 0
    for seed in range(20):
        net = gen_toynet(seed=seed, blocks=1, channels=6, input_shape=(3, 8, 8))
        calib = rand_batches(seed + 50, 1, 8, (3, 8, 8))
        layer = net.prunable[0]
        if raw_shift(net, layer, 0.975, calib) >= raw_shift(net, layer, 0.70, calib):
            wins += 1
    assert wins >= 19


def test_repair_can_make_the_tap_worse():
    # two input channels wired anti-correlated: x2 = -0.04 * x1. Pruning the
    # small weight flips the sign of the effective coefficient, and variance
    # matching then scales the wrong-signed output up.
    w = np.zeros((1, 2, 1, 1), dtype=np.float32)
    w[0, 0, 0, 0] = 0.5
    w[0, 1, 0, 0] = 5.0
    net = single_conv_net(w, input_hw=(4, 4))
    rng = np.random.default_rng(3)
    x1 = rng.standard_normal((16, 1, 4, 4))
    batch = f32(np.concatenate([x1, -0.04 * x1], axis=1))
    cfg = RepairConfig(tau_override=0.0)
    builder = CurveBuilder(net, [batch], cfg, layers=["conv"])
    point = builder.evaluate("conv", 0.5)
    assert point.rr == pytest.approx(1.44, rel=1e-3)
    assert point.d_repair > point.d_raw


def test_ratio_identity_holds_on_every_point(toy_net, toy_calib):
    cfg = RepairConfig(bn_batches=2, bn_batch_size=8)
    builder = CurveBuilder(toy_net, toy_calib, cfg)
    curves = builder.build((0.7, 0.9))
    assert len(curves.points) == 2 * len(toy_net.prunable)
    for (layer, s), p in curves.points.items():
        assert math.isclose(p.rr * (p.d_raw + EPSILON), p.d_repair + EPSILON,
                            rel_tol=1e-9, abs_tol=1e-15)
        assert p.d_raw >= 0.0 and p.d_repair >= 0.0


def test_dense_reference_is_computed_once(toy_net, toy_calib):
    cfg = RepairConfig(bn_batches=2, bn_batch_size=8)
    builder = CurveBuilder(toy_net, toy_calib, cfg)
    builder.build((0.7, 0.9, 0.975))
    assert builder.dense_passes == len(toy_calib)


def test_masked_overlay_equals_masking_a_copy(toy_net, toy_calib):
    layer = toy_net.prunable[0]
    mask = magnitude_mask(toy_net.node(layer).weight, 0.9)
    overlay = apply_masks(toy_net, {layer: mask})
    import copy
    deep = copy.deepcopy(toy_net)
    w = deep.node(layer).weight.copy()
    w[mask == 0] = 0.0
    from spnr import replace_conv_weights
    deep = replace_conv_weights(deep, {layer: (w, deep.node(layer).bias)})
    _, t1 = forward(overlay, toy_calib[0], taps=[layer])
    _, t2 = forward(deep, toy_calib[0], taps=[layer])
    assert np.array_equal(t1[layer], t2[layer])


def test_evaluation_order_does_not_matter(toy_net, toy_calib):
    cfg = RepairConfig(bn_batches=2, bn_batch_size=8)
    grid = (0.7, 0.925)
    b1 = CurveBuilder(toy_net, toy_calib, cfg)
    first = {(l, s): b1.evaluate(l, s)
             for l in toy_net.prunable for s in grid}
    b2 = CurveBuilder(toy_net, toy_calib, cfg)
    second = {(l, s): b2.evaluate(l, s)
              for s in reversed(grid) for l in reversed(toy_net.prunable)}
    for key, p in first.items():
        q = second[key]
        assert (p.d_raw, p.d_repair, p.rr) == (q.d_raw, q.d_repair, q.rr)


def test_curves_json_round_trip(tmp_path, toy_net, toy_calib):
    cfg = RepairConfig(bn_batches=2, bn_batch_size=8)
    builder = CurveBuilder(toy_net, toy_calib, cfg, tap_post_bn=True)
    curves = builder.build((0.7, 0.9))
    path = tmp_path / "curves.json"
    curves.save(path)
    loaded = DiagnosticCurves.load(path)
    assert loaded.grid == curves.grid
    assert loaded.calib_id == curves.calib_id
    assert loaded.epsilon == curves.epsilon
    assert set(loaded.points) == set(curves.points)
    for key, p in curves.points.items():
        q = loaded.points[key]
        assert (q.d_raw, q.d_repair, q.rr) == (p.d_raw, p.d_repair, p.rr)
        assert q.extras == p.extras
        assert "rr_post_bn" in q.extras


def test_extend_adds_exact_points_and_guards_calib(toy_net, toy_calib):
    cfg = RepairConfig(bn_batches=2, bn_batch_size=8)
    builder = CurveBuilder(toy_net, toy_calib, cfg)
    curves = builder.build((0.7, 0.9))
    layer = toy_net.prunable[0]
    assert not curves.has_point(layer, 0.8125)
    builder.extend(curves, {layer: [0.8125, 0.7]})
    assert curves.has_point(layer, 0.8125)
    fresh = builder.evaluate(layer, 0.8125)
    assert curves.point(layer, 0.8125).rr == fresh.rr

    other = CurveBuilder(toy_net, rand_batches(99, 1, 8, (3, 8, 8)), cfg)
    with pytest.raises(ValueError, match="calibration"):
        other.extend(curves, {layer: [0.85]})
    with pytest.raises(KeyError):
        curves.point(layer, 0.5)


def test_infinite_damping_turns_repair_off():
    # tau >> pruned variance pins every channel scale at 1. With running BN
    # stats already at the calibration fixed point, recalibration of the
    # upstream graph is also inert, so the repaired tap IS the masked tap.
    net = gen_toynet(seed=0, blocks=2, channels=6, input_shape=(3, 8, 8))
    calib = rand_batches(100, 1, 16, (3, 8, 8))
    net = init_bn_stats(net, calib)
    cfg = RepairConfig(bn_batches=3, bn_batch_size=16, tau_override=1e12)
    builder = CurveBuilder(net, calib, cfg)
    for l in net.prunable:
        p = builder.evaluate(l, 0.9)
        assert p.rr == 1.0
        assert p.d_repair == p.d_raw


def test_builder_validates_layers_and_calib(toy_net, toy_calib):
    with pytest.raises(ValueError):
        CurveBuilder(toy_net, [], RepairConfig())
    with pytest.raises(ValueError):
        CurveBuilder(toy_net, toy_calib, RepairConfig(), layers=["gap"])
    builder = CurveBuilder(toy_net, toy_calib, RepairConfig())
    with pytest.raises(ValueError):
        builder.evaluate("not-under-diagnosis", 0.5)
    with pytest.raises(ValueError):
        builder.build((0.9, 0.7))


def test_single_image_calibration_still_works():
    net = gen_toynet(seed=9, blocks=1, channels=4, input_shape=(3, 8, 8))
    calib = rand_batches(10, 1, 1, (3, 8, 8))
    cfg = RepairConfig(bn_batches=2, bn_batch_size=1)
    p = CurveBuilder(net, calib, cfg).evaluate(net.prunable[0], 0.9)
    assert math.isfinite(p.d_raw) and math.isfinite(p.d_repair)


def test_post_bn_extras_recorded_only_when_asked(toy_net, toy_calib):
    cfg = RepairConfig(bn_batches=2, bn_batch_size=8)
    plain = CurveBuilder(toy_net, toy_calib, cfg).evaluate(toy_net.prunable[0], 0.9)
    assert plain.extras == {}
    tapped = CurveBuilder(toy_net, toy_calib, cfg,
                          tap_post_bn=True).evaluate(toy_net.prunable[0], 0.9)
    assert set(tapped.extras) == {"d_raw_post_bn", "d_repair_post_bn", "rr_post_bn"}
    assert tapped.extras["rr_post_bn"] == rr_ratio(tapped.extras["d_raw_post_bn"],
                                                   tapped.extras["d_repair_post_bn"])


def test_default_grid_is_strictly_increasing():
    assert list(DEFAULT_GRID) == sorted(set(DEFAULT_GRID))
    assert DEFAULT_GRID[0] == 0.70 and DEFAULT_GRID[-1] == 0.975
