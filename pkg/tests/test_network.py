import numpy as np
import pytest

from gradcases import e2e_config
from dgsf.autodiff import Tensor, read_weights, write_weights
from dgsf.grid_repr import FormatError, pixel_rule
from dgsf.network import (MODE_OVERRIDES, FlowPyramid, NetworkConfig, forward, gt_pyramid, init_weights,
                          level_intrinsics, mean_epe, multi_scale_loss, read_config, toy_train,
                          weights_from_arrays, write_config)
from dgsf.pyramid import select_centers
from dgsf.synth import synth


@pytest.fixture(scope="module")
def scene():
    return synth(3, height=16, width=24)


def small_config(**kw):
    return NetworkConfig(**{**e2e_config().__dict__, "zero_flow_head": True, **kw})


def uniform_error_pyramid(levels, err, shape=(48, 64)):
    """Prediction and ground truth that differ by ``err`` metres along x at every cell."""
    gt = np.random.default_rng(0).normal(size=(*shape, 3)).astype(np.float32)
    valid = np.ones(shape, bool)
    g = gt_pyramid(gt, valid, levels)
    p = FlowPyramid([Tensor(f.data + np.float32([err, 0, 0])) for f in g.flows], list(g.valids))
    return p, g


def test_loss_closed_form_uniform_error():
    cfg = NetworkConfig()
    p, g = uniform_error_pyramid(4, 0.05)
    loss = float(multi_scale_loss(p, g, cfg).data)
    assert abs(loss - 0.07) <= 1e-6  # 0.05 * (0.1 + 0.2 + 0.3 + 0.8)
    p0, g0 = uniform_error_pyramid(4, 0.0)
    assert float(multi_scale_loss(p0, g0, cfg).data) == 0.0


def test_loss_is_homogeneous_and_binds_weights_to_levels():
    cfg = NetworkConfig()
    p, g = uniform_error_pyramid(4, 0.25)
    total, per_level, empty = multi_scale_loss(p, g, cfg, return_levels=True)
    assert empty == []
    np.testing.assert_allclose(per_level, [0.25 * w for w in cfg.loss_weights], rtol=1e-6)
    assert abs(float(total.data) - 5 * 0.07) <= 1e-6


def test_loss_skips_empty_level():
    cfg = NetworkConfig(levels=2, channels=(4, 4), image_channels=(4, 4), loss_weights=(1.0, 1.0))
    p, g = uniform_error_pyramid(2, 0.5, shape=(8, 8))
    g.valids[1][:] = False
    total, per_level, empty = multi_scale_loss(p, g, cfg, return_levels=True)
    assert empty == [1] and per_level[1] == 0.0 and abs(float(total.data) - 0.5) <= 1e-6


def test_zero_head_predicts_zero_flow(scene):
    cfg = small_config()
    pred = forward(scene.pc1, scene.pc2, scene.img1, scene.img2, init_weights(cfg, 0), cfg, scene.intr)
    for f in pred.flows:
        assert not f.data.any()
    assert not pred.full.data.any()


@pytest.mark.parametrize("mode", sorted(MODE_OVERRIDES))
def test_every_mode_runs_and_masks(scene, mode):
    cfg = small_config(zero_flow_head=False).with_mode(mode)
    w = init_weights(cfg, 1)
    pred = forward(scene.pc1, scene.pc2, scene.img1, scene.img2, w, cfg, scene.intr)
    again = forward(scene.pc1, scene.pc2, scene.img1, scene.img2, w, cfg, scene.intr)
    full = pred.full.data
    assert full.shape == (16, 24, 3) and full.dtype == np.float32 and np.isfinite(full).all()
    assert not full[~scene.pc1.valid].any()
    assert (pred.full_valid == scene.pc1.valid).all()
    for f, v in zip(pred.flows, pred.valids):
        assert not f.data[~v].any()
    np.testing.assert_array_equal(full, again.full.data)


def test_fusion_off_needs_no_image_weights():
    cfg = small_config(fusion_mode="off")
    assert not any(k.startswith(("img", "fuse")) for k in init_weights(cfg, 0))


def test_forward_rejects_misaligned_grids(scene):
    cfg = small_config()
    other = synth(4, height=16, width=20)
    with pytest.raises(ValueError):
        forward(scene.pc1, other.pc2, scene.img1, other.img2, init_weights(cfg, 0), cfg, scene.intr)


def test_level_intrinsics_map_centers_to_own_cells(scene):
    pts = scene.pc1
    for level in range(3):
        pts = select_centers(pts, 2)
        intr = level_intrinsics(scene.intr, level, pts.shape)
        u, v, ok = pixel_rule(pts.coords, intr)
        vv, uu = np.nonzero(pts.valid)
        assert ok[vv, uu].all() and (u[vv, uu] == uu).all() and (v[vv, uu] == vv).all()


def test_config_round_trip_and_errors(tmp_path):
    cfg = NetworkConfig(levels=2, channels=(8, 16), image_channels=(4, 8), loss_weights=(0.25, 0.75),
                        fusion_mode="concat", optical_weight=0.5, zero_flow_head=False)
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    write_config(a, cfg)
    assert read_config(a) == cfg
    write_config(b, read_config(a))
    assert a.read_bytes() == b.read_bytes()
    for text in ("levels=2\n", "nonsense\n", "bogus=1\n", "levels=x\n", "fusion_mode=maybe\n"):
        a.write_text(text)
        with pytest.raises(FormatError):
            read_config(a)
    with pytest.raises(ValueError):
        NetworkConfig().with_mode("turbo")
    with pytest.raises(ValueError):
        NetworkConfig(loss_weights=(1, 1, 1, 0))


def test_weights_file_round_trip(tmp_path):
    cfg = small_config()
    w = init_weights(cfg, 7)
    write_weights(tmp_path / "w.bin", w)
    back = weights_from_arrays(read_weights(tmp_path / "w.bin"), cfg)
    assert list(back) == list(w)
    for k in w:
        np.testing.assert_array_equal(back[k].data, w[k].data)
    arrays = read_weights(tmp_path / "w.bin")
    arrays.pop(next(iter(arrays)))
    with pytest.raises(ValueError):
        weights_from_arrays(arrays, cfg)


def test_init_is_seeded():
    cfg = small_config()
    a, b, c = init_weights(cfg, 0), init_weights(cfg, 0), init_weights(cfg, 1)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_zero_steps_trace_has_one_entry(scene):
    cfg = small_config()
    res = toy_train([scene], cfg, steps=0)
    assert len(res.trace) == 1 and res.epe_initial == res.epe_final
    with pytest.raises(ValueError):
        toy_train([], cfg, steps=1)


def test_short_training_is_deterministic_and_descends(scene):
    cfg = small_config()
    a = toy_train([scene], cfg, steps=5, step_size=5e-3)
    b = toy_train([scene], cfg, steps=5, step_size=5e-3)
    assert a.trace == b.trace and len(a.trace) == 6
    assert a.trace[-1] < a.trace[0]
    assert a.epe_final == mean_epe([scene], a.weights, cfg)
