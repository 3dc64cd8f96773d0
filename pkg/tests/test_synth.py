import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgsf.grid_repr import check_point_image
from dgsf.synth import large_motion_scene, load_scene, save_scene, synth


def test_same_seed_same_scene():
    a, b = synth(5), synth(5)
    for name in ("img1", "img2", "gt_flow"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(a.pc2.coords, b.pc2.coords)
    assert not np.array_equal(synth(6).pc1.coords, a.pc1.coords)


def test_static_scene_has_zero_flow():
    sc = synth(1, max_rot_deg=0.0, max_trans=0.0)
    assert not sc.gt_flow.any()
    np.testing.assert_array_equal(sc.pc2.coords, sc.pc1.coords)
    np.testing.assert_array_equal(sc.pc2.valid, sc.pc1.valid)
    np.testing.assert_array_equal(sc.img1, sc.img2)


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1))
def test_grids_are_consistent_and_flow_lands_on_frame_two(seed):
    sc = synth(seed, height=24, width=32)
    assert check_point_image(sc.pc1, sc.intr) == []
    assert check_point_image(sc.pc2, sc.intr) == []
    assert not sc.gt_flow[~sc.pc1.valid].any()
    assert sc.pc1.n_valid > 0.9 * 24 * 32
    # every frame-2 point is the moved copy of some frame-1 point
    # (pc1 + gt adds two float32 roundings, so match to 1e-5 m)
    moved = (sc.pc1.coords.astype(np.float64) + sc.gt_flow)[sc.pc1.valid]
    q = sc.pc2.coords[sc.pc2.valid].astype(np.float64)
    d = np.sqrt(((q[:, None, :] - moved[None, :, :]) ** 2).sum(-1)).min(axis=1)
    assert d.max() <= 1e-5


def test_object_ids_and_motions():
    sc = synth(2, n_objects=3)
    ids = set(np.unique(sc.object_id[sc.pc1.valid]))
    assert ids <= {0, 1, 2, 3} and 0 in ids
    assert len(sc.motions) == 4
    # background cells follow the background rigid motion exactly (up to float32)
    R, t = sc.motions[0]
    bg = sc.pc1.valid & (sc.object_id == 0)
    p = sc.pc1.coords[bg].astype(np.float64)
    np.testing.assert_allclose(sc.gt_flow[bg], p @ R.T + t - p, atol=1e-5)


def test_large_motion_moves_objects_far():
    sc = large_motion_scene(0)
    obj = sc.pc1.valid & (sc.object_id > 0)
    assert np.linalg.norm(sc.gt_flow[obj], axis=-1).mean() > 0.3


def test_too_small_grid_rejected():
    with pytest.raises(ValueError):
        synth(0, height=8, width=32)


def test_scene_directory_round_trip(tmp_path):
    sc = synth(9, height=16, width=20)
    save_scene(sc, tmp_path / "a")
    back = load_scene(tmp_path / "a")
    np.testing.assert_array_equal(back.pc1.coords, sc.pc1.coords)
    np.testing.assert_array_equal(back.gt_flow, sc.gt_flow)
    np.testing.assert_array_equal(back.img2, sc.img2)
    assert back.intr == sc.intr
    save_scene(back, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
