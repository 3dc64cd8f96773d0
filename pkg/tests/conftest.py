import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dgsf.grid_repr import CameraIntrinsics, PointImage

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion name -> (passed, detail), filled by the acceptance tests
ACCEPTANCE = {}


def record(name, passed, detail=""):
    ACCEPTANCE[name] = (bool(passed), detail)
    return passed


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


def random_grid(rng, H, W, p_valid=0.7, quantize=None):
    """Random PointImage that satisfies the grid invariants only loosely (coords are not re-projected)."""
    valid = rng.random((H, W)) < p_valid
    coords = rng.uniform(-3, 3, (H, W, 3)).astype(np.float32)
    coords[..., 2] = rng.uniform(1, 10, (H, W))
    if quantize:
        coords = (np.round(coords / quantize) * quantize).astype(np.float32)
    coords[~valid] = 0
    return PointImage(coords, valid)


def smooth_grid(rng, H, W, p_valid=0.8):
    """Pixelized smooth surface: neighbors in the grid are near in 3D, like real scans."""
    f = 0.9 * W
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    z = 5 + np.sin(uu / W * rng.uniform(1, 6)) + np.cos(vv / H * rng.uniform(1, 6))
    coords = np.stack([(uu - W / 2) / f * z, (vv - H / 2) / f * z, z], -1).astype(np.float32)
    valid = rng.random((H, W)) < p_valid
    coords[~valid] = 0
    return PointImage(coords, valid)


@pytest.fixture
def intr_64x48():
    return CameraIntrinsics(100.0, 100.0, 32.0, 24.0, 64, 48)
