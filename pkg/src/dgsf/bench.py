"""Timing of kernel grouping against the whole-grid brute-force arm."""
from __future__ import annotations

import io
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .grid_repr import PointImage
from .grouping import KernelSpec, brute_force_group, group_neighbors

REFERENCE_N = 56269
REFERENCE_SHAPE = (270, 480)
WORKERS = 1  # both arms are single-threaded


@dataclass
class BenchReport:
    n_valid: int
    height: int
    width: int
    k_h: int
    k_w: int
    K: int
    repeats: int
    workers: int
    kernel_ms: float
    brute_ms: float
    speedup: float
    kernel_candidates: int
    brute_candidates: int

    def as_text(self) -> str:
        d = asdict(self)
        width = max(map(len, d))
        return "\n".join(f"{k:<{width}}  {v:.3f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                         for k, v in d.items())

    def as_csv(self) -> str:
        d = asdict(self)
        buf = io.StringIO()
        buf.write(",".join(d) + "\n")
        buf.write(",".join(repr(v) for v in d.values()) + "\n")
        return buf.getvalue()


def bench_grid(n_target: int, seed: int = 0) -> PointImage:
    """Smooth surface on a grid with the 480x270 aspect and valid fraction, exactly ``n_target`` valid cells."""
    if n_target < 1:
        raise ValueError("n_target must be positive")
    frac = REFERENCE_N / (REFERENCE_SHAPE[0] * REFERENCE_SHAPE[1])
    scale = math.sqrt(n_target / REFERENCE_N)
    H = max(4, round(REFERENCE_SHAPE[0] * scale))
    W = max(4, round(REFERENCE_SHAPE[1] * scale))
    while H * W < n_target:
        H, W = H + 1, W + 1
    rng = np.random.default_rng(seed)
    vv, uu = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    # validity follows a smooth random field so holes come in blobs, like occlusion gaps
    field = sum(rng.normal() * np.sin(2 * np.pi * (rng.uniform(1, 4) * uu + rng.uniform(1, 4) * vv + rng.random()))
                for _ in range(6)) + 0.1 * rng.normal(size=(H, W))
    order = np.argsort(field.reshape(-1), kind="stable")
    valid = np.zeros(H * W, bool)
    valid[order[:n_target]] = True
    f = 0.9 * W
    z = 10.0 + 2.0 * np.sin(3 * uu) * np.cos(2 * vv)
    coords = np.stack([(uu * W - W / 2) / f * z, (vv * H - H / 2) / f * z, z], -1).astype(np.float32)
    valid = valid.reshape(H, W)
    coords[~valid] = 0
    return PointImage(coords, valid)


def _median_ms(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times)), out


def bench_grouping(n_target: int = REFERENCE_N, spec: KernelSpec | None = None, repeats: int = 5,
                   seed: int = 0) -> BenchReport:
    """Median wall-clock of self-grouping a grid with ``n_target`` valid cells, kernel vs whole grid."""
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    spec = spec or KernelSpec()
    grid = bench_grid(n_target, seed)
    H, W = grid.shape
    whole = KernelSpec.whole_grid(H, W, spec.K, spec.max_dist)
    k_ms, k_tab = _median_ms(lambda: group_neighbors(grid, grid, spec), repeats)
    b_ms, b_tab = _median_ms(lambda: brute_force_group(grid, grid, whole), repeats)
    return BenchReport(grid.n_valid, H, W, spec.k_h, spec.k_w, spec.K, repeats, WORKERS, k_ms, b_ms,
                       b_ms / max(k_ms, 1e-9), k_tab.candidate_count, b_tab.candidate_count)


def loglog_slope(ns, values) -> float:
    """Least-squares slope of log(values) against log(ns)."""
    x, y = np.log(np.asarray(ns, float)), np.log(np.asarray(values, float))
    return float(np.polyfit(x, y, 1)[0])
