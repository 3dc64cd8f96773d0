"""Kernel based neighbor grouping on the dense grid.

For every center cell, the K source points nearest in 3D are selected from a
k_h x k_w window on the 2D grid instead of from the whole cloud. Results are
distance-sorted, ties broken by the smaller row-major source index; far points
(> max_dist) are filtered out. When only m < K qualify, the nearest one fills
the first K - m + 1 slots so rows stay sorted; with none qualifying the whole
row is invalid (index -1, dist inf).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .autodiff import Tensor, data_of, gather_rows, reshape
from .grid_repr import PointImage


@dataclass(frozen=True)
class KernelSpec:
    k_h: int = 7
    k_w: int = 9
    K: int = 16
    max_dist: float = math.inf

    def __post_init__(self):
        for k in (self.k_h, self.k_w):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"window dims must be odd and >= 1, got {self.k_h}x{self.k_w}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.max_dist > 0:
            raise ValueError("max_dist must be positive")

    @property
    def k_s(self) -> int:
        return self.k_h * self.k_w

    @classmethod
    def whole_grid(cls, height: int, width: int, K: int, max_dist: float = math.inf) -> "KernelSpec":
        """Window reaching every cell from any center (the no-KBG arm)."""
        return cls(2 * height - 1, 2 * width - 1, K, max_dist)


@dataclass
class NeighborTable:
    idx: np.ndarray  # (n_centers, K) flat row-major source index, -1 where invalid
    valid: np.ndarray  # (n_centers, K) bool
    dists: np.ndarray  # (n_centers, K) float64, inf where invalid
    candidate_count: int
    center_shape: tuple
    source_shape: tuple

    @property
    def n_centers(self) -> int:
        return self.idx.shape[0]

    @property
    def K(self) -> int:
        return self.idx.shape[1]

    @property
    def u(self) -> np.ndarray:
        return np.where(self.valid, self.idx % self.source_shape[1], -1)

    @property
    def v(self) -> np.ndarray:
        return np.where(self.valid, self.idx // self.source_shape[1], -1)

    def same_as(self, other: "NeighborTable") -> bool:
        return (np.array_equal(self.idx, other.idx) and np.array_equal(self.valid, other.valid)
                and np.array_equal(self.dists, other.dists))


def strided_window_centers(center_shape, source_shape, stride: int | None = None) -> np.ndarray:
    """(Hc, Wc, 2) window centers (u, v) on the source grid for a strided center grid.

    Center (i, j) maps to source cell (i*stride + stride//2, j*stride + stride//2);
    same-shaped grids map one to one.
    """
    Hc, Wc = center_shape
    if stride is None:
        if tuple(center_shape) == tuple(source_shape):
            stride = 1
        else:
            stride = max(1, round(source_shape[0] / Hc))
    off = stride // 2 if stride > 1 else 0
    jj, ii = np.meshgrid(np.arange(Wc), np.arange(Hc))
    return np.stack([jj * stride + off, ii * stride + off], axis=-1).astype(np.int64)


def _prepare(centers: PointImage, source: PointImage, window_centers, center_valid):
    Hc, Wc = centers.shape
    if window_centers is None:
        window_centers = strided_window_centers((Hc, Wc), source.shape)
    wc = np.asarray(window_centers, np.int64).reshape(-1, 2)
    if wc.shape[0] != Hc * Wc:
        raise ValueError("window_centers must have one (u, v) per center cell")
    cv = centers.valid.reshape(-1) if center_valid is None else np.asarray(center_valid, bool).reshape(-1)
    return centers.coords.reshape(-1, 3), cv, wc


def _pairwise_dist(cx, cy, cz, sx, sy, sz) -> np.ndarray:
    # fixed x, y, z summation order in float64; both grouping routes must agree bitwise
    dx = sx - cx
    dy = sy - cy
    dz = sz - cz
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def group_neighbors(centers: PointImage, source: PointImage, spec: KernelSpec,
                    window_centers: np.ndarray | None = None,
                    center_valid: np.ndarray | None = None) -> NeighborTable:
    """Windowed K-nearest grouping, vectorized over centers.

    ``window_centers`` gives the (u, v) source cell each window is centered on
    (defaults to the strided mapping); ``center_valid`` overrides the centers'
    own validity mask. Distances are measured from ``centers.coords``.
    """
    c_xyz, c_valid, wc = _prepare(centers, source, window_centers, center_valid)
    H, W = source.shape
    n = c_xyz.shape[0]
    K = spec.K
    out_i = np.full((n, K), -1, np.int64)
    out_d = np.full((n, K), np.inf)
    out_v = np.zeros((n, K), bool)
    active = np.flatnonzero(c_valid)
    if active.size == 0:
        return NeighborTable(out_i, out_v, out_d, 0, centers.shape, source.shape)

    s_valid = source.valid.reshape(-1)
    s_flat = source.coords.reshape(-1, 3)
    sx, sy, sz = (s_flat[:, a].astype(np.float64) for a in range(3))
    c64 = c_xyz[active].astype(np.float64)
    wc = wc[active]
    rh, rw = spec.k_h // 2, spec.k_w // 2

    # offsets enumerated row-major so candidate columns are in increasing source index
    dv, du = np.meshgrid(np.arange(-rh, rh + 1), np.arange(-rw, rw + 1), indexing="ij")
    su = wc[:, 0:1] + du.reshape(1, -1)
    sv = wc[:, 1:2] + dv.reshape(1, -1)
    cand = (su >= 0) & (su < W) & (sv >= 0) & (sv < H)
    sidx = sv * W + su
    sidx[~cand] = 0
    cand &= s_valid[sidx]
    candidate_count = int(np.count_nonzero(cand))

    d = _pairwise_dist(c64[:, 0:1], c64[:, 1:2], c64[:, 2:3], sx[sidx], sy[sidx], sz[sidx])
    d[~cand | (d > spec.max_dist)] = np.inf

    if d.shape[1] < K:  # window smaller than K: pad with never-qualifying columns
        extra = K - d.shape[1]
        d = np.concatenate([d, np.full((d.shape[0], extra), np.inf)], axis=1)
        sidx = np.concatenate([sidx, np.zeros((d.shape[0], extra), sidx.dtype)], axis=1)
    order = np.argsort(d, axis=1, kind="stable")[:, :K]
    d_sel = np.take_along_axis(d, order, axis=1)
    i_sel = np.take_along_axis(sidx, order, axis=1)
    ok = np.isfinite(d_sel)
    # pad short rows by repeating the nearest neighbor at the front, which keeps rows sorted
    m = ok.sum(axis=1, keepdims=True)
    pick = np.maximum(np.arange(K)[None, :] - (K - m), 0)
    d_sel = np.take_along_axis(d_sel, pick, axis=1)
    i_sel = np.take_along_axis(i_sel, pick, axis=1)
    has_any = ok[:, 0]
    rows = active[has_any]
    out_i[rows] = i_sel[has_any]
    out_d[rows] = d_sel[has_any]
    out_v[rows] = True
    return NeighborTable(out_i, out_v, out_d, candidate_count, centers.shape, source.shape)


@numba.njit(cache=True)
def _brute_kernel(c_xyz, c_valid, wc, s_xyz, row_ptr, row_cols, H, W, rh, rw, K, max_dist):
    n = c_xyz.shape[0]
    out_i = np.full((n, K), -1, np.int64)
    out_d = np.full((n, K), np.inf)
    out_v = np.zeros((n, K), np.bool_)
    count = 0
    best_d = np.empty(K)
    best_d2 = np.empty(K)
    best_i = np.empty(K, np.int64)
    # a squared distance above these bounds has a strictly larger sqrt
    slack = 1.0 + 1e-12
    max_d2 = max_dist * max_dist * slack
    for c in range(n):
        if not c_valid[c]:
            continue
        v0 = max(wc[c, 1] - rh, 0)
        v1 = min(wc[c, 1] + rh, H - 1)
        u0 = max(wc[c, 0] - rw, 0)
        u1 = min(wc[c, 0] + rw, W - 1)
        m = 0
        bound = max_d2
        cx = np.float64(c_xyz[c, 0])
        cy = np.float64(c_xyz[c, 1])
        cz = np.float64(c_xyz[c, 2])
        for v in range(v0, v1 + 1):
            lo = row_ptr[v] + np.searchsorted(row_cols[row_ptr[v]:row_ptr[v + 1]], u0)
            hi = row_ptr[v] + np.searchsorted(row_cols[row_ptr[v]:row_ptr[v + 1]], u1 + 1)
            count += hi - lo
            for t in range(lo, hi):
                s = v * W + row_cols[t]
                dx = np.float64(s_xyz[s, 0]) - cx
                dy = np.float64(s_xyz[s, 1]) - cy
                dz = np.float64(s_xyz[s, 2]) - cz
                d2 = dx * dx + dy * dy + dz * dz
                if d2 > bound:
                    continue
                d = math.sqrt(d2)
                if d > max_dist:
                    continue
                # insertion into the sorted best list, key (d, s)
                if m == K and not (d < best_d[K - 1] or (d == best_d[K - 1] and s < best_i[K - 1])):
                    continue
                j = m if m < K else K - 1
                while j > 0 and (best_d[j - 1] > d or (best_d[j - 1] == d and best_i[j - 1] > s)):
                    best_d[j] = best_d[j - 1]
                    best_d2[j] = best_d2[j - 1]
                    best_i[j] = best_i[j - 1]
                    j -= 1
                best_d[j] = d
                best_d2[j] = d2
                best_i[j] = s
                if m < K:
                    m += 1
                if m == K:
                    bound = min(max_d2, best_d2[K - 1] * slack)
        if m == 0:
            continue
        for k in range(K):
            src = max(k - (K - m), 0)
            out_i[c, k] = best_i[src]
            out_d[c, k] = best_d[src]
            out_v[c, k] = True
    return out_i, out_d, out_v, count


def brute_force_group(centers: PointImage, source: PointImage, spec: KernelSpec,
                      window_centers: np.ndarray | None = None,
                      center_valid: np.ndarray | None = None) -> NeighborTable:
    """Reference grouping: scans every valid cell of each clipped window with a scalar loop.

    Same contract and call signature as :func:`group_neighbors`; with
    :meth:`KernelSpec.whole_grid` it is exhaustive KNN over the whole cloud.
    """
    c_xyz, c_valid, wc = _prepare(centers, source, window_centers, center_valid)
    H, W = source.shape
    vv, uu = np.nonzero(source.valid)
    row_ptr = np.zeros(H + 1, np.int64)
    np.cumsum(np.bincount(vv, minlength=H), out=row_ptr[1:])
    i, d, v, count = _brute_kernel(
        np.ascontiguousarray(c_xyz), np.ascontiguousarray(c_valid), np.ascontiguousarray(wc),
        np.ascontiguousarray(source.coords.reshape(-1, 3)), row_ptr, uu.astype(np.int64),
        H, W, spec.k_h // 2, spec.k_w // 2, spec.K, float(spec.max_dist))
    return NeighborTable(i, v, d, int(count), centers.shape, source.shape)


def gather(features, table: NeighborTable) -> Tensor:
    """Grouped features (n_centers, K, C) from an (H, W, C) or (H*W, C) source grid."""
    f = data_of(features)
    n_src = table.source_shape[0] * table.source_shape[1]
    if f.ndim == 3:
        if f.shape[:2] != tuple(table.source_shape):
            raise ValueError(f"feature grid {f.shape[:2]} does not match source grid {table.source_shape}")
    elif f.ndim != 2 or f.shape[0] != n_src:
        raise ValueError(f"features must be (H, W, C) or (H*W, C), got {f.shape}")
    flat = reshape(features, (n_src, f.shape[-1])) if f.ndim == 3 else features
    return gather_rows(flat, table.idx, table.valid)
