"""Point-feature pyramid: strided centers, set-conv downsampling, set-upconv."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (MlpWeights, Tensor, concat, data_of, gather_rows, maxpool_neighbors,
                       mlp_forward, mul, reshape, strided, sub)
from .grid_repr import PointImage
from .grouping import KernelSpec, NeighborTable, gather, group_neighbors, strided_window_centers


@dataclass
class PyramidLevel:
    level: int
    stride: int  # cumulative, relative to the full-resolution grid
    points: PointImage
    features: Tensor  # (H, W, C)
    table: NeighborTable | None = None


def strided_shape(height: int, width: int, stride: int) -> tuple[int, int]:
    """Number of centers i with i*stride + stride//2 inside the grid, per axis."""
    off = stride // 2
    return ((height - off - 1) // stride + 1, (width - off - 1) // stride + 1)


def select_centers(src: PointImage, stride: int) -> PointImage:
    """Center (i, j) <- src cell (i*stride + stride//2, j*stride + stride//2), validity inherited."""
    if stride < 2:
        raise ValueError("stride must be >= 2")
    off = stride // 2
    return PointImage(src.coords[off::stride, off::stride].copy(),
                      src.valid[off::stride, off::stride].copy())


def subsample_grid(grid: np.ndarray, stride: int) -> np.ndarray:
    off = stride // 2
    return grid[off::stride, off::stride].copy()


def relative_grouped_coords(table: NeighborTable, center_xyz, source_xyz) -> Tensor:
    """(n, K, 3) neighbor minus center coordinates; zeros in invalid slots."""
    n_src = table.source_shape[0] * table.source_shape[1]
    nb = gather_rows(reshape(source_xyz, (n_src, 3)), table.idx, table.valid)
    ctr = reshape(center_xyz, (table.n_centers, 1, 3))
    return mul(sub(nb, ctr), table.valid[:, :, None].astype(data_of(nb).dtype))


def setconv_down(src_points: PointImage, src_features, stride: int, spec: KernelSpec,
                 w: MlpWeights, level: int = 0, cum_stride: int | None = None,
                 grouper=group_neighbors, src_xyz=None) -> PyramidLevel:
    """MaxPool_k MLP((x_ik - x_i) concat f_ik) over kernel-grouped neighbors of strided centers.

    ``src_xyz`` optionally supplies the source coordinates as a (differentiable)
    tensor; it defaults to ``src_points.coords``.
    """
    centers = select_centers(src_points, stride)
    Hc, Wc = centers.shape
    wc = strided_window_centers((Hc, Wc), src_points.shape, stride)
    table = grouper(centers, src_points, spec, window_centers=wc)
    xyz = src_points.coords if src_xyz is None else src_xyz
    ctr_xyz = strided(xyz, stride, stride // 2)
    rel = relative_grouped_coords(table, ctr_xyz, xyz)
    nb_f = gather(src_features, table)
    h = mlp_forward(w, concat([rel, nb_f], axis=-1))
    pooled, _, empty = maxpool_neighbors(h, table.valid, return_argmax=True)
    valid = centers.valid & ~empty.reshape(Hc, Wc)
    out_pts = PointImage(np.where(valid[..., None], centers.coords, 0).astype(np.float32), valid)
    feats = mul(reshape(pooled, (Hc, Wc, w.c_out)), valid[..., None].astype(data_of(pooled).dtype))
    return PyramidLevel(level, cum_stride or stride, out_pts, feats, table)


def coarse_window_centers(fine_shape, coarse_shape, stride: int = 2) -> np.ndarray:
    """(Hf, Wf, 2) coarse cell nearest to each fine cell's strided position."""
    Hf, Wf = fine_shape
    Hc, Wc = coarse_shape
    jj, ii = np.meshgrid(np.arange(Wf), np.arange(Hf))
    u = np.clip(jj // stride, 0, Wc - 1)
    v = np.clip(ii // stride, 0, Hc - 1)
    return np.stack([u, v], axis=-1).astype(np.int64)


def set_upconv(coarse: PyramidLevel, fine_points: PointImage, fine_skip, spec: KernelSpec,
               w1: MlpWeights, w2: MlpWeights, coarse_features=None, grouper=group_neighbors):
    """Upsample coarse features onto the fine grid.

    b_i = MaxPool MLP_w1((x_coarse - x_fine) concat f_coarse) over coarse
    neighbors in a window around each fine cell's strided position (b_i = 0
    with no coarse neighbor); output = MLP_w2(b_i concat skip_i), zero at
    invalid fine cells.
    """
    Hf, Wf = fine_points.shape
    feats = coarse.features if coarse_features is None else coarse_features
    wc = coarse_window_centers((Hf, Wf), coarse.points.shape)
    table = grouper(fine_points, coarse.points, spec, window_centers=wc)
    rel = relative_grouped_coords(table, fine_points.coords, coarse.points.coords)
    nb_f = gather(feats, table)
    h = mlp_forward(w1, concat([rel, nb_f], axis=-1))
    b = maxpool_neighbors(h, table.valid)  # rows without neighbors are zero
    skip = reshape(fine_skip, (Hf * Wf, data_of(fine_skip).shape[-1]))
    out = mlp_forward(w2, concat([b, skip], axis=-1))
    dt = data_of(out).dtype
    return mul(reshape(out, (Hf, Wf, w2.c_out)), fine_points.valid[..., None].astype(dt))
