"""Cost volume with warping projection.

Warped PC1 points stay in their original grid slots; their projected cells
are kept in a separate H x W x 2 warp index that only steers where the PC2
search window is placed. No two PC1 points are ever merged.

``correlate_unwarped`` implements the two comparison arms: searching around
the unwarped cell, or re-projecting warped points into a fresh grid (merging
collisions) and copying embeddings back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (MlpWeights, Tensor, add, broadcast_to, concat, data_of, gather_rows,
                       mlp_forward, mul, norm, reshape, softmax_neighbors, sub, sum_)
from .grid_repr import CameraIntrinsics, PointImage, pixel_rule
from .grouping import KernelSpec, NeighborTable, group_neighbors

WARP_MODES = ("full", "no-warp", "reproject")


@dataclass
class WarpIndex:
    uv: np.ndarray  # (H, W, 2) int64 (u, v); (0, 0) where not in frame
    in_frame: np.ndarray  # (H, W) bool


@dataclass
class FlowEmbedding:
    e: Tensor  # (H, W, C')
    valid: np.ndarray  # PC1 validity
    flagged: np.ndarray  # valid slots that got no correspondence (zero embedding)
    table1: NeighborTable | None = None
    attn1: Tensor | None = None
    attn2: Tensor | None = None
    n_merged: int = 0  # slots whose embedding was copied from a merged winner

    @property
    def ok(self) -> np.ndarray:
        return self.valid & ~self.flagged


def warp(pc1: PointImage, coarse_flow, intr: CameraIntrinsics):
    """Add the coarse flow to PC1 in place of each slot.

    Returns ``(warped_xyz, warped, widx)``: the differentiable (H, W, 3)
    coordinates, the same values as a PointImage with PC1's exact validity
    mask, and the warp index of every valid slot.
    """
    flow_d = data_of(coarse_flow)
    if flow_d.shape != pc1.coords.shape:
        raise ValueError(f"flow {flow_d.shape} not aligned with grid {pc1.coords.shape}")
    mask = pc1.valid[..., None].astype(flow_d.dtype)
    warped_xyz = add(pc1.coords.astype(flow_d.dtype), mul(coarse_flow, mask))
    wd = data_of(warped_xyz)
    u, v, ok = pixel_rule(wd, intr)
    in_frame = ok & pc1.valid
    uv = np.stack([np.where(in_frame, u, 0), np.where(in_frame, v, 0)], axis=-1)
    warped = PointImage(wd.astype(np.float32) if wd.dtype != np.float32 else wd.copy(), pc1.valid.copy())
    return warped_xyz, warped, WarpIndex(uv.astype(np.int64), in_frame)


def _grouped_offsets(table: NeighborTable, src_xyz, ctr_xyz):
    """(n, K, 3) direction source - center and (n, K, 1) distance, zero in invalid slots."""
    n_src = table.source_shape[0] * table.source_shape[1]
    nb = gather_rows(reshape(src_xyz, (n_src, 3)), table.idx, table.valid)
    ctr = reshape(ctr_xyz, (table.n_centers, 1, 3))
    dt = data_of(nb).dtype
    d = mul(sub(nb, ctr), table.valid[:, :, None].astype(dt))
    return d, norm(d, axis=-1, keepdims=True)


def _stage1(ctr_xyz, ctr_img: PointImage, window_centers, center_valid, pc2: PointImage, f1, f2,
            spec: KernelSpec, w_att1: MlpWeights, w_val: MlpWeights, grouper):
    H, W = ctr_img.shape
    n = H * W
    table = grouper(ctr_img, pc2, spec, window_centers=window_centers, center_valid=center_valid)
    d, dist = _grouped_offsets(table, pc2.coords.astype(data_of(f2).dtype), ctr_xyz)
    C = data_of(f1).shape[-1]
    f1_b = broadcast_to(reshape(f1, (n, 1, C)), (n, table.K, C))
    f2_k = gather_rows(reshape(f2, (pc2.shape[0] * pc2.shape[1], data_of(f2).shape[-1])),
                       table.idx, table.valid)
    scores = mlp_forward(w_att1, concat([d, dist, f1_b, f2_k], axis=-1))
    attn = softmax_neighbors(scores, table.valid)
    vals = mlp_forward(w_val, concat([f2_k, d], axis=-1))
    e1 = sum_(mul(attn, vals), axis=1)
    flagged = ~table.valid[:, 0]
    return e1, flagged, table, attn


def _stage2(e1, flagged, pts_xyz, pts: PointImage, spec2: KernelSpec, w_att2: MlpWeights, grouper):
    H, W = pts.shape
    n = H * W
    table = grouper(pts, pts, spec2)
    safe = np.where(table.valid, table.idx, 0)
    nb_ok = table.valid & ~flagged[safe]
    d, dist = _grouped_offsets(NeighborTable(table.idx, nb_ok, table.dists, table.candidate_count,
                                             table.center_shape, table.source_shape), pts_xyz, pts_xyz)
    C = data_of(e1).shape[-1]
    e_k = gather_rows(e1, table.idx, nb_ok)
    e_i = broadcast_to(reshape(e1, (n, 1, C)), (n, table.K, C))
    scores = mlp_forward(w_att2, concat([d, dist, e_i, e_k], axis=-1))
    attn = softmax_neighbors(scores, nb_ok)
    e = sum_(mul(attn, e_k), axis=1)
    keep = (pts.valid.reshape(-1) & ~flagged)[:, None].astype(data_of(e).dtype)
    return mul(e, keep), attn


def correlate(warped_xyz, warped: PointImage, widx: WarpIndex, pc1: PointImage, pc2: PointImage,
              f1, f2, spec: KernelSpec, spec2: KernelSpec, w_att1: MlpWeights, w_att2: MlpWeights,
              w_val: MlpWeights, grouper=group_neighbors) -> FlowEmbedding:
    """Double attentive flow embedding with the PC2 window centered on the warp index.

    Stage 1 aggregates PC2 neighbors (distances from the warped coordinate);
    stage 2 re-aggregates stage-1 embeddings over PC1 self-neighbors found
    around the original slot with original coordinates.
    """
    H, W = pc1.shape
    e1, flagged, table1, attn1 = _stage1(warped_xyz, warped, widx.uv, pc1.valid & widx.in_frame,
                                         pc2, f1, f2, spec, w_att1, w_val, grouper)
    flagged = flagged & pc1.valid.reshape(-1)
    xyz1 = pc1.coords.astype(data_of(e1).dtype)
    e, attn2 = _stage2(e1, flagged, xyz1, pc1, spec2, w_att2, grouper)
    return FlowEmbedding(reshape(e, (H, W, data_of(e).shape[-1])), pc1.valid.copy(),
                         flagged.reshape(H, W), table1, attn1, attn2)


def correlate_unwarped(arm: str, coarse_flow, pc1: PointImage, pc2: PointImage, f1, f2,
                       intr: CameraIntrinsics, spec: KernelSpec, spec2: KernelSpec,
                       w_att1: MlpWeights, w_att2: MlpWeights, w_val: MlpWeights,
                       grouper=group_neighbors) -> FlowEmbedding:
    """Comparison arms without warping projection.

    ``"no-warp"``: search around the original cell using original coordinates.
    ``"reproject"``: warp, re-project warped points into a new grid keeping the
    nearest z per cell, correlate there, then give every slot the embedding of
    the winner in its cell.
    """
    H, W = pc1.shape
    if arm == "no-warp":
        dt = data_of(f1).dtype
        xyz1 = pc1.coords.astype(dt)
        own = np.stack(np.meshgrid(np.arange(W), np.arange(H)), axis=-1)
        e1, flagged, table1, attn1 = _stage1(xyz1, pc1, own, pc1.valid, pc2, f1, f2, spec,
                                             w_att1, w_val, grouper)
        flagged = flagged & pc1.valid.reshape(-1)
        e, attn2 = _stage2(e1, flagged, xyz1, pc1, spec2, w_att2, grouper)
        return FlowEmbedding(reshape(e, (H, W, data_of(e).shape[-1])), pc1.valid.copy(),
                             flagged.reshape(H, W), table1, attn1, attn2)
    if arm != "reproject":
        raise ValueError(f"unknown arm {arm!r}")

    warped_xyz, warped, widx = warp(pc1, coarse_flow, intr)
    slot_of_cell, merged = _zbuffer_merge(data_of(warped_xyz), widx)
    cell_valid = slot_of_cell >= 0
    safe = np.where(cell_valid, slot_of_cell, 0)
    n = H * W
    C = data_of(f1).shape[-1]
    m_xyz = gather_rows(reshape(warped_xyz, (n, 3)), safe, cell_valid)
    m_f1 = gather_rows(reshape(f1, (n, C)), safe, cell_valid)
    m_xyz_g = reshape(m_xyz, (H, W, 3))
    e1, flagged_m, table1, attn1 = _stage1(m_xyz_g, merged, None, merged.valid, pc2,
                                           reshape(m_f1, (H, W, C)), f2, spec, w_att1, w_val, grouper)
    flagged_m = flagged_m & merged.valid.reshape(-1)
    e_m, attn2 = _stage2(e1, flagged_m, m_xyz_g, merged, spec2, w_att2, grouper)
    # copy back: each in-frame slot reads the merged cell it projects to
    cell = (widx.uv[..., 1] * W + widx.uv[..., 0]).reshape(-1)
    got = widx.in_frame.reshape(-1) & ~flagged_m[cell]
    e = gather_rows(e_m, cell, got)
    is_winner = np.zeros(n, bool)
    is_winner[slot_of_cell[cell_valid]] = True
    n_merged = int(np.count_nonzero(got & ~is_winner))
    flagged = pc1.valid.reshape(-1) & ~got
    return FlowEmbedding(reshape(e, (H, W, data_of(e).shape[-1])), pc1.valid.copy(),
                         flagged.reshape(H, W), table1, attn1, attn2, n_merged)


def _zbuffer_merge(wd: np.ndarray, widx: WarpIndex):
    """Winner slot per cell (-1 if empty) and the merged PointImage; nearest z wins."""
    H, W = widx.in_frame.shape
    slots = np.flatnonzero(widx.in_frame)
    cells = (widx.uv[..., 1] * W + widx.uv[..., 0]).reshape(-1)[slots]
    z = wd.reshape(-1, 3)[slots, 2]
    order = np.lexsort((slots, z, cells))
    cs = cells[order]
    first = np.ones(order.size, bool)
    first[1:] = cs[1:] != cs[:-1]
    slot_of_cell = np.full(H * W, -1, np.int64)
    slot_of_cell[cs[first]] = slots[order[first]]
    merged = PointImage.empty(H, W)
    ok = slot_of_cell >= 0
    merged.coords.reshape(-1, 3)[ok] = wd.reshape(-1, 3)[slot_of_cell[ok]]
    merged.valid.reshape(-1)[ok] = True
    return slot_of_cell, merged


def predict_residual(warped_f1, emb: FlowEmbedding, up_emb, w_pred: MlpWeights, w_flow: MlpWeights):
    """Refined embedding = MLP(f1 concat e concat up_emb); residual = MLP_flow(refined)."""
    H, W = emb.valid.shape
    n = H * W
    dt = data_of(warped_f1).dtype

    def flat(x):
        return reshape(x, (n, data_of(x).shape[-1]))

    refined = mlp_forward(w_pred, concat([flat(warped_f1), flat(emb.e), flat(up_emb)], axis=-1))
    refined = mul(refined, emb.valid.reshape(n, 1).astype(dt))
    residual = mlp_forward(w_flow, refined)
    if w_flow.c_out != 3:
        raise ValueError("flow head must output 3 channels")
    residual = mul(residual, emb.ok.reshape(n, 1).astype(dt))
    return reshape(residual, (H, W, 3)), reshape(refined, (H, W, w_pred.c_out))


def refine(coarse_flow, residual):
    """F_a = F_c + F_delta, elementwise."""
    return add(coarse_flow, residual)
