"""Synthetic rigid-motion scenes with exact ground-truth scene flow.

A slanted background plane plus boxes and spheres is ray cast into frame 1;
every object (and the background) moves rigidly, and frame 2 is the
pixelization of the moved frame-1 points. Colors are per object with a
per-point texture that travels with the point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fusion import read_image, write_image
from .grid_repr import (CameraIntrinsics, PointImage, project_points, read_grid, read_intrinsics,
                        read_point_image, write_grid, write_intrinsics, write_point_image)

PALETTE = np.array([
    [0.55, 0.55, 0.55],
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
], np.float32)


@dataclass
class SyntheticScene:
    pc1: PointImage
    pc2: PointImage
    img1: np.ndarray
    img2: np.ndarray
    gt_flow: np.ndarray
    intr: CameraIntrinsics
    seed: int
    object_id: np.ndarray  # (H, W) owning object per PC1 cell, 0 = background, -1 = empty
    motions: list = field(default_factory=list)  # (R, t) per object id, p -> R p + t


def default_intrinsics(height: int, width: int) -> CameraIntrinsics:
    f = 0.9 * width
    return CameraIntrinsics(f, f, width / 2, height / 2, width, height)


def rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(rng.uniform(-max_deg, max_deg))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K


def _random_translation(rng, lo, hi):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return d * rng.uniform(lo, hi)


def _ray_sphere(dirs, center, radius):
    b = dirs @ center
    c = center @ center - radius ** 2
    disc = b * b - (dirs * dirs).sum(-1) * c
    a = (dirs * dirs).sum(-1)
    with np.errstate(invalid="ignore"):
        t = (b - np.sqrt(disc)) / a
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _ray_box(dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / dirs
        t2 = hi / dirs
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    return np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)


def synth(seed: int, height: int = 48, width: int = 64, n_objects: int = 3,
          max_rot_deg: float = 5.0, max_trans: float = 0.5, min_trans: float = 0.0,
          depth_range: tuple = (3.0, 12.0), bg_depth: tuple = (18.0, 28.0),
          size_range: tuple = (0.12, 0.25), depth_max: float = 35.0,
          intr: CameraIntrinsics | None = None) -> SyntheticScene:
    """Deterministic scene for ``seed``. ``max_rot_deg = max_trans = 0`` gives a static scene."""
    if height < 16 or width < 16:
        raise ValueError("synthetic scenes need H, W >= 16")
    intr = intr or default_intrinsics(height, width)
    if intr.shape != (height, width):
        raise ValueError("intrinsics do not match the requested grid")
    rng = np.random.default_rng(seed)
    vv, uu = np.mgrid[0:height, 0:width].astype(np.float64)
    dirs = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], -1)

    # background plane z = z0 + a x + b y
    z0 = rng.uniform(*bg_depth)
    a, b = rng.uniform(-0.3, 0.3, 2)
    denom = 1 - a * dirs[..., 0] - b * dirs[..., 1]
    t_best = np.where(denom > 0.05, z0 / denom, np.inf)
    owner = np.zeros((height, width), np.int64)
    centers = [np.array([0.0, 0.0, z0])]
    for k in range(1, n_objects + 1):
        z = rng.uniform(*depth_range)
        half_fov = np.array([intr.cx / intr.fx, intr.cy / intr.fy]) * 0.8
        xy = rng.uniform(-1, 1, 2) * half_fov * z
        c = np.array([xy[0], xy[1], z])
        size = rng.uniform(*size_range) * z * half_fov.min()
        if rng.random() < 0.5:
            t = _ray_sphere(dirs, c, size)
        else:
            t = _ray_box(dirs, c - size, c + size)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        owner[closer] = k
        centers.append(c)
    hit = np.isfinite(t_best)
    pts = dirs * np.where(hit, t_best, 0)[..., None]

    motions = []
    for k, c in enumerate(centers):
        rot_lim = max_rot_deg if k else min(max_rot_deg, 1.0)
        R = rotation(rng, rot_lim) if rot_lim > 0 else np.eye(3)
        tr = _random_translation(rng, min(min_trans, max_trans), max_trans) if max_trans > 0 else np.zeros(3)
        # rotate about the object's own center
        motions.append((R, c + tr - R @ c))

    tex = rng.normal(0.0, 0.08, size=(height, width, 3))
    # frame-1 points are stored at float32 before pixelization, as in project_points
    cloud = pts[hit].astype(np.float32)
    src_cells = np.flatnonzero(hit.reshape(-1))
    pc1, idx1 = project_points(cloud, intr, depth_max, return_index=True)

    H, W = height, width
    obj1 = np.full((H, W), -1, np.int64)
    gt = np.zeros((H, W, 3), np.float32)
    color_pt = np.clip(PALETTE[owner.reshape(-1)[src_cells] % len(PALETTE)] + tex.reshape(-1, 3)[src_cells], 0, 1)
    moved = np.empty_like(cloud, dtype=np.float64)
    obj_pt = owner.reshape(-1)[src_cells]
    for k, (R, t) in enumerate(motions):
        sel = obj_pt == k
        moved[sel] = cloud[sel].astype(np.float64) @ R.T + t
    ok1 = idx1 >= 0
    gt[ok1] = (moved[idx1[ok1]] - cloud[idx1[ok1]].astype(np.float64)).astype(np.float32)
    obj1[ok1] = obj_pt[idx1[ok1]]

    img1 = np.clip(PALETTE[0] + rng.normal(0, 0.05, (H, W, 3)), 0, 1).astype(np.float32)
    img1[ok1] = color_pt[idx1[ok1]]

    # frame 2: only points that survived pixelization in frame 1 move on
    survivors = idx1[ok1]
    pc2, idx2 = project_points(moved[survivors], intr, depth_max, return_index=True)
    img2 = np.clip(PALETTE[0] + rng.normal(0, 0.05, (H, W, 3)), 0, 1).astype(np.float32)
    ok2 = idx2 >= 0
    img2[ok2] = color_pt[survivors[idx2[ok2]]]
    return SyntheticScene(pc1, pc2, img1, img2.astype(np.float32), gt, intr, seed, obj1, motions)


def large_motion_scene(seed: int, height: int = 48, width: int = 64, n_objects: int = 4) -> SyntheticScene:
    """Close objects with near-maximal translation: several cells of 2D motion."""
    return synth(seed, height, width, n_objects, max_rot_deg=5.0, max_trans=0.5, min_trans=0.4,
                 depth_range=(1.5, 4.0), bg_depth=(5.0, 8.0), size_range=(0.2, 0.35))


SCENE_FILES = ("pc1.grid", "pc2.grid", "img1.img", "img2.img", "gt_flow.grid", "intrinsics.txt")


def save_scene(scene: SyntheticScene, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_point_image(out / "pc1.grid", scene.pc1)
    write_point_image(out / "pc2.grid", scene.pc2)
    write_image(out / "img1.img", scene.img1)
    write_image(out / "img2.img", scene.img2)
    write_grid(out / "gt_flow.grid", scene.gt_flow, scene.pc1.valid)
    write_intrinsics(out / "intrinsics.txt", scene.intr)


def load_scene(scene_dir) -> SyntheticScene:
    d = Path(scene_dir)
    gt, _ = read_grid(d / "gt_flow.grid")
    pc1 = read_point_image(d / "pc1.grid")
    return SyntheticScene(pc1, read_point_image(d / "pc2.grid"), read_image(d / "img1.img"),
                          read_image(d / "img2.img"), gt, read_intrinsics(d / "intrinsics.txt"),
                          seed=-1, object_id=np.where(pc1.valid, 0, -1))
