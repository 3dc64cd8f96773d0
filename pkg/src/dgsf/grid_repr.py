"""Dense H x W x 3 grid representation of point clouds.

Points are pixelized with a pinhole camera: each cell stores the xyz of the
point that projects into it (nearest z wins), empty cells hold (0, 0, 0) and
are marked invalid in an explicit mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLOUD_MAGIC = b"DGSF_CLOUD_V1\0\0\0"
GRID_MAGIC = b"DGSF_GRID_V1\0\0\0\0"

_INTR_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


class FormatError(ValueError):
    """Raised when a file does not follow the expected binary/text layout."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    # derived level grids may legitimately have their principal point off-grid
    check_principal: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        if self.check_principal and not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside the grid")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def subgrid(self, stride: int, offset: int, height: int, width: int) -> "CameraIntrinsics":
        """Intrinsics of a subgrid whose cell i sits at full-resolution pixel stride*i + offset.

        Repeated stride-2 center selection puts level cell i at pixel
        s*i + (s - 1) for cumulative stride s.
        """
        return CameraIntrinsics(
            fx=self.fx / stride,
            fy=self.fy / stride,
            cx=(self.cx - offset) / stride,
            cy=(self.cy - offset) / stride,
            width=width,
            height=height,
            check_principal=False,
        )


@dataclass
class PointImage:
    coords: np.ndarray  # (H, W, 3) float32
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.coords.ndim != 3 or self.coords.shape[2] != 3:
            raise ValueError(f"coords must be H x W x 3, got {self.coords.shape}")
        if self.valid.shape != self.coords.shape[:2]:
            raise ValueError("validity mask does not match the coordinate grid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.coords.shape[:2]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @classmethod
    def empty(cls, height: int, width: int) -> "PointImage":
        return cls(np.zeros((height, width, 3), np.float32), np.zeros((height, width), bool))

    def copy(self) -> "PointImage":
        return PointImage(self.coords.copy(), self.valid.copy())


def pixel_coords(points: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (unrounded) pinhole projection, computed in float64."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * p[..., 0] / z + intr.cx
        v = intr.fy * p[..., 1] / z + intr.cy
    return u, v


def pixel_rule(points: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Round-to-nearest cell of each point, plus an in-frame flag.

    in-frame means z > 0 and 0 <= u < width, 0 <= v < height. Cells of
    out-of-frame points are returned clipped to the grid so they can be used
    as indices after masking.
    """
    u, v = pixel_coords(points, intr)
    z = np.asarray(points, dtype=np.float64)[..., 2]
    with np.errstate(invalid="ignore"):
        uf = np.floor(u + 0.5)
        vf = np.floor(v + 0.5)
        ok = (z > 0) & (uf >= 0) & (uf < intr.width) & (vf >= 0) & (vf < intr.height)
    ui = np.where(ok, uf, 0).astype(np.int64)
    vi = np.where(ok, vf, 0).astype(np.int64)
    return ui, vi, ok


def project_points(
    cloud: np.ndarray,
    intr: CameraIntrinsics,
    depth_max: float = 35.0,
    return_index: bool = False,
):
    """Pixelize an N x 3 cloud into a PointImage.

    Points with z <= 0, z > depth_max or projecting outside the grid are
    dropped. Collisions keep the smallest z; equal z keeps the earlier point.
    With ``return_index`` the H x W array of source point indices (-1 where
    empty) is returned as well.
    """
    if not depth_max > 0:
        raise ValueError("depth_max must be positive")
    pts = np.asarray(cloud, dtype=np.float32).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("cloud contains non-finite coordinates")
    H, W = intr.height, intr.width
    img = PointImage.empty(H, W)
    src = np.full((H, W), -1, np.int64)

    ui, vi, ok = pixel_rule(pts, intr)
    ok &= pts[:, 2] <= depth_max
    keep = np.nonzero(ok)[0]
    if keep.size:
        cell = vi[keep] * W + ui[keep]
        z = pts[keep, 2]
        order = np.lexsort((keep, z, cell))
        cell_sorted = cell[order]
        first = np.ones(order.size, bool)
        first[1:] = cell_sorted[1:] != cell_sorted[:-1]
        winners = keep[order[first]]
        cells = cell_sorted[first]
        img.coords.reshape(-1, 3)[cells] = pts[winners]
        img.valid.reshape(-1)[cells] = True
        src.reshape(-1)[cells] = winners
    if return_index:
        return img, src
    return img


def lift_valid(img: PointImage) -> np.ndarray:
    """Coordinates of all valid cells in row-major order, shape (n_valid, 3)."""
    return img.coords[img.valid].copy()


def project_flow_2d(img: PointImage, flow3d: np.ndarray, intr: CameraIntrinsics):
    """Optical flow induced by a 3D flow field.

    Returns ``(flow2d, valid2d)``: flow2d is H x W x 2 (du, dv) using the
    continuous pinhole map; cells that are invalid or whose warped z <= 0 are
    zero and flagged invalid.
    """
    flow3d = np.asarray(flow3d)
    if flow3d.shape != img.coords.shape:
        raise ValueError(f"flow shape {flow3d.shape} does not match grid {img.coords.shape}")
    p = img.coords.astype(np.float64)
    q = p + flow3d.astype(np.float64)
    valid = img.valid & (p[..., 2] > 0) & (q[..., 2] > 0)
    u0, v0 = pixel_coords(p, intr)
    u1, v1 = pixel_coords(q, intr)
    out = np.zeros(img.coords.shape[:2] + (2,), np.float64)
    out[..., 0] = np.where(valid, u1 - u0, 0.0)
    out[..., 1] = np.where(valid, v1 - v0, 0.0)
    return out, valid


def check_point_image(img: PointImage, intr: CameraIntrinsics | None = None) -> list[str]:
    """Return a list of violated PointImage invariants (empty when consistent)."""
    problems = []
    inv = ~img.valid
    if np.any(img.coords[inv] != 0):
        problems.append("invalid cell with non-zero coordinates")
    if np.any(img.coords[img.valid][:, 2] <= 0):
        problems.append("valid cell with z <= 0")
    if intr is not None and img.valid.any():
        vv, uu = np.nonzero(img.valid)
        ui, vi, ok = pixel_rule(img.coords[vv, uu], intr)
        if not (ok.all() and np.array_equal(ui, uu) and np.array_equal(vi, vv)):
            problems.append("valid cell does not re-project into itself")
    return problems


# --- file formats -----------------------------------------------------------

def _read_exact(buf: bytes, offset: int, n: int) -> bytes:
    if offset + n > len(buf):
        raise FormatError("truncated file")
    return buf[offset:offset + n]


def write_cloud(path, cloud: np.ndarray) -> None:
    pts = np.ascontiguousarray(np.asarray(cloud, dtype="<f4").reshape(-1, 3))
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(np.uint32(pts.shape[0]).astype("<u4").tobytes())
        f.write(pts.tobytes())


def read_cloud(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if _read_exact(buf, 0, 16) != CLOUD_MAGIC:
        raise FormatError(f"{path}: bad cloud header")
    n = int(np.frombuffer(_read_exact(buf, 16, 4), "<u4")[0])
    data = _read_exact(buf, 20, 12 * n)
    if len(buf) != 20 + 12 * n:
        raise FormatError(f"{path}: trailing bytes after cloud payload")
    return np.frombuffer(data, "<f4").reshape(n, 3).astype(np.float32)


def write_grid(path, coords: np.ndarray, valid: np.ndarray) -> None:
    """Write an H x W x 3 float grid plus u8 validity (used for points and flows)."""
    c = np.ascontiguousarray(np.asarray(coords, dtype="<f4"))
    if c.ndim != 3 or c.shape[2] != 3:
        raise ValueError("grid payload must be H x W x 3")
    H, W = c.shape[:2]
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(np.array([H, W], "<u4").tobytes())
        f.write(c.tobytes())
        f.write(np.asarray(valid, dtype=np.uint8).reshape(H, W).tobytes())


def read_grid(path) -> tuple[np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    if _read_exact(buf, 0, 16) != GRID_MAGIC:
        raise FormatError(f"{path}: bad grid header")
    H, W = (int(x) for x in np.frombuffer(_read_exact(buf, 16, 8), "<u4"))
    n = H * W
    coords = np.frombuffer(_read_exact(buf, 24, 12 * n), "<f4").reshape(H, W, 3)
    valid_raw = np.frombuffer(_read_exact(buf, 24 + 12 * n, n), np.uint8)
    if len(buf) != 24 + 13 * n:
        raise FormatError(f"{path}: trailing bytes after grid payload")
    if np.any(valid_raw > 1):
        raise FormatError(f"{path}: validity bytes must be 0 or 1")
    return coords.astype(np.float32), valid_raw.reshape(H, W).astype(bool)


def write_point_image(path, img: PointImage) -> None:
    write_grid(path, img.coords, img.valid)


def read_point_image(path) -> PointImage:
    coords, valid = read_grid(path)
    return PointImage(coords, valid)


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    lines = [f"{k}={int(getattr(intr, k))}" if k in ("width", "height") else f"{k}={float(getattr(intr, k))!r}"
             for k in _INTR_KEYS]
    Path(path).write_text("\n".join(lines) + "\n")


def read_intrinsics(path) -> CameraIntrinsics:
    vals = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in _INTR_KEYS:
            raise FormatError(f"{path}:{lineno}: unknown key {k!r}")
        vals[k] = v
    missing = [k for k in _INTR_KEYS if k not in vals]
    if missing:
        raise FormatError(f"{path}: missing keys {missing}")
    try:
        return CameraIntrinsics(
            fx=float(vals["fx"]), fy=float(vals["fy"]),
            cx=float(vals["cx"]), cy=float(vals["cy"]),
            width=int(vals["width"]), height=int(vals["height"]),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
