"""Scene-flow and optical-flow metrics over valid cells."""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass

import numpy as np

from .grid_repr import CameraIntrinsics, PointImage, project_flow_2d


@dataclass
class EvalReport:
    epe3d: float
    acc_strict: float
    acc_relax: float
    outliers: float
    epe2d: float
    acc1px: float
    n_valid: int

    def as_text(self) -> str:
        rows = [
            ("EPE3D (m)", self.epe3d),
            ("ACC0.05", self.acc_strict),
            ("ACC0.10", self.acc_relax),
            ("Outliers", self.outliers),
            ("EPE2D (px)", self.epe2d),
            ("ACC1px", self.acc1px),
            ("n_valid", self.n_valid),
        ]
        width = max(len(k) for k, _ in rows)
        lines = []
        for k, v in rows:
            val = f"{v:d}" if isinstance(v, int) else f"{v:.6f}"
            lines.append(f"{k:<{width}}  {val:>12}")
        return "\n".join(lines)

    def as_csv(self) -> str:
        d = asdict(self)
        buf = io.StringIO()
        buf.write(",".join(d) + "\n")
        buf.write(",".join(repr(v) for v in d.values()) + "\n")
        return buf.getvalue()


def scene_flow_errors(pred: np.ndarray, gt: np.ndarray):
    """Per-cell absolute and relative endpoint errors, float64."""
    e = np.linalg.norm(pred.astype(np.float64) - gt.astype(np.float64), axis=-1)
    r = e / np.maximum(np.linalg.norm(gt.astype(np.float64), axis=-1), 1e-12)
    return e, r


def evaluate(pred_flow, gt_flow, valid, intr: CameraIntrinsics | None = None,
             pc1: PointImage | None = None) -> EvalReport:
    """EPE3D, ACC0.05, ACC0.10, Outliers and, given intrinsics and PC1, EPE2D and ACC1px.

    ACC0.05 counts e < 0.05 m or relative error < 5%; ACC0.10 likewise with
    0.10 / 10%; Outliers counts e > 0.30 m or relative error > 10%.
    """
    pred = np.asarray(pred_flow)
    gt = np.asarray(gt_flow)
    valid = np.asarray(valid, bool)
    if pred.shape != gt.shape or pred.shape[:-1] != valid.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}")
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid cells to evaluate")
    e, r = scene_flow_errors(pred[valid], gt[valid])
    epe3d = float(e.mean())
    acc_strict = float(np.mean((e < 0.05) | (r < 0.05)))
    acc_relax = float(np.mean((e < 0.10) | (r < 0.10)))
    outliers = float(np.mean((e > 0.30) | (r > 0.10)))

    epe2d = acc1px = float("nan")
    if intr is not None and pc1 is not None:
        img = PointImage(pc1.coords, pc1.valid & valid)
        f_pred, v_pred = project_flow_2d(img, pred, intr)
        f_gt, v_gt = project_flow_2d(img, gt, intr)
        v2 = v_pred & v_gt
        if v2.any():
            e2, r2 = scene_flow_errors(f_pred[v2], f_gt[v2])
            epe2d = float(e2.mean())
            acc1px = float(np.mean((e2 < 1.0) | (r2 < 0.05)))
    return EvalReport(epe3d, acc_strict, acc_relax, outliers, epe2d, acc1px, n)
