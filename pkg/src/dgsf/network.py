"""Coarse-to-fine scene flow network, multi-scale loss and a toy trainer."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (Adam, MlpWeights, SGD, Tape, Tensor, add, channel, concat, data_of, div,
                       gather_rows, init_mlp, mul, norm, reshape, sub, sum_)
from .cost_volume import WARP_MODES, correlate, correlate_unwarped, predict_residual, refine, warp
from .fusion import encode_image, fuse, fuse_concat
from .grid_repr import CameraIntrinsics, PointImage, project_flow_2d
from .grouping import KernelSpec, brute_force_group, group_neighbors
from .pyramid import PyramidLevel, coarse_window_centers, set_upconv, setconv_down, subsample_grid

log = logging.getLogger(__name__)

FUSION_MODES = ("attentive", "concat", "off")
GROUPING_MODES = ("kernel", "whole")

# CLI --mode values and the config fields they set
MODE_OVERRIDES = {
    "full": {},
    "no-warp": {"warp_mode": "no-warp"},
    "reproject": {"warp_mode": "reproject"},
    "no-fusion": {"fusion_mode": "off"},
    "concat": {"fusion_mode": "concat"},
    "no-kbg": {"grouping": "whole"},
}


@dataclass
class NetworkConfig:
    levels: int = 4
    channels: tuple = (32, 64, 128, 256)
    image_channels: tuple = (16, 32, 64, 128)
    enc_kernel: tuple = (7, 9)
    enc_K: int = 16
    max_dist: float = 2.5  # doubled per level
    up_kernel: tuple = (3, 3)
    up_K: int = 4
    cv_kernel_coarse: tuple = (7, 9)
    cv_kernel_fine: tuple = (3, 3)
    cv_K: int = 8
    cv_self_kernel: tuple = (5, 5)
    cv_self_K: int = 8
    fusion_mode: str = "attentive"
    warp_mode: str = "full"
    grouping: str = "kernel"
    loss_weights: tuple = (0.1, 0.2, 0.3, 0.8)  # finest level first
    optical_weight: float = 0.0
    zero_flow_head: bool = True
    depth_max: float = 35.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.image_channels = tuple(int(c) for c in self.image_channels)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        for name in ("enc_kernel", "up_kernel", "cv_kernel_coarse", "cv_kernel_fine", "cv_self_kernel"):
            setattr(self, name, tuple(int(k) for k in getattr(self, name)))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.channels) != self.levels or len(self.image_channels) != self.levels:
            raise ValueError("channels and image_channels need one entry per level")
        if len(self.loss_weights) != self.levels or any(w <= 0 for w in self.loss_weights):
            raise ValueError("loss_weights need one positive entry per level")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.warp_mode not in WARP_MODES:
            raise ValueError(f"warp_mode must be one of {WARP_MODES}")
        if self.grouping not in GROUPING_MODES:
            raise ValueError(f"grouping must be one of {GROUPING_MODES}")

    def with_mode(self, mode: str) -> "NetworkConfig":
        if mode not in MODE_OVERRIDES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(MODE_OVERRIDES)}")
        return dataclasses.replace(self, **MODE_OVERRIDES[mode])

    def enc_spec(self, level: int) -> KernelSpec:
        return KernelSpec(*self.enc_kernel, self.enc_K, self.max_dist * 2 ** level)


def write_config(path, cfg: NetworkConfig) -> None:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{f.name}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_config(path) -> NetworkConfig:
    from .grid_repr import FormatError

    types = {f.name: f.default for f in dataclasses.fields(NetworkConfig)}
    kwargs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in types:
            raise FormatError(f"{path}:{lineno}: unknown key {k!r}")
        default = types[k]
        try:
            if isinstance(default, tuple):
                conv = float if isinstance(default[0], float) else int
                kwargs[k] = tuple(conv(x) for x in v.split(",") if x.strip())
            elif isinstance(default, bool):
                if v.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"bad boolean {v!r}")
                kwargs[k] = v.lower() in ("true", "1")
            elif isinstance(default, int):
                kwargs[k] = int(v)
            elif isinstance(default, float):
                kwargs[k] = float(v)
            else:
                kwargs[k] = v
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    try:
        return NetworkConfig(**kwargs)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# --- weights ----------------------------------------------------------------

def architecture(cfg: NetworkConfig) -> dict:
    """Every MLP of the model: prefix -> (layer dims, activation after last layer)."""
    arch = {}
    L = cfg.levels
    for l in range(L):
        C = cfg.channels[l]
        Cp = cfg.channels[l - 1] if l else 3
        C1 = cfg.image_channels[l]
        C1p = cfg.image_channels[l - 1] if l else 3
        arch[f"enc{l}"] = ((3 + Cp, C, C), True)
        if cfg.fusion_mode != "off":
            arch[f"img{l}"] = ((9 * C1p, C1), True)
        if cfg.fusion_mode == "attentive":
            arch[f"fuse{l}.gate"] = ((C1 + C, C), False)
            arch[f"fuse{l}.proj"] = ((C1, C), False)
            arch[f"fuse{l}.out"] = ((2 * C, C), False)
        elif cfg.fusion_mode == "concat":
            arch[f"fuse{l}.cat"] = ((C + C1, C), False)
        arch[f"cv{l}.att1"] = ((4 + 2 * C, C, C), False)
        arch[f"cv{l}.val"] = ((C + 3, C, C), False)
        arch[f"cv{l}.att2"] = ((4 + 2 * C, C, C), False)
        if l < L - 1:
            arch[f"up{l}.w1"] = ((3 + cfg.channels[l + 1], C), True)
            arch[f"up{l}.w2"] = ((2 * C, C), True)
        arch[f"pred{l}.emb"] = ((3 * C, C), True)
        arch[f"pred{l}.flow"] = ((C, max(C // 2, 4), 3), False)
    return arch


def init_weights(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    weights = {}
    for prefix, (dims, _) in architecture(cfg).items():
        mlp = init_mlp(rng, dims, dtype=dtype, name=prefix)
        for t in mlp.tensors():
            weights[t.name] = t
    if cfg.zero_flow_head:
        for l in range(cfg.levels):
            last = len(architecture(cfg)[f"pred{l}.flow"][0]) - 2
            weights[f"pred{l}.flow.{last}.w"].data[...] = 0
    return weights


def weights_from_arrays(arrays: dict, cfg: NetworkConfig, dtype=np.float32) -> dict:
    """Wrap loaded arrays as trainable tensors after checking the manifest against ``cfg``."""
    expected = {}
    for prefix, (dims, _) in architecture(cfg).items():
        for i, (ci, co) in enumerate(zip(dims[:-1], dims[1:])):
            expected[f"{prefix}.{i}.w"] = (ci, co)
            expected[f"{prefix}.{i}.b"] = (co,)
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise ValueError(f"weights manifest incomplete for config, missing {missing[:5]}")
    out = {}
    for name, shape in expected.items():
        a = np.asarray(arrays[name])
        if a.shape != shape:
            raise ValueError(f"weight {name} has shape {a.shape}, expected {shape}")
        out[name] = Tensor(a.astype(dtype), True, name)
    return out


def get_mlp(weights: dict, prefix: str, cfg: NetworkConfig) -> MlpWeights:
    dims, final_act = architecture(cfg)[prefix]
    layers = [(weights[f"{prefix}.{i}.w"], weights[f"{prefix}.{i}.b"]) for i in range(len(dims) - 1)]
    return MlpWeights(layers, final_act)


# --- forward ------------------------------------------------------------------

@dataclass
class FlowPyramid:
    flows: list  # per level (H_l, W_l, 3) Tensors, finest first
    valids: list  # per level (H_l, W_l) bool
    points: list = field(default_factory=list)  # per level PC1 PointImages
    full: Tensor | None = None
    full_valid: np.ndarray | None = None
    flow2d: np.ndarray | None = None
    flow2d_valid: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def level_intrinsics(intr: CameraIntrinsics, level: int, shape) -> CameraIntrinsics:
    s = 2 ** (level + 1)
    return intr.subgrid(s, s - 1, shape[0], shape[1])


def upsample_flow(coarse_pts: PointImage, coarse_flow, fine_pts: PointImage):
    """Copy each fine point's flow from the 3D-nearest valid coarse point in a 3x3 window."""
    Hf, Wf = fine_pts.shape
    Hc, Wc = coarse_pts.shape
    wc = coarse_window_centers((Hf, Wf), (Hc, Wc))
    table = group_neighbors(fine_pts, coarse_pts, KernelSpec(3, 3, 1), window_centers=wc)
    flat = reshape(coarse_flow, (Hc * Wc, 3))
    return reshape(gather_rows(flat, table.idx[:, 0], table.valid[:, 0]), (Hf, Wf, 3))


class _Encoder:
    """Per-frame point pyramid plus (optionally fused) image features."""

    def __init__(self, pc: PointImage, img, weights, cfg: NetworkConfig, dtype):
        grouper = brute_force_group if cfg.grouping == "whole" else group_neighbors
        self.levels: list[PyramidLevel] = []
        pts, feats = pc, pc.coords.astype(dtype)
        for l in range(cfg.levels):
            spec = cfg.enc_spec(l)
            if cfg.grouping == "whole":
                H, W = pts.shape
                spec = KernelSpec.whole_grid(H, W, spec.K, spec.max_dist)
            lvl = setconv_down(pts, feats, 2, spec, get_mlp(weights, f"enc{l}", cfg), l, 2 ** (l + 1),
                               grouper=grouper)
            self.levels.append(lvl)
            pts, feats = lvl.points, lvl.features
        self.fused = []
        if cfg.fusion_mode == "off":
            self.fused = [lvl.features for lvl in self.levels]
            return
        convs = [get_mlp(weights, f"img{l}", cfg) for l in range(cfg.levels)]
        img_feats = encode_image(np.asarray(img, dtype) if not isinstance(img, Tensor) else img,
                                 convs, pc.shape)
        for l, lvl in enumerate(self.levels):
            if img_feats[l].shape[:2] != lvl.points.shape:
                raise ValueError(f"level {l}: image features {img_feats[l].shape[:2]} "
                                 f"vs points {lvl.points.shape}")
            if cfg.fusion_mode == "attentive":
                s = fuse(img_feats[l], lvl.features, get_mlp(weights, f"fuse{l}.gate", cfg),
                         get_mlp(weights, f"fuse{l}.proj", cfg), get_mlp(weights, f"fuse{l}.out", cfg),
                         lvl.points.valid)
            else:
                s = fuse_concat(img_feats[l], lvl.features, get_mlp(weights, f"fuse{l}.cat", cfg),
                                lvl.points.valid)
            self.fused.append(s)


def forward(pc1: PointImage, pc2: PointImage, img1, img2, weights: dict, cfg: NetworkConfig,
            intr: CameraIntrinsics) -> FlowPyramid:
    """Predict per-level flows coarse to fine and the full-resolution flow."""
    if pc1.shape != pc2.shape or pc1.shape != intr.shape:
        raise ValueError(f"grids not aligned: pc1 {pc1.shape}, pc2 {pc2.shape}, intrinsics {intr.shape}")
    dtype = next(iter(weights.values())).dtype
    L = cfg.levels
    try:
        enc1 = _Encoder(pc1, img1, weights, cfg, dtype)
        enc2 = _Encoder(pc2, img2, weights, cfg, dtype)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"encoder: {exc}") from exc

    flows = [None] * L
    embs = [None] * L
    diag = {"flagged": [None] * L, "n_merged": [0] * L}
    grouper = brute_force_group if cfg.grouping == "whole" else group_neighbors
    for l in reversed(range(L)):
        stage = f"level {l}"
        try:
            p1 = enc1.levels[l].points
            p2 = enc2.levels[l].points
            H, W = p1.shape
            C = cfg.channels[l]
            lintr = level_intrinsics(intr, l, (H, W))
            md = cfg.max_dist * 2 ** l
            spec2 = KernelSpec(*cfg.cv_self_kernel, cfg.cv_self_K, md)
            if l == L - 1:
                spec1 = KernelSpec(*cfg.cv_kernel_coarse, cfg.cv_K, md)
                coarse = Tensor(np.zeros((H, W, 3), dtype))
                up_emb = Tensor(np.zeros((H, W, C), dtype))
            else:
                spec1 = KernelSpec(*cfg.cv_kernel_fine, cfg.cv_K, md)
                up_spec = KernelSpec(*cfg.up_kernel, cfg.up_K, cfg.max_dist * 2 ** (l + 1))
                coarse_lvl = PyramidLevel(l + 1, 2 ** (l + 2), enc1.levels[l + 1].points, embs[l + 1])
                up_emb = set_upconv(coarse_lvl, p1, enc1.fused[l], up_spec,
                                    get_mlp(weights, f"up{l}.w1", cfg), get_mlp(weights, f"up{l}.w2", cfg))
                coarse = upsample_flow(enc1.levels[l + 1].points, flows[l + 1], p1)
            att1 = get_mlp(weights, f"cv{l}.att1", cfg)
            att2 = get_mlp(weights, f"cv{l}.att2", cfg)
            val = get_mlp(weights, f"cv{l}.val", cfg)
            if cfg.warp_mode == "full":
                wxyz, warped, widx = warp(p1, coarse, lintr)
                emb = correlate(wxyz, warped, widx, p1, p2, enc1.fused[l], enc2.fused[l], spec1, spec2,
                                att1, att2, val, grouper)
            else:
                emb = correlate_unwarped(cfg.warp_mode, coarse, p1, p2, enc1.fused[l], enc2.fused[l],
                                         lintr, spec1, spec2, att1, att2, val, grouper)
            residual, embs[l] = predict_residual(enc1.fused[l], emb, up_emb,
                                                 get_mlp(weights, f"pred{l}.emb", cfg),
                                                 get_mlp(weights, f"pred{l}.flow", cfg))
            mask = p1.valid[..., None].astype(dtype)
            flows[l] = mul(refine(coarse, residual), mask)
            diag["flagged"][l] = emb.flagged
            diag["n_merged"][l] = emb.n_merged
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{stage}: {exc}") from exc

    full = mul(upsample_flow(enc1.levels[0].points, flows[0], pc1), pc1.valid[..., None].astype(dtype))
    flow2d, valid2d = project_flow_2d(pc1, data_of(full), intr)
    return FlowPyramid(flows, [lvl.points.valid.copy() for lvl in enc1.levels],
                       [lvl.points for lvl in enc1.levels], full, pc1.valid.copy(), flow2d, valid2d, diag)


# --- loss ---------------------------------------------------------------------

def gt_pyramid(gt_flow: np.ndarray, valid: np.ndarray, levels: int) -> FlowPyramid:
    """Ground truth per level by repeated stride-2 center subsampling of the full grid."""
    flows, valids = [], []
    f, v = np.asarray(gt_flow), np.asarray(valid, bool)
    for _ in range(levels):
        f, v = subsample_grid(f, 2), subsample_grid(v, 2)
        flows.append(Tensor(f))
        valids.append(v)
    return FlowPyramid(flows, valids, full=Tensor(np.asarray(gt_flow)), full_valid=np.asarray(valid, bool))


def multi_scale_loss(pred: FlowPyramid, gt: FlowPyramid, cfg: NetworkConfig, return_levels: bool = False):
    """sum_l w_l / N_l * sum_i ||gt_i - pred_i||_2 over cells valid in both.

    ``loss_weights[0]`` applies to the finest level. A level with N_l = 0
    contributes 0 and is reported in the returned flags.
    """
    total = None
    per_level, empty = [], []
    for l, w in enumerate(cfg.loss_weights):
        p = pred.flows[l]
        dt = data_of(p).dtype
        v = pred.valids[l] & gt.valids[l]
        n_l = int(v.sum())
        if n_l == 0:
            empty.append(l)
            per_level.append(0.0)
            continue
        err = norm(sub(p, data_of(gt.flows[l]).astype(dt)), axis=-1)
        term = mul(sum_(mul(err, v.astype(dt))), dt.type(w / n_l))
        per_level.append(float(data_of(term)))
        total = term if total is None else add(total, term)
    if total is None:
        total = Tensor(np.zeros((), np.float32))
    if return_levels:
        return total, per_level, empty
    return total


def optical_flow_loss(pred: FlowPyramid, gt_flow: np.ndarray, pc1: PointImage, intr: CameraIntrinsics):
    """Mean 2D endpoint error (pixels) of the projected full-resolution flow, differentiable."""
    dt = data_of(pred.full).dtype
    p = pc1.coords.astype(dt)
    q = add(p, pred.full)
    q_gt = p + np.asarray(gt_flow, dt)
    v = pc1.valid & (data_of(q)[..., 2] > 0) & (q_gt[..., 2] > 0)
    if not v.any():
        return Tensor(np.zeros((), dt))
    vm = v[..., None].astype(dt)
    z = add(mul(channel(q, 2), vm), 1 - vm)  # 1 outside valid cells, no division by zero
    uv = concat([mul(div(channel(q, 0), z), dt.type(intr.fx)),
                 mul(div(channel(q, 1), z), dt.type(intr.fy))], axis=-1)
    zg = np.where(v, q_gt[..., 2], 1)[..., None]
    uv_gt = (q_gt[..., :2] / zg * np.array([intr.fx, intr.fy])).astype(dt)
    err = norm(sub(uv, uv_gt), axis=-1)
    return mul(sum_(mul(err, v.astype(dt))), dt.type(1.0 / v.sum()))


# --- toy training ---------------------------------------------------------------

@dataclass
class TrainResult:
    trace: list  # multi-scale loss before each step, plus the final value
    optical_trace: list
    weights: dict
    epe_initial: float
    epe_final: float


def _batch_loss(scenes, weights, cfg):
    total = None
    optical = 0.0
    for sc in scenes:
        pred = forward(sc.pc1, sc.pc2, sc.img1, sc.img2, weights, cfg, sc.intr)
        gt = gt_pyramid(sc.gt_flow, sc.pc1.valid, cfg.levels)
        loss = multi_scale_loss(pred, gt, cfg)
        of = optical_flow_loss(pred, sc.gt_flow, sc.pc1, sc.intr)
        optical += float(data_of(of))
        if cfg.optical_weight > 0:
            loss = add(loss, mul(of, data_of(of).dtype.type(cfg.optical_weight)))
        total = loss if total is None else add(total, loss)
    scale = data_of(total).dtype.type(1.0 / len(scenes))
    return mul(total, scale), optical / len(scenes)


def mean_epe(scenes, weights, cfg) -> float:
    from .metrics import evaluate

    vals = []
    for sc in scenes:
        pred = forward(sc.pc1, sc.pc2, sc.img1, sc.img2, weights, cfg, sc.intr)
        vals.append(evaluate(data_of(pred.full), sc.gt_flow, sc.pc1.valid, sc.intr, sc.pc1).epe3d)
    return float(np.mean(vals))


def toy_train(scenes, cfg: NetworkConfig, steps: int, step_size: float = 2e-3, seed: int = 0,
              optimizer: str = "adam", weights: dict | None = None) -> TrainResult:
    """Full-batch gradient steps on the multi-scale loss over ``scenes``."""
    if not scenes:
        raise ValueError("toy_train needs at least one scene")
    weights = init_weights(cfg, seed) if weights is None else weights
    params = list(weights.values())
    opt = Adam(params, lr=step_size) if optimizer == "adam" else SGD(params, lr=step_size)
    trace, optical_trace = [], []
    epe0 = mean_epe(scenes, weights, cfg)
    for step in range(steps + 1):
        opt.zero_grad()
        with Tape() as tape:
            loss, optical = _batch_loss(scenes, weights, cfg)
        value = float(data_of(loss))
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        trace.append(value)
        optical_trace.append(optical)
        if step == steps:
            break
        tape.backward(loss)
        opt.step()
        if step % 25 == 0:
            log.info("step %d loss %.5f", step, value)
    return TrainResult(trace, optical_trace, weights, epe0, mean_epe(scenes, weights, cfg))


def write_trace(path, trace) -> None:
    rows = ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(rows) + "\n")
