"""Gradient-check cases: every differentiable op and composite operator, in float64.

Each case builder takes an RNG and returns ``(f, inputs)`` for ``grad_check``.
Inputs are nudged away from the obvious kinks (norm at 0). Composite cases can
still land within eps = 1e-5 of a neighbor-selection switch or an activation
hinge; ``grad_check_report`` flags those draws so callers redraw the seed.
"""
import numpy as np

from dgsf import autodiff as ad
from dgsf.cost_volume import correlate, predict_residual, warp
from dgsf.fusion import conv3x3_stride2, encode_image, fuse, fuse_concat
from dgsf.grid_repr import CameraIntrinsics, PointImage, project_points
from dgsf.grouping import KernelSpec, group_neighbors
from dgsf.network import (NetworkConfig, forward, gt_pyramid, init_weights, multi_scale_loss,
                          optical_flow_loss, upsample_flow)
from dgsf.pyramid import PyramidLevel, set_upconv, setconv_down


def away_from_zero(rng, shape, lo=0.05):
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + lo, x - lo)


# Cotangent scale: finite-difference round-off is about |f| * 1e-16 / eps, and the
# relative-error floor is 1e-8, so outputs are kept near 1e-2 in magnitude to make
# structurally zero gradients (e.g. a softmax-invariant bias) read as zero.
COTANGENT_SCALE = 1e-3


def contract(out, g):
    """Scalar <out, g> so every output coordinate is exercised."""
    return ad.sum_(ad.mul(out, ad.Tensor(np.asarray(g) * COTANGENT_SCALE)))


def mlp_from(arrays, final_act=False):
    layers = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
    return ad.MlpWeights(layers, final_act)


def mlp_arrays(rng, dims):
    out = []
    for ci, co in zip(dims[:-1], dims[1:]):
        out += [rng.normal(0, 0.7, (ci, co)), rng.normal(0, 0.3, co)]
    return out


def tiny_scene(rng, H=6, W=8, f=6.0):
    """Pixel-center rays onto a wavy surface; frame 2 is the rigidly shifted frame 1."""
    intr = CameraIntrinsics(f, f, W / 2, H / 2, W, H)
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    z = 3 + 0.4 * np.sin(uu * rng.uniform(0.5, 1.5)) + 0.3 * np.cos(vv * rng.uniform(0.5, 1.5))
    pts = np.stack([(uu - intr.cx) / f * z, (vv - intr.cy) / f * z, z], -1).reshape(-1, 3)
    pts = pts[rng.random(H * W) < 0.9]
    pc1, idx = project_points(pts, intr, return_index=True)
    shift = rng.normal(0, 0.15, 3)
    pc2 = project_points(pts + shift, intr)
    gt = np.where(pc1.valid[..., None], shift, 0).astype(np.float32)
    img1 = rng.random((H, W, 3)).astype(np.float32)
    img2 = rng.random((H, W, 3)).astype(np.float32)
    return pc1, pc2, img1, img2, gt, intr


def _elementwise(rng):
    shape = (3, 4)
    g = rng.normal(size=shape)
    b = np.where(rng.random(shape) < 0.5, -1, 1) * rng.uniform(0.5, 2, shape)

    def f(x, y):
        t = ad.add(ad.mul(x, y), ad.sub(x, ad.div(x, y)))
        t = ad.add(ad.neg(t), ad.mul(ad.leaky_relu(x), ad.sigmoid(y)))
        return contract(t, g)

    return f, [away_from_zero(rng, shape), b]


def _norm(rng):
    g = rng.normal(size=(5, 1))
    return (lambda x: contract(ad.norm(x, axis=-1, keepdims=True), g)), [away_from_zero(rng, (5, 3), 0.2)]


def _shape_ops(rng):
    g1 = rng.normal(size=(2, 2, 4))
    g2 = rng.normal(size=(6, 1))

    def f(x, y):
        s = ad.strided(x, 2, 1)  # (2, 2, 3)
        c = ad.concat([s, ad.channel(ad.broadcast_to(ad.reshape(y, (1, 1, 1)), (2, 2, 1)), 0)], axis=-1)
        col = ad.sum_(ad.reshape(x, (20, 3)), axis=0, keepdims=True)
        return ad.add(contract(c, g1), contract(ad.reshape(ad.broadcast_to(ad.channel(col, 1), (6, 1)), (6, 1)), g2))

    return f, [rng.normal(size=(4, 5, 3)), rng.normal(size=(1,))]


def _matmul(rng):
    g = rng.normal(size=(2, 3, 5))
    return (lambda x, w: contract(ad.matmul(x, w), g)), [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]


def _gather(rng):
    idx = rng.integers(0, 6, (4, 5))
    valid = rng.random((4, 5)) < 0.7
    g = rng.normal(size=(4, 5, 2))
    return (lambda x: contract(ad.gather_rows(x, idx, valid), g)), [rng.normal(size=(6, 2))]


def _maxpool(rng):
    n, K, C = 4, 3, 5
    valid = rng.random((n, K)) < 0.8
    valid[0] = False  # an empty row: zero output and zero gradient
    valid[1] = True
    # distinct values per row and channel, spaced far beyond eps
    x = np.stack([rng.permutation(K) * 0.1 for _ in range(n * C)]).reshape(n, C, K).transpose(0, 2, 1)
    x = x + rng.normal(0, 0.01, x.shape)
    g = rng.normal(size=(n, C))
    return (lambda a: contract(ad.maxpool_neighbors(a, valid), g)), [x]


def _softmax(rng):
    valid = rng.random((5, 4)) < 0.75
    valid[:, 0] = True
    g2 = rng.normal(size=(5, 4))
    g3 = rng.normal(size=(5, 4, 3))

    def f(s2, s3):
        return ad.add(contract(ad.softmax_neighbors(s2, valid), g2), contract(ad.softmax_neighbors(s3, valid), g3))

    return f, [rng.normal(size=(5, 4)), rng.normal(size=(5, 4, 3))]


def _mlp(rng):
    g = rng.normal(size=(7, 2))
    arrays = mlp_arrays(rng, (3, 4, 2))

    def f(x, *ws):
        return contract(ad.mlp_forward(mlp_from(ws, final_act=True), x), g)

    return f, [rng.normal(size=(7, 3))] + arrays


def _setconv(rng):
    pc1, _, _, _, _, _ = tiny_scene(rng)
    spec = KernelSpec(3, 5, 4, 2.0)
    feats = rng.normal(size=(6, 8, 2))
    arrays = mlp_arrays(rng, (5, 4))
    g = rng.normal(size=(3, 4, 4))

    def f(fe, xyz, *ws):
        lvl = setconv_down(pc1, fe, 2, spec, mlp_from(ws, True), src_xyz=xyz)
        return contract(lvl.features, g)

    return f, [feats, pc1.coords.astype(np.float64)] + arrays


def _upconv(rng):
    pc1, _, _, _, _, _ = tiny_scene(rng)
    coarse_pts = PointImage(pc1.coords[1::2, 1::2].copy(), pc1.valid[1::2, 1::2].copy())
    spec = KernelSpec(3, 3, 3, 3.0)
    w1 = mlp_arrays(rng, (3 + 2, 3))
    w2 = mlp_arrays(rng, (3 + 2, 2))
    g = rng.normal(size=(6, 8, 2))

    def f(cf, skip, a, b, c, d):
        lvl = PyramidLevel(1, 4, coarse_pts, cf)
        return contract(set_upconv(lvl, pc1, skip, spec, mlp_from([a, b], True), mlp_from([c, d], True)), g)

    return f, [rng.normal(size=(3, 4, 2)), rng.normal(size=(6, 8, 2))] + w1 + w2


def _image_encoder(rng):
    w = [mlp_arrays(rng, (27, 3)), mlp_arrays(rng, (27, 2))]
    g = rng.normal(size=(2, 2, 2))

    def f(img, a, b, c, d):
        feats = encode_image(img, [mlp_from([a, b], True), mlp_from([c, d], True)])
        return contract(feats[1], g)

    return f, [rng.random((7, 8, 3))] + w[0] + w[1]


def _fusion(rng):
    valid = rng.random((3, 4)) < 0.8
    gate, proj, out, cat = (mlp_arrays(rng, d) for d in ((5, 3), (2, 3), (6, 3), (5, 3)))
    g = rng.normal(size=(3, 4, 3))

    def f(fi, fp, *ws):
        a = fuse(fi, fp, mlp_from(ws[0:2]), mlp_from(ws[2:4]), mlp_from(ws[4:6]), valid)
        b = fuse_concat(fi, fp, mlp_from(ws[6:8]), valid)
        return ad.add(contract(a, g), contract(b, g))

    return f, [rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 3))] + gate + proj + out + cat


def _correlate_predict(rng):
    pc1, pc2, _, _, _, intr = tiny_scene(rng)
    C = 3
    spec, spec2 = KernelSpec(3, 3, 4, 2.0), KernelSpec(3, 3, 4, 2.0)
    att1, val, att2 = mlp_arrays(rng, (4 + 2 * C, 3, C)), mlp_arrays(rng, (C + 3, C)), mlp_arrays(rng, (4 + 2 * C, C))
    pred, flow = mlp_arrays(rng, (3 * C, C)), mlp_arrays(rng, (C, 3))
    g = rng.normal(size=(6, 8, 3))
    gr = rng.normal(size=(6, 8, C))

    def f(coarse, f1, f2, up, *ws):
        wxyz, warped, widx = warp(pc1, coarse, intr)
        emb = correlate(wxyz, warped, widx, pc1, pc2, f1, f2, spec, spec2, mlp_from(ws[0:4]),
                        mlp_from(ws[6:8]), mlp_from(ws[4:6]))
        res, refined = predict_residual(f1, emb, up, mlp_from(ws[8:10], True), mlp_from(ws[10:12]))
        return ad.add(contract(ad.add(coarse, res), g), contract(refined, gr))

    coarse = np.where(pc1.valid[..., None], rng.normal(0, 0.05, (6, 8, 3)), 0)
    return f, [coarse, rng.normal(size=(6, 8, C)), rng.normal(size=(6, 8, C)),
               rng.normal(size=(6, 8, C))] + att1 + val + att2 + pred + flow


def _upsample_flow(rng):
    pc1, _, _, _, _, _ = tiny_scene(rng)
    coarse = PointImage(pc1.coords[1::2, 1::2].copy(), pc1.valid[1::2, 1::2].copy())
    g = rng.normal(size=(6, 8, 3))
    return (lambda fl: contract(upsample_flow(coarse, fl, pc1), g)), [rng.normal(size=(3, 4, 3))]


def _losses(rng):
    pc1, _, _, _, gt, intr = tiny_scene(rng)
    cfg = NetworkConfig(levels=2, channels=(4, 4), image_channels=(4, 4), loss_weights=(0.1, 0.2))
    gtp = gt_pyramid(gt + rng.normal(0, 0.1, gt.shape).astype(np.float32), pc1.valid, 2)

    def f(f0, f1, full):
        from dgsf.network import FlowPyramid
        pred = FlowPyramid([f0, f1], gtp.valids, full=full)
        return ad.add(multi_scale_loss(pred, gtp, cfg), optical_flow_loss(pred, gt, pc1, intr))

    return f, [rng.normal(0, 0.1, (3, 4, 3)), rng.normal(0, 0.1, (2, 2, 3)),
               np.where(pc1.valid[..., None], rng.normal(0, 0.1, (6, 8, 3)), 0)]


E2E_PARAMS = ("enc0.0.w", "img0.0.w", "fuse0.gate.0.w", "cv1.att1.1.w", "cv0.val.0.b", "up0.w1.0.w",
              "pred1.flow.1.w", "pred0.emb.0.b", "pred0.flow.1.w", "cv0.att2.1.b")


def e2e_config():
    return NetworkConfig(levels=2, channels=(4, 4), image_channels=(3, 3), loss_weights=(0.1, 0.2),
                         enc_kernel=(3, 3), enc_K=4, cv_kernel_coarse=(3, 5), cv_K=4, cv_self_kernel=(3, 3),
                         cv_self_K=3, up_K=3, zero_flow_head=False, optical_weight=0.5)


def _end_to_end(rng):
    """Two-level network on a 6 x 8 scene: loss w.r.t. weights spread over every stage."""
    pc1, pc2, img1, img2, gt, intr = tiny_scene(rng)
    cfg = e2e_config()
    base = init_weights(cfg, int(rng.integers(2**31)), dtype=np.float64)
    for t in base.values():
        t.data = t.data + rng.normal(0, 0.05, t.data.shape)
    gtp = gt_pyramid(gt, pc1.valid, cfg.levels)

    def f(*ws):
        weights = dict(base)
        for name, w in zip(E2E_PARAMS, ws):
            weights[name] = w
        pred = forward(pc1, pc2, img1, img2, weights, cfg, intr)
        loss = multi_scale_loss(pred, gtp, cfg)
        return ad.add(loss, ad.mul(optical_flow_loss(pred, gt, pc1, intr), 0.5))

    return f, [base[n].data.copy() for n in E2E_PARAMS]


OP_CASES = {
    "elementwise": _elementwise,
    "norm": _norm,
    "shape_ops": _shape_ops,
    "matmul": _matmul,
    "gather": _gather,
    "maxpool": _maxpool,
    "softmax": _softmax,
    "mlp": _mlp,
    "setconv_down": _setconv,
    "set_upconv": _upconv,
    "image_encoder": _image_encoder,
    "fusion": _fusion,
    "correlate_predict": _correlate_predict,
    "upsample_flow": _upsample_flow,
    "losses": _losses,
    "end_to_end": _end_to_end,
}
