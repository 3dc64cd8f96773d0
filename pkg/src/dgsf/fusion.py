"""Pixel-point feature fusion and the strided image encoder.

Point and image grids share H x W, so fusion is per cell. The attentive path
gates projected image features channel-wise with a sigmoid computed from
both modalities; the concat path is the non-attentive baseline.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import (MlpWeights, Tensor, concat, data_of, gather_rows, mlp_forward, mul,
                       reshape, sigmoid)
from .grid_repr import FormatError
from .pyramid import strided_shape

IMAGE_MAGIC = b"DGSF_IMG_V1\0\0\0\0\0"


def conv_patch_index(height: int, width: int, stride: int = 2):
    """im2col indices for a 3x3 conv whose output cell i is centered on input i*stride + stride//2.

    Returns (idx, valid) of shape (Ho*Wo, 9); out-of-grid taps are invalid
    (zero padding).
    """
    Ho, Wo = strided_shape(height, width, stride)
    off = stride // 2
    ii, jj = np.meshgrid(np.arange(Ho) * stride + off, np.arange(Wo) * stride + off, indexing="ij")
    di, dj = np.meshgrid(np.arange(-1, 2), np.arange(-1, 2), indexing="ij")
    r = ii.reshape(-1, 1) + di.reshape(1, -1)
    c = jj.reshape(-1, 1) + dj.reshape(1, -1)
    valid = (r >= 0) & (r < height) & (c >= 0) & (c < width)
    idx = np.where(valid, r * width + c, 0)
    return idx, valid, (Ho, Wo)


def conv3x3_stride2(x, w: MlpWeights):
    """3x3 stride-2 convolution of an (H, W, C) grid; ``w`` is a one-layer MLP over 9*C patches."""
    H, W, C = data_of(x).shape
    if w.c_in != 9 * C:
        raise ValueError(f"conv expects {w.c_in // 9} input channels, got {C}")
    idx, valid, (Ho, Wo) = conv_patch_index(H, W)
    patches = gather_rows(reshape(x, (H * W, C)), idx, valid)
    out = mlp_forward(w, reshape(patches, (Ho * Wo, 9 * C)))
    return reshape(out, (Ho, Wo, w.c_out))


def encode_image(rgb, conv_weights: list[MlpWeights], point_shape: tuple | None = None) -> list:
    """One feature grid per pyramid level from a stack of stride-2 convolutions."""
    x = rgb
    shape = data_of(rgb).shape
    if shape[-1] != 3 or len(shape) != 3:
        raise ValueError(f"rgb must be H x W x 3, got {shape}")
    if point_shape is not None and tuple(shape[:2]) != tuple(point_shape):
        raise ValueError(f"image {shape[:2]} does not match point grid {point_shape}")
    outs = []
    for w in conv_weights:
        x = conv3x3_stride2(x, w)
        outs.append(x)
    return outs


def _flat(x):
    d = data_of(x)
    return reshape(x, (d.shape[0] * d.shape[1], d.shape[2])), d.shape[:2]


def fuse(img_f, pt_f, w_gate: MlpWeights, w_proj: MlpWeights, w_out: MlpWeights, valid):
    """Attentive fusion: g = sigmoid(MLP_gate(img concat pt)); out = MLP_out(pt concat g * MLP_proj(img))."""
    fi, shape = _flat(img_f)
    fp, shape_p = _flat(pt_f)
    if shape != shape_p:
        raise ValueError(f"image features {shape} and point features {shape_p} are not aligned")
    gate = sigmoid(mlp_forward(w_gate, concat([fi, fp], axis=-1)))
    proj = mlp_forward(w_proj, fi)
    out = mlp_forward(w_out, concat([fp, mul(gate, proj)], axis=-1))
    return _masked_grid(out, shape, valid)


def fuse_concat(img_f, pt_f, w_out: MlpWeights, valid):
    """Non-attentive fusion: MLP_out(pt concat img)."""
    fi, shape = _flat(img_f)
    fp, shape_p = _flat(pt_f)
    if shape != shape_p:
        raise ValueError(f"image features {shape} and point features {shape_p} are not aligned")
    out = mlp_forward(w_out, concat([fp, fi], axis=-1))
    return _masked_grid(out, shape, valid)


def _masked_grid(flat, shape, valid):
    H, W = shape
    d = data_of(flat)
    mask = np.asarray(valid, bool).reshape(H * W, 1).astype(d.dtype)
    return reshape(mul(flat, mask), (H, W, d.shape[-1]))


def write_image(path, rgb: np.ndarray) -> None:
    a = np.ascontiguousarray(np.asarray(rgb, dtype="<f4"))
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("image must be H x W x 3")
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(np.array(a.shape[:2], "<u4").tobytes())
        f.write(a.tobytes())


def read_image(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:16] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad image header")
    if len(buf) < 24:
        raise FormatError(f"{path}: truncated image header")
    H, W = (int(x) for x in np.frombuffer(buf, "<u4", 2, 16))
    if len(buf) != 24 + 12 * H * W:
        raise FormatError(f"{path}: payload size does not match {H}x{W}")
    return np.frombuffer(buf, "<f4", H * W * 3, 24).reshape(H, W, 3).astype(np.float32)
