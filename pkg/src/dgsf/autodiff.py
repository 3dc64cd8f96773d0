"""Minimal reverse-mode differentiation over numpy arrays.

Every op is recorded on the active :class:`Tape` (if any input requires a
gradient) together with its forward and backward functions, so a tape can be
replayed and differentiated. Dtypes are preserved: the network runs in
float32, gradient checks in float64.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.1
WEIGHTS_MAGIC = b"DGSF_WTS_V1\0\0\0\0\0"

_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("dgsf_tape", default=None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def data_of(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class _Record:
    name: str
    inputs: list
    out: Tensor
    fwd: Callable
    bwd: Callable


class Tape:
    """Records ops executed inside ``with tape:`` for one reverse pass.

    A tape has a single owner; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self):
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _TAPE.reset(self._token)
        self._token = None

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(out)/d(x) into ``x.grad`` for every tensor requiring grad."""
        if seed is None:
            if out.data.size != 1:
                raise ValueError("backward from a non-scalar needs an explicit seed")
            seed = np.ones_like(out.data)
        grads = {id(out): np.asarray(seed, dtype=out.dtype)}
        leaves = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.bwd(g, rec.out.data, *[t.data for t in rec.inputs])
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    leaves[key] = t
        for key, t in leaves.items():
            if key in grads:
                t.grad = grads[key] if t.grad is None else t.grad + grads[key]

    def replay(self) -> bool:
        """Re-run every recorded forward from its recorded inputs; True if bit-identical."""
        for rec in self.records:
            again = rec.fwd(*[t.data for t in rec.inputs])
            if again.dtype != rec.out.dtype or not np.array_equal(again, rec.out.data, equal_nan=True):
                return False
        return True


def _apply(name: str, fwd: Callable, bwd: Callable, *inputs) -> Tensor:
    ts = [as_tensor(x) for x in inputs]
    out = Tensor(fwd(*[t.data for t in ts]))
    tape = _TAPE.get()
    if tape is not None and any(t.requires_grad for t in ts):
        out.requires_grad = True
        tape.records.append(_Record(name, ts, out, fwd, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    return _apply("add", np.add,
                  lambda g, o, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)), a, b)


def sub(a, b) -> Tensor:
    return _apply("sub", np.subtract,
                  lambda g, o, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)), a, b)


def mul(a, b) -> Tensor:
    return _apply("mul", np.multiply,
                  lambda g, o, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)), a, b)


def div(a, b) -> Tensor:
    return _apply("div", np.divide,
                  lambda g, o, x, y: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * o / y, y.shape)), a, b)


def neg(a) -> Tensor:
    return _apply("neg", np.negative, lambda g, o, x: (-g,), a)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    def fwd(a):
        return np.where(a > 0, a, a * a.dtype.type(slope))

    def bwd(g, o, a):
        return (np.where(a > 0, g, g * a.dtype.type(slope)),)

    return _apply("leaky_relu", fwd, bwd, x)


def sigmoid(x) -> Tensor:
    def fwd(a):
        with np.errstate(over="ignore"):
            e = np.exp(-np.abs(a))
            return np.where(a >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)

    return _apply("sigmoid", fwd, lambda g, o, a: (g * o * (1 - o),), x)


def norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
    def fwd(a):
        return np.sqrt(np.sum(a * a, axis=axis, keepdims=keepdims))

    def bwd(g, o, a):
        if not keepdims:
            g = np.expand_dims(g, axis)
            o = np.expand_dims(o, axis)
        safe = np.where(o > 0, o, 1)
        return (np.where(o > 0, g * a / safe, 0).astype(a.dtype),)

    return _apply("norm", fwd, bwd, x)


# --- shape ------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    return _apply("reshape", lambda a: a.reshape(shape), lambda g, o, a: (g.reshape(a.shape),), x)


def broadcast_to(x, shape) -> Tensor:
    return _apply("broadcast_to", lambda a: np.broadcast_to(a, shape).copy(),
                  lambda g, o, a: (_unbroadcast(g, a.shape),), x)


def strided(x, stride: int, offset: int) -> Tensor:
    """x[offset::stride, offset::stride] over the two leading axes."""
    def bwd(g, o, a):
        out = np.zeros_like(a)
        out[offset::stride, offset::stride] = g
        return (out,)

    return _apply("strided", lambda a: a[offset::stride, offset::stride].copy(), bwd, x)


def channel(x, c: int) -> Tensor:
    """x[..., c:c+1]."""
    def bwd(g, o, a):
        out = np.zeros_like(a)
        out[..., c:c + 1] = g
        return (out,)

    return _apply("channel", lambda a: a[..., c:c + 1].copy(), bwd, x)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    def fwd(*arrs):
        return np.concatenate(arrs, axis=axis)

    def bwd(g, o, *arrs):
        splits = np.cumsum([a.shape[axis] for a in arrs])[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", fwd, bwd, *xs)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g, o, a):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply("sum", lambda a: np.asarray(np.sum(a, axis=axis, keepdims=keepdims)), bwd, x)


def matmul(x, w) -> Tensor:
    """``x`` (..., C_in) times ``w`` (C_in, C_out)."""
    def fwd(a, b):
        if a.shape[-1] != b.shape[0]:
            raise ValueError(f"matmul dim mismatch: {a.shape} @ {b.shape}")
        return a @ b

    def bwd(g, o, a, b):
        ga = g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _apply("matmul", fwd, bwd, x, w)


# --- gather / neighbor reductions ---------------------------------------------

def gather_rows(x, idx: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """out[...] = x[idx[...]] where valid, zeros elsewhere.

    The backward pass scatters additively, so repeated indices accumulate.
    Accumulation uses ``np.add.at`` which is sequential and therefore
    order-deterministic.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if valid is None:
        valid = np.ones(idx.shape, bool)
    valid = np.asarray(valid, bool)
    if valid.shape != idx.shape:
        raise ValueError("gather mask shape differs from index shape")
    safe = np.where(valid, idx, 0)

    def fwd(a):
        if valid.any() and (safe.max() >= a.shape[0] or safe.min() < 0):
            raise IndexError("gather index out of range")
        out = a[safe]
        mask = valid.reshape(valid.shape + (1,) * (a.ndim - 1))
        return np.where(mask, out, a.dtype.type(0))

    def bwd(g, o, a):
        ga = np.zeros_like(a)
        np.add.at(ga, safe[valid], g[valid])
        return (ga,)

    return _apply("gather", fwd, bwd, x)


def maxpool_neighbors(x, valid: np.ndarray, return_argmax: bool = False):
    """Per-channel max over valid neighbor slots of an (n, K, C) tensor.

    Rows without any valid slot give zeros. The backward pass routes each
    channel's gradient to the first slot attaining the max.
    """
    valid = np.asarray(valid, bool)
    x_data = data_of(x)
    n, K, C = x_data.shape
    if valid.shape != (n, K):
        raise ValueError("maxpool mask must be (n, K)")
    empty = ~valid.any(axis=1)
    masked = np.where(valid[:, :, None], x_data, -np.inf)
    arg = np.argmax(masked, axis=1)  # first maximum
    arg[empty] = 0
    rows = np.arange(n)[:, None]
    chans = np.arange(C)[None, :]

    def fwd(a):
        out = a[rows, arg, chans]
        out[empty] = 0
        return out

    def bwd(g, o, a):
        ga = np.zeros_like(a)
        gg = np.where(empty[:, None], 0, g).astype(a.dtype)
        ga[rows, arg, chans] = gg
        return (ga,)

    out = _apply("maxpool", fwd, bwd, x)
    if return_argmax:
        return out, arg, empty
    return out


def softmax_neighbors(scores, valid: np.ndarray) -> Tensor:
    """Masked, max-subtracted softmax over axis 1 of (n, K) or (n, K, C) scores.

    Invalid slots are exactly 0; rows with no valid slot are all zero.
    """
    valid = np.asarray(valid, bool)
    s = data_of(scores)
    mask = valid if s.ndim == 2 else valid.reshape(valid.shape + (1,) * (s.ndim - 2))

    def fwd(a):
        z = np.where(mask, a, -np.inf)
        m = np.max(z, axis=1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0)
        e = np.where(mask, np.exp(np.where(mask, a - m, 0)), 0).astype(a.dtype)
        tot = e.sum(axis=1, keepdims=True)
        return np.where(tot > 0, e / np.where(tot > 0, tot, 1), 0).astype(a.dtype)

    def bwd(g, o, a):
        return (o * (g - np.sum(g * o, axis=1, keepdims=True)),)

    return _apply("softmax", fwd, bwd, scores)


# --- MLPs -------------------------------------------------------------------

@dataclass
class MlpWeights:
    layers: list  # [(W: Tensor (C_in, C_out), b: Tensor (C_out,)), ...]
    final_act: bool = False

    def __post_init__(self):
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError(f"layer dims do not chain: {w0.shape} -> {w1.shape}")
        for w, b in self.layers:
            if b.shape != (w.shape[1],):
                raise ValueError("bias does not match layer width")

    @property
    def c_in(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def c_out(self) -> int:
        return self.layers[-1][0].shape[1]

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]


def init_mlp(rng: np.random.Generator, dims: Sequence[int], final_act: bool = False,
             dtype=np.float32, name: str = "mlp") -> MlpWeights:
    """Uniform +-sqrt(6 / (C_in + C_out)) weights, zero biases."""
    layers = []
    for i, (ci, co) in enumerate(zip(dims[:-1], dims[1:])):
        lim = np.sqrt(6.0 / (ci + co))
        w = rng.uniform(-lim, lim, size=(ci, co)).astype(dtype)
        layers.append((Tensor(w, True, f"{name}.{i}.w"), Tensor(np.zeros(co, dtype), True, f"{name}.{i}.b")))
    return MlpWeights(layers, final_act)


def mlp_forward(w: MlpWeights, x) -> Tensor:
    if data_of(x).shape[-1] != w.c_in:
        raise ValueError(f"MLP expects {w.c_in} input channels, got {data_of(x).shape[-1]}")
    h = x
    last = len(w.layers) - 1
    for i, (W, b) in enumerate(w.layers):
        h = add(matmul(h, W), b)
        if i < last or w.final_act:
            h = leaky_relu(h)
    return as_tensor(h)


# --- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of a gradient check.

    ``kinks`` counts coordinates where the input sits within ``eps`` of a point
    where the function is not differentiable (a neighbor-selection switch, a pixel
    rounding boundary or a max/leaky-relu hinge). The central difference is
    meaningless there, so callers sampling random inputs should redraw them.
    """

    max_error: float
    kinks: int
    worst_input: int
    worst_coord: tuple


def grad_check_report(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
                      kink_tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode and central-difference gradients coordinate by coordinate.

    ``f`` maps Tensors to a scalar Tensor. Inputs are promoted to float64.
    The per-coordinate error is |a - n| / max(1e-8, |a| + |n|).
    """
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    with Tape() as tape:
        out = f(*ts)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite output at the unperturbed point")
    f0 = float(out.data)
    tape.backward(out)
    worst, kinks, where = 0.0, 0, (-1, ())
    for k, x in enumerate(xs):
        analytic = ts[k].grad if ts[k].grad is not None else np.zeros_like(x)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f(*[Tensor(a) for a in xs]).data)
            flat[j] = orig - eps
            fm = float(f(*[Tensor(a) for a in xs]).data)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                coord = np.unravel_index(j, x.shape)
                raise FloatingPointError(f"non-finite value perturbing input {k} at {coord}")
            num = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            # smooth: the central difference is O(eps^2) from the derivative, the
            # one-sided ones O(eps). Near a hinge the analytic value equals one
            # one-sided slope while the central difference straddles both.
            right, left = (fp - f0) / eps, (f0 - fm) / eps
            if err > kink_tol and min(abs(a - right), abs(a - left)) < 0.1 * abs(a - num):
                kinks += 1
            if err > worst:
                worst, where = err, (k, tuple(int(c) for c in np.unravel_index(j, x.shape)))
    return GradCheckReport(worst, kinks, *where)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients."""
    return grad_check_report(f, inputs, eps).max_error


# --- optimizers -------------------------------------------------------------

class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data = (p.data - self.lr * p.grad).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class Adam:
    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# --- weights file -------------------------------------------------------------

def write_weights(path, tensors: dict) -> None:
    """Write named arrays: magic, u32 count, per-tensor manifest, then f32 data."""
    arrays = {k: np.ascontiguousarray(data_of(v), dtype="<f4") for k, v in tensors.items()}
    parts = [WEIGHTS_MAGIC, np.uint32(len(arrays)).astype("<u4").tobytes()]
    for name, a in arrays.items():
        raw = name.encode("utf-8")
        parts.append(np.uint32(len(raw)).astype("<u4").tobytes())
        parts.append(raw)
        parts.append(np.uint32(a.ndim).astype("<u4").tobytes())
        parts.append(np.asarray(a.shape, "<u4").tobytes())
    parts.extend(a.tobytes() for a in arrays.values())
    Path(path).write_bytes(b"".join(parts))


def read_weights(path) -> dict:
    from .grid_repr import FormatError

    buf = Path(path).read_bytes()
    if buf[:16] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad weights header")
    pos = 16

    def u32():
        nonlocal pos
        if pos + 4 > len(buf):
            raise FormatError(f"{path}: truncated manifest")
        val = int(np.frombuffer(buf, "<u4", 1, pos)[0])
        pos += 4
        return val

    manifest = []
    for _ in range(u32()):
        n = u32()
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        rank = u32()
        dims = tuple(u32() for _ in range(rank))
        manifest.append((name, dims))
    out = {}
    for name, dims in manifest:
        count = int(np.prod(dims)) if dims else 1
        if pos + 4 * count > len(buf):
            raise FormatError(f"{path}: truncated data for {name!r}")
        out[name] = np.frombuffer(buf, "<f4", count, pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after weights payload")
    return out
