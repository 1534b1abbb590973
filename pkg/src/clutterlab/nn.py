"""Float64 tensor kernels with hand-written backward passes.

Arrays are plain ``numpy`` arrays laid out as (batch, channel, height, width).
On top of the kernels sit :class:`TinyUNet` (one down/up stage with a skip
connection) and :class:`QNetwork`, eight independent heads whose stacked
outputs form a Q-map over (direction, row, col).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_HEADS = 8
PATCH_CHANNELS = 4
PATCH_SIZE = 32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def check_finite(x, what: str = "tensor"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def _need(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------- kernels
#
# The network runs channels-last (N, H, W, C). A stride-1 convolution is then
# k*k matrix products over the zero-padded image flattened to one long row
# array: tap (i, j) is a fixed shift of i*Wp + j rows. Outputs that straddle
# the padding are computed and thrown away, which costs less than im2col.

def _pad_nhwc(x, p):
    if p == 0:
        return np.ascontiguousarray(x)
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    xp[:, p:p + h, p:p + w] = x
    return xp


def _conv_geometry(shape, k, pad):
    n, h, w, _ = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    span = n * hp * wp - ((k - 1) * wp + (k - 1))
    return hp, wp, hp - k + 1, wp - k + 1, span


def conv_nhwc(x, w, b, pad: int):
    """``x``: (N, H, W, C), ``w``: (k, k, C, F), ``b``: (F,) -> (N, Ho, Wo, F)."""
    k = w.shape[0]
    n, _, _, c = x.shape
    hp, wp, ho, wo, span = _conv_geometry(x.shape, k, pad)
    flat = _pad_nhwc(x, pad).reshape(-1, c)
    acc = np.zeros((n * hp * wp, w.shape[3]))
    for i in range(k):
        for j in range(k):
            s = i * wp + j
            acc[:span] += flat[s:s + span] @ w[i, j]
    out = acc.reshape(n, hp, wp, -1)[:, :ho, :wo] + b
    return check_finite(out, "conv2d output")


def conv_nhwc_backward(grad_out, x, w, pad: int):
    k = w.shape[0]
    n, h, wd, c = x.shape
    hp, wp, ho, wo, span = _conv_geometry(x.shape, k, pad)
    _need(grad_out.shape == (n, ho, wo, w.shape[3]), "grad_out shape does not match conv2d output")
    flat = _pad_nhwc(x, pad).reshape(-1, c)
    g = np.zeros((n, hp, wp, w.shape[3]))
    g[:, :ho, :wo] = grad_out
    g = g.reshape(-1, w.shape[3])[:span]
    gw = np.empty_like(w)
    gflat = np.zeros_like(flat)
    for i in range(k):
        for j in range(k):
            s = i * wp + j
            gw[i, j] = flat[s:s + span].T @ g
            gflat[s:s + span] += g @ w[i, j].T
    gx = gflat.reshape(n, hp, wp, c)[:, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(gx), gw, grad_out.sum(axis=(0, 1, 2))


def maxpool_nhwc(x):
    n, h, w, c = x.shape
    _need(h % 2 == 0 and w % 2 == 0, "maxpool2 needs even spatial dims")
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)  # first maximum in row-major block order
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def maxpool_nhwc_backward(grad_out, idx):
    n, h2, w2, c = grad_out.shape
    _need(idx.shape == grad_out.shape, "argmax indices do not match grad_out")
    g = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return g.reshape(n, 2 * h2, 2 * w2, c)


def upsample_nhwc(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_nhwc_backward(grad_out):
    n, h, w, c = grad_out.shape
    return grad_out.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# channel-first wrappers: the conventional (N, C, H, W) interface

def _nhwc(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).transpose(0, 2, 3, 1))


def _nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _kernel_nhwc(w):
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0))


def conv2d_forward(x, w, b, pad: int = 1):
    """Stride-1 cross-correlation with zero padding.

    ``x``: (N, C, H, W), ``w``: (F, C, k, k), ``b``: (F,). Returns (N, F, H', W').
    """
    _need(np.ndim(x) == 4 and np.ndim(w) == 4, "conv2d expects 4-D input and kernel")
    _need(w.shape[1] == x.shape[1], f"kernel expects {w.shape[1]} channels, got {x.shape[1]}")
    _need(w.shape[2] == w.shape[3], "kernel must be square")
    _need(np.shape(b) == (w.shape[0],), "bias shape does not match kernel")
    _need(x.shape[2] + 2 * pad >= w.shape[2] and x.shape[3] + 2 * pad >= w.shape[2],
          "input smaller than kernel")
    return _nchw(conv_nhwc(_nhwc(x), _kernel_nhwc(w), np.asarray(b, dtype=float), pad))


def conv2d_backward(grad_out, x, w, pad: int = 1):
    """Gradients of a scalar loss w.r.t. (input, kernel, bias)."""
    gx, gw, gb = conv_nhwc_backward(_nhwc(grad_out), _nhwc(x), _kernel_nhwc(w), pad)
    return _nchw(gx), np.ascontiguousarray(gw.transpose(3, 2, 0, 1)), gb


def maxpool2(x):
    """2x2 max-pool, stride 2. Ties go to the first element in row-major order."""
    _need(np.ndim(x) == 4, "maxpool2 needs 4-D input")
    out, idx = maxpool_nhwc(_nhwc(x))
    return _nchw(out), _nchw(idx)


def maxpool2_backward(grad_out, idx):
    idx = np.ascontiguousarray(np.asarray(idx).transpose(0, 2, 3, 1))
    return _nchw(maxpool_nhwc_backward(_nhwc(grad_out), idx))


def upsample2_nearest(x):
    _need(np.ndim(x) == 4, "upsample expects 4-D input")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(grad_out):
    n, c, h, w = grad_out.shape
    _need(h % 2 == 0 and w % 2 == 0, "upsample grad must have even spatial dims")
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0.0)


def concat_channels(a, b):
    _need(a.ndim == 4 and b.ndim == 4 and a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:],
          "concat needs matching batch and spatial dims")
    return np.concatenate([a, b], axis=1)


def concat_backward(grad_out, split: int):
    return grad_out[:, :split], grad_out[:, split:]


# ---------------------------------------------------------------- network

# (name, shape) in declaration order; this order fixes the checkpoint layout
HEAD_LAYOUT = (
    ("enc_w", (16, PATCH_CHANNELS, 3, 3)), ("enc_b", (16,)),
    ("mid_w", (32, 16, 3, 3)), ("mid_b", (32,)),
    ("dec_w", (16, 48, 3, 3)), ("dec_b", (16,)),
    ("out_w", (1, 16, 1, 1)), ("out_b", (1,)),
)


@dataclass
class TinyUNet:
    params: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls) -> "TinyUNet":
        return cls({name: np.zeros(shape) for name, shape in HEAD_LAYOUT})

    @classmethod
    def init(cls, rng: np.random.Generator) -> "TinyUNet":
        """He initialisation scaled by fan-in; biases start at zero."""
        params = {}
        for name, shape in HEAD_LAYOUT:
            if name.endswith("_w"):
                fan_in = int(np.prod(shape[1:]))
                params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            else:
                params[name] = np.zeros(shape)
        return cls(params)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, x):
        """(N, 4, H, W) -> (output (N, 1, H, W), cache for :meth:`backward`)."""
        _need(np.ndim(x) == 4 and x.shape[1] == PATCH_CHANNELS, "head expects (N, 4, H, W) input")
        check_finite(x, "network input")
        x = _nhwc(x)
        p = {k: _kernel_nhwc(v) if v.ndim == 4 else v for k, v in self.params.items()}
        a1 = conv_nhwc(x, p["enc_w"], p["enc_b"], 1)
        h1 = relu(a1)
        pooled, idx = maxpool_nhwc(h1)
        a2 = conv_nhwc(pooled, p["mid_w"], p["mid_b"], 1)
        cat = np.concatenate([upsample_nhwc(relu(a2)), h1], axis=3)
        a3 = conv_nhwc(cat, p["dec_w"], p["dec_b"], 1)
        h3 = relu(a3)
        out = h3 @ p["out_w"][0, 0] + p["out_b"]
        check_finite(out, "network output")
        return _nchw(out), (x, p, a1, h1, idx, pooled, a2, cat, a3, h3)

    def backward(self, cache, grad_out):
        """Parameter gradients and the input gradient: ``(grads, grad_x)``."""
        x, p, a1, h1, idx, pooled, a2, cat, a3, h3 = cache
        gk = {}
        g = {}
        gout = _nhwc(grad_out)
        gk["out_w"] = np.tensordot(h3, gout, axes=([0, 1, 2], [0, 1, 2]))[None, None]
        g["out_b"] = gout.sum(axis=(0, 1, 2))
        gh3 = gout @ p["out_w"][0, 0].T
        gcat, gk["dec_w"], g["dec_b"] = conv_nhwc_backward(relu_backward(gh3, a3), cat,
                                                           p["dec_w"], 1)
        gup, gskip = gcat[..., :32], gcat[..., 32:]
        ga2 = relu_backward(upsample_nhwc_backward(gup), a2)
        gpool, gk["mid_w"], g["mid_b"] = conv_nhwc_backward(ga2, pooled, p["mid_w"], 1)
        gh1 = maxpool_nhwc_backward(gpool, idx) + gskip
        gx, gk["enc_w"], g["enc_b"] = conv_nhwc_backward(relu_backward(gh1, a1), x,
                                                         p["enc_w"], 1)
        for name, v in gk.items():
            g[name] = np.ascontiguousarray(v.transpose(3, 2, 0, 1))
        for name, v in g.items():
            check_finite(v, f"gradient of {name}")
        return {name: g[name] for name, _ in HEAD_LAYOUT}, _nchw(gx)


@dataclass
class QNetwork:
    heads: list

    @classmethod
    def init(cls, seed: int) -> "QNetwork":
        rng = np.random.default_rng(seed)
        return cls([TinyUNet.init(rng) for _ in range(N_HEADS)])

    @classmethod
    def zeros(cls) -> "QNetwork":
        return cls([TinyUNet.zeros() for _ in range(N_HEADS)])

    def copy(self) -> "QNetwork":
        return QNetwork([TinyUNet({k: v.copy() for k, v in h.params.items()}) for h in self.heads])

    def forward(self, x):
        """Batched Q-maps: (N, 4, 32, 32) -> (N, 8, 32, 32)."""
        return np.concatenate([h.forward(x)[0] for h in self.heads], axis=1)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([h.params[name].ravel() for h in self.heads for name, _ in HEAD_LAYOUT])

    def load_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for h in self.heads:
            for name, shape in HEAD_LAYOUT:
                size = int(np.prod(shape))
                h.params[name] = flat[pos:pos + size].reshape(shape).copy()
                pos += size


def q_forward(net: QNetwork, patch) -> np.ndarray:
    """Q-map (8, 32, 32) for a single (4, 32, 32) patch."""
    patch = np.asarray(patch, dtype=np.float64)
    _need(patch.shape == (PATCH_CHANNELS, PATCH_SIZE, PATCH_SIZE), f"bad patch shape {patch.shape}")
    return net.forward(patch[None])[0]


def head_param_count() -> int:
    return sum(int(np.prod(s)) for _, s in HEAD_LAYOUT)


# ---------------------------------------------------------------- training

@dataclass
class RMSPropState:
    acc: dict = field(default_factory=dict)
    mom: dict = field(default_factory=dict)


def rmsprop_step(params: dict, grads: dict, state: RMSPropState, lr: float,
                 momentum: float = 0.9, eps: float = 1e-8, rho: float = 0.9) -> None:
    """In-place RMSProp with momentum on the arrays in ``params``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        acc = state.acc.get(name)
        if acc is None:
            acc = state.acc[name] = np.zeros_like(p)
            state.mom[name] = np.zeros_like(p)
        mom = state.mom[name]
        acc *= rho
        acc += (1.0 - rho) * g * g
        mom *= momentum
        mom += lr * g / np.sqrt(acc + eps)
        check_finite(mom, f"update of {name}")
        p -= mom


def td_loss(pred, target, delta: float = 1.0):
    """Huber loss and its derivative w.r.t. ``pred`` (elementwise for arrays)."""
    d = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    a = np.abs(d)
    loss = np.where(a <= delta, 0.5 * d * d, delta * (a - 0.5 * delta))
    grad = np.clip(d, -delta, delta)
    if np.ndim(loss) == 0:
        return float(loss), float(grad)
    return loss, grad


# ---------------------------------------------------------------- checkpoint

MAGIC = b"CLQN"
VERSION = 1
_HEADER = struct.Struct("<4sI32sQ")


def architecture_hash() -> bytes:
    desc = {"heads": N_HEADS, "layout": [[n, list(s)] for n, s in HEAD_LAYOUT]}
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).digest()


def save_checkpoint(net: QNetwork, path) -> Path:
    path = Path(path)
    flat = net.flat_params()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, architecture_hash(), flat.size))
        f.write(flat.astype("<f8").tobytes())
    return path


def load_checkpoint(path) -> QNetwork:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, arch, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a Q-network checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if arch != architecture_hash():
        raise CheckpointError(f"{path}: architecture hash mismatch")
    body = raw[_HEADER.size:]
    if count != N_HEADS * head_param_count() or len(body) != 8 * count:
        raise CheckpointError(f"{path}: parameter blob has wrong length")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    check_finite(flat, "checkpoint parameters")
    net = QNetwork.zeros()
    net.load_flat(flat)
    return net
