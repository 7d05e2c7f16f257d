"""Small SR networks with handwritten backprop.

Two model kinds share the conv machinery (same-size layers, replicate
padding):
  "shuffle"  - conv stack at LR resolution, then pixel-shuffle upsample;
               default preset conv 3->32 (5x5, tanh), conv 32->32
               (3x3, tanh), conv 32->3*s^2 (3x3, linear), shuffle(s).
  "residual" - bicubic-upsample the input, run the conv stack at HR
               resolution, add the result onto the upsampled base
               (global skip).
Parameters are updated functionally: adam_step returns a new ModelParams.

Checkpoint layout (little-endian throughout):
  bytes 0..7    magic "GVSRCKPT"
  u32           format version (1)
  u32           model kind (0 shuffle, 1 residual)
  u32           upscaling factor s
  u32           layer count L
  u64           optimizer step counter
  per layer     u32 in_ch, u32 out_ch, u32 kernel, u32 activation
                (0 tanh, 1 relu, 2 none)
  then f64 blobs, C-order: per layer W then b; per layer adam m_W then
  m_b; per layer adam v_W then v_b.
"""

import struct
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .gradients import replicate_pad, replicate_pad_adjoint
from .imagecore import DTYPE, bicubic_resize, check_image

ACTIVATIONS = ("tanh", "relu", "none")
MODEL_KINDS = ("shuffle", "residual")

CKPT_MAGIC = b"GVSRCKPT"
CKPT_VERSION = 1


class NonFiniteError(ArithmeticError):
    """A gradient or loss stopped being finite; training must abort."""


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    activation: str

    def __post_init__(self):
        if self.in_ch < 1 or self.out_ch < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ModelParams:
    specs: tuple
    scale: int
    weights: tuple
    biases: tuple
    m_w: tuple
    v_w: tuple
    m_b: tuple
    v_b: tuple
    step: int = 0
    kind: str = "shuffle"


@dataclass(frozen=True)
class ForwardTape:
    """Per-layer im2col matrices and activation outputs from one forward
    pass, plus the step token of the params that produced them."""

    cols: tuple
    outs: tuple
    in_shape: tuple
    step: int


@dataclass(frozen=True)
class ModelGrads:
    weights: tuple
    biases: tuple


def default_specs(scale, channels=3):
    return (
        ConvSpec(channels, 32, 5, "tanh"),
        ConvSpec(32, 32, 3, "tanh"),
        ConvSpec(32, channels * scale * scale, 3, "none"),
    )


def residual_specs(channels=3):
    return (
        ConvSpec(channels, 32, 5, "tanh"),
        ConvSpec(32, 32, 3, "tanh"),
        ConvSpec(32, channels, 3, "none"),
    )


def init_model(specs, scale, rng, kind="shuffle"):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights and biases."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    for prev, nxt in zip(specs, specs[1:]):
        if prev.out_ch != nxt.in_ch:
            raise ValueError(f"layer channel mismatch: {prev.out_ch} -> {nxt.in_ch}")
    if kind == "shuffle" and specs[-1].out_ch % (scale * scale):
        raise ValueError(f"final layer must emit a multiple of {scale}^2 channels")
    weights, biases, zw, zb = [], [], [], []
    for spec in specs:
        fan_in = spec.in_ch * spec.kernel * spec.kernel
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)).astype(DTYPE))
        biases.append(rng.uniform(-bound, bound, spec.out_ch).astype(DTYPE))
        zw.append(np.zeros_like(weights[-1]))
        zb.append(np.zeros_like(biases[-1]))
    return ModelParams(
        tuple(specs), scale, tuple(weights), tuple(biases),
        tuple(zw), tuple(z.copy() for z in zw), tuple(zb), tuple(z.copy() for z in zb),
        kind=kind,
    )


def pixel_shuffle(t, s):
    """(c*s^2, h, w) -> (c, s*h, s*w); channel index dy*s + dx lands at
    spatial offset (dy, dx) within each s x s output block."""
    cs2, h, w = t.shape
    if s < 1 or cs2 % (s * s):
        raise ValueError(f"{cs2} channels not divisible by {s}^2")
    c = cs2 // (s * s)
    return t.reshape(c, s, s, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * s, w * s)


def pixel_unshuffle(img, s):
    """Inverse of pixel_shuffle; also its adjoint (it is a permutation)."""
    c, hs, ws = img.shape
    if s < 1 or hs % s or ws % s:
        raise ValueError(f"{hs}x{ws} not divisible by scale {s}")
    h, w = hs // s, ws // s
    return img.reshape(c, h, s, w, s).transpose(0, 2, 4, 1, 3).reshape(c * s * s, h, w)


def _im2col(x, k):
    """(c, h, w) with replicate padding -> (c*k*k, h*w) column matrix."""
    p = (k - 1) // 2
    padded = replicate_pad(x, p)
    win = sliding_window_view(padded, (k, k), axis=(1, 2))
    c, h, w = x.shape
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def _col2im_adjoint(dcols, c, h, w, k):
    """Adjoint of _im2col: scatter column cotangents back to the image."""
    p = (k - 1) // 2
    d = dcols.reshape(c, k, k, h, w)
    padded = np.zeros((c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for u in range(k):
        for v in range(k):
            padded[:, u : u + h, v : v + w] += d[:, u, v]
    return replicate_pad_adjoint(padded, p)


def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_vjp(cot, out, kind):
    # Derivatives written in terms of the cached output.
    if kind == "tanh":
        return cot * (1.0 - out * out)
    if kind == "relu":
        return cot * (out > 0)
    return cot


def forward(params, lr_img):
    """Run the network; returns the SR image and the tape for backward."""
    lr_img = check_image(lr_img, "lr")
    if lr_img.shape[0] != params.specs[0].in_ch:
        raise ValueError(f"input has {lr_img.shape[0]} channels, first layer expects {params.specs[0].in_ch}")
    s = params.scale
    if params.kind == "residual":
        x = bicubic_resize(lr_img, lr_img.shape[1] * s, lr_img.shape[2] * s).astype(DTYPE, copy=False)
        base = x
    else:
        x = lr_img.astype(DTYPE, copy=False)
        base = None
    stack_in = x.shape
    cols_list, outs = [], []
    for spec, w_tensor, b in zip(params.specs, params.weights, params.biases):
        cols = _im2col(x, spec.kernel)
        w_mat = w_tensor.reshape(spec.out_ch, -1)
        z = (w_mat @ cols).reshape(spec.out_ch, *x.shape[1:]) + b[:, None, None]
        x = _activate(z, spec.activation)
        cols_list.append(cols)
        outs.append(x)
    sr = base + x if params.kind == "residual" else pixel_shuffle(x, s)
    tape = ForwardTape(tuple(cols_list), tuple(outs), stack_in, params.step)
    return sr, tape


def backward(params, tape, grad_sr):
    """Exact parameter gradients for d(loss)/d(sr) = grad_sr."""
    if tape.step != params.step:
        raise ValueError(f"stale tape: recorded at step {tape.step}, params at step {params.step}")
    cot = np.asarray(grad_sr, dtype=DTYPE)
    if params.kind == "shuffle":
        # The global-skip branch of the residual kind adds nothing to
        # parameter gradients, so only the shuffle head needs undoing.
        cot = pixel_unshuffle(cot, params.scale)
    g_w = [None] * len(params.specs)
    g_b = [None] * len(params.specs)
    _, h, w = tape.in_shape
    for i in range(len(params.specs) - 1, -1, -1):
        spec = params.specs[i]
        dz = _activation_vjp(cot, tape.outs[i], spec.activation)
        dz_mat = dz.reshape(spec.out_ch, -1)
        g_b[i] = dz.sum(axis=(1, 2))
        g_w[i] = (dz_mat @ tape.cols[i].T).reshape(params.weights[i].shape)
        if i > 0:
            w_mat = params.weights[i].reshape(spec.out_ch, -1)
            cot = _col2im_adjoint(w_mat.T @ dz_mat, spec.in_ch, h, w, spec.kernel)
    return ModelGrads(tuple(g_w), tuple(g_b))


def accumulate(total, grads, weight=1.0):
    """total + weight * grads, allocating on first use (total may be None)."""
    if total is None:
        return ModelGrads(
            tuple(weight * g for g in grads.weights),
            tuple(weight * g for g in grads.biases),
        )
    return ModelGrads(
        tuple(t + weight * g for t, g in zip(total.weights, grads.weights)),
        tuple(t + weight * g for t, g in zip(total.biases, grads.biases)),
    )


def adam_step(params, grads, lr_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction; returns new params."""
    for g in (*grads.weights, *grads.biases):
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite parameter gradient")
    t = params.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t

    def update(p, g, m, v):
        m_new = beta1 * m + (1.0 - beta1) * g
        v_new = beta2 * v + (1.0 - beta2) * g * g
        p_new = p - lr_rate * (m_new / c1) / (np.sqrt(v_new / c2) + eps)
        # Raising here, before the new params exist, keeps the caller's
        # snapshot at the last finite state.
        if not np.isfinite(p_new).all():
            raise NonFiniteError("non-finite weight after update")
        return p_new, m_new, v_new

    new_w, new_mw, new_vw = [], [], []
    for p, g, m, v in zip(params.weights, grads.weights, params.m_w, params.v_w):
        a, b, c = update(p, g, m, v)
        new_w.append(a), new_mw.append(b), new_vw.append(c)
    new_b, new_mb, new_vb = [], [], []
    for p, g, m, v in zip(params.biases, grads.biases, params.m_b, params.v_b):
        a, b, c = update(p, g, m, v)
        new_b.append(a), new_mb.append(b), new_vb.append(c)
    return replace(
        params,
        weights=tuple(new_w), biases=tuple(new_b),
        m_w=tuple(new_mw), v_w=tuple(new_vw),
        m_b=tuple(new_mb), v_b=tuple(new_vb),
        step=t,
    )


def save_checkpoint(params, path):
    act_code = {name: i for i, name in enumerate(ACTIVATIONS)}
    chunks = [
        CKPT_MAGIC,
        struct.pack("<IIII", CKPT_VERSION, MODEL_KINDS.index(params.kind), params.scale, len(params.specs)),
        struct.pack("<Q", params.step),
    ]
    for spec in params.specs:
        chunks.append(struct.pack("<IIII", spec.in_ch, spec.out_ch, spec.kernel, act_code[spec.activation]))
    for group in (
        zip(params.weights, params.biases),
        zip(params.m_w, params.m_b),
        zip(params.v_w, params.v_b),
    ):
        for w_arr, b_arr in group:
            chunks.append(np.ascontiguousarray(w_arr, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(b_arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise OSError(f"{path}: not a checkpoint file")
    try:
        return _parse_checkpoint(blob)
    except (struct.error, ValueError) as exc:
        raise OSError(f"{path}: truncated or corrupt checkpoint: {exc}") from exc
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from exc


def _parse_checkpoint(blob):
    version, kind_code, scale, n_layers = struct.unpack_from("<IIII", blob, 8)
    if version != CKPT_VERSION:
        raise OSError(f"unsupported checkpoint version {version}")
    if kind_code >= len(MODEL_KINDS):
        raise OSError(f"unknown model kind code {kind_code}")
    (step,) = struct.unpack_from("<Q", blob, 24)
    offset = 32
    specs = []
    for _ in range(n_layers):
        in_ch, out_ch, kernel, act = struct.unpack_from("<IIII", blob, offset)
        offset += 16
        if act >= len(ACTIVATIONS):
            raise OSError(f"unknown activation code {act}")
        specs.append(ConvSpec(in_ch, out_ch, kernel, ACTIVATIONS[act]))

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        return arr.reshape(shape).astype(DTYPE)

    groups = []
    for _ in range(3):
        ws, bs = [], []
        for spec in specs:
            ws.append(take((spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)))
            bs.append(take((spec.out_ch,)))
        groups.append((tuple(ws), tuple(bs)))
    if offset != len(blob):
        raise OSError("trailing bytes in checkpoint")
    (w, b), (mw, mb), (vw, vb) = groups
    return ModelParams(tuple(specs), scale, w, b, mw, vw, mb, vb, step, MODEL_KINDS[kind_code])
