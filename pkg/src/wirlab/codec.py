"""Micro watermark codec (encoder E, decoder D) and the linear reference codec.

Encoder: the signed message ``2t - 1`` goes through a dense layer onto a coarse
(side/CELL)^2 grid of message channels, nearest-upsampled to full size and
concatenated with x; then conv -> ReLU -> conv -> ReLU -> conv -> tanh, and
``w = clip(x + strength * tanh_out, 0, 1)``.

Decoder: conv -> ReLU -> conv -> ReLU -> CELLxCELL average pool -> flatten ->
dense -> logistic, probabilities clamped to [PROB_EPS, 1 - PROB_EPS].

Residual images are decoded after shifting by +0.5 (see :func:`decode_residual_probs`).
"""
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .core import as_bits

PROB_EPS = 1e-6
RESIDUAL_SHIFT = 0.5

#: Canonical parameter order; also the serialization order of the model file.
ENCODER_KEYS = ("msg_w", "msg_b", "enc1_w", "enc1_b", "enc2_w", "enc2_b", "enc3_w", "enc3_b")
DECODER_KEYS = ("dec1_w", "dec1_b", "dec2_w", "dec2_b", "dense_w", "dense_b")
PARAM_KEYS = ENCODER_KEYS + DECODER_KEYS

DTYPE = np.float32
CELL = 4


class OracleViolation(RuntimeError):
    """The linear codec had to clamp, so exact linearity no longer holds."""


@dataclass(frozen=True)
class CodecConfig:
    n_bits: int = 16
    channels: int = 1
    side: int = 32
    filters: int = 16
    strength: float = 0.05
    message_channels: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_bits < 1:
            raise ValueError("n_bits must be >= 1")
        if self.filters < 1:
            raise ValueError("filters must be >= 1")
        if not 0 < self.strength <= 0.5:
            raise ValueError("strength must lie in (0, 0.5]")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.side < 8 or self.side % CELL:
            raise ValueError(f"side must be >= 8 and a multiple of {CELL}")
        if self.message_channels < 1:
            raise ValueError("message_channels must be >= 1")
        if not 0 <= self.seed < 2 ** 32:
            raise ValueError("seed must fit in 32 unsigned bits")
        # held at float32 precision so the model file round-trips exactly
        object.__setattr__(self, "strength", float(np.float32(self.strength)))

    @property
    def grid(self):
        return self.side // CELL

    def param_shapes(self):
        c, n, f, m, g = self.channels, self.n_bits, self.filters, self.message_channels, self.grid
        return {
            "msg_w": (n, g * g * m), "msg_b": (g * g * m,),
            "enc1_w": (3, 3, c + m, f), "enc1_b": (f,),
            "enc2_w": (3, 3, f, f), "enc2_b": (f,),
            "enc3_w": (3, 3, f, c), "enc3_b": (c,),
            "dec1_w": (3, 3, c, f), "dec1_b": (f,),
            "dec2_w": (3, 3, f, f), "dec2_b": (f,),
            "dense_w": (g * g * f, n), "dense_b": (n,),
        }


@dataclass
class CodecParams:
    config: CodecConfig
    weights: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.weights[key]

    def copy(self):
        return CodecParams(self.config, {k: v.copy() for k, v in self.weights.items()})

    def astype(self, dtype):
        return CodecParams(self.config, {k: v.astype(dtype) for k, v in self.weights.items()})

    def equals(self, other):
        return (self.config == other.config and
                all(np.array_equal(self.weights[k], other.weights[k]) for k in PARAM_KEYS))


def _fans(shape):
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        return shape[2] * receptive, shape[3] * receptive
    return shape[0], shape[1]


def init_codec(config, seed=None):
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    weights = {}
    for key, shape in config.param_shapes().items():
        if key.endswith("_b"):
            weights[key] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in, fan_out = _fans(shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights[key] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return CodecParams(config, weights)


def _batch(img, config):
    arr = np.asarray(img)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    expect = (config.side, config.side, config.channels)
    if arr.ndim != 4 or arr.shape[1:] != expect:
        raise ValueError(f"image shape {arr.shape} does not match codec {expect}")
    return arr, single


def _messages(t, batch, n):
    msg = np.asarray(t)
    if msg.ndim == 1:
        msg = np.broadcast_to(msg, (batch, msg.shape[0]))
    if msg.shape != (batch, n):
        raise ValueError(f"message shape {msg.shape} does not match (batch={batch}, n={n})")
    return msg


def encoder_forward(params, x, t):
    """Batched encoder pass; returns ``(w, cache)``."""
    cfg = params.config
    dtype = params["enc1_w"].dtype
    x = x.astype(dtype, copy=False)
    b = x.shape[0]
    g, m = cfg.grid, cfg.message_channels
    signed = (2.0 * t - 1.0).astype(dtype)
    coarse = (signed @ params["msg_w"] + params["msg_b"]).reshape(b, g, g, m)
    planes = coarse.repeat(CELL, axis=1).repeat(CELL, axis=2)
    inp = np.concatenate([x, planes], axis=-1)
    a1, c1 = nn.conv3x3_forward(inp, params["enc1_w"], params["enc1_b"])
    h1, m1 = nn.relu_forward(a1)
    a2, c2 = nn.conv3x3_forward(h1, params["enc2_w"], params["enc2_b"])
    h2, m2 = nn.relu_forward(a2)
    a3, c3 = nn.conv3x3_forward(h2, params["enc3_w"], params["enc3_b"])
    r = np.tanh(a3)
    pre = x + dtype.type(cfg.strength) * r
    w = np.clip(pre, 0, 1)
    inside = (pre >= 0) & (pre <= 1)
    return w, (signed, c1, m1, c2, m2, c3, r, inside)


def encoder_backward(params, dw, cache):
    """Gradients of the encoder weights given dL/dw."""
    signed, c1, m1, c2, m2, c3, r, inside = cache
    cfg = params.config
    s = dw.dtype.type(cfg.strength)
    da3 = dw * inside * s * (1 - r * r)
    dh2, g3w, g3b = nn.conv3x3_backward(da3, c3)
    dh1, g2w, g2b = nn.conv3x3_backward(nn.relu_backward(dh2, m2), c2)
    dinp, g1w, g1b = nn.conv3x3_backward(nn.relu_backward(dh1, m1), c1)
    b, g = dw.shape[0], cfg.grid
    dplanes = dinp[..., cfg.channels:]
    # nearest upsampling is adjoint to sum pooling over each cell
    dcoarse = dplanes.reshape(b, g, CELL, g, CELL, -1).sum(axis=(2, 4)).reshape(b, -1)
    return {"msg_w": signed.T @ dcoarse, "msg_b": dcoarse.sum(axis=0), "enc1_w": g1w, "enc1_b": g1b, "enc2_w": g2w, "enc2_b": g2b,
            "enc3_w": g3w, "enc3_b": g3b}


def decoder_forward(params, img):
    """Batched decoder pass; returns ``(probs, cache)``."""
    dtype = params["dec1_w"].dtype
    img = img.astype(dtype, copy=False)
    a1, c1 = nn.conv3x3_forward(img, params["dec1_w"], params["dec1_b"])
    h1, m1 = nn.relu_forward(a1)
    a2, c2 = nn.conv3x3_forward(h1, params["dec2_w"], params["dec2_b"])
    h2, m2 = nn.relu_forward(a2)
    b, h, w, f = h2.shape
    g = params.config.grid
    pooled = h2.reshape(b, g, CELL, g, CELL, f).mean(axis=(2, 4)).reshape(b, -1)
    logits = pooled @ params["dense_w"] + params["dense_b"]
    raw = nn.sigmoid(logits)
    probs = np.clip(raw, PROB_EPS, 1 - PROB_EPS)
    inside = (raw >= PROB_EPS) & (raw <= 1 - PROB_EPS)
    return probs, (c1, m1, c2, m2, h2.shape, pooled, raw, inside)


def decoder_backward(params, dprobs, cache, need_input_grad=False, need_weight_grad=True):
    """Returns ``(dL/dimg or None, weight grads or None)``."""
    c1, m1, c2, m2, h2shape, pooled, raw, inside = cache
    dlogits = dprobs * inside * raw * (1 - raw)
    grads = None
    if need_weight_grad:
        grads = {"dense_w": pooled.T @ dlogits, "dense_b": dlogits.sum(axis=0)}
    dpooled = dlogits @ params["dense_w"].T
    b, h, w, f = h2shape
    g = params.config.grid
    dcell = dpooled.reshape(b, g, 1, g, 1, f) / (CELL * CELL)
    dh2 = np.broadcast_to(dcell, (b, g, CELL, g, CELL, f)).reshape(h2shape)
    dh1, g2w, g2b = nn.conv3x3_backward(nn.relu_backward(dh2, m2), c2)
    dimg, g1w, g1b = nn.conv3x3_backward(nn.relu_backward(dh1, m1), c1, need_dx=need_input_grad)
    if need_weight_grad:
        grads.update({"dec1_w": g1w, "dec1_b": g1b, "dec2_w": g2w, "dec2_b": g2b})
    return dimg, grads


def encode(params, x, t):
    """Watermark one image (H, W, C) or a batch (B, H, W, C) with message(s) ``t``."""
    xb, single = _batch(x, params.config)
    msg = _messages(np.asarray(t), xb.shape[0], params.config.n_bits)
    w, _ = encoder_forward(params, xb, msg)
    return w[0] if single else w


def decode_probs(params, img):
    """Per-bit probabilities for an image or batch with values in [0, 1]."""
    ib, single = _batch(img, params.config)
    probs, _ = decoder_forward(params, ib)
    return probs[0] if single else probs


def decode_residual_probs(params, z):
    """Decode a signed residual by first shifting it into the image range."""
    return decode_probs(params, np.asarray(z) + RESIDUAL_SHIFT)


def decode_bits(probs):
    """Hard decision per bit; p == 0.5 decodes to 0."""
    return (np.asarray(probs) > 0.5).astype(np.uint8)


@dataclass(frozen=True)
class LinearCodec:
    """Spread-spectrum codec with orthonormal image-shaped patterns.

    ``patterns`` has shape (n, H*W*C); ``shape`` is the image shape.
    """
    patterns: np.ndarray
    amplitude: float
    shape: tuple

    @property
    def n_bits(self):
        return self.patterns.shape[0]

    def signs(self, t):
        return 2.0 * as_bits(t).astype(np.float64) - 1.0

    def watermark(self, t):
        """The additive residual ``a * sum_i (2 t_i - 1) P_i``."""
        return (self.amplitude * (self.signs(t) @ self.patterns)).reshape(self.shape)


def make_linear_codec(n_bits, shape, amplitude, seed=0):
    dim = int(np.prod(shape))
    if n_bits > dim:
        raise ValueError("need n_bits <= pixel count for orthonormal patterns")
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, n_bits)))
    return LinearCodec(np.ascontiguousarray(q.T), float(amplitude), tuple(shape))


def linear_encode(lc, x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != lc.shape:
        raise ValueError(f"image shape {x.shape} does not match codec {lc.shape}")
    w = x + lc.watermark(t)
    if w.min() < 0 or w.max() > 1:
        raise OracleViolation("linear watermark would need clamping")
    return w


def linear_project(lc, z):
    """Inner products of residual(s) with every pattern; shape (..., n)."""
    z = np.asarray(z, dtype=np.float64)
    flat = z.reshape(z.shape[: z.ndim - len(lc.shape)] + (-1,))
    return flat @ lc.patterns.T


def linear_decode(lc, z):
    return (linear_project(lc, z) > 0).astype(np.uint8)
