"""Shared image/message types, verification and scalar quality metrics.

Images are float arrays shaped (H, W, C) with values in [0, 1]; batches add a
leading axis. Bit messages are 1-D uint8 arrays over {0, 1}.
"""
from dataclasses import dataclass
from fractions import Fraction
from math import comb

import numpy as np
from scipy.ndimage import correlate1d

#: Returned by :func:`psnr` for identical images.
PSNR_IDENTICAL = float("inf")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class InfeasibleThreshold(ValueError):
    pass


class UndefinedCorrelation(ValueError):
    pass


def as_image(pixels, name="image"):
    """Validate and return ``pixels`` as an (H, W, C) float array."""
    img = np.asarray(pixels)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"{name}: expected (H, W, 1|3), got {img.shape}")
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError(f"{name}: side must be >= 8, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError(f"{name}: pixels must be finite and in [0, 1]")
    return img


def as_bits(bits, name="message"):
    arr = np.asarray(bits)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"{name}: expected a non-empty 1-D bit sequence")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name}: bits must be 0 or 1")
    return arr.astype(np.uint8)


def bits_from_str(text):
    return as_bits([int(ch) for ch in text.strip()])


def bits_to_str(bits):
    return "".join(str(int(b)) for b in bits)


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


@dataclass(frozen=True)
class VerificationResult:
    bit_accuracy: float
    passed: bool
    threshold: float


def bit_accuracy(a, b):
    """Fraction of positions where the two messages agree.

    Works row-wise on 2-D input, returning one accuracy per row.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    acc = np.mean(a == b, axis=-1)
    return float(acc) if np.ndim(acc) == 0 else acc


def verify(decoded, target, tau):
    if not 0.5 < tau <= 1.0:
        raise ValueError(f"threshold must lie in (0.5, 1], got {tau}")
    acc = bit_accuracy(as_bits(decoded), as_bits(target))
    return VerificationResult(acc, acc >= tau, tau)


def binomial_tail(n, k):
    """Exact P[Binomial(n, 1/2) >= k] as a Fraction."""
    return Fraction(sum(comb(n, j) for j in range(k, n + 1)), 2 ** n)


def compute_threshold(n, target_fpr):
    """Smallest tau = k/n whose null false-positive rate is within ``target_fpr``.

    The null model is a decoder that guesses each bit by a fair coin.
    """
    if n < 1:
        raise ValueError("message length must be >= 1")
    if not 0 < target_fpr < 1:
        raise ValueError("target_fpr must lie in (0, 1)")
    budget = Fraction(target_fpr)
    for k in range(n // 2 + 1, n + 1):
        if binomial_tail(n, k) <= budget:
            return k / n
    raise InfeasibleThreshold(
        f"no threshold with n={n} reaches FPR {target_fpr} "
        f"(best achievable is 2^-{n})")


def psnr(a, b):
    """Peak signal-to-noise ratio in dB with peak value 1.0."""
    _same_shape(a, b)
    mse = np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window():
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(r ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    p = SSIM_WINDOW // 2
    return out[p:-p, p:-p]


def ssim(a, b):
    """Mean structural similarity, averaged over channels."""
    _same_shape(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs both sides >= {SSIM_WINDOW}, got {a.shape[:2]}")
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    g = _gaussian_window()
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        vx = _filter_valid(x * x, g) - mx * mx
        vy = _filter_valid(y * y, g) - my * my
        cxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def pearson_r(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(dx @ dx)
    sy = np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelation("correlation undefined for a constant sequence")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def residual(w, x):
    """Residual image ``w - x`` kept at full precision."""
    _same_shape(w, x)
    return np.asarray(w, dtype=np.float64) - np.asarray(x, dtype=np.float64)


def overlay(x, z, zeta=1.0):
    """Add ``zeta`` times a residual onto ``x`` and clamp to [0, 1]."""
    _same_shape(x, z)
    if zeta <= 0:
        raise ValueError("overlay multiplier must be positive")
    return np.clip(np.asarray(x, dtype=np.float64) + zeta * np.asarray(z), 0.0, 1.0)
