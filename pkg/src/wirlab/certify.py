"""Watermark authentication as a binary classifier, its randomized-smoothing
certification, and certified-accuracy curves.

A *classifier* here is any callable taking a batch of images (B, H, W, C) and
returning a length-B integer array over {0, 1}; :func:`make_authenticator`
builds one from a codec, a secret and a threshold.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import beta as beta_dist

from .codec import decode_bits, decode_probs
from .core import bit_accuracy, verify
from .transforms import apply_affine, apply_gaussian_pixel, sample_affine

ABSTAIN = -1
PIXEL = "pixel-gaussian"
AFFINE = "affine"


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    space: str = PIXEL
    n0: int = 100
    n: int = 100_000
    alpha: float = 0.001
    batch_size: int = 1000
    # clamp noisy pixels to [0, 1] before classifying, as during training
    clip: bool = True

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.space not in (PIXEL, AFFINE):
            raise ValueError(f"unknown smoothing space {self.space!r}")
        if not 0 < self.n0 <= self.n:
            raise ValueError("need 0 < n0 <= n")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class CountPair:
    zero: int
    one: int

    @property
    def total(self):
        return self.zero + self.one

    def __getitem__(self, cls):
        return (self.zero, self.one)[cls]

    def __add__(self, other):
        return CountPair(self.zero + other.zero, self.one + other.one)


@dataclass(frozen=True)
class CertOutcome:
    decision: int
    radius: float
    p_lower: float
    counts: CountPair = None

    @property
    def abstained(self):
        return self.decision == ABSTAIN


def authenticate(params, w, t, tau):
    """1 if the decoded message of ``w`` verifies against ``t`` at threshold ``tau``."""
    decoded = decode_bits(decode_probs(params, w))
    return int(verify(decoded, t, tau).passed)


def make_authenticator(params, t, tau):
    if not 0.5 < tau <= 1.0:
        raise ValueError(f"threshold must lie in (0.5, 1], got {tau}")
    t = np.asarray(t, dtype=np.uint8)

    def classify(batch):
        acc = bit_accuracy(decode_bits(decode_probs(params, batch)), t[None, :])
        return (np.atleast_1d(acc) >= tau).astype(np.int64)

    return classify


def _noisy_batch(w, config, size, rng):
    batch = np.broadcast_to(w, (size,) + w.shape)
    if config.space == PIXEL:
        return apply_gaussian_pixel(batch, config.sigma, rng, clip=config.clip)
    return apply_affine(batch, sample_affine(config.sigma, rng, size=size))


def sample_under_noise(classifier, w, config, count, rng):
    """Tally the classifier's votes over ``count`` random perturbations of ``w``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    w = np.asarray(w)
    ones = 0
    done = 0
    while done < count:
        size = min(config.batch_size, count - done)
        votes = np.asarray(classifier(_noisy_batch(w, config, size, rng)))
        ones += int(votes.sum())
        done += size
    return CountPair(count - ones, ones)


def lower_conf_bound(k, n, alpha):
    """One-sided (1 - alpha) Clopper-Pearson lower bound on a binomial proportion."""
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if k == 0:
        return 0.0
    return float(beta_dist.ppf(alpha, k, n - k + 1))


# Acklam's rational approximation to the normal quantile
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def std_normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def std_normal_inv_cdf(p):
    """Inverse standard normal CDF: rational approximation plus a Halley refinement."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) /
             ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1))
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q /
             (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1))
    else:
        q = math.sqrt(-2 * math.log1p(-p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) /
              ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1))
    # residual of the erfc-based CDF, taken on the small tail to keep precision
    if x > 0:
        e = (1 - p) - 0.5 * math.erfc(x / math.sqrt(2.0))
    else:
        e = std_normal_cdf(x) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def certify_from_counts(counts0, counts, sigma, alpha):
    """Turn selection and estimation tallies into a prediction and radius."""
    guess = 1 if counts0.one > counts0.zero else 0
    p_lower = lower_conf_bound(counts[guess], counts.total, alpha)
    if p_lower > 0.5:
        return CertOutcome(guess, sigma * std_normal_inv_cdf(p_lower), p_lower, counts)
    return CertOutcome(ABSTAIN, 0.0, p_lower, counts)


def certify(classifier, w, config, rng):
    """Monte Carlo certification of the smoothed classifier at ``w``.

    For pixel smoothing the radius bounds the l2 norm of a pixel perturbation;
    for affine smoothing it bounds the l2 norm of the six affine coefficients.
    """
    select_rng, estimate_rng = rng.spawn(2)
    counts0 = sample_under_noise(classifier, w, config, config.n0, select_rng)
    counts = sample_under_noise(classifier, w, config, config.n, estimate_rng)
    return certify_from_counts(counts0, counts, config.sigma, config.alpha)


def max_radius(config):
    """Largest radius any outcome can report (all N votes agree)."""
    return config.sigma * std_normal_inv_cdf(lower_conf_bound(config.n, config.n, config.alpha))


def smoothed_predict(classifier, w, config, count, rng):
    """Majority vote of the smoothed classifier (no abstention)."""
    counts = sample_under_noise(classifier, w, config, count, rng)
    return 1 if counts.one > counts.zero else 0


def certified_accuracy_curve(outcomes, truths, radii):
    """Fraction of samples that are correct and certified at each radius.

    Abstentions count as failures.
    """
    if len(outcomes) == 0:
        raise ValueError("no outcomes")
    if len(outcomes) != len(truths):
        raise ValueError("outcomes and truths differ in length")
    dec = np.array([o.decision for o in outcomes])
    rad = np.array([o.radius for o in outcomes])
    ok = dec == np.asarray(truths)
    return np.array([np.mean(ok & (rad >= r)) for r in radii])
