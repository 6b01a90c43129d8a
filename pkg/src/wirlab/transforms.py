"""Pixel noise, affine coordinate deformation and the training perturbation layer.

All functions accept a single image (H, W, C) or a batch (B, H, W, C).
Randomness comes only from the ``rng`` (a ``numpy.random.Generator``) passed in.
"""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d


@dataclass(frozen=True)
class GaussianPixel:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class Affine:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class Mixture:
    """Pick one branch per image with probability proportional to its weight."""
    branches: tuple

    def __post_init__(self):
        if not self.branches:
            raise ValueError("mixture needs at least one branch")
        weights = np.array([w for _, w in self.branches], dtype=np.float64)
        if np.any(weights <= 0):
            raise ValueError("mixture weights must be positive")
        total = weights.sum()
        object.__setattr__(self, "branches",
                           tuple((fam, float(w / total)) for (fam, _), w in zip(self.branches, weights)))

    @property
    def weights(self):
        return np.array([w for _, w in self.branches])


IDENTITY = GaussianPixel(0.0)


def apply_gaussian_pixel(img, sigma, rng, clip=True):
    """Add i.i.d. N(0, sigma^2) noise per pixel, then (by default) clamp to [0, 1]."""
    img = np.asarray(img)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img.copy()
    noisy = img + rng.normal(0.0, sigma, size=img.shape).astype(img.dtype, copy=False)
    return np.clip(noisy, 0, 1) if clip else noisy


def sample_affine(sigma, rng, size=None):
    """Draw beta ~ N(0, sigma^2 I_6); ``size`` prepends batch dimensions."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    shape = (6,) if size is None else tuple(np.atleast_1d(size)) + (6,)
    return rng.normal(0.0, sigma, size=shape)


def affine_norm(beta):
    return float(np.sqrt(np.sum(np.asarray(beta, dtype=np.float64) ** 2)))


def _normalized_grid(h, w):
    # row index -> i in [-1, 1], column index -> j in [-1, 1]
    i = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    j = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    return np.meshgrid(i, j, indexing="ij")


def apply_affine(img, beta):
    """Inverse-warp ``img`` by the displacement-about-identity ``beta``.

    Output position (i, j) samples the source at
    ``((1+b1) i + b2 j + b3, b4 i + (1+b5) j + b6)`` in normalized coordinates,
    using bilinear interpolation with edge-clamped borders. ``beta`` may be a
    single 6-vector or one row per image of a batch.
    """
    arr = np.asarray(img)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 1:
        beta = np.broadcast_to(beta, (batch.shape[0], 6))
    if not np.any(beta):
        return arr.copy()
    out = _bilinear_gather(batch, _affine_taps(beta, batch.shape[1], batch.shape[2]))
    out = out.astype(arr.dtype, copy=False)
    return out[0] if single else out


def _affine_taps(beta, h, w):
    """Integer corner indices and fractional offsets of every output pixel."""
    gi, gj = _normalized_grid(h, w)
    b1, b2, b3, b4, b5, b6 = (beta[:, k, None, None] for k in range(6))
    si = (1 + b1) * gi + b2 * gj + b3
    sj = b4 * gi + (1 + b5) * gj + b6
    # back to (fractional) pixel indices, then clamp to the edge texels
    pi = np.clip((si + 1) * 0.5 * (h - 1), 0, h - 1)
    pj = np.clip((sj + 1) * 0.5 * (w - 1), 0, w - 1)
    i0 = np.floor(pi).astype(np.intp)
    j0 = np.floor(pj).astype(np.intp)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    return i0, i1, j0, j1, (pi - i0)[..., None], (pj - j0)[..., None]


def _bilinear_gather(batch, taps):
    i0, i1, j0, j1, fi, fj = taps
    bidx = np.arange(batch.shape[0])[:, None, None]
    top = batch[bidx, i0, j0] * (1 - fj) + batch[bidx, i0, j1] * fj
    bottom = batch[bidx, i1, j0] * (1 - fj) + batch[bidx, i1, j1] * fj
    return top * (1 - fi) + bottom * fi


def _bilinear_scatter(dout, taps):
    """Adjoint of :func:`_bilinear_gather` (the warp is linear in the image)."""
    i0, i1, j0, j1, fi, fj = taps
    b, h, w, c = dout.shape
    dimg = np.zeros_like(dout)
    bidx = np.broadcast_to(np.arange(b)[:, None, None], i0.shape)
    for ii, jj, wt in ((i0, j0, (1 - fi) * (1 - fj)), (i0, j1, (1 - fi) * fj),
                       (i1, j0, fi * (1 - fj)), (i1, j1, fi * fj)):
        np.add.at(dimg, (bidx, ii, jj), (dout * wt).astype(dout.dtype, copy=False))
    return dimg


def gaussian_kernel1d(size, sigma):
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def blur(images, size, sigma):
    """Separable Gaussian blur over the two spatial axes of (..., H, W, C) arrays."""
    g = gaussian_kernel1d(size, sigma)
    axis = images.ndim - 3
    out = correlate1d(images, g, axis=axis, mode="reflect")
    return correlate1d(out, g, axis=axis + 1, mode="reflect")


def perturb(family, img, rng):
    """Apply the perturbation layer: independent draws for every image of a batch."""
    arr = np.asarray(img)
    if isinstance(family, GaussianPixel):
        return apply_gaussian_pixel(arr, family.sigma, rng)
    if isinstance(family, Affine):
        if arr.ndim == 3:
            return apply_affine(arr, sample_affine(family.sigma, rng))
        return apply_affine(arr, sample_affine(family.sigma, rng, size=arr.shape[0]))
    if isinstance(family, Mixture):
        if len(family.branches) == 1:
            return perturb(family.branches[0][0], arr, rng)
        if arr.ndim == 3:
            pick = rng.choice(len(family.branches), p=family.weights)
            return perturb(family.branches[pick][0], arr, rng)
        picks = rng.choice(len(family.branches), size=arr.shape[0], p=family.weights)
        out = arr.copy()
        for k, (branch, _) in enumerate(family.branches):
            sel = picks == k
            if sel.any():
                out[sel] = perturb(branch, arr[sel], rng)
        return out
    raise TypeError(f"unknown perturbation family {family!r}")


def perturb_with_grad(family, batch, rng):
    """Like :func:`perturb` on a batch, also returning the input-gradient map.

    The second return value maps dL/d(output) to dL/d(input): a clamp mask for
    pixel noise and the transposed bilinear warp for affine draws.
    """
    batch = np.asarray(batch)
    if isinstance(family, GaussianPixel):
        if family.sigma == 0:
            return batch.copy(), lambda d: d
        noisy = batch + rng.normal(0.0, family.sigma, size=batch.shape).astype(batch.dtype)
        mask = (noisy >= 0) & (noisy <= 1)
        return np.clip(noisy, 0, 1), lambda d: d * mask
    if isinstance(family, Affine):
        beta = sample_affine(family.sigma, rng, size=batch.shape[0])
        if not np.any(beta):
            return batch.copy(), lambda d: d
        taps = _affine_taps(beta, batch.shape[1], batch.shape[2])
        out = _bilinear_gather(batch, taps).astype(batch.dtype, copy=False)
        return out, lambda d: _bilinear_scatter(d, taps)
    if isinstance(family, Mixture):
        picks = rng.choice(len(family.branches), size=batch.shape[0], p=family.weights)
        out = batch.copy()
        parts = []
        for k, (branch, _) in enumerate(family.branches):
            sel = np.flatnonzero(picks == k)
            if sel.size:
                out[sel], back = perturb_with_grad(branch, batch[sel], rng)
                parts.append((sel, back))

        def backward(d):
            din = np.empty_like(d)
            for sel, back in parts:
                din[sel] = back(d[sel])
            return din
        return out, backward
    raise TypeError(f"unknown perturbation family {family!r}")


def family_from_str(text):
    """Parse ``none``, ``gaussian:0.25``, ``affine:0.01`` or
    ``mix:gaussian:0.05@0.5+affine:0.005@0.5``."""
    text = text.strip().lower()
    if text in ("none", "identity", "clean"):
        return IDENTITY
    if text.startswith("mix:"):
        branches = []
        for part in text[4:].split("+"):
            fam, _, weight = part.partition("@")
            branches.append((family_from_str(fam), float(weight or 1.0)))
        return Mixture(tuple(branches))
    kind, _, sigma = text.partition(":")
    if kind == "gaussian":
        return GaussianPixel(float(sigma))
    if kind == "affine":
        return Affine(float(sigma))
    raise ValueError(f"unknown perturbation {text!r}")


def family_to_str(family):
    if isinstance(family, GaussianPixel):
        return "none" if family.sigma == 0 else f"gaussian:{family.sigma!r}"
    if isinstance(family, Affine):
        return f"affine:{family.sigma!r}"
    return "mix:" + "+".join(f"{family_to_str(f)}@{w!r}" for f, w in family.branches)
