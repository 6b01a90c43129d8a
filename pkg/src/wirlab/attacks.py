"""Identity-leakage attacks on watermark residuals: forgery, extraction, linking.

Attack code only ever sees watermarked images, residuals and black-box encoder
queries; ground-truth secrets are used by callers for scoring.
"""
from dataclasses import dataclass

import numpy as np

from .core import overlay, pearson_r, residual
from .transforms import blur

LOWPASS_SIZE = 5
LOWPASS_SIGMA = 1.0


@dataclass(frozen=True)
class ExtractionResult:
    bits: np.ndarray
    queries: int


@dataclass(frozen=True)
class LinkingResult:
    labels: np.ndarray
    silhouette: float
    intra_distances: np.ndarray
    features: np.ndarray


class CountingOracle:
    """Wraps a black-box encoder ``(x, t) -> w`` and counts queries."""

    def __init__(self, encoder):
        self.encoder = encoder
        self.queries = 0

    def __call__(self, x, t):
        self.queries += 1
        return self.encoder(x, t)


def estimate_residual(w, x=None, method="exact"):
    """Residual of a watermarked image.

    ``exact`` needs the original ``x``; ``lowpass`` estimates the original as a
    Gaussian blur of ``w``. Other estimators (e.g. a learned autoencoder) can be
    passed as ``method``: any callable mapping ``w`` to an estimated original.
    """
    if callable(method):
        return residual(w, method(w))
    if method == "exact":
        if x is None:
            raise ValueError("exact residual needs the original image")
        return residual(w, x)
    if method == "lowpass":
        w64 = np.asarray(w, dtype=np.float64)
        return w64 - blur(w64, LOWPASS_SIZE, LOWPASS_SIGMA)
    raise ValueError(f"unknown residual estimator {method!r}")


def forge(residuals, x_new, zeta=1.0):
    """Overlay ``zeta`` times the mean of a user's residuals onto a fresh image."""
    residuals = [np.asarray(z) for z in residuals]
    if not residuals:
        raise ValueError("need at least one residual")
    mean = np.mean(np.stack(residuals), axis=0)
    return overlay(x_new, mean, zeta)


def extract_secret(encoder_oracle, z_target, x_probe, n):
    """Recover a secret bit by bit from residual distances.

    Start from all zeros; for each bit, keep it set only if setting it brings the
    probe's residual closer to the target residual. The residual of the current
    guess is cached, so the encoder is queried n + 1 times.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    oracle = CountingOracle(encoder_oracle)
    x = np.asarray(x_probe, dtype=np.float64)
    target = np.asarray(z_target, dtype=np.float64).ravel()
    t = np.zeros(n, dtype=np.uint8)
    current = np.linalg.norm(residual(oracle(x_probe, t), x).ravel() - target)
    for i in range(n):
        trial = t.copy()
        trial[i] = 1
        dist = np.linalg.norm(residual(oracle(x_probe, trial), x).ravel() - target)
        if dist < current:
            t, current = trial, dist
    return ExtractionResult(t, oracle.queries)


def _inertia(points, labels, centroids):
    return float(np.sum((points - centroids[labels]) ** 2))


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def kmeans(points, k, seed=0, max_iter=100, return_history=False):
    """Lloyd's algorithm from k-means++ seeding. Returns ``(labels, centroids)``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if len(pts) == 0 or not 1 <= k <= len(pts):
        raise ValueError(f"k must lie in [1, {len(pts)}]")
    rng = np.random.default_rng(seed)
    centroids = [pts[rng.integers(len(pts))]]
    for _ in range(1, k):
        d2 = _sq_dists(pts, np.array(centroids)).min(axis=1)
        if d2.sum() == 0:
            # all remaining points coincide with a centroid
            centroids.append(pts[rng.integers(len(pts))])
        else:
            centroids.append(pts[rng.choice(len(pts), p=d2 / d2.sum())])
    centroids = np.array(centroids)
    labels = _sq_dists(pts, centroids).argmin(axis=1)
    history = [_inertia(pts, labels, centroids)]
    for _ in range(max_iter):
        new = centroids.copy()
        for c in range(k):
            members = pts[labels == c]
            if len(members):
                new[c] = members.mean(axis=0)
        new_labels = _sq_dists(pts, new).argmin(axis=1)
        history.append(_inertia(pts, new_labels, new))
        converged = np.array_equal(new_labels, labels) and np.allclose(new, centroids)
        centroids, labels = new, new_labels
        if converged:
            break
    if return_history:
        return labels, centroids, history
    return labels, centroids


def silhouette_score(points, labels):
    """Mean silhouette coefficient; singleton clusters score 0, as do points with a = b = 0."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ValueError("silhouette needs at least two clusters")
    dist = np.sqrt(_sq_dists(pts, pts))
    scores = np.zeros(len(pts))
    for i in range(len(pts)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == c].mean() for c in clusters if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def pca_features(vectors, dims):
    """Project row vectors onto their leading principal components."""
    data = np.asarray(vectors, dtype=np.float64).reshape(len(vectors), -1)
    centered = data - data.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    dims = min(dims, vt.shape[0])
    return centered @ vt[:dims].T


def link_identities(residuals, k, pca_dims=8, seed=0):
    """Cluster residuals into ``k`` presumed users and score the clustering."""
    if k < 2:
        raise ValueError("k must be >= 2")
    feats = pca_features(residuals, pca_dims)
    labels, _ = kmeans(feats, k, seed=seed)
    if len(np.unique(labels)) < 2:
        sil = 0.0
    else:
        sil = silhouette_score(feats, labels)
    intra = []
    for c in range(k):
        members = feats[labels == c]
        if len(members) < 2:
            intra.append(0.0)
            continue
        d = np.sqrt(_sq_dists(members, members))
        intra.append(d.sum() / (len(members) * (len(members) - 1)))
    return LinkingResult(labels, sil, np.array(intra), feats)


def leakage_correlation(encoder_oracle, x, k, rng, n=None):
    """Pearson r between secret Hamming distances and residual distances.

    Embeds ``k`` random secrets into the same image and correlates, over all
    pairs, the Hamming distance of the secrets with the Euclidean distance of
    their residuals.
    """
    if k < 3:
        raise ValueError("need k >= 3 secrets")
    if n is None:
        raise ValueError("message length n is required")
    secrets = rng.integers(0, 2, size=(k, n), dtype=np.uint8)
    if np.all(secrets == secrets[0]):
        raise ValueError("all sampled secrets are equal")
    x64 = np.asarray(x, dtype=np.float64)
    res = np.stack([residual(encoder_oracle(x, t), x64).ravel() for t in secrets])
    ham, dist = [], []
    for i in range(k):
        for j in range(i + 1, k):
            ham.append(np.sum(secrets[i] != secrets[j]))
            dist.append(np.linalg.norm(res[i] - res[j]))
    return pearson_r(ham, dist)
