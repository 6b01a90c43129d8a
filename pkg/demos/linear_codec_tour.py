"""Embed, certify, forge and extract with the analytic linear codec.

Runs in a few seconds: python3 demos/linear_codec_tour.py
"""
import numpy as np

from wirlab.attacks import extract_secret, forge
from wirlab.certify import SmoothingConfig, certify
from wirlab.codec import linear_decode, linear_encode, make_linear_codec
from wirlab.core import bit_accuracy, residual


def main():
    rng = np.random.default_rng(0)
    n, side = 8, 16
    lc = make_linear_codec(n, (side, side, 1), 0.05, seed=1)
    x = rng.uniform(0.4, 0.6, (side, side, 1))
    secret = rng.integers(0, 2, n)
    w = linear_encode(lc, x, secret)
    print("secret        ", secret)
    print("decoded       ", linear_decode(lc, residual(w, x)))

    def authenticate(batch):
        decoded = np.stack([linear_decode(lc, b) for b in batch - x])
        return (bit_accuracy(decoded, secret[None]) >= 0.75).astype(np.int64)

    out = certify(authenticate, w, SmoothingConfig(0.03, n=10_000, clip=False), rng)
    print(f"certified     decision={out.decision} radius={out.radius:.3f}")

    x_new = rng.uniform(0.4, 0.6, x.shape)
    forged = forge([residual(w, x)], x_new)
    print("forged decode ", linear_decode(lc, residual(forged, x_new)))

    ext = extract_secret(lambda xx, tt: linear_encode(lc, xx, tt), residual(w, x), x_new, n)
    print(f"extracted      {ext.bits} in {ext.queries} encoder queries")


if __name__ == "__main__":
    main()
