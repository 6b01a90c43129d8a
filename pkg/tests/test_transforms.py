import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wirlab.transforms import (IDENTITY, Affine, GaussianPixel, Mixture, affine_norm,
                               apply_affine, apply_gaussian_pixel, blur, family_from_str,
                               family_to_str, perturb, perturb_with_grad, sample_affine)


def ramp(h=16, w=16):
    # value = normalized column coordinate mapped to [0.25, 0.75]
    j = np.linspace(-1, 1, w)
    return np.broadcast_to(0.5 + 0.25 * j, (h, w))[:, :, None].copy()


def test_family_validation():
    with pytest.raises(ValueError):
        GaussianPixel(-1)
    with pytest.raises(ValueError):
        Affine(-0.1)
    with pytest.raises(ValueError):
        Mixture(())
    with pytest.raises(ValueError):
        Mixture(((IDENTITY, 0.0),))


def test_mixture_weights_normalized():
    m = Mixture(((GaussianPixel(0.1), 2.0), (Affine(0.01), 6.0)))
    assert abs(m.weights.sum() - 1) < 1e-12
    np.testing.assert_allclose(m.weights, [0.25, 0.75])


# -- gaussian pixel noise -----------------------------------------------------------

def test_gaussian_zero_sigma_identity():
    img = np.random.default_rng(0).random((8, 8, 1))
    np.testing.assert_array_equal(apply_gaussian_pixel(img, 0.0, np.random.default_rng(1)), img)


def test_gaussian_variance_monte_carlo():
    sigma = 0.1
    img = np.full((10, 10, 1), 0.5)
    draws = np.stack([apply_gaussian_pixel(img, sigma, np.random.default_rng(s), clip=False)
                      for s in range(1000)])  # 10^5 pixel draws
    d = (draws - 0.5).ravel()
    var = d.var()
    se = sigma ** 2 * np.sqrt(2 / (d.size - 1))
    assert abs(var - sigma ** 2) < 3 * se


def test_gaussian_clamped_by_default():
    img = np.full((8, 8, 1), 0.95)
    out = apply_gaussian_pixel(img, 0.5, np.random.default_rng(0))
    assert out.min() >= 0 and out.max() <= 1
    raw = apply_gaussian_pixel(img, 0.5, np.random.default_rng(0), clip=False)
    assert raw.max() > 1


def test_gaussian_reproducible():
    img = np.random.default_rng(0).random((8, 8, 1))
    a = apply_gaussian_pixel(img, 0.2, np.random.default_rng(5))
    b = apply_gaussian_pixel(img, 0.2, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


# -- affine -----------------------------------------------------------------------

def test_sample_affine_moments():
    sigma = 0.02
    beta = sample_affine(sigma, np.random.default_rng(0), size=100_000)
    assert beta.shape == (100_000, 6)
    var = beta.var(axis=0)
    se = sigma ** 2 * np.sqrt(2 / (len(beta) - 1))
    assert np.all(np.abs(var - sigma ** 2) < 3 * se)
    r = np.corrcoef(beta.T)
    assert np.abs(r[~np.eye(6, dtype=bool)]).max() < 0.02
    np.testing.assert_array_equal(sample_affine(0.0, np.random.default_rng(0)), np.zeros(6))


def test_affine_norm():
    assert affine_norm(np.zeros(6)) == 0
    assert affine_norm([0.03, 0, 0, 0, 0.04, 0]) == pytest.approx(0.05, abs=1e-15)
    b = np.random.default_rng(3).normal(size=6)
    assert abs(affine_norm(b) - np.sqrt(sum(v * v for v in b))) < 1e-12


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_affine_zero_is_identity(seed):
    img = np.random.default_rng(seed).random((9, 12, 3))
    np.testing.assert_array_equal(apply_affine(img, np.zeros(6)), img)


@settings(max_examples=20)
@given(st.lists(st.floats(-0.3, 0.3), min_size=6, max_size=6), st.floats(0, 1))
def test_affine_constant_image_invariant(beta, c):
    img = np.full((10, 10, 1), c)
    np.testing.assert_allclose(apply_affine(img, np.array(beta)), c, atol=1e-12)


def test_affine_translation_of_ramp():
    img = ramp()
    delta = 0.1
    out = apply_affine(img, np.array([0, 0, 0, 0, 0, delta]))
    j = np.linspace(-1, 1, 16)
    expected = 0.5 + 0.25 * (j + delta)
    # interior columns whose source stays inside the image are exact
    inner = j + delta <= 1
    np.testing.assert_allclose(out[:, inner, 0], np.broadcast_to(expected[inner], (16, inner.sum())),
                               atol=1e-12)


def test_affine_translations_compose():
    img = ramp()
    a = apply_affine(apply_affine(img, np.array([0, 0, 0, 0, 0, 0.05])), np.array([0, 0, 0, 0, 0, 0.07]))
    b = apply_affine(img, np.array([0, 0, 0, 0, 0, 0.12]))
    j = np.linspace(-1, 1, 16)
    # keep columns whose bilinear neighbours never touch the clamped border
    inner = j + 0.12 + 2 / 15 <= 1
    np.testing.assert_allclose(a[:, inner], b[:, inner], atol=1e-6)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.0, 0.2))
def test_affine_range_preserved(seed, sigma):
    rng = np.random.default_rng(seed)
    img = rng.random((8, 8, 1))
    out = apply_affine(img, sample_affine(sigma, rng))
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


def test_affine_batch_uses_rows():
    rng = np.random.default_rng(0)
    batch = rng.random((3, 8, 8, 1))
    beta = sample_affine(0.05, rng, size=3)
    out = apply_affine(batch, beta)
    for i in range(3):
        np.testing.assert_allclose(out[i], apply_affine(batch[i], beta[i]), atol=1e-12)


# -- perturbation layer -----------------------------------------------------------------

def test_perturb_degenerate_families_are_identity():
    img = np.random.default_rng(0).random((4, 8, 8, 1))
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(perturb(GaussianPixel(0), img, rng), img)
    both = Mixture(((GaussianPixel(0), 0.5), (Affine(0), 0.5)))
    np.testing.assert_array_equal(perturb(both, img, rng), img)


def test_single_branch_mixture_matches_branch():
    img = np.random.default_rng(0).random((4, 8, 8, 1))
    fam = GaussianPixel(0.1)
    a = perturb(Mixture(((fam, 1.0),)), img, np.random.default_rng(3))
    b = perturb(fam, img, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_perturb_with_grad_is_adjoint():
    # <backward(d), v> must equal <d, J v> for the (linear) warp
    rng = np.random.default_rng(0)
    batch = rng.random((2, 8, 8, 1))
    out, back = perturb_with_grad(Affine(0.05), batch, np.random.default_rng(4))
    d = rng.normal(size=out.shape)
    v = rng.normal(size=batch.shape)
    jv, _ = perturb_with_grad(Affine(0.05), v, np.random.default_rng(4))
    assert np.sum(back(d) * v) == pytest.approx(np.sum(d * jv), rel=1e-10)


def test_perturb_with_grad_matches_perturb_values():
    batch = np.random.default_rng(0).random((4, 8, 8, 1))
    fam = Mixture(((GaussianPixel(0.1), 0.5), (Affine(0.02), 0.5)))
    out, back = perturb_with_grad(fam, batch, np.random.default_rng(2))
    assert out.shape == batch.shape and out.min() >= 0 and out.max() <= 1
    assert back(np.ones_like(out)).shape == batch.shape


@pytest.mark.parametrize("text", ["none", "gaussian:0.25", "affine:0.01",
                                  "mix:gaussian:0.05@0.5+affine:0.005@0.5"])
def test_family_string_roundtrip(text):
    fam = family_from_str(text)
    assert family_from_str(family_to_str(fam)) == fam


def test_family_string_errors():
    with pytest.raises(ValueError):
        family_from_str("jpeg:50")


def test_blur_preserves_constants():
    img = np.full((2, 10, 10, 1), 0.3)
    np.testing.assert_allclose(blur(img, 5, 1.0), 0.3, atol=1e-12)
