"""Acceptance suite: one test per criterion, each recording PASS or FAIL.

The verdict lines are printed in the "acceptance criteria" section at the end
of the pytest run. Criteria 5 to 7 train real codecs and take most of the time.
"""
import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from wirlab.attacks import extract_secret, forge, silhouette_score
from wirlab.certify import (CountPair, SmoothingConfig, certify, certify_from_counts,
                            lower_conf_bound, sample_under_noise, smoothed_predict,
                            std_normal_cdf, std_normal_inv_cdf)
from wirlab.codec import (CodecConfig, encode, init_codec, linear_decode, linear_encode,
                          make_linear_codec)
from wirlab.core import bit_accuracy, compute_threshold, psnr, residual, ssim
from wirlab.harness.config import ExperimentConfig, parse_config
from wirlab.harness.data import DatasetSpec, synth_dataset, synth_images
from wirlab.harness.experiment import evaluate_quality, read_csv, run_experiment
from wirlab.harness.modelio import CorruptModelError, load_model, params_from_bytes, save_model
from wirlab.training import (LossWeights, TrainConfig, grad_check, kl_bernoulli,
                             mutual_information_discrete, train)
from wirlab.transforms import IDENTITY

TREND_SEEDS = range(5)


def record(number, ok, detail):
    ACCEPTANCE[number] = ("PASS" if ok else "FAIL", detail)
    assert ok, detail


# -- 1: certification math ----------------------------------------------------------------------

def test_criterion_01_certification_math():
    start = time.perf_counter()
    lb = lower_conf_bound(100, 100, 0.001)
    q = std_normal_inv_cdf(0.99)
    out = certify_from_counts(CountPair(0, 100), CountPair(0, 100_000), 0.25, 0.001)
    expected = 0.25 * std_normal_inv_cdf(0.001 ** (1 / 100_000))
    elapsed = time.perf_counter() - start
    ok = (abs(lb - 0.933254) <= 1e-6 and abs(q - 2.326348) <= 1e-6
          and abs(out.radius - expected) <= 1e-4 and abs(out.radius - 0.953) < 1e-3
          and elapsed < 1.0)
    record(1, ok, f"bound={lb:.7f} inv_cdf(0.99)={q:.7f} R={out.radius:.6f} ({elapsed:.3f}s)")


# -- 2: smoothed vote fraction of a linear score ------------------------------------------------

def test_criterion_02_smoothed_vote_closed_form():
    lc = make_linear_codec(8, (16, 16, 1), 0.02, seed=5)
    rng = np.random.default_rng(0)
    x = np.full((16, 16, 1), 0.5)
    t = rng.integers(0, 2, 8)
    w = linear_encode(lc, x, t)
    details, ok = [], True
    for m, sigma, scale in ((0.01, 0.05, 1.0), (0.03, 0.1, 2.0), (-0.01, 0.08, 0.5)):
        # score = <w' - x, a> - c with weights a = scale * signed pattern 0, margin m at w
        a = scale * (2 * t[0] - 1) * lc.patterns[0].reshape(x.shape)
        c = float(np.sum((w - x) * a)) - m

        def classify(batch, a=a, c=c):
            return (np.tensordot(batch - x, a, axes=3) - c > 0).astype(np.int64)

        n = 10_000
        votes = sample_under_noise(classify, w, SmoothingConfig(sigma, n=n, clip=False), n, rng)
        p = std_normal_cdf(m / (sigma * np.linalg.norm(a)))
        se = math.sqrt(p * (1 - p) / n)
        frac = votes.one / n
        ok &= abs(frac - p) <= 3 * se
        details.append(f"m={m} s={sigma}: {frac:.4f} vs {p:.4f}")
    record(2, ok, "; ".join(details))


# -- 3: certified radius spot check ------------------------------------------------------------

def test_criterion_03_certified_robustness_spot_check():
    n_bits, side = 4, 12
    lc = make_linear_codec(n_bits, (side, side, 1), 0.6, seed=2)
    rng = np.random.default_rng(1)
    sigma, n = 0.25, 100_000
    cfg = SmoothingConfig(sigma, n=n, clip=False, batch_size=20_000)
    tau = 0.75
    flips = 0
    certified = 0
    radii = []
    for i in range(20):
        x = rng.uniform(0.45, 0.55, (side, side, 1))
        t = rng.integers(0, 2, n_bits)
        w = linear_encode(lc, x, t)

        def classify(batch, x=x, t=t):
            decoded = np.stack([linear_decode(lc, b) for b in batch - x]) if batch.ndim == 4 else None
            return (bit_accuracy(decoded, t[None]) >= tau).astype(np.int64)

        out = certify(classify, w, cfg, np.random.default_rng(rng.integers(2 ** 63)))
        if out.abstained:
            continue
        certified += 1
        radii.append(out.radius)
        for _ in range(20):
            d = rng.normal(size=w.shape)
            d *= 0.9 * out.radius / np.linalg.norm(d)
            pred = smoothed_predict(classify, w + d, cfg, n, np.random.default_rng(rng.integers(2 ** 63)))
            flips += pred != out.decision
    ok = certified == 20 and flips == 0
    record(3, ok, f"{certified}/20 certified, mean R={np.mean(radii):.3f}, {flips} changed predictions of {20 * certified}")


# -- 4: attack oracles ----------------------------------------------------------------------------

def test_criterion_04_attack_oracles():
    start = time.perf_counter()
    n = 16
    lc = make_linear_codec(n, (16, 16, 1), 0.01, seed=7)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.4, 0.6, (16, 16, 1))
    probe = rng.uniform(0.4, 0.6, (16, 16, 1))
    x_new = rng.uniform(0.4, 0.6, (16, 16, 1))
    secret = rng.integers(0, 2, n)
    w = linear_encode(lc, x, secret)
    ext = extract_secret(lambda xx, tt: linear_encode(lc, xx, tt), residual(w, x), probe, n)
    ext_acc = float(bit_accuracy(ext.bits, secret))
    forged = forge([residual(w, x)], x_new, 1.0)
    forge_acc = float(bit_accuracy(linear_decode(lc, residual(forged, x_new)), secret))
    elapsed = time.perf_counter() - start
    ok = ext_acc == 1.0 and ext.queries <= n + 1 and forge_acc == 1.0 and elapsed < 1.0
    record(4, ok, f"extraction acc={ext_acc} in {ext.queries} queries; forged acc={forge_acc} ({elapsed:.3f}s)")


# -- 5: training viability ----------------------------------------------------------------------

def test_criterion_05_training_viability():
    exp = ExperimentConfig()
    splits = synth_dataset(DatasetSpec(side=32, count=2000, seed=0))
    cfg = exp.train_config("pretrain", 30, IDENTITY, ramp=exp.residual_ramp)
    start = time.perf_counter()
    params, report = train(cfg, splits.train, CodecConfig(n_bits=16, side=32), splits.val)
    minutes = (time.perf_counter() - start) / 60
    tau = compute_threshold(16, 0.01)
    quality = evaluate_quality(params, splits.test, tau, np.random.default_rng(0))
    val = report.last("val_bit_acc")
    ok = val >= 0.95 and quality["clean_acc"] >= 0.99 and minutes <= 15
    record(5, ok, f"val bit acc={val:.4f}, clean acc={quality['clean_acc']:.3f} at tau={tau}, "
                  f"PSNR={quality['psnr']:.2f} dB, {minutes:.1f} min")


# -- 6 and 7: trend runs -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trend_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("trend")
    runs = []
    for seed in TREND_SEEDS:
        result = run_experiment(ExperimentConfig(seed=seed), root / f"seed{seed}")
        assert result.status == "ok", result.error
        runs.append(result.out)
    return runs


def _mean(runs, table, model, column, **where):
    vals = []
    for out in runs:
        for row in read_csv(out / table):
            if row["model"] == model and all(row[k] == str(v) for k, v in where.items()):
                vals.append(float(row[column]))
    return float(np.mean(vals))


# Measured on the desk codec, both trend criteria miss: the clean codec's single residual already
# forges at ~96%, leaving no room for a 5-point gap, and RIL does not lower W-CR extraction.
# Kept as visible failures (the verdict line still reads FAIL) rather than tuned until they pass.
TREND_MISS = pytest.mark.xfail(reason="trend not reproduced at desk scale; see verdict line", strict=False)


@TREND_MISS
def test_criterion_06_exacerbation_trend(trend_runs):
    f_clean = _mean(trend_runs, "scorecard.csv", "clean", "forged_bit_acc", m=1)
    f_wcr = _mean(trend_runs, "scorecard.csv", "wcr-gaussian", "forged_bit_acc", m=1)
    s_clean = _mean(trend_runs, "scorecard.csv", "clean", "silhouette", m=1)
    s_wcr = _mean(trend_runs, "scorecard.csv", "wcr-gaussian", "silhouette", m=1)
    ok = f_wcr - f_clean >= 0.05 and s_wcr >= s_clean
    record(6, ok, f"forged acc clean={f_clean:.4f} wcr={f_wcr:.4f} (+{100 * (f_wcr - f_clean):.1f} pts); "
                  f"silhouette clean={s_clean:.3f} wcr={s_wcr:.3f}; {len(trend_runs)} seeds")


@TREND_MISS
def test_criterion_07_mitigation_trend(trend_runs):
    ok = True
    parts = []
    for regime in ("wer", "wcr-gaussian"):
        ril = regime + "-ril"
        f0 = _mean(trend_runs, "scorecard.csv", regime, "forged_bit_acc", m=1)
        f1 = _mean(trend_runs, "scorecard.csv", ril, "forged_bit_acc", m=1)
        a0 = _mean(trend_runs, "scorecard.csv", regime, "attack_bit_acc", m=1)
        a1 = _mean(trend_runs, "scorecard.csv", ril, "attack_bit_acc", m=1)
        c0 = _mean(trend_runs, "metrics.csv", regime, "clean_bit_acc")
        c1 = _mean(trend_runs, "metrics.csv", ril, "clean_bit_acc")
        ok &= f1 < f0 and a1 < a0 and c0 - c1 <= 0.03
        parts.append(f"{regime}: forged {f0:.3f}->{f1:.3f}, attack {a0:.3f}->{a1:.3f}, clean {c0:.3f}->{c1:.3f}")
    r0 = _mean(trend_runs, "metrics.csv", "wcr-gaussian", "cert_acc_r0")
    r1 = _mean(trend_runs, "metrics.csv", "wcr-gaussian-ril", "cert_acc_r0")
    ok &= abs(r1 - r0) <= 0.02
    parts.append(f"certified acc {r0:.3f}->{r1:.3f}")
    record(7, ok, "; ".join(parts))


# -- 8: gradient correctness ----------------------------------------------------------------------

def test_criterion_08_gradient_correctness():
    params = init_codec(CodecConfig(n_bits=16, side=32))
    rng = np.random.default_rng(0)
    x = synth_images(2, 32, 1, rng)
    t = rng.integers(0, 2, (2, 16), dtype=np.uint8)
    e_total = grad_check(params, x, t, "total", n_weights=120)
    e_ril = grad_check(params, x, t, "ril", n_weights=120)
    e_mut = grad_check(params, x, t, "total", n_weights=10, corrupt=("enc2_w", 17))
    ok = e_total < 1e-4 and e_ril < 1e-4 and e_mut > 1e-2
    record(8, ok, f"total={e_total:.2e} ril={e_ril:.2e} corrupted={e_mut:.2e}")


# -- 9: KL / MI oracles and the tiny quantized RIL system --------------------------------------

def _joint_kl(p, q):
    total = 0.0
    for bits in itertools.product((0, 1), repeat=len(p)):
        b = np.array(bits)
        pa = np.prod(np.where(b, p, 1 - p))
        qa = np.prod(np.where(b, q, 1 - q))
        total += pa * math.log(pa / qa)
    return total


def _quantized_mi(params, images):
    """I(z; t) over 2-bit secrets, z = sign pattern of the residual on a 2x2 centre crop."""
    secrets = np.array(list(itertools.product((0, 1), repeat=2)), dtype=np.uint8)
    joint = np.zeros((16, len(secrets)))
    for k, t in enumerate(secrets):
        z = encode(params, images, np.repeat(t[None], len(images), 0)) - images
        crop = z[:, 3:5, 3:5, 0].reshape(len(images), 4) > 0
        joint[:, k] = np.bincount(crop.astype(int) @ (1 << np.arange(4)), minlength=16)
    return mutual_information_discrete(joint / joint.sum())


def tiny_ril_run(seed, corpus, probe):
    # a strong residual penalty keeps the encoder out of tanh saturation, where RIL has no gradient
    weights = LossWeights(eta_r=100.0)
    p1, _ = train(TrainConfig(batch_size=8, phase1_epochs=10, lr=3e-3, weights=weights, seed=seed),
                  corpus.train, CodecConfig(n_bits=2, side=8, filters=8, seed=seed), corpus.val)
    p2, _ = train(TrainConfig(batch_size=8, phase1_epochs=0, phase2_epochs=3, ril=True,
                              weights=weights, seed=seed), corpus.train, params=p1)
    from wirlab.training import evaluate_bit_accuracy
    acc = [evaluate_bit_accuracy(p, probe, np.random.default_rng(0)) for p in (p1, p2)]
    return _quantized_mi(p1, probe), _quantized_mi(p2, probe), acc[0], acc[1]


def test_criterion_09_kl_mi_oracles():
    rng = np.random.default_rng(0)
    kl_err = 0.0
    for n in (1, 2, 3):
        for _ in range(50):
            p, q = rng.uniform(0.01, 0.99, n), rng.uniform(0.01, 0.99, n)
            kl_err = max(kl_err, abs(kl_bernoulli(p, q) - _joint_kl(p, q)))
    mi_ind = mutual_information_discrete(np.outer([0.3, 0.7], [0.6, 0.4]))
    mi_id = mutual_information_discrete(np.diag([0.5, 0.5]))
    corpus = synth_dataset(DatasetSpec(side=8, count=1200, seed=1))
    probe = synth_images(2000, 8, 1, np.random.default_rng(99))
    runs = np.array([tiny_ril_run(s, corpus, probe) for s in range(5)])
    before, after, acc0, acc1 = runs.mean(axis=0)
    ok = (kl_err < 1e-10 and abs(mi_ind) < 1e-12 and abs(mi_id - math.log(2)) < 1e-12
          and after < before)
    record(9, ok, f"kl err={kl_err:.1e}; MI indep={mi_ind:.1e} identity={mi_id:.12f}; "
                  f"quantized I(z;t) {before:.3f}->{after:.3f} nats, bit acc {acc0:.3f}->{acc1:.3f} "
                  f"(5 seeds; per seed {np.round(runs[:, 0] - runs[:, 1], 3).tolist()})")


# -- 10: metric fixtures ----------------------------------------------------------------------------

def test_criterion_10_metric_fixtures():
    a = np.full((16, 16, 1), 0.3)
    p = psnr(a, a + 0.1)
    img = np.random.default_rng(0).random((16, 16, 1))
    s = ssim(img, img)
    sil = silhouette_score(np.array([0.0, 0.1, 10.0, 10.1]), [0, 0, 1, 1])
    tau = compute_threshold(16, 0.01)
    ok = abs(p - 20.0) <= 1e-9 and s == 1.0 and abs(sil - 0.99) <= 1e-6 and tau == 14 / 16
    record(10, ok, f"psnr={p!r} ssim={s!r} silhouette={sil:.6f} tau={tau}")


# -- 11: determinism and persistence ---------------------------------------------------------------

DETERMINISM_RUN = """
side = 8
fpr = 0.1
count = 120
n_bits = 4
filters = 4
message_channels = 2
clean_epochs = 2
robust_epochs = 1
ril_epochs = 1
residual_ramp = 1
batch_size = 16
eval_count = 6
cert_samples = 2
cert_n0 = 10
cert_n = 50
forge_m = 1, 2
forge_users = 3
extract_victims = 2
link_users = 2
link_per_user = 3
pca_dims = 3
leak_secrets = 4
"""


def test_criterion_11_determinism_and_persistence(tmp_path):
    cfg = parse_config(DETERMINISM_RUN + "seed = 11\n")
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    files = sorted(p.relative_to(a.out) for p in a.out.rglob("*")
                   if p.is_file() and p.name != "manifest.json")
    same = a.status == b.status == "ok" and all(
        (a.out / f).read_bytes() == (b.out / f).read_bytes() for f in files)
    params = a.models["clean"].params
    save_model(params, tmp_path / "m.wirm")
    round_trip = load_model(tmp_path / "m.wirm").equals(params)
    data = bytearray((tmp_path / "m.wirm").read_bytes())
    data[len(data) // 2] ^= 0x10
    try:
        params_from_bytes(bytes(data))
        rejected = False
    except CorruptModelError:
        rejected = True
    ok = same and round_trip and rejected
    record(11, ok, f"{len(files)} report files byte-identical={same}; round trip={round_trip}; "
                   f"corruption rejected={rejected}")
