"""End-to-end experiment: train every regime, then evaluate quality,
certification and the three identity-leakage attacks, writing CSV reports.

Output directory layout::

    manifest.json            config, digest, seeds, versions, stage timings, status
    config.txt               the resolved configuration
    metrics.csv              one row per model: clean accuracy, PSNR, SSIM, certification summary
    scorecard.csv            one row per (model, m): forgery, extraction, linking, leakage
    certified_accuracy.csv   model, radius, certified_accuracy
    cert_<model>.csv         per-sample certification rows
    train_<model>.csv        per-epoch training history of every stage behind a model
    models/<model>.wirm      trained weights
    plots/<model>.csv        (plots = true) one certified-accuracy curve per file

Every CSV except the manifest is a deterministic function of the config;
wall-clock times live only in the manifest.
"""
import csv
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..attacks import estimate_residual, extract_secret, forge, leakage_correlation, link_identities
from ..certify import ABSTAIN, certified_accuracy_curve, certify, make_authenticator, max_radius
from ..codec import decode_bits, decode_probs, encode
from ..core import bit_accuracy, compute_threshold, psnr, ssim
from ..training import TrainReport, train
from ..transforms import GaussianPixel, family_to_str
from .data import load_dataset
from .modelio import save_model

log = logging.getLogger(__name__)

TRAIN_COLUMNS = ("stage",) + TrainReport.COLUMNS
METRIC_COLUMNS = ("model", "regime", "ril", "clean_bit_acc", "clean_acc", "psnr", "ssim",
                  "cert_space", "cert_sigma", "cert_acc_r0", "abstain_rate", "mean_radius")
SCORE_COLUMNS = ("model", "regime", "ril", "family", "sigma", "m", "zeta", "estimator",
                 "forged_bit_acc", "forged_pass_rate", "attack_bit_acc", "silhouette",
                 "leakage_r", "forged_psnr", "forged_ssim")
CERT_COLUMNS = ("sample_id", "truth", "decision", "p_lower", "radius", "votes_zero", "votes_one")


def model_name(regime, ril):
    return f"{regime}-ril" if ril else regime


def fmt(value):
    """Stable text for CSV cells."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return "" if value is None else str(value)


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in columns])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class Model:
    name: str
    regime: str
    ril: bool
    params: object
    history: list = field(default_factory=list)  # (stage, TrainReport)


@dataclass
class ExperimentResult:
    out: Path
    status: str
    metrics: list = field(default_factory=list)
    scorecard: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    error: str = None


class _Stages:
    """Records wall time per named stage for the manifest."""

    def __init__(self):
        self.times = {}

    def run(self, name, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.times[name] = round(time.perf_counter() - start, 3)


# -- training ------------------------------------------------------------------

def train_models(cfg, splits, stages=None):
    """Clean pretraining, then per regime a robust stage and a with/without-RIL stage.

    The two RIL variants of a regime share the fine-tuning seed, so they see
    the same batches, messages and noise; only the RIL steps differ.
    """
    stages = stages or _Stages()
    base_cfg = cfg.train_config("pretrain", cfg.clean_epochs, GaussianPixel(0.0),
                                ramp=cfg.residual_ramp)
    pretrained, pre_report = stages.run("train:pretrain", train, base_cfg, splits.train,
                                        cfg.codec_config(), splits.val)
    models = {}
    for idx, regime in enumerate(cfg.regimes):
        family = cfg.family(regime)
        history = [("pretrain", pre_report)]
        if regime == "clean":
            start = pretrained
        else:
            rcfg = cfg.train_config("robust", cfg.robust_epochs, family, counter=(idx,))
            start, rreport = stages.run(f"train:{regime}", train, rcfg, splits.train,
                                        None, splits.val, pretrained)
            history.append(("robust", rreport))
        for ril in cfg.ril_variants():
            name = model_name(regime, ril)
            if cfg.ril_schedule == "sequential" and not ril:
                params, hist = start, history
            else:
                fcfg = cfg.train_config("finetune", cfg.ril_epochs, family, ril=ril, counter=(idx,))
                if cfg.ril_schedule == "sequential":
                    fcfg = cfg.train_config("finetune", 0, family, ril=True, counter=(idx,))
                params, freport = stages.run(f"train:{name}", train, fcfg, splits.train,
                                             None, splits.val, start)
                hist = history + [("finetune", freport)]
            models[name] = Model(name, regime, ril, params, hist)
    return models


# -- evaluation -----------------------------------------------------------------

def _messages(rng, count, n):
    return rng.integers(0, 2, size=(count, n), dtype=np.uint8)


def evaluate_quality(params, images, tau, rng):
    t = _messages(rng, len(images), params.config.n_bits)
    w = encode(params, images, t)
    acc = bit_accuracy(decode_bits(decode_probs(params, w)), t)
    x64 = images.astype(np.float64)
    return {
        "clean_bit_acc": float(np.mean(acc)),
        "clean_acc": float(np.mean(acc >= tau)),
        "psnr": float(np.mean([psnr(a, b) for a, b in zip(w, x64)])),
        "ssim": float(np.mean([ssim(a, b) for a, b in zip(w, x64)])) if images.shape[1] >= 11 else float("nan"),
    }


def certify_model(params, images, smoothing, tau, cfg, threads=1):
    """Certify ``cfg.cert_samples`` authentic test images.

    Sample i uses message and noise streams derived from (certify, i), shared
    across models so comparisons use common random numbers. Returns
    ``(rows, outcomes, seconds_per_sample)``.
    """
    count = min(cfg.cert_samples, len(images))

    def one(i):
        rng = cfg.stage_rng("certify", i)
        t = _messages(rng, 1, params.config.n_bits)[0]
        w = encode(params, images[i], t)
        start = time.perf_counter()
        outcome = certify(make_authenticator(params, t, tau), w, smoothing, rng)
        return outcome, time.perf_counter() - start

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(one, range(count)))
    else:
        done = [one(i) for i in range(count)]
    outcomes = [o for o, _ in done]
    rows = [{"sample_id": i, "truth": 1, "decision": o.decision, "p_lower": o.p_lower,
             "radius": o.radius, "votes_zero": o.counts.zero, "votes_one": o.counts.one}
            for i, o in enumerate(outcomes)]
    return rows, outcomes, [round(s, 4) for _, s in done]


def _pools(cfg, test):
    need = cfg.link_users * cfg.link_per_user
    if len(test) < max(need, 4, 2 * max(cfg.forge_m)):
        raise ValueError(f"test split has {len(test)} images; attacks need at least "
                         f"{max(need, 4, 2 * max(cfg.forge_m))}")
    half = len(test) // 2
    return test[:half], test[half:]


def attack_model(params, test, tau, cfg):
    """Forgery, extraction, linking and leakage-correlation scores for one model.

    Victim images come from the first half of the test split, forgery targets
    and extraction probes from the disjoint second half.
    """
    n = params.config.n_bits
    victims, targets = _pools(cfg, test)

    def residuals_of(w, x):
        return estimate_residual(w, x, method=cfg.estimator)

    rng = cfg.stage_rng("forge")
    secrets = _messages(rng, cfg.forge_users, n)
    forge_rows = []
    for m in cfg.forge_m:
        accs, passes, q_psnr, q_ssim = [], [], [], []
        for u, t in enumerate(secrets):
            pick = rng.choice(len(victims), size=min(m, len(victims)), replace=False)
            x = victims[pick].astype(np.float64)
            z = residuals_of(encode(params, victims[pick], t), x)
            target = targets[rng.integers(len(targets))].astype(np.float64)
            forged = forge(list(z), target, cfg.zeta)
            acc = bit_accuracy(decode_bits(decode_probs(params, forged)), t)
            accs.append(acc)
            passes.append(acc >= tau)
            q_psnr.append(psnr(forged, target))
            if target.shape[0] >= 11:
                q_ssim.append(ssim(forged, target))
        forge_rows.append({"m": m, "forged_bit_acc": float(np.mean(accs)),
                           "forged_pass_rate": float(np.mean(passes)),
                           "forged_psnr": float(np.mean(np.minimum(q_psnr, 1e3))),
                           "forged_ssim": float(np.mean(q_ssim)) if q_ssim else float("nan")})

    rng = cfg.stage_rng("extract")
    oracle = lambda x, t: encode(params, x, t)  # noqa: E731
    ext = []
    for _ in range(cfg.extract_victims):
        t = _messages(rng, 1, n)[0]
        i = rng.integers(len(victims))
        z = residuals_of(encode(params, victims[i], t), victims[i].astype(np.float64))
        probe = targets[rng.integers(len(targets))]
        ext.append(bit_accuracy(extract_secret(oracle, z, probe, n).bits, t))

    rng = cfg.stage_rng("link")
    users = _messages(rng, cfg.link_users, n)
    pick = rng.permutation(len(test))[:cfg.link_users * cfg.link_per_user]
    labels = np.repeat(np.arange(cfg.link_users), cfg.link_per_user)
    imgs = test[pick]
    z = residuals_of(encode(params, imgs, users[labels]), imgs.astype(np.float64))
    linking = link_identities(z, cfg.link_users, cfg.pca_dims, seed=cfg.stage_seed("link", 1))

    rng = cfg.stage_rng("leak")
    leak = leakage_correlation(oracle, test[0], cfg.leak_secrets, rng, n)

    common = {"zeta": cfg.zeta, "estimator": cfg.estimator,
              "attack_bit_acc": float(np.mean(ext)), "silhouette": linking.silhouette,
              "leakage_r": leak}
    return [dict(common, **row) for row in forge_rows]


def _family_sigma(family):
    return getattr(family, "sigma", None)


# -- orchestration ----------------------------------------------------------------

def _manifest(cfg, out, stages, status, error=None, extra=None):
    doc = {
        "status": status,
        "error": error,
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": cfg.to_text().splitlines(),
        "stage_seeds": {
            "data": cfg.stage_seed("data"), "init": cfg.stage_seed("init"),
            "pretrain": cfg.stage_seed("pretrain"),
            "robust": [cfg.stage_seed("robust", i) for i in range(len(cfg.regimes))],
            "finetune": [cfg.stage_seed("finetune", i) for i in range(len(cfg.regimes))],
        },
        "seed_derivation": "numpy SeedSequence(seed, spawn_key=(stage_id, *counters))",
        "versions": {"wirlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "stage_seconds": stages.times,
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(cfg, out, dry_run=False, threads=1):
    """Run the full protocol into ``out``. Never raises for stage failures:
    the error is recorded in the manifest and reported via ``status``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stages = _Stages()
    if dry_run:
        _manifest(cfg, out, stages, "dry-run")
        return ExperimentResult(out, "dry-run")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    result = ExperimentResult(out, "running")
    cert_times = {}
    try:
        splits = stages.run("data", load_dataset, cfg.dataset_spec())
        models = train_models(cfg, splits, stages)
        result.models = models
        (out / "models").mkdir(exist_ok=True)
        tau = compute_threshold(cfg.n_bits, cfg.fpr)
        test = splits.test
        eval_imgs = test[:cfg.eval_count]
        for name, model in models.items():
            save_model(model.params, out / "models" / f"{name}.wirm")
            rows = [dict(row, stage=stage) for stage, rep in model.history for row in rep.rows]
            write_csv(out / f"train_{name}.csv", TRAIN_COLUMNS, rows)

            metrics = {"model": name, "regime": model.regime, "ril": model.ril}
            metrics.update(stages.run(f"quality:{name}", evaluate_quality, model.params,
                                      eval_imgs, tau, cfg.stage_rng("eval")))
            smoothing = cfg.smoothing(model.regime)
            if smoothing is not None:
                cert_rows, outcomes, secs = stages.run(
                    f"certify:{name}", certify_model, model.params, test, smoothing, tau, cfg, threads)
                cert_times[name] = secs
                write_csv(out / f"cert_{name}.csv", CERT_COLUMNS, cert_rows)
                radii = np.linspace(0.0, max_radius(smoothing), cfg.radius_steps)
                curve = certified_accuracy_curve(outcomes, [1] * len(outcomes), radii)
                result.curves[name] = (radii, curve)
                metrics.update({"cert_space": smoothing.space, "cert_sigma": smoothing.sigma,
                                "cert_acc_r0": float(curve[0]),
                                "abstain_rate": float(np.mean([o.decision == ABSTAIN for o in outcomes])),
                                "mean_radius": float(np.mean([o.radius for o in outcomes]))})
            result.metrics.append(metrics)

            family = cfg.family(model.regime)
            scores = stages.run(f"attacks:{name}", attack_model, model.params, test, tau, cfg)
            for row in scores:
                row.update({"model": name, "regime": model.regime, "ril": model.ril,
                            "family": family_to_str(family), "sigma": _family_sigma(family)})
            result.scorecard.extend(scores)

        write_csv(out / "metrics.csv", METRIC_COLUMNS, result.metrics)
        write_csv(out / "scorecard.csv", SCORE_COLUMNS, result.scorecard)
        curve_rows = [{"model": name, "radius": r, "certified_accuracy": a}
                      for name, (radii, acc) in result.curves.items() for r, a in zip(radii, acc)]
        write_csv(out / "certified_accuracy.csv", ("model", "radius", "certified_accuracy"), curve_rows)
        if cfg.plots:
            (out / "plots").mkdir(exist_ok=True)
            for name, (radii, acc) in result.curves.items():
                write_csv(out / "plots" / f"{name}.csv", ("radius", "certified_accuracy"),
                          [{"radius": r, "certified_accuracy": a} for r, a in zip(radii, acc)])
        result.status = "ok"
    except Exception as exc:  # recorded, not swallowed: status and manifest carry it
        log.exception("experiment failed")
        result.status = "failed"
        result.error = f"{type(exc).__name__}: {exc}"
    _manifest(cfg, out, stages, result.status, result.error,
              {"certify_seconds_per_sample": cert_times,
               "files": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())})
    return result


def render_report(out):
    """Markdown summary of a finished run directory."""
    out = Path(out)
    lines = ["# Experiment report", ""]
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    lines += [f"status: {manifest['status']}, seed: {manifest['seed']}, "
              f"config sha256: {manifest['config_sha256'][:12]}", ""]
    if manifest["status"] != "ok":
        if manifest.get("error"):
            lines.append(f"error: {manifest['error']}")
        return "\n".join(lines) + "\n"

    def table(rows, cols):
        body = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        for r in rows:
            cells = []
            for c in cols:
                v = r.get(c, "")
                try:
                    v = f"{float(v):.4f}" if v not in ("", None) and c not in ("model", "regime", "m") else v
                except ValueError:
                    pass
                cells.append(str(v))
            body.append("| " + " | ".join(cells) + " |")
        return body

    lines += ["## Quality and certification", ""]
    lines += table(read_csv(out / "metrics.csv"),
                   ("model", "clean_bit_acc", "clean_acc", "psnr", "ssim", "cert_acc_r0", "mean_radius"))
    lines += ["", "## Identity leakage", ""]
    lines += table(read_csv(out / "scorecard.csv"),
                   ("model", "m", "forged_bit_acc", "forged_pass_rate", "attack_bit_acc",
                    "silhouette", "leakage_r"))
    return "\n".join(lines) + "\n"


def main_exit_code(result):
    return 0 if result.status in ("ok", "dry-run") else 1
