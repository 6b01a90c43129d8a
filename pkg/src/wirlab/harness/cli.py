"""Command line interface: ``wirlab <command> [options]``.

Global options (accepted before or after the command): ``--config``,
``--seed``, ``--out``, ``--threads``, ``--dry-run``.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

COMMANDS = ("train", "embed", "decode", "verify", "certify", "attack-forge",
            "attack-extract", "attack-link", "report", "run")


def _global_options(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=default(None), help="key = value config file")
    parser.add_argument("--seed", type=int, default=default(None), help="global seed (unsigned 64-bit)")
    parser.add_argument("--out", default=default("wirlab-out"), help="output directory")
    parser.add_argument("--threads", type=int, default=default(1), help="worker threads")
    parser.add_argument("--dry-run", action="store_true", default=default(False),
                        help="validate inputs and write the plan only")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser():
    parser = argparse.ArgumentParser(prog="wirlab", description=__doc__.splitlines()[0])
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def cmd(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    p = cmd("train", "train one regime and save its model")
    p.add_argument("--regime", default="clean", choices=("clean", "wer", "wcr-gaussian", "wcr-affine"))
    p.add_argument("--ril", action="store_true", help="add residual-information fine-tuning")
    p.add_argument("--model", help="model path (default <out>/<regime>.wirm)")

    p = cmd("embed", "watermark an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--secret", required=True, help="bit string, e.g. 0110...")
    p.add_argument("--output", required=True, help="PNG or PPM path (8-bit, rounded)")

    p = cmd("decode", "decode the message of an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)

    p = cmd("verify", "authenticate an image against a secret")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--secret", required=True)
    p.add_argument("--fpr", type=float, default=0.01, help="false-positive budget for the threshold")

    p = cmd("certify", "certify authentication under randomized smoothing")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--secret", required=True)
    p.add_argument("--space", default="pixel-gaussian", choices=("pixel-gaussian", "affine"))
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--n0", type=int, default=100)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--fpr", type=float, default=0.01)

    p = cmd("attack-forge", "overlay a user's averaged residuals onto a new image")
    p.add_argument("--model", help="needed only to score against --secret")
    p.add_argument("--watermarked", nargs="+", required=True)
    p.add_argument("--originals", nargs="+", help="matching originals (exact residuals); "
                                                   "without them residuals are low-pass estimates")
    p.add_argument("--target", required=True)
    p.add_argument("--zeta", type=float, default=1.0)
    p.add_argument("--output", required=True)
    p.add_argument("--secret", help="victim secret, to report forged bit accuracy")

    p = cmd("attack-extract", "recover a secret by querying the encoder")
    p.add_argument("--model", required=True, help="encoder used as the query oracle")
    p.add_argument("--watermarked", required=True)
    p.add_argument("--original", help="original of --watermarked (else low-pass estimate)")
    p.add_argument("--probe", required=True)
    p.add_argument("--secret", help="true secret, to report attack bit accuracy")

    p = cmd("attack-link", "cluster residuals by hidden identity")
    p.add_argument("--watermarked", nargs="+", required=True)
    p.add_argument("--originals", nargs="+")
    p.add_argument("-k", type=int, required=True, help="number of presumed users")
    p.add_argument("--pca-dims", type=int, default=8)

    cmd("report", "summarize a finished run directory (--out)")
    cmd("run", "full experiment: all regimes, certification and attacks")
    return parser


def _set_threads(k):
    # must happen before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(k))


def _config(args):
    from .config import ExperimentConfig, load_config, override
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = override(cfg, seed=args.seed)
    return cfg


def _image(path, params):
    from .data import read_image
    img = read_image(path, params.config.channels)
    side = params.config.side
    if img.shape[:2] != (side, side):
        raise SystemExit(f"{path}: image is {img.shape[1]}x{img.shape[0]}, model expects {side}x{side}")
    return img


def _images(paths, channels=None):
    from .data import read_image
    return [read_image(p, channels) for p in paths]


def _secret(text, n=None):
    from ..core import bits_from_str
    bits = bits_from_str(text)
    if n is not None and len(bits) != n:
        raise SystemExit(f"secret has {len(bits)} bits, model expects {n}")
    return bits


def _residuals(watermarked, originals):
    from ..attacks import estimate_residual
    if originals:
        if len(originals) != len(watermarked):
            raise SystemExit("need one original per watermarked image")
        return [estimate_residual(w, x) for w, x in zip(watermarked, originals)]
    return [estimate_residual(w, method="lowpass") for w in watermarked]


def cmd_train(args, out):
    from .config import override
    from .data import load_dataset
    from .experiment import TRAIN_COLUMNS, model_name, train_models, write_csv
    from .modelio import save_model
    cfg = override(_config(args), regimes=(args.regime,), ril="on" if args.ril else "off")
    name = model_name(args.regime, args.ril)
    path = Path(args.model) if args.model else out / f"{name}.wirm"
    if args.dry_run:
        print(f"would train {name} into {path}")
        return 0
    models = train_models(cfg, load_dataset(cfg.dataset_spec()))
    model = models[name]
    save_model(model.params, path)
    rows = [dict(row, stage=stage) for stage, rep in model.history for row in rep.rows]
    write_csv(out / f"train_{name}.csv", TRAIN_COLUMNS, rows)
    print(f"saved {path}; final validation bit accuracy {rows[-1]['val_bit_acc']:.4f}")
    return 0


def cmd_embed(args, out):
    from ..codec import encode
    from ..core import psnr
    from .data import write_image
    from .modelio import load_model
    params = load_model(args.model)
    x = _image(args.image, params)
    t = _secret(args.secret, params.config.n_bits)
    if args.dry_run:
        return 0
    w = encode(params, x, t)
    write_image(args.output, w)
    print(f"wrote {args.output} (PSNR {psnr(w, x):.2f} dB before 8-bit rounding)")
    return 0


def cmd_decode(args, out):
    import numpy as np
    from ..codec import decode_bits, decode_probs
    from ..core import bits_to_str
    from .modelio import load_model
    params = load_model(args.model)
    probs = decode_probs(params, _image(args.image, params))
    print(bits_to_str(decode_bits(probs)))
    print(" ".join(f"{p:.4f}" for p in np.asarray(probs, dtype=float)))
    return 0


def cmd_verify(args, out):
    from ..codec import decode_bits, decode_probs
    from ..core import compute_threshold, verify
    from .modelio import load_model
    params = load_model(args.model)
    t = _secret(args.secret, params.config.n_bits)
    tau = compute_threshold(params.config.n_bits, args.fpr)
    res = verify(decode_bits(decode_probs(params, _image(args.image, params))), t, tau)
    print(f"bit_accuracy={res.bit_accuracy:.4f} threshold={tau:.4f} pass={int(res.passed)}")
    return 0 if res.passed else 2


def cmd_certify(args, out):
    import numpy as np
    from ..certify import SmoothingConfig, certify, make_authenticator
    from ..core import compute_threshold
    from .modelio import load_model
    params = load_model(args.model)
    t = _secret(args.secret, params.config.n_bits)
    w = _image(args.image, params)
    smoothing = SmoothingConfig(args.sigma, args.space, args.n0, args.n, args.alpha)
    if args.dry_run:
        return 0
    tau = compute_threshold(params.config.n_bits, args.fpr)
    rng = np.random.default_rng(args.seed or 0)
    outcome = certify(make_authenticator(params, t, tau), w, smoothing, rng)
    decision = "abstain" if outcome.abstained else outcome.decision
    unit = "pixel l2" if args.space == "pixel-gaussian" else "affine-parameter l2"
    print(f"decision={decision} radius={outcome.radius:.6f} ({unit}) p_lower={outcome.p_lower:.6f}")
    return 0


def cmd_attack_forge(args, out):
    from ..attacks import forge
    from ..codec import decode_bits, decode_probs
    from ..core import bit_accuracy
    from .data import read_image, write_image
    from .modelio import load_model
    params = load_model(args.model) if args.model else None
    channels = params.config.channels if params else None
    ws = _images(args.watermarked, channels)
    xs = _images(args.originals, channels) if args.originals else None
    target = read_image(args.target, channels)
    forged = forge(_residuals(ws, xs), target, args.zeta)
    write_image(args.output, forged)
    print(f"wrote {args.output} from {len(ws)} residual(s)")
    if args.secret and params is not None:
        t = _secret(args.secret, params.config.n_bits)
        acc = bit_accuracy(decode_bits(decode_probs(params, forged)), t)
        print(f"forged_bit_accuracy={float(acc):.4f}")
    return 0


def cmd_attack_extract(args, out):
    from ..attacks import extract_secret
    from ..codec import encode
    from ..core import bit_accuracy, bits_to_str
    from .modelio import load_model
    params = load_model(args.model)
    w = _image(args.watermarked, params)
    x = [_image(args.original, params)] if args.original else None
    z = _residuals([w], x)[0]
    probe = _image(args.probe, params)
    res = extract_secret(lambda xx, tt: encode(params, xx, tt), z, probe, params.config.n_bits)
    print(f"extracted={bits_to_str(res.bits)} queries={res.queries}")
    if args.secret:
        t = _secret(args.secret, params.config.n_bits)
        print(f"attack_bit_accuracy={float(bit_accuracy(res.bits, t)):.4f}")
    return 0


def cmd_attack_link(args, out):
    from ..attacks import link_identities
    from .experiment import write_csv
    ws = _images(args.watermarked)
    xs = _images(args.originals) if args.originals else None
    res = link_identities(_residuals(ws, xs), args.k, args.pca_dims, seed=args.seed or 0)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "link.csv", ("image", "label"),
              [{"image": p, "label": int(lab)} for p, lab in zip(args.watermarked, res.labels)])
    print(f"silhouette={res.silhouette:.4f}; labels in {out / 'link.csv'}")
    return 0


def cmd_report(args, out):
    from .experiment import render_report
    text = render_report(out)
    (out / "report.md").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_run(args, out):
    from .experiment import main_exit_code, run_experiment
    result = run_experiment(_config(args), out, dry_run=args.dry_run, threads=args.threads)
    print(f"{result.status}: {out}" + (f" ({result.error})" if result.error else ""))
    return main_exit_code(result)


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    if args.command not in ("report",):
        out.mkdir(parents=True, exist_ok=True)
    try:
        return HANDLERS[args.command](args, out)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
