"""Losses, the two-phase training loop, Adam, gradient checking and a discrete MI oracle.

Phase 1 trains encoder and decoder on ``eta_m * L_M + eta_r * L_R`` with the
perturbation layer between them. Phase 2 (optional) updates the encoder only,
minimising the residual information loss
``KL(P_z || P_w) - KL(P_w || P_z)`` where ``P_w`` decodes the watermarked image
and ``P_z`` decodes the (shifted) residual.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import codec
from .codec import (DECODER_KEYS, ENCODER_KEYS, PARAM_KEYS, RESIDUAL_SHIFT,
                    decoder_backward, decoder_forward, encoder_backward,
                    encoder_forward, init_codec)
from .transforms import IDENTITY, perturb_with_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


@dataclass(frozen=True)
class LossWeights:
    eta_m: float = 1.0
    eta_r: float = 10.0
    # LPIPS and adversarial terms are not implemented; kept so configs can name them.
    eta_p: float = 0.0
    eta_a: float = 0.0
    lambda_ril: float = 1.0

    def __post_init__(self):
        if min(self.eta_m, self.eta_r, self.lambda_ril) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eta_p or self.eta_a:
            raise ValueError("perceptual and adversarial losses are not supported")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    phase1_epochs: int = 30
    phase2_epochs: int = 0
    family: object = IDENTITY
    weights: LossWeights = LossWeights()
    ril: bool = False
    # "sequential": phase 2 runs as its own epoch block after phase 1.
    # "interleaved": every batch does a phase-1 step then a phase-2 step.
    ril_schedule: str = "sequential"
    # eta_r rises linearly from 0 over this many phase-1 epochs; without it the
    # residual penalty erases the watermark before the decoder locks on
    residual_ramp: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("batch size must be positive and epochs non-negative")
        if self.residual_ramp < 0:
            raise ValueError("residual_ramp must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.ril_schedule not in ("sequential", "interleaved"):
            raise ValueError(f"unknown ril_schedule {self.ril_schedule!r}")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params, keys=PARAM_KEYS):
        return cls({k: np.zeros_like(params[k]) for k in keys},
                   {k: np.zeros_like(params[k]) for k in keys})


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)

    COLUMNS = ("phase", "epoch", "loss_message", "loss_residual", "loss_ril",
               "train_bit_acc", "val_bit_acc")

    def add(self, **row):
        self.rows.append({c: row.get(c, float("nan")) for c in self.COLUMNS})

    def last(self, column):
        vals = [r[column] for r in self.rows if not np.isnan(r[column])]
        return vals[-1] if vals else float("nan")


# -- losses -----------------------------------------------------------------

def loss_message(probs, t):
    """Mean binary cross-entropy in nats over bits (and batch)."""
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if p.shape[-1] != t.shape[-1]:
        raise ValueError("probability and message lengths differ")
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log(1 - p)))


def loss_residual(w, x):
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape != x.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((w - x) ** 2))


def loss_total(l_m, l_r, weights=LossWeights()):
    return weights.eta_m * l_m + weights.eta_r * l_r


def kl_bernoulli(p, q):
    """KL divergence between factorized Bernoulli distributions, summed over the last axis."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    out = np.sum(p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q)), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def loss_ril(probs_w, probs_z):
    """Residual information loss for one sample (or per row of a batch)."""
    return kl_bernoulli(probs_z, probs_w) - kl_bernoulli(probs_w, probs_z)


def _ril_grads(pw, pz):
    """d loss_ril / d pw and d loss_ril / d pz, elementwise."""
    lw = np.log(pw / (1 - pw))
    lz = np.log(pz / (1 - pz))
    # d KL(a||b)/da = logit(a) - logit(b); d KL(a||b)/db = (b - a) / (b (1 - b))
    d_pw = (pw - pz) / (pw * (1 - pw)) - (lw - lz)
    d_pz = (lz - lw) - (pz - pw) / (pz * (1 - pz))
    return d_pw, d_pz


def mutual_information_discrete(joint):
    """Mutual information (nats) of a 2-D joint probability table."""
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2 or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
        raise ValueError("joint must be a non-negative 2-D table summing to 1")
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pa @ pb)[nz])))


# -- optimizer --------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update over the keys present in ``grads``, in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {k}")
    state.step += 1
    c1 = 1 - ADAM_BETA1 ** state.step
    c2 = 1 - ADAM_BETA2 ** state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        params.weights[k] = (params.weights[k] - step).astype(params.weights[k].dtype)
    return params, state


# -- forward/backward for the two objectives ---------------------------------

def total_loss_and_grads(params, x, t, weights=LossWeights(), family=IDENTITY, rng=None):
    """Phase-1 objective and gradients for all weights.

    Gradients flow through the sampled perturbation (noise values and affine
    draws held fixed), so the encoder learns against the same distortion.
    """
    w, ecache = encoder_forward(params, x, t)
    if family is IDENTITY or rng is None:
        dec_in, through = w, None
    else:
        dec_in, through = perturb_with_grad(family, w, rng)
    probs, dcache = decoder_forward(params, dec_in)
    tf = t.astype(probs.dtype)
    l_m = loss_message(probs, t)
    l_r = loss_residual(w, x)
    # dL_M/dp for mean BCE over batch and bits
    dp = (probs - tf) / (probs * (1 - probs)) / probs.size * weights.eta_m
    d_in, grads = decoder_backward(params, dp.astype(probs.dtype), dcache, need_input_grad=True)
    if through is not None:
        d_in = through(d_in)
    dw = d_in + (2.0 * weights.eta_r / w.size) * (w - x.astype(w.dtype))
    grads.update(encoder_backward(params, dw.astype(w.dtype), ecache))
    return loss_total(l_m, l_r, weights), {"loss_message": l_m, "loss_residual": l_r,
                                           "probs": probs, "w": w}, grads


def ril_loss_and_grads(params, x, t, scale=1.0):
    """Batch-mean residual information loss and its encoder gradients."""
    w, ecache = encoder_forward(params, x, t)
    z_in = w - x.astype(w.dtype) + w.dtype.type(RESIDUAL_SHIFT)
    pw, cw = decoder_forward(params, w)
    pz, cz = decoder_forward(params, z_in)
    b = w.shape[0]
    value = float(np.mean(loss_ril(pw, pz)))
    d_pw, d_pz = _ril_grads(pw.astype(np.float64), pz.astype(np.float64))
    d_pw = (scale * d_pw / b).astype(w.dtype)
    d_pz = (scale * d_pz / b).astype(w.dtype)
    dw_direct, _ = decoder_backward(params, d_pw, cw, need_input_grad=True, need_weight_grad=False)
    dz, _ = decoder_backward(params, d_pz, cz, need_input_grad=True, need_weight_grad=False)
    # z = w - x, so the residual path reaches the encoder through w unchanged
    grads = encoder_backward(params, dw_direct + dz, ecache)
    return scale * value, {"pw": pw, "pz": pz, "w": w}, grads


# -- training loop -----------------------------------------------------------

def _bit_acc(probs, t):
    return float(np.mean(codec.decode_bits(probs) == t))


def evaluate_bit_accuracy(params, images, rng, batch_size=256):
    """Mean bit accuracy of decode(encode(x, t)) over random messages."""
    n = params.config.n_bits
    accs = []
    for start in range(0, len(images), batch_size):
        xb = images[start:start + batch_size]
        t = rng.integers(0, 2, size=(len(xb), n), dtype=np.uint8)
        w, _ = encoder_forward(params, xb, t)
        probs, _ = decoder_forward(params, w)
        accs.append(np.mean(codec.decode_bits(probs) == t, axis=1))
    return float(np.mean(np.concatenate(accs))) if accs else float("nan")


def _check_finite(value, epoch):
    if not np.isfinite(value):
        raise TrainingDiverged("non-finite loss", epoch)


def train(config, train_images, codec_config=None, val_images=None, params=None):
    """Run phase 1 then (if ``config.ril``) phase 2. Returns ``(params, TrainReport)``.

    ``params`` continues training from existing weights (e.g. a clean model
    fine-tuned into a robust regime); otherwise fresh weights are drawn.
    """
    train_images = np.asarray(train_images, dtype=codec.DTYPE)
    if len(train_images) == 0:
        raise ValueError("empty training set")
    if params is None:
        if codec_config is None:
            raise ValueError("need a codec config or starting params")
        params = init_codec(codec_config)
    else:
        params = params.copy()
    n = params.config.n_bits
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    order_rng, msg_rng, noise_rng, eval_rng = (np.random.default_rng(s) for s in seeds)
    # one optimizer state for both phases, so lambda_ril scales the RIL step
    # relative to the phase-1 gradients instead of being normalized away
    state = AdamState.zeros_like(params)
    report = TrainReport()
    val = None if val_images is None else np.asarray(val_images, dtype=codec.DTYPE)
    interleaved = config.ril and config.ril_schedule == "interleaved"

    def batches():
        order = order_rng.permutation(len(train_images))
        for start in range(0, len(order), config.batch_size):
            xb = train_images[order[start:start + config.batch_size]]
            yield xb, msg_rng.integers(0, 2, size=(len(xb), n), dtype=np.uint8)

    def val_acc():
        if val is None or len(val) == 0:
            return float("nan")
        return evaluate_bit_accuracy(params, val, np.random.default_rng(eval_rng.integers(2**63)))

    for epoch in range(config.phase1_epochs):
        weights = config.weights
        if config.residual_ramp and epoch < config.residual_ramp:
            weights = replace(weights, eta_r=weights.eta_r * epoch / config.residual_ramp)
        sums = np.zeros(4)
        count = 0
        for xb, t in batches():
            loss, aux, grads = total_loss_and_grads(params, xb, t, weights,
                                                    config.family, noise_rng)
            _check_finite(loss, epoch)
            adam_step(params, grads, state, config.lr)
            ril = float("nan")
            if interleaved:
                ril, _, egrads = ril_loss_and_grads(params, xb, t, config.weights.lambda_ril)
                _check_finite(ril, epoch)
                adam_step(params, egrads, state, config.lr)
            k = len(xb)
            sums += k * np.array([aux["loss_message"], aux["loss_residual"],
                                  0.0 if np.isnan(ril) else ril, _bit_acc(aux["probs"], t)])
            count += k
        m = sums / count
        report.add(phase=1, epoch=epoch, loss_message=m[0], loss_residual=m[1],
                   loss_ril=m[2] if interleaved else float("nan"),
                   train_bit_acc=m[3], val_bit_acc=val_acc())
        log.info("phase 1 epoch %d: L_M=%.4f L_R=%.2e acc=%.4f", epoch, m[0], m[1], m[3])

    if config.ril and config.ril_schedule == "sequential":
        for epoch in range(config.phase2_epochs):
            sums = np.zeros(2)
            count = 0
            for xb, t in batches():
                ril, aux, egrads = ril_loss_and_grads(params, xb, t, config.weights.lambda_ril)
                _check_finite(ril, epoch)
                adam_step(params, egrads, state, config.lr)
                k = len(xb)
                sums += k * np.array([ril, _bit_acc(aux["pw"], t)])
                count += k
            m = sums / count
            report.add(phase=2, epoch=epoch, loss_ril=m[0], train_bit_acc=m[1],
                       val_bit_acc=val_acc())
            log.info("phase 2 epoch %d: L_RIL=%.4f acc=%.4f", epoch, m[0], m[1])
    return params, report


# -- numerical gradient check -------------------------------------------------

def _activation_pattern(params, x, t, path):
    """Bytes identifying every ReLU and clamp branch taken by the forward pass."""
    w, ecache = encoder_forward(params, x, t)
    inputs = [w]
    if path == "ril":
        inputs.append(w - x + RESIDUAL_SHIFT)
    parts = [ecache[2], ecache[4], ecache[7]]
    for img in inputs:
        _, dcache = decoder_forward(params, img)
        parts += [dcache[1], dcache[3], dcache[7]]
    return b"".join(np.packbits(m).tobytes() for m in parts)


def grad_check(params, x, t, path="total", n_weights=120, step=1e-3, seed=0,
               weights=LossWeights(), corrupt=None, return_details=False):
    """Max relative error between analytic and central-difference gradients.

    Runs in float64. ``path`` is ``"total"`` (all weights) or ``"ril"`` (encoder
    weights only). A coordinate whose +/-step evaluations take different
    ReLU/clamp branches straddles a kink, where central differences are
    meaningless; it is skipped and another is drawn. ``corrupt`` names a
    ``(key, flat_index)`` whose analytic gradient is zeroed and which is always
    checked, to prove a broken backward pass gets caught.
    """
    p64 = params.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    if path == "total":
        keys = PARAM_KEYS

        def objective(p):
            return total_loss_and_grads(p, x64, t, weights)[0]

        grads = total_loss_and_grads(p64, x64, t, weights)[2]
    elif path == "ril":
        keys = ENCODER_KEYS

        def objective(p):
            return ril_loss_and_grads(p, x64, t)[0]

        grads = ril_loss_and_grads(p64, x64, t)[2]
    else:
        raise ValueError(f"unknown path {path!r}")
    rng = np.random.default_rng(seed)
    sizes = np.array([p64[k].size for k in keys])
    if corrupt is not None:
        grads[corrupt[0]] = grads[corrupt[0]].copy()
        grads[corrupt[0]].flat[corrupt[1]] = 0.0

    def draw():
        if corrupt is not None and checked == 0:
            return corrupt
        i = rng.choice(len(keys), p=sizes / sizes.sum())
        return keys[i], int(rng.integers(sizes[i]))

    worst = 0.0
    checked = skipped = 0
    while checked < n_weights:
        key, idx = draw()
        orig = p64.weights[key].flat[idx]
        p64.weights[key].flat[idx] = orig + step
        up, sig_up = objective(p64), _activation_pattern(p64, x64, t, path)
        p64.weights[key].flat[idx] = orig - step
        down, sig_down = objective(p64), _activation_pattern(p64, x64, t, path)
        p64.weights[key].flat[idx] = orig
        if sig_up != sig_down and not (corrupt is not None and checked == 0):
            skipped += 1
            if skipped > 50 * n_weights:
                raise RuntimeError("almost every coordinate straddles a kink; use a smaller step")
            continue
        numeric = (up - down) / (2 * step)
        analytic = grads[key].flat[idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
        checked += 1
    if return_details:
        return worst, {"checked": checked, "skipped": skipped}
    return worst
