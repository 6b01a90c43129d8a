"""Experiment configuration and its flat ``key = value`` text format.

One setting per line; ``#`` starts a comment; list values are comma separated.
Unknown keys are an error. The recognised keys and their defaults are the
fields of :class:`ExperimentConfig` (see ``KEYS``).
"""
import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from ..certify import AFFINE, PIXEL, SmoothingConfig
from ..codec import CodecConfig
from ..core import compute_threshold
from ..training import LossWeights, TrainConfig
from ..transforms import Affine, GaussianPixel, family_from_str
from .data import DatasetSpec

REGIMES = ("clean", "wer", "wcr-gaussian", "wcr-affine")
RIL_MODES = ("off", "on", "both")
ESTIMATORS = ("exact", "lowpass")

# stage ids for counter-based seed derivation; never renumber
STAGES = {"data": 0, "pretrain": 1, "robust": 2, "finetune": 3, "eval": 4,
          "certify": 5, "forge": 6, "extract": 7, "link": 8, "leak": 9, "init": 10}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # dataset
    source: str = "synthetic"
    side: int = 32
    channels: int = 1
    count: int = 2000
    split: tuple = (0.8, 0.1, 0.1)
    # codec
    n_bits: int = 16
    filters: int = 16
    strength: float = 0.05
    message_channels: int = 4
    # training
    lr: float = 1e-3
    batch_size: int = 8
    clean_epochs: int = 10
    robust_epochs: int = 5
    ril_epochs: int = 3
    eta_m: float = 1.0
    eta_r: float = 30.0
    lambda_ril: float = 1.0
    residual_ramp: int = 5
    ril_schedule: str = "interleaved"
    # regimes
    regimes: tuple = ("clean", "wer", "wcr-gaussian")
    ril: str = "both"
    wer_family: str = "mix:gaussian:0.05@0.5+affine:0.005@0.5"
    gaussian_sigma: float = 0.25
    affine_sigma: float = 0.01
    # evaluation
    fpr: float = 0.01
    eval_count: int = 200
    # certification
    cert_samples: int = 20
    cert_n0: int = 100
    cert_n: int = 1000
    cert_alpha: float = 0.001
    cert_batch: int = 500
    radius_steps: int = 21
    # attacks
    estimator: str = "exact"
    forge_m: tuple = (1, 30)
    zeta: float = 1.0
    forge_users: int = 40
    extract_victims: int = 20
    link_users: int = 4
    link_per_user: int = 25
    pca_dims: int = 8
    leak_secrets: int = 20
    # output
    plots: bool = False

    def __post_init__(self):
        bad = [r for r in self.regimes if r not in REGIMES]
        if bad or not self.regimes:
            raise ConfigError(f"unknown regimes {bad}; choose from {REGIMES}")
        if self.ril not in RIL_MODES:
            raise ConfigError(f"ril must be one of {RIL_MODES}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if min(self.forge_m) < 1 or self.zeta <= 0:
            raise ConfigError("forge_m must be >= 1 and zeta > 0")
        if self.link_users < 2 or self.leak_secrets < 3:
            raise ConfigError("need link_users >= 2 and leak_secrets >= 3")
        if self.radius_steps < 2:
            raise ConfigError("radius_steps must be >= 2")
        for name in ("cert_samples", "eval_count", "forge_users", "extract_victims", "link_per_user"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        # constructing the pieces validates them
        try:
            self.dataset_spec()
            self.codec_config()
            self.weights()
            family_from_str(self.wer_family)
            self.smoothing("wcr-gaussian")
            self.smoothing("wcr-affine")
            compute_threshold(self.n_bits, self.fpr)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived objects ------------------------------------------------------

    def stage_seed(self, stage, *counter):
        """Integer seed for a stage (and optional item counters) of this run.

        Derived as ``SeedSequence(seed, spawn_key=(STAGES[stage], *counter))``,
        so any stage or item can be reproduced without running the others.
        """
        ss = np.random.SeedSequence(self.seed, spawn_key=(STAGES[stage],) + tuple(counter))
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def stage_rng(self, stage, *counter):
        return np.random.default_rng(
            np.random.SeedSequence(self.seed, spawn_key=(STAGES[stage],) + tuple(counter)))

    def dataset_spec(self):
        return DatasetSpec(self.source, self.side, self.channels, self.count,
                           tuple(self.split), self.stage_seed("data"))

    def codec_config(self):
        return CodecConfig(self.n_bits, self.channels, self.side, self.filters,
                           self.strength, self.message_channels, self.stage_seed("init"))

    def weights(self):
        return LossWeights(eta_m=self.eta_m, eta_r=self.eta_r, lambda_ril=self.lambda_ril)

    def family(self, regime):
        if regime == "clean":
            return GaussianPixel(0.0)
        if regime == "wer":
            return family_from_str(self.wer_family)
        if regime == "wcr-gaussian":
            return GaussianPixel(self.gaussian_sigma)
        if regime == "wcr-affine":
            return Affine(self.affine_sigma)
        raise ConfigError(f"unknown regime {regime!r}")

    def smoothing(self, regime):
        """Smoothing used to certify a regime; None for regimes that are not certified."""
        if regime == "wcr-gaussian":
            return SmoothingConfig(self.gaussian_sigma, PIXEL, self.cert_n0, self.cert_n,
                                   self.cert_alpha, self.cert_batch)
        if regime == "wcr-affine":
            return SmoothingConfig(self.affine_sigma, AFFINE, self.cert_n0, self.cert_n,
                                   self.cert_alpha, self.cert_batch)
        return None

    def train_config(self, stage, epochs, family, ril=False, ramp=0, counter=()):
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, phase1_epochs=epochs,
                           phase2_epochs=self.ril_epochs if ril and self.ril_schedule == "sequential" else 0,
                           family=family, weights=self.weights(), ril=ril,
                           ril_schedule=self.ril_schedule, residual_ramp=ramp,
                           seed=self.stage_seed(stage, *counter))

    def ril_variants(self):
        return {"off": (False,), "on": (True,), "both": (False, True)}[self.ril]

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def as_dict(self):
        return asdict(self)


KEYS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name, text):
    default = KEYS[name].default
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def parse_config(text, base=None):
    """Parse ``key = value`` lines over ``base`` (defaults when omitted)."""
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, value.strip())
    return replace(base or ExperimentConfig(), **updates)


def load_config(path, base=None):
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def override(config, **updates):
    """Replace fields, re-validating the result."""
    unknown = set(updates) - set(KEYS)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    return replace(config, **updates)
