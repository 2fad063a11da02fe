"""Experiment configuration files.

The format is flat ``key = value`` text. ``#`` starts a comment, blank
lines are ignored, list values are comma separated and booleans are
``true``/``false``. Every key has a default; unknown keys are errors.

Example::

    # SN with 4 emulated devices of 32 samples each
    norm = sn
    n_shards = 4
    per_shard = 32
    epochs = 30
    milestones = 20, 25
"""

import os
from dataclasses import MISSING, dataclass, fields, replace

from .data import DatasetSource
from .errors import ConfigurationError
from .normalizers import ShardConfig

SEED_ENV = "NORMSWITCH_SEED"


@dataclass(frozen=True)
class ExperimentConfig:
    # network
    network: str = "mini_resnet"
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    norm: str = "sn"
    omega: tuple = ("IN", "LN", "BN")
    tied: bool = False
    hard: bool = False
    hard_init_from: str = ""
    hard_init_logit: float = 10.0
    gn_groups: int = 4
    sigma_aggregation: str = "std"
    eps: float = 1e-5
    # batch statistics
    n_shards: int = 1
    per_shard: int = 32
    bn_stats: str = "batch_average"
    bn_k_batches: int = 100
    bn_decay: float = 0.9
    # optimisation
    optimizer: str = "sgd_momentum"
    lr0: float = 0.1
    momentum: float = 0.9
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_base_batch: int = 256
    schedule: str = "stepwise"
    milestones: tuple = (30, 60, 90)
    epochs: int = 100
    seed: int = 0
    eval_every: int = 1
    # data
    dataset: str = "synthetic"
    dataset_path: str = ""
    dataset_test_path: str = ""
    classes: int = 10
    train_samples: int = 512
    test_samples: int = 256
    resolution: int = 32
    noise: float = 0.25
    data_seed: int = 1234
    fraction: float = 1.0
    downsample: int = 1
    # output
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            (self.norm.lower() in ("bn", "in", "ln", "gn", "sn", "sn_tied"), "norm", "one of bn, in, ln, gn, sn, sn_tied"),
            (self.sigma_aggregation in ("std", "var"), "sigma_aggregation", "std or var"),
            (self.optimizer in ("sgd_momentum", "rmsprop"), "optimizer", "sgd_momentum or rmsprop"),
            (self.schedule in ("stepwise", "cosine"), "schedule", "stepwise or cosine"),
            (self.bn_stats in ("batch_average", "moving_average"), "bn_stats", "batch_average or moving_average"),
            (self.dataset in ("synthetic", "cifar10_binary"), "dataset", "synthetic or cifar10_binary"),
            (self.lr0 > 0, "lr0", "positive"),
            (self.weight_decay >= 0, "weight_decay", "non-negative"),
            (self.eps >= 0, "eps", "non-negative"),
            (self.n_shards >= 1 and self.per_shard >= 1, "n_shards", "n_shards and per_shard >= 1"),
            (self.epochs >= 0, "epochs", "non-negative"),
            (self.bn_k_batches >= 1, "bn_k_batches", ">= 1"),
            (0.0 < self.bn_decay < 1.0, "bn_decay", "in (0, 1)"),
            (0.0 < self.fraction <= 1.0, "fraction", "in (0, 1]"),
            (self.eval_every >= 0, "eval_every", ">= 0"),
            (len(self.omega) >= 1, "omega", "non-empty"),
        ]
        for ok, key, what in checks:
            if not ok:
                raise ConfigurationError(f"config key {key!r} must be {what}")

    # -- derived views ------------------------------------------------------

    @property
    def shard(self):
        return ShardConfig(self.n_shards, self.per_shard)

    @property
    def norm_choice(self):
        choice = self.norm.upper()
        if choice == "SN" and self.tied:
            return "SN_TIED"
        return choice

    def dataset_source(self):
        return DatasetSource(
            kind=self.dataset,
            path=self.dataset_path,
            test_path=self.dataset_test_path,
            classes=self.classes,
            train_samples=self.train_samples,
            test_samples=self.test_samples,
            resolution=self.resolution,
            noise=self.noise,
            seed=self.data_seed,
            fraction=self.fraction,
            downsample=self.downsample,
        )

    def with_overrides(self, **kw):
        return replace(self, **kw)

    def to_text(self):
        """Canonical text form; ``parse_config(cfg.to_text()) == cfg``."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ", ".join(str(x) for x in v)
            else:
                s = str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _default(f):
    return f.default if f.default is not MISSING else f.default_factory()


def _convert(key, raw):
    default = _default(_FIELDS[key])
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if key == "omega":
                return tuple(s.upper() for s in items)
            return tuple(int(s) for s in items)
        return raw
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse value {raw!r}") from None


def parse_config(text, env=None):
    """Parse config text; ``NORMSWITCH_SEED`` in ``env`` overrides ``seed``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _convert(key, raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _convert("seed", env[SEED_ENV])
    return ExperimentConfig(**values)


def load_config(path, env=None):
    with open(path) as fh:
        return parse_config(fh.read(), env)
