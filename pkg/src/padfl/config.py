"""Run configuration: flat key=value files plus CLI overrides.

Every key is validated up front; unknown keys are rejected so typos
fail before any training starts.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from fractions import Fraction

from .errors import ConfigurationError

METHODS = ("Pa3dFL", "FedAvgMinWidth", "PWidthNested", "LocalOnly",
           "Pa3dFL_NoHNAgg", "Pa3dFL_FlancDecomp")


@dataclass
class RunConfig:
    method: str = "Pa3dFL"
    seed: int = 0
    out_dir: str = "run"

    # data
    dataset: str = "synth"            # synth | idx
    synth_classes: int = 4
    synth_per_class: int = 500
    synth_shape: tuple = (1, 28, 28)
    synth_separation: float = 2.5
    idx_images: str = ""
    idx_labels: str = ""
    partition: str = "dirichlet"      # dirichlet | k_of_K
    dirichlet_alpha: float = 1.0
    classes_per_client: int = 2

    # protocol
    clients: int = 20
    per_round: int = 10
    rounds: int = 200
    batch: int = 50
    epochs: int = 5
    lr: float = 0.05
    lr_decay: float = 0.998
    reg_lambda: float = 0.001
    hn_lr: float = -1.0               # -1 means "use lr"
    min_width: Fraction = Fraction(1, 16)
    capacity: str = "hetero"          # hetero | ideal
    patience_frac: float = 0.2
    alpha_grid: int = 11
    workers: int = 1

    # model
    conv_channels: tuple = (16, 16)
    conv_kernel: int = 3
    fc_dims: tuple = ()

    # hyper-network
    hn_embed: int = 64
    hn_hidden: int = 64
    hn_depth: int = 3

    def finalize(self):
        if self.hn_lr < 0:
            self.hn_lr = self.lr
        validate(self)
        return self


def _parse_tuple(text, kind):
    text = text.strip()
    if not text:
        return ()
    return tuple(kind(part.strip()) for part in text.split(","))


_PARSERS = {
    "synth_shape": lambda s: _parse_tuple(s, int),
    "conv_channels": lambda s: _parse_tuple(s, int),
    "fc_dims": lambda s: _parse_tuple(s, int),
    "min_width": Fraction,
}


def parse_value(key, text, current):
    if key in _PARSERS:
        return _PARSERS[key](text)
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, Fraction):
        return Fraction(text)
    return text


def parse_config(text, base=None) -> RunConfig:
    cfg = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, parse_value(key, val, getattr(cfg, key)))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path, overrides=()) -> RunConfig:
    with open(path) as fh:
        cfg = parse_config(fh.read())
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        key = key.strip()
        if key not in {f.name for f in fields(RunConfig)}:
            raise ConfigurationError(f"unknown key {key!r}")
        try:
            setattr(cfg, key, parse_value(key, val.strip(), getattr(cfg, key)))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"bad value for {key}: {exc}") from exc
    return cfg.finalize()


def validate(cfg: RunConfig):
    if cfg.method not in METHODS:
        raise ConfigurationError(f"method must be one of {METHODS}, got {cfg.method!r}")
    if cfg.dataset not in ("synth", "idx"):
        raise ConfigurationError(f"dataset must be synth or idx, got {cfg.dataset!r}")
    if cfg.dataset == "idx" and not (cfg.idx_images and cfg.idx_labels):
        raise ConfigurationError("idx dataset needs idx_images and idx_labels paths")
    if cfg.partition not in ("dirichlet", "k_of_K"):
        raise ConfigurationError(f"partition must be dirichlet or k_of_K, got {cfg.partition!r}")
    if cfg.capacity not in ("hetero", "ideal"):
        raise ConfigurationError(f"capacity must be hetero or ideal, got {cfg.capacity!r}")
    if cfg.clients < 1:
        raise ConfigurationError("clients must be >= 1")
    if not 1 <= cfg.per_round <= cfg.clients:
        raise ConfigurationError(f"per_round must be in [1, {cfg.clients}]")
    if cfg.rounds < 0:
        raise ConfigurationError("rounds must be >= 0")
    if cfg.batch < 1 or cfg.epochs < 1:
        raise ConfigurationError("batch and epochs must be >= 1")
    if not 0 < cfg.lr or not 0 < cfg.lr_decay <= 1:
        raise ConfigurationError("lr must be > 0 and lr_decay in (0, 1]")
    if cfg.reg_lambda < 0 or cfg.hn_lr <= 0:
        raise ConfigurationError("reg_lambda must be >= 0 and hn_lr > 0")
    if not 0 < cfg.min_width <= 1:
        raise ConfigurationError("min_width must be in (0, 1]")
    if cfg.patience_frac < 0:
        raise ConfigurationError("patience_frac must be >= 0")
    if cfg.alpha_grid < 2:
        raise ConfigurationError("alpha_grid must be >= 2")
    if cfg.workers < 1:
        raise ConfigurationError("workers must be >= 1")
    if cfg.dirichlet_alpha <= 0:
        raise ConfigurationError("dirichlet_alpha must be > 0")
    if cfg.synth_classes < 2 or cfg.synth_per_class < 1:
        raise ConfigurationError("synth dataset needs >= 2 classes and >= 1 per class")
    if len(cfg.synth_shape) != 3 or any(d < 1 for d in cfg.synth_shape):
        raise ConfigurationError("synth_shape must be C,H,W of positive ints")
    if not cfg.conv_channels and not cfg.fc_dims:
        raise ConfigurationError("model needs at least one conv or fc layer")
    if cfg.conv_kernel < 1 or cfg.conv_kernel % 2 == 0:
        raise ConfigurationError("conv_kernel must be odd and >= 1")
    if cfg.hn_embed < 1 or cfg.hn_hidden < 1 or cfg.hn_depth < 0:
        raise ConfigurationError("hyper-network dims must be positive, depth >= 0")
    return cfg


def snapshot(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, Fraction):
            v = str(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out
