"""Experiment configuration.

Configs are flat ``section.key = value`` text files; ``#`` starts a comment.
Lists are comma separated (``run.seeds = 0, 1, 2``) and ``none`` clears an
optional value. Unset keys take the defaults of the dataclasses below, and a
few defaults depend on the dataset (ASDTest trains for 200 rounds/epochs,
everything else for 100).
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .aggregators import AGGREGATOR_IDS, LINEAR_AGGREGATORS
from .errors import ConfigError
from .samplers import SAMPLER_IDS

SETTINGS = ("centralized", "individual", "federated")
SCHEMAS = ("flamenco", "asdtest", "generic", "synthetic")
# scheduling and placement knobs; they never change results, so they stay
# out of the fingerprint
UNFINGERPRINTED = ("train.workers", "run.parallel_seeds", "run.output_dir")


@dataclass
class DataConfig:
    path: str | None = None
    schema: str = "flamenco"
    quantile: float = 0.5
    normal_holdout: float = 0.3
    clients: int = 5
    encoding: str = "onehot"
    seed: int | None = None
    n_normal: int = 300
    n_anomaly: int = 60
    n_unknown: int = 60
    features: int = 19
    separation: float = 6.0
    noise: float = 0.05
    label_skew: float = 0.0
    quantity_skew: float = 0.0
    client_shift: float = 0.0
    rank: int = 0
    residual: float = 0.1
    unknown_normal_rate: float = 0.7


@dataclass
class ModelConfig:
    type: str = "ae"
    hidden_dim: int = 64
    latent_dim: int = 64
    dropout: float = 0.2
    decoder_dropout: bool = True
    kl_weight: float = 1.0


@dataclass
class TrainConfig:
    setting: str = "federated"
    rounds: int | None = None
    local_epochs: int = 3
    epochs: int | None = None
    batch_size: int = 32
    lr: float = 0.001
    workers: int = 1


@dataclass
class AggConfig:
    id: str = "fedavg"
    server_lr: float | None = None
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3

    def hparams(self) -> dict:
        hp = {"beta": self.beta, "beta1": self.beta1, "beta2": self.beta2, "tau": self.tau}
        if self.server_lr is not None:
            hp["server_lr"] = self.server_lr
        return hp


@dataclass
class SamplerConfig:
    id: str = "random"
    fraction: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5


@dataclass
class FHEConfig:
    enabled: bool = False
    poly_degree: int = 4096
    scale_bits: int = 30
    weight_bits: int = 20


@dataclass
class MetricsConfig:
    sireos_k: int = 10
    sireos_percentile: float = 1.0


@dataclass
class RunConfig:
    seeds: tuple[int, ...] = tuple(range(10))
    output_dir: str = "results"
    parallel_seeds: int = 1


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    agg: AggConfig = field(default_factory=AggConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    fhe: FHEConfig = field(default_factory=FHEConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def resolved(self) -> ExperimentConfig:
        """Copy with dataset-dependent defaults filled in, validated."""
        cfg = dataclasses.replace(
            self,
            **{f.name: dataclasses.replace(getattr(self, f.name)) for f in dataclasses.fields(self)},
        )
        default_len = 200 if cfg.data.schema == "asdtest" else 100
        if cfg.train.rounds is None:
            cfg.train.rounds = default_len
        if cfg.train.epochs is None:
            cfg.train.epochs = default_len
        validate(cfg)
        return cfg

    def replace(self, **dotted) -> ExperimentConfig:
        """Copy with ``{"section.key": value}`` overrides (keys use ``__`` for dots)."""
        text = to_text(self)
        pairs = dict(_iter_pairs(text))
        for key, value in dotted.items():
            pairs[key.replace("__", ".")] = _format_value(value)
        return _from_pairs(pairs)

    @property
    def fingerprint(self) -> str:
        lines = [
            line for line in to_text(self).splitlines()
            if line.split(" = ", 1)[0] not in UNFINGERPRINTED
        ]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]


def validate(cfg: ExperimentConfig) -> None:
    d, t, s = cfg.data, cfg.train, cfg.sampler
    if d.schema not in SCHEMAS:
        raise ConfigError(f"data.schema must be one of {SCHEMAS}")
    if d.schema != "synthetic" and not d.path:
        raise ConfigError("data.path is required unless data.schema = synthetic")
    if cfg.model.type not in ("ae", "vae"):
        raise ConfigError("model.type must be ae or vae")
    if t.setting not in SETTINGS:
        raise ConfigError(f"train.setting must be one of {SETTINGS}")
    for name in ("rounds", "local_epochs", "epochs", "batch_size", "workers"):
        value = getattr(t, name)
        if value is not None and value < 1:
            raise ConfigError(f"train.{name} must be >= 1, got {value}")
    if not t.lr > 0:
        raise ConfigError("train.lr must be positive")
    if cfg.agg.id not in AGGREGATOR_IDS:
        raise ConfigError(f"unknown aggregator {cfg.agg.id!r}; expected one of {AGGREGATOR_IDS}")
    if cfg.agg.tau <= 0:
        raise ConfigError("agg.tau must be positive")
    if s.id not in SAMPLER_IDS:
        raise ConfigError(f"unknown sampler {s.id!r}; expected one of {SAMPLER_IDS}")
    if not 0.0 < s.fraction <= 1.0:
        raise ConfigError(f"sampler.fraction must lie in (0, 1], got {s.fraction}")
    if s.alpha < 0 or s.beta < 0 or s.alpha + s.beta <= 0:
        raise ConfigError("sampler.alpha/beta must be non-negative with a positive sum")
    if cfg.fhe.enabled and cfg.agg.id not in LINEAR_AGGREGATORS:
        raise ConfigError(
            f"fhe.enabled requires a linear aggregator {sorted(LINEAR_AGGREGATORS)}, got {cfg.agg.id!r}"
        )
    if not 0.0 <= d.quantile <= 1.0 or not 0.0 <= d.normal_holdout < 1.0:
        raise ConfigError("data.quantile must lie in [0, 1] and data.normal_holdout in [0, 1)")
    if d.clients < 1:
        raise ConfigError("data.clients must be >= 1")
    if not cfg.run.seeds:
        raise ConfigError("run.seeds must list at least one seed")
    if len(set(cfg.run.seeds)) != len(cfg.run.seeds):
        raise ConfigError("run.seeds must not repeat")
    if cfg.run.parallel_seeds < 1:
        raise ConfigError("run.parallel_seeds must be >= 1")


def _section_types(section_cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(section_cls)


def _coerce(raw: str, hint, key: str):
    raw = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if raw.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in args if a is not type(None))
        args = typing.get_args(hint)
    try:
        if typing.get_origin(hint) is tuple:
            items = [x for x in raw.strip("[]()").split(",") if x.strip()]
            return tuple(_coerce(x, args[0], key) for x in items)
        if hint is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw.strip("'\"")
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _iter_pairs(text: str):
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        yield key.strip(), value.strip()


def _from_pairs(pairs: dict[str, str]) -> ExperimentConfig:
    hints = typing.get_type_hints(ExperimentConfig)
    sections = {name: {} for name in hints}
    for key, value in pairs.items():
        if "." not in key:
            raise ConfigError(f"{key}: keys must be dotted as section.key")
        section, name = key.split(".", 1)
        if section not in hints:
            raise ConfigError(f"unknown config section {section!r}")
        field_types = _section_types(hints[section])
        if name not in field_types:
            raise ConfigError(f"unknown config key {key!r}")
        sections[section][name] = _coerce(value, field_types[name], key)
    cfg = ExperimentConfig(**{name: hints[name](**vals) for name, vals in sections.items()})
    for sec in ("agg", "sampler", "model", "train", "data"):
        part = getattr(cfg, sec)
        for attr in ("id", "type", "setting", "schema", "encoding"):
            if isinstance(getattr(part, attr, None), str):
                setattr(part, attr, getattr(part, attr).lower())
    return cfg


def parse_text(text: str) -> ExperimentConfig:
    cfg = _from_pairs(dict(_iter_pairs(text)))
    return cfg.resolved()


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    cfg = parse_text(path.read_text(encoding="utf-8"))
    if cfg.data.path and not Path(cfg.data.path).is_absolute():
        candidate = path.parent / cfg.data.path
        if candidate.exists():
            cfg.data.path = str(candidate)
    return cfg


def to_text(cfg: ExperimentConfig) -> str:
    """Canonical serialization; sorted and stable, used for fingerprints."""
    lines = []
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        for sf in sorted(dataclasses.fields(section), key=lambda x: x.name):
            lines.append(f"{f.name}.{sf.name} = {_format_value(getattr(section, sf.name))}")
    return "\n".join(lines) + "\n"
