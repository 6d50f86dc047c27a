"""Experiment configuration: JSON files plus dotted ``key=value`` overrides.

Layout::

    {"stream": {...}, "backbone": {...}, "train": {...}, "alignment": {...},
     "data": null, "theory": false, "label": "run", "seed": null, "out": "out"}

``train.lambda`` and ``train.lambda_schedule`` name the alignment weight and
its schedule. ``data`` may point at an exported ``manifest.json`` to run on
CSV files instead of the synthetic generator. A top-level ``seed`` overrides
both the stream and the training seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .backbone import BackboneConfig
from .errors import ConfigError
from .relation import AlignmentConfig
from .stream import StreamSpec
from .trainer import TrainConfig

# config-file spelling -> TrainConfig attribute
_TRAIN_ALIASES = {"lambda": "lam", "lambda_schedule": "lam_schedule"}
_TRAIN_ALIASES_INV = {v: k for k, v in _TRAIN_ALIASES.items()}


@dataclass
class ExperimentConfig:
    stream: StreamSpec = field(default_factory=StreamSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    theory: bool = False
    label: str = "run"
    seed: int | None = None
    out: str = "out"

    def resolved(self) -> ExperimentConfig:
        """Copy with the top-level seed pushed into the stream and trainer."""
        cfg = from_dict(to_dict(self))
        if cfg.seed is not None:
            cfg.stream.seed = cfg.seed
            cfg.train.seed = cfg.seed
        return cfg


def _build(cls, section, values):
    if not isinstance(values, dict):
        raise ConfigError(f"{section} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown field(s) {', '.join(section + '.' + u for u in unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def from_dict(d) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    d = dict(d)
    known = {"stream", "backbone", "train", "alignment", "data", "theory", "label", "seed", "out"}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {', '.join(unknown)}")
    train = {_TRAIN_ALIASES.get(k, k): v for k, v in dict(d.get("train", {})).items()}
    if "alignment" in train:
        raise ConfigError("alignment settings live in the top-level alignment section")
    train["alignment"] = _build(AlignmentConfig, "alignment", d.get("alignment", {}))
    seed = d.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0 or seed >= 2**64):
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return ExperimentConfig(
        stream=_build(StreamSpec, "stream", d.get("stream", {})),
        backbone=_build(BackboneConfig, "backbone", d.get("backbone", {})),
        train=_build(TrainConfig, "train", train),
        data=d.get("data"),
        theory=bool(d.get("theory", False)),
        label=str(d.get("label", "run")),
        seed=seed,
        out=str(d.get("out", "out")),
    )


def to_dict(cfg: ExperimentConfig) -> dict:
    train = asdict(cfg.train)
    alignment = train.pop("alignment")
    train = {_TRAIN_ALIASES_INV.get(k, k): v for k, v in train.items()}
    return {
        "stream": asdict(cfg.stream),
        "backbone": asdict(cfg.backbone),
        "train": train,
        "alignment": alignment,
        "data": cfg.data,
        "theory": cfg.theory,
        "label": cfg.label,
        "seed": cfg.seed,
        "out": cfg.out,
    }


def parse_value(text):
    """JSON when it parses (numbers, booleans, null, lists), otherwise a bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = parse_value(value)
    return d


def load_config(path=None, overrides=(), seed=None, out=None) -> ExperimentConfig:
    """Read ``path`` (a config or a ``report.json`` carrying a config echo)."""
    d = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if isinstance(d, dict) and "accuracy_matrix" in d and "config" in d:
            d = d["config"]
    d = apply_overrides(to_dict(from_dict(d)), overrides)
    if seed is not None:
        d["seed"] = seed
    if out is not None:
        d["out"] = out
    return from_dict(d).resolved()
