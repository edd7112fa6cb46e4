"""Run configuration: ``key = value`` lines, ``#`` comments, unknown keys rejected."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

PATH_KEYS = ("corpus", "embeddings", "hypernyms", "features", "annotations", "val_videos", "val_refs",
             "output", "kg_checkpoint")
REQUIRED_INPUTS = ("corpus", "embeddings", "features", "annotations", "val_videos")
OPTIONAL_INPUTS = ("hypernyms", "val_refs", "kg_checkpoint")


@dataclass
class RunConfig:
    corpus: str = ""
    embeddings: str = ""
    hypernyms: str = ""
    features: str = ""
    annotations: str = ""
    val_videos: str = ""
    val_refs: str = ""
    output: str = "run"
    kg_checkpoint: str = ""
    shared_features: bool = True
    theta_c: float = 0.99
    delta: float = 0.1
    lam: float = 0.1
    reg: float = 1.0
    beam: int = 5
    max_len: int = 20
    kg_dim: int = 64
    gamma: float = 6.0
    negatives: int = 4
    kg_steps: int = 2000
    kg_lr: float = 0.5
    kg_batch: int = 64
    lr: float = 1e-4
    optimizer: str = "rmsprop"
    epochs: int = 3
    batch: int = 16
    max_iterations: int = 20
    min_iterations: int = 1
    patience: int = 1
    s_max: float = math.nan
    s_max_percentile: float = 25.0
    max_nodes: int = 6
    hidden: int = 32
    word_dim: int = 32
    att_dim: int = 32
    seed: int = 0

    def validate(self):
        checks = [
            ("theta_c", 0.0 < self.theta_c <= 1.0),
            ("delta", 0.0 <= self.delta <= 1.0),
            ("lam", self.lam >= 0.0),
            ("reg", self.reg >= 0.0),
            ("beam", self.beam >= 1),
            ("max_len", self.max_len >= 1),
            ("kg_dim", self.kg_dim >= 1),
            ("negatives", self.negatives >= 1),
            ("kg_steps", self.kg_steps >= 0),
            ("kg_lr", self.kg_lr > 0.0),
            ("kg_batch", self.kg_batch >= 1),
            ("lr", self.lr > 0.0),
            ("optimizer", self.optimizer in ("rmsprop", "adam", "sgd")),
            ("epochs", self.epochs >= 0),
            ("batch", self.batch >= 1),
            ("max_iterations", self.max_iterations >= 1),
            ("min_iterations", self.min_iterations >= 1),
            ("patience", self.patience >= 0),
            ("s_max_percentile", 0.0 <= self.s_max_percentile <= 100.0),
            ("max_nodes", self.max_nodes >= 1),
            ("hidden", self.hidden >= 1),
            ("word_dim", self.word_dim >= 1),
            ("att_dim", self.att_dim >= 1),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"{key} = {getattr(self, key)!r} is out of range", key)

    def check_paths(self, keys=REQUIRED_INPUTS):
        for key in keys:
            value = getattr(self, key)
            if not value:
                raise ConfigError(f"{key} is required", key)
            if not Path(value).exists():
                raise ConfigError(f"{key}: {value} does not exist", key)
        for key in OPTIONAL_INPUTS:
            value = getattr(self, key)
            if value and not Path(value).exists():
                raise ConfigError(f"{key}: {value} does not exist", key)

    def dumps(self) -> str:
        lines = ["# effective configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float) and math.isnan(v):
                v = "auto"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


ALIASES = {"lambda": "lam", "T_max": "max_len", "E": "kg_dim"}


def _convert(key, raw: str, typ):
    try:
        if typ is bool or typ == "bool":
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            if key == "s_max" and raw.lower() == "auto":
                return math.nan
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}", key) from None


def parse_config(text: str, base_dir=".") -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not eq or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'", key or None)
        key = ALIASES.get(key, key)
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", key)
        values[key] = _convert(key, raw, types[key])
    cfg = RunConfig(**values)
    base = Path(base_dir)
    for key in PATH_KEYS:
        v = getattr(cfg, key)
        if v:
            setattr(cfg, key, str((base / v).resolve()))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from exc
    return parse_config(text, p.parent)
