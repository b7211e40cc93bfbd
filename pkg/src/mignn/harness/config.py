"""Run configuration: CLI flags merged with an optional ``key = value`` file.

Values from the file win over flags.  Per-dataset defaults (the adaptation
step size differs between the attribute collections) apply only to keys the
user did not set either way.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..encoders import EncoderSpec
from ..errors import ConfigError
from ..graphdata import GraphCollection, TU_PRESETS, load_jsonl, load_tudataset, row_normalize_collection, synth_collection
from ..meta import HyperParams
from .baselines import METHODS, BaselineOptions

FORMATS = ("tud", "jsonl", "synth")

DATASET_DEFAULTS = {
    "COX2": {"alpha": 0.005, "lam": 0.001},
    "DHFR": {"alpha": 0.005, "lam": 0.001},
    "Cuneiform": {"alpha": 0.5, "lam": 0.001},
}


@dataclass
class RunConfig:
    data: str = ""
    format: str = "synth"
    name: str = ""
    arch: str = "sgc"
    hidden: int = 16
    alpha: float = 0.5
    steps: int = 2
    lam: float = 0.001
    outer_lr: float = 0.01
    batch: int = 8
    epochs: int = 500
    patience: int = 30
    second_order: bool = True
    support_fraction: float = 0.5
    hyper_hidden: int = 32
    method: str = "mignn"
    seeds: list = field(default_factory=lambda: list(range(10)))
    split_seed: int = 0
    out: str = "runs/out"
    knn_k: int = 1
    transduct_epochs: int = 100
    workers: int = 1
    target_channel: str = "0"
    feature_channel: int = -1
    normalize: bool = False
    synth_graphs: int = 40
    synth_nodes: str = "20-40"
    synth_dim: int = 8
    synth_classes: int = 3
    synth_homophily: float = 0.8
    synth_seed: int = 0
    synth_scale: float = 0.0
    param: str = ""
    values: list = field(default_factory=list)

    def validate(self) -> "RunConfig":
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {', '.join(FORMATS)}, got {self.format!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.format != "synth" and not self.data:
            raise ConfigError(f"--data is required for format {self.format}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.method == "knn" and self.knn_k < 1:
            raise ConfigError("knn requires k >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.options()
        self.hyperparams()
        return self

    def hyperparams(self) -> HyperParams:
        try:
            return HyperParams(alpha=self.alpha, inner_steps=self.steps, lam=self.lam, outer_lr=self.outer_lr,
                               batch_size=self.batch, max_epochs=self.epochs, patience=self.patience,
                               second_order=self.second_order, support_fraction=self.support_fraction,
                               hyper_hidden=self.hyper_hidden)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def encoder(self, collection: GraphCollection) -> EncoderSpec:
        return EncoderSpec(self.arch, collection.feature_dim, self.hidden, collection.num_categories)

    def options(self) -> BaselineOptions:
        return BaselineOptions(knn_k=self.knn_k, transduct_epochs=self.transduct_epochs)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects results (output location excluded)."""
        d = self.as_dict()
        d.pop("out")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_ALIASES = {"lambda": "lam", "second-order": "second_order", "inner_steps": "steps", "batch_size": "batch",
            "format_": "format"}


def _coerce(key: str, raw):
    default = _FIELDS[key].default
    if key in ("seeds", "values"):
        if isinstance(raw, (list, tuple)):
            return list(raw)
        items = [t for t in str(raw).replace(",", " ").split() if t]
        if key == "seeds":
            return _int_list(items)
        return [float(t) for t in items]
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in ("on", "true", "1", "yes"):
            return True
        if s in ("off", "false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected on/off, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return str(raw)


def _int_list(items) -> list:
    out = []
    for t in items:
        if "-" in t[1:]:
            lo, hi = t.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(t))
    return out


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p.name} line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key.replace("-", "_"))
        if key not in _FIELDS:
            raise ConfigError(f"{p.name} line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_config(flags: dict, config_file=None) -> RunConfig:
    """Merge explicit flags (``None`` means unset), then the file, then dataset defaults."""
    given = {}
    for key, value in flags.items():
        key = _ALIASES.get(key, key)
        if value is not None and key in _FIELDS:
            given[key] = _coerce(key, value)
    if config_file:
        for key, value in parse_config_file(config_file).items():
            given[key] = _coerce(key, value)
    name = given.get("name") or (Path(given["data"]).name if given.get("data") else "")
    for key, value in DATASET_DEFAULTS.get(name, {}).items():
        given.setdefault(key, value)
    cfg = RunConfig(**given)
    if not cfg.name:
        cfg.name = name or cfg.format
    return cfg.validate()


def load_collection(cfg: RunConfig) -> GraphCollection:
    if cfg.format == "synth":
        lo, hi = (int(t) for t in cfg.synth_nodes.split("-"))
        coll = synth_collection(cfg.synth_graphs, (lo, hi), cfg.synth_dim, cfg.synth_classes, cfg.synth_homophily,
                                cfg.synth_seed, graph_scale=cfg.synth_scale, name=cfg.name)
    elif cfg.format == "jsonl":
        coll = load_jsonl(cfg.data, name=cfg.name)
    else:
        target = cfg.target_channel if cfg.target_channel == "all" else int(cfg.target_channel)
        feature = None if cfg.feature_channel < 0 else cfg.feature_channel
        coll = load_tudataset(cfg.data, cfg.name, target, feature_channel=feature,
                              check_preset=cfg.name in TU_PRESETS)
    return row_normalize_collection(coll) if cfg.normalize else coll
