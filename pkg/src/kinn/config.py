"""Run configuration: a flat JSON object, optional dataset-shape presets, validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .core import KinnConfig, Variant
from .data import BINARY_LABELS, CAMS_LABELS, PHQ9_LABELS
from .errors import ConfigError
from .explain import Block
from .metrics import Task

# Dataset-shape presets; lr is 1e-3 in all of them.
PRESETS: dict[str, dict[str, Any]] = {
    "clef": {"task": "BINARY", "num_classes": 2, "max_len": 2000, "batch_size": 16, "epochs": 15,
             "label_names": list(BINARY_LABELS)},
    "primate": {"task": "MULTILABEL", "num_classes": 9, "max_len": 150, "batch_size": 16, "epochs": 25,
                "label_names": list(PHQ9_LABELS)},
    "cams": {"task": "MULTICLASS", "num_classes": 6, "max_len": 50, "batch_size": 128, "epochs": 25,
             "label_names": list(CAMS_LABELS)},
}

ENCODERS = ("hash", "transformer")
COMMONSENSE = ("stub", "fixture", "seq2seq")
UMLS = ("none", "fixture", "uts")
LLMS = ("none", "stub", "fixture", "openai")
AGGREGATIONS = ("concat", "majority")

_PATH_KEYS = ("dataset", "lexicon", "commonsense_fixture", "umls_fixture", "llm_fixture")
_SECRET_HINTS = ("api_key", "apikey", "password", "secret", "token")


@dataclass
class RunConfig:
    # model
    task: str = "BINARY"
    num_classes: int = 2
    variant: str = "KINN2"
    dim: int = 128
    heads: int = 4
    max_len: int = 150
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 16
    epsilon: float = 1e-3
    class_weights: bool = True
    dense_dim: int | None = None
    # data
    dataset: str = ""
    lexicon: str = ""
    aggregation: str = "concat"
    label_names: list[str] = field(default_factory=list)
    # knowledge
    tagging: bool = True
    aspects: bool = True
    threshold: float = 0.80
    max_gram: int = 4
    # backends
    encoder: str = "hash"
    encoder_model: str = ""
    commonsense: str = "stub"
    commonsense_fixture: str = ""
    commonsense_model: str = ""
    umls: str = "none"
    umls_fixture: str = ""
    llm: str = "stub"
    llm_fixture: str = ""
    llm_endpoint: str = ""
    llm_model: str = ""
    llm_api_key_env: str = "KINN_LLM_API_KEY"
    llm_timeout: float = 30.0
    llm_max_tokens: int = 256
    # explanation
    top_k: int = 5
    attention_block: str = "FUSED"
    # run
    preset: str = ""
    out: str = "out"
    seed: int = 0
    workers: int = 4

    def model_config(self, dim: int | None = None) -> KinnConfig:
        return KinnConfig(
            variant=Variant(self.variant), dim=dim or self.dim, heads=self.heads, max_len=self.max_len,
            num_classes=self.num_classes, task=Task(self.task), lr=self.lr, epochs=self.epochs,
            batch_size=self.batch_size, epsilon=self.epsilon, seed=self.seed,
            class_weights=self.class_weights, dense_dim=self.dense_dim,
        )

    def names(self) -> list[str]:
        if self.label_names:
            return list(self.label_names)
        for p in PRESETS.values():
            if p["task"] == self.task and p["num_classes"] == self.num_classes:
                return list(p["label_names"])
        return [f"class {i}" for i in range(self.num_classes)]

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, check_paths: bool = True) -> "RunConfig":
        try:
            Task(self.task)
            Variant(self.variant)
            Block(self.attention_block)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for key, allowed in (("encoder", ENCODERS), ("commonsense", COMMONSENSE), ("umls", UMLS),
                             ("llm", LLMS), ("aggregation", AGGREGATIONS)):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"unknown {key} {getattr(self, key)!r}; choose from {', '.join(allowed)}")
        if self.encoder == "transformer" and not self.encoder_model:
            raise ConfigError("encoder 'transformer' needs encoder_model")
        if self.commonsense == "seq2seq" and not self.commonsense_model:
            raise ConfigError("commonsense 'seq2seq' needs commonsense_model")
        if self.llm == "openai" and not (self.llm_endpoint and self.llm_model):
            raise ConfigError("llm 'openai' needs llm_endpoint and llm_model")
        for key, backend, needed in (("commonsense_fixture", "commonsense", "fixture"),
                                     ("umls_fixture", "umls", "fixture"), ("llm_fixture", "llm", "fixture")):
            if getattr(self, backend) == needed and not getattr(self, key):
                raise ConfigError(f"{backend} 'fixture' needs {key}")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("threshold must be in (0, 1]")
        if self.max_gram < 1 or self.top_k < 0 or self.workers < 1:
            raise ConfigError("max_gram >= 1, top_k >= 0 and workers >= 1 required")
        if self.label_names and len(self.label_names) != self.num_classes:
            raise ConfigError(f"label_names has {len(self.label_names)} entries, expected {self.num_classes}")
        self.model_config()  # dim/heads, lr, epochs, ...
        if check_paths:
            if not self.dataset:
                raise ConfigError("dataset path is required")
            for key in _PATH_KEYS:
                value = getattr(self, key)
                if value and not Path(value).exists():
                    raise ConfigError(f"{key} not found: {value}")
        return self


def _reject_secrets(raw: dict) -> None:
    for key in raw:
        if any(h in key.lower() for h in _SECRET_HINTS) and not key.lower().endswith("_env"):
            raise ConfigError(f"config key {key!r} looks like a credential; supply credentials through "
                              "environment variables only")


def from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_secrets(raw)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    merged: dict[str, Any] = {}
    preset = raw.get("preset") or ""
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        merged.update(PRESETS[preset])
    merged.update(raw)
    for f in fields(RunConfig):
        if f.name in merged and f.type in ("int", "float") and isinstance(merged[f.name], bool):
            raise ConfigError(f"{f.name} must be a number")
    if base_dir is not None:
        for key in _PATH_KEYS + ("out",):
            value = merged.get(key)
            if value and not Path(value).is_absolute():
                merged[key] = str((base_dir / value).resolve())
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    return from_dict(raw, path.parent.resolve())


def with_overrides(cfg: RunConfig, **overrides: Any) -> RunConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
