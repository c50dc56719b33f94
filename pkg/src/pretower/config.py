"""Flat TOML run configuration.

One file drives every command; command-line ``--set key=value`` overrides
win over the file, and the fully resolved result is echoed into each run
directory so a run can be reproduced from its own copy alone.

The temperature and both loss weights must appear explicitly in any config
file: results should never depend on a silent default for those three.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import tomli

from .errors import ConfigError
from .features import FeatureSchema, SyntheticSpec
from .model import ModelConfig
from .objectives import LossConfig
from .training import TrainConfig

DEFAULTS: dict[str, Any] = {
    # feature schema
    "user_fields": ["uid", "ug", "ux"],
    "item_fields": ["iid", "ig", "iy"],
    "label_field": "label",
    "embedding_dim": 32,
    # model
    "model": "interaction_tower",
    "layer_widths": [300, 300, 128],
    "head_dim": 64,
    "user_heads": 0,  # 0: one head per user field
    "item_heads": 0,
    "dropout": 0.1,
    "use_field_attention": True,
    "use_early_interaction": True,
    "use_contrastive": True,
    "fc_interaction": False,
    "tapped_layers": [],  # empty: every layer
    # training
    "batch_size": 2048,
    "learning_rate": 0.001,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "max_epochs": 10,
    "patience": 2,
    "seed": 7,
    "split_ratio": 0.8,
    "val_fraction": 0.1,
    # loss (required keys, no silent defaults in files)
    "tau": 1.0,
    "lambda1": 0.1,
    "lambda2": 1e-5,
    # synthetic data generator
    "num_users": 1000,
    "num_items": 1000,
    "num_rows": 100000,
    "noise": 1.0,
    "latent_rank": 4,
    "num_groups": 8,
    "affinity_scale": 1.0,
    # latency bench
    "bench_ks": [20, 2000],
    "bench_repetitions": 9,
}

REQUIRED_IN_FILE = ("tau", "lambda1", "lambda2")

_FLOAT_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, float)}
_INT_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, bool) is False and isinstance(v, int)}
_BOOL_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, bool)}
_STR_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, str)}
_LIST_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, list)}


def _coerce(key: str, value: Any) -> Any:
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
        return float(value)
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
        return int(value)
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} expects a string, got {value!r}")
        return value
    if key in _LIST_KEYS:
        if not isinstance(value, list):
            raise ConfigError(f"config key {key!r} expects an array, got {value!r}")
        return list(value)
    raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(DEFAULTS))}")


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            tuple(self.values["user_fields"]),
            tuple(self.values["item_fields"]),
            self.values["label_field"],
            self.values["embedding_dim"],
        )

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            kind=v["model"],
            layer_widths=tuple(v["layer_widths"]),
            head_dim=v["head_dim"],
            user_heads=v["user_heads"],
            item_heads=v["item_heads"],
            dropout=v["dropout"],
            use_field_attention=v["use_field_attention"],
            use_early_interaction=v["use_early_interaction"],
            use_contrastive=v["use_contrastive"],
            fc_interaction=v["fc_interaction"],
            tapped_layers=tuple(v["tapped_layers"]),
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch_size=v["batch_size"],
            learning_rate=v["learning_rate"],
            adam_beta1=v["adam_beta1"],
            adam_beta2=v["adam_beta2"],
            adam_eps=v["adam_eps"],
            max_epochs=v["max_epochs"],
            patience=v["patience"],
            seed=v["seed"],
            val_fraction=v["val_fraction"],
        )

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(lambda1=v["lambda1"], lambda2=v["lambda2"], tau=v["tau"])

    def synthetic_spec(self) -> SyntheticSpec:
        v = self.values
        return SyntheticSpec(
            num_users=v["num_users"],
            num_items=v["num_items"],
            num_rows=v["num_rows"],
            seed=v["seed"],
            noise=v["noise"],
            latent_rank=v["latent_rank"],
            num_groups=v["num_groups"],
            affinity_scale=v["affinity_scale"],
        )

    def validate(self) -> "RunConfig":
        """Construct every section so each one's own checks run."""
        self.schema()
        self.model_config()
        self.train_config()
        self.loss_config()
        if not 0.0 < self.values["split_ratio"] < 1.0:
            raise ConfigError(f"split_ratio must be in (0, 1), got {self.values['split_ratio']}")
        return self


def parse_override(item: str) -> tuple[str, Any]:
    """Parse a --set key=value pair; the value uses TOML syntax, with a bare
    string fallback so --set model=two_tower works unquoted."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key = key.strip()
    raw = raw.strip()
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value


def load_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    require_loss_keys: bool | None = None,
) -> RunConfig:
    """Merge defaults <- file <- overrides, validate, and return the result.

    Files must spell out tau, lambda1, and lambda2; overrides are exempt.
    """
    values = dict(DEFAULTS)
    if path is not None:
        with open(path, "rb") as fh:
            try:
                raw = tomli.load(fh)
            except tomli.TOMLDecodeError as e:
                raise ConfigError(f"{path} is not valid TOML: {e}") from e
        if require_loss_keys is None:
            require_loss_keys = True
        missing = [k for k in REQUIRED_IN_FILE if k not in raw]
        if missing and require_loss_keys:
            raise ConfigError(
                f"config file {path} must set {', '.join(REQUIRED_IN_FILE)} explicitly; missing {missing}"
            )
        for key, value in raw.items():
            values[key] = _coerce(key, value)
    for item in overrides:
        key, value = parse_override(item)
        values[key] = _coerce(key, value)
    return RunConfig(values).validate()


def default_config(**overrides: Any) -> RunConfig:
    values = dict(DEFAULTS)
    for key, value in overrides.items():
        values[key] = _coerce(key, value)
    return RunConfig(values).validate()


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def write_config(path: str | Path, config: RunConfig) -> None:
    """Echo the resolved configuration as flat TOML, keys in registry order."""
    lines = [f"{key} = {_toml_value(config.values[key])}" for key in DEFAULTS]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
