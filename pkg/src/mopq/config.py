"""Flat key=value run configuration files.

A run config collects every training, encoder, quantizer and data-generation
knob plus the artifact paths. Unknown keys are rejected outright; values are
coerced to their registered types. Lines starting with ``#`` and blank lines
are ignored.
"""

from __future__ import annotations

from pathlib import Path

from . import encoder as enc
from . import training as tr
from .errors import ConfigError

# key -> (type, default). Paths default to None and are validated by the
# endpoint that actually consumes them.
CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    # paths
    "data_dir": (str, None),
    "checkpoint": (str, None),
    "index": (str, None),
    # training
    "objective": (str, "mopq-inbatch"),
    "recon_weight": (float, 0.0),
    "epochs": (int, 20),
    "batch_size": (int, 64),
    "devices": (int, 1),
    "learning_rate": (float, 1e-3),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.999),
    "seed": (int, 0),
    "commitment_grad": (str, "ste"),
    # encoder
    "input_dim": (int, None),
    "hidden_dim": (int, 64),
    "output_dim": (int, 32),
    "depth": (int, 2),
    # quantizer
    "codebooks": (int, 4),
    "codewords": (int, 16),
    "selection": (str, "l2"),
    # synthetic data generation
    "pairs": (int, 1000),
    "clusters": (int, 100),
    "noise_sigma": (float, 0.1),
    # evaluation
    "topn": (str, "1,10"),
    "pool": (str, "split"),
}


def default_config() -> dict:
    return {key: default for key, (_, default) in CONFIG_SCHEMA.items()}


def _coerce(key: str, raw: str):
    kind, _ = CONFIG_SCHEMA[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from exc


def parse_config_text(text: str) -> dict:
    config = default_config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        config[key] = _coerce(key, raw.strip())
    return config


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(p.read_text(encoding="utf-8"))


def apply_overrides(config: dict, overrides: dict) -> dict:
    merged = dict(config)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, str(value))
    return merged


def train_config_from(config: dict) -> tr.TrainConfig:
    return tr.TrainConfig(
        objective=config["objective"],
        recon_weight=config["recon_weight"],
        epochs=config["epochs"],
        batch_size=config["batch_size"],
        devices=config["devices"],
        learning_rate=config["learning_rate"],
        adam_betas=(config["adam_beta1"], config["adam_beta2"]),
        seed=config["seed"],
        commitment_grad=config["commitment_grad"],
    )


def encoder_config_from(config: dict, input_dim: int | None = None) -> enc.EncoderConfig:
    dim = input_dim if input_dim is not None else config["input_dim"]
    if dim is None:
        raise ConfigError("input_dim is not set and cannot be inferred")
    return enc.EncoderConfig(input_dim=int(dim), hidden_dim=config["hidden_dim"],
                             output_dim=config["output_dim"], depth=config["depth"])


def codebook_config_from(config: dict) -> tr.CodebookConfig:
    return tr.CodebookConfig(num_books=config["codebooks"],
                             num_codewords=config["codewords"],
                             selection=config["selection"])


def parse_topn(config: dict) -> list[int]:
    try:
        values = [int(part) for part in str(config["topn"]).split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError("topn must be a comma-separated list of integers") from exc
    if not values or any(v < 1 for v in values):
        raise ConfigError("topn values must be positive")
    return values
