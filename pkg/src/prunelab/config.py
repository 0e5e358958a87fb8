"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Every key has a type and a
default; per-layer widths (``n_heads``, ``n_kv_heads``, ``ffn``) accept a
single value or a comma-separated list. ``PRUNELAB_SEED`` in the
environment overrides ``seed``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from prunelab.errors import ConfigError, IoFailure
from prunelab.model import ModelConfig
from prunelab.trainer import TrainConfig

SEED_ENV = "PRUNELAB_SEED"


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",")]


def _ratio(text: str) -> tuple[int, int]:
    p, sep, g = text.partition(":")
    if not sep:
        raise ValueError(f"expected p:g, got {text!r}")
    return int(p), int(g)


def _opt(conv):
    def parse(text: str):
        return None if text.lower() in ("none", "") else conv(text)
    return parse


MODEL_KEYS = {
    "vocab_size": (int, 257),
    "hidden": (int, 64),
    "n_layers": (int, 2),
    "n_heads": (_int_list, [4]),
    "n_kv_heads": (_opt(_int_list), None),
    "head_dim": (int, 16),
    "ffn": (_int_list, [128]),
    "max_seq_len": (int, 128),
    "tied_embeddings": (_bool, False),
    "positional": (str, "sinusoidal"),
}

RUN_KEYS = {
    "holdout": (float, 0.02),
    "eval_max_tokens": (_opt(int), None),
}

_TRAIN_TYPES = {
    "target_params": _opt(int), "target_ratio": _opt(float), "prune_ratio": _ratio,
    "second_order": _bool, "signed_saliency": _bool, "normalize_saliency": _bool,
}


def _train_keys() -> dict:
    keys, default = {}, TrainConfig()
    for f in fields(TrainConfig):
        value = getattr(default, f.name)
        conv = _TRAIN_TYPES.get(f.name) or type(value)
        keys[f.name] = (conv, value)
    return keys


TRAIN_KEYS = _train_keys()
ALL_KEYS = {**MODEL_KEYS, **TRAIN_KEYS, **RUN_KEYS}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    holdout: float = 0.02
    eval_max_tokens: int | None = None


def _per_layer(key: str, values: list[int], n_layers: int) -> list[int]:
    if len(values) == 1:
        return values * n_layers
    if len(values) != n_layers:
        raise ConfigError(key, f"expected 1 or {n_layers} values, got {len(values)}")
    return values


def parse_config(text: str, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(key or f"line{lineno}", "expected key = value")
        if key not in ALL_KEYS:
            raise ConfigError(key, "unknown key")
        if key in raw:
            raise ConfigError(key, "duplicate key")
        raw[key] = value
    if SEED_ENV in env:
        raw["seed"] = env[SEED_ENV]

    values = {}
    for key, (conv, default) in ALL_KEYS.items():
        if key in raw:
            try:
                values[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(key, f"bad value {raw[key]!r}: {exc}") from None
        else:
            values[key] = default

    n_layers = values["n_layers"]
    if n_layers < 1:
        raise ConfigError("n_layers", "must be >= 1")
    heads = _per_layer("n_heads", values["n_heads"], n_layers)
    kv = heads if values["n_kv_heads"] is None else _per_layer("n_kv_heads", values["n_kv_heads"], n_layers)
    model = ModelConfig(values["vocab_size"], values["hidden"], values["head_dim"], heads, kv,
                        _per_layer("ffn", values["ffn"], n_layers), values["max_seq_len"],
                        values["tied_embeddings"], values["positional"])
    try:
        model.validate()
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None
    train = TrainConfig(**{k: values[k] for k in TRAIN_KEYS})
    train.validate()
    if train.seq_len > model.max_seq_len:
        raise ConfigError("seq_len", f"{train.seq_len} exceeds max_seq_len {model.max_seq_len}")
    return RunConfig(model, train, values["holdout"], values["eval_max_tokens"])


def load_config(path, env: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, env)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return f"{value[0]}:{value[1]}"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return "none" if value is None else str(value)


def dump_config(cfg: RunConfig) -> str:
    m = cfg.model
    model_vals = {"vocab_size": m.vocab_size, "hidden": m.hidden, "n_layers": m.n_layers,
                  "n_heads": m.n_heads, "n_kv_heads": m.n_kv_heads, "head_dim": m.head_dim,
                  "ffn": m.ffn, "max_seq_len": m.max_seq_len, "tied_embeddings": m.tied_embeddings,
                  "positional": m.positional}
    lines = [f"{k} = {_fmt(v)}" for k, v in model_vals.items()]
    lines += [f"{f.name} = {_fmt(getattr(cfg.train, f.name))}" for f in fields(TrainConfig)]
    lines += [f"holdout = {cfg.holdout}", f"eval_max_tokens = {_fmt(cfg.eval_max_tokens)}"]
    return "\n".join(lines) + "\n"
