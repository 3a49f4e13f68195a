"""Layered run configuration: built-in defaults < config file < overrides.

The fully resolved configuration is dumped into every run manifest so any
artifact can be reproduced from its manifest alone. Override keys use dot
paths (``train.lr=0.01``) and must name keys that already exist.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .errors import ConfigKeyError

PROMPT_SOURCES = ("fused", "clip_only", "clap_only")
ADAPTER_TAPS = ("fused", "text_space")
ACTIVATION_NAMES = ("silu", "gelu", "tanh")

DEFAULTS: dict = {
    "seed": 0,
    "prompt_source": "fused",
    "backend": {
        "kind": "stub",
        "stub": {
            "seed": 1234,
            "d_v": 16,
            "d_a": 12,
            "d_text": 8,
            "num_layers": 4,
            "channels": [8, 8, 8, 8],
            "grid": 8,
            "num_tokens": 4,
            "token_dim": 8,
        },
        "pretrained": {
            "name": "evf-sam2",
            "d_v": 768,
            "d_a": 512,
            "d_text": 1024,
            "num_layers": 24,
            "channels": [144] * 24,
            "grid": 64,
            "num_tokens": 8,
            "token_dim": 256,
            "weights_dir": None,
        },
    },
    "fusion": {
        "d_s": 8,
        "d_h": None,  # None -> d_s
        "activation": "silu",
    },
    "adapter": {
        "enabled": True,
        "tap": "fused",  # which prompt vector the adapters project
        "layers": None,  # None -> every backbone layer
    },
    "train": {
        "epochs": 40,
        "lr": 1e-4,
        "weight_decay": 1e-2,
        "betas": [0.9, 0.999],
        "batch_size": 2,
        "resolution": None,  # None -> 64 for stub, 1024 for pretrained
        "checkpoint_every": 1,
        "decoder_trainable": True,
        "decoder_hidden": 8,
        "decoder_pixel_skip": True,
    },
    "eval": {
        "threshold": 0.5,
        "beta2": 1.0,
    },
    "data": {
        "sample_rate": 16000,
    },
}


def _deep_update(base: dict, extra: Mapping) -> None:
    for key, value in extra.items():
        if key not in base:
            raise ConfigKeyError(f"unknown config key: {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigKeyError(f"config key {key!r} expects a section, got {value!r}")
            _deep_update(base[key], value)
        else:
            base[key] = value


def _parse_override_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        return raw


def apply_override(tree: dict, dotted_key: str, raw_value: str) -> None:
    """Set ``tree[a][b][c] = value`` for ``dotted_key == "a.b.c"``.

    The key must already exist; values are parsed as JSON with a plain-string
    fallback so ``train.lr=0.01`` and ``backend.kind=stub`` both work.
    """
    parts = dotted_key.split(".")
    node = tree
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigKeyError(f"unknown config key: {dotted_key!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigKeyError(f"unknown config key: {dotted_key!r}")
    if isinstance(node[leaf], dict):
        raise ConfigKeyError(f"config key {dotted_key!r} is a section, not a value")
    node[leaf] = _parse_override_value(raw_value)


@dataclass(frozen=True)
class RunConfig:
    """Immutable view over a resolved configuration tree."""

    tree: dict

    def __post_init__(self):
        validate_tree(self.tree)

    # convenience accessors (read-heavy call sites stay short)
    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def prompt_source(self) -> str:
        return self.tree["prompt_source"]

    @property
    def backend_kind(self) -> str:
        return self.tree["backend"]["kind"]

    @property
    def backend(self) -> dict:
        return self.tree["backend"][self.backend_kind]

    @property
    def fusion(self) -> dict:
        return self.tree["fusion"]

    @property
    def adapter(self) -> dict:
        return self.tree["adapter"]

    @property
    def train(self) -> dict:
        return self.tree["train"]

    @property
    def eval(self) -> dict:
        return self.tree["eval"]

    @property
    def data(self) -> dict:
        return self.tree["data"]

    @property
    def resolution(self) -> int:
        res = self.tree["train"]["resolution"]
        if res is None:
            return 64 if self.backend_kind == "stub" else 1024
        return int(res)

    @property
    def d_h(self) -> int:
        d_h = self.tree["fusion"]["d_h"]
        return int(d_h) if d_h is not None else int(self.tree["fusion"]["d_s"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.tree)

    def with_overrides(self, sets: Sequence[str]) -> "RunConfig":
        tree = copy.deepcopy(self.tree)
        for item in sets:
            if "=" not in item:
                raise ConfigKeyError(f"override must look like key=value, got {item!r}")
            key, _, value = item.partition("=")
            apply_override(tree, key.strip(), value.strip())
        return RunConfig(tree)


def validate_tree(tree: Mapping) -> None:
    if tree["backend"]["kind"] not in ("stub", "pretrained"):
        raise ValueError(f"backend.kind must be stub or pretrained, got {tree['backend']['kind']!r}")
    if tree["prompt_source"] not in PROMPT_SOURCES:
        raise ValueError(f"prompt_source must be one of {PROMPT_SOURCES}, got {tree['prompt_source']!r}")
    if tree["adapter"]["tap"] not in ADAPTER_TAPS:
        raise ValueError(f"adapter.tap must be one of {ADAPTER_TAPS}")
    if tree["fusion"]["activation"] not in ACTIVATION_NAMES:
        raise ValueError(f"fusion.activation must be one of {ACTIVATION_NAMES}")
    if int(tree["train"]["epochs"]) <= 0:
        raise ValueError("train.epochs must be positive")
    res = tree["train"]["resolution"]
    if res is not None and int(res) <= 0:
        raise ValueError("train.resolution must be positive")
    for section in ("stub", "pretrained"):
        sec = tree["backend"][section]
        if len(sec["channels"]) != int(sec["num_layers"]):
            raise ValueError(
                f"backend.{section}: channels has {len(sec['channels'])} entries "
                f"for num_layers={sec['num_layers']}"
            )


def load_config(
    path: Optional[str] = None,
    sets: Sequence[str] = (),
    flag_overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Resolve defaults < file < --set overrides < explicit CLI flags."""
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            file_tree = json.load(fh)
        _deep_update(tree, file_tree)
    cfg = RunConfig(tree).with_overrides(sets)
    if flag_overrides:
        tree = cfg.to_dict()
        for dotted, value in flag_overrides.items():
            if value is None:
                continue
            apply_override(tree, dotted, json.dumps(value) if not isinstance(value, str) else value)
        cfg = RunConfig(tree)
    return cfg


def dump_config(cfg: RunConfig, path: Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
