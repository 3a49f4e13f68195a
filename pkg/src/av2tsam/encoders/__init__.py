"""Encoder backends: the contract plus stub and pretrained suites."""

from __future__ import annotations

from ..config import RunConfig
from .base import (
    NORM_TOL,
    AudioEmbedding,
    BackboneFeatures,
    BackendDescriptor,
    ImageEmbedding,
    tensor_checksum,
    validate_prompts,
)
from .pretrained import ENV_BACKEND_DIR, PretrainedSuite
from .stub import StubSuite

__all__ = [
    "AudioEmbedding",
    "BackboneFeatures",
    "BackendDescriptor",
    "ENV_BACKEND_DIR",
    "ImageEmbedding",
    "NORM_TOL",
    "PretrainedSuite",
    "StubSuite",
    "descriptor_from_config",
    "make_suite",
    "tensor_checksum",
    "validate_prompts",
]


def descriptor_from_config(cfg: RunConfig) -> BackendDescriptor:
    b = cfg.backend
    return BackendDescriptor(
        name=b.get("name", cfg.backend_kind),
        kind=cfg.backend_kind,
        d_v=int(b["d_v"]),
        d_a=int(b["d_a"]),
        d_text=int(b["d_text"]),
        num_layers=int(b["num_layers"]),
        channels=tuple(b["channels"]),
        grid=int(b["grid"]),
        num_tokens=int(b["num_tokens"]),
        token_dim=int(b["token_dim"]),
    )


def make_suite(cfg: RunConfig):
    descriptor = descriptor_from_config(cfg)
    if cfg.backend_kind == "stub":
        return StubSuite(descriptor, seed=int(cfg.backend["seed"]))
    return PretrainedSuite(descriptor, weights_dir=cfg.backend.get("weights_dir"))
