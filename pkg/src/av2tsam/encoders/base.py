"""Backend contract shared by the stub and pretrained encoder suites.

A suite bundles four components behind one object:

* an image encoder producing L2-normalized clip-level embeddings,
* an audio encoder producing L2-normalized embeddings,
* a promptable segmentation backbone exposing every layer's spatial
  features so per-layer prompt tensors can be added to them,
* a frozen multimodal encoder turning a text-space vector plus a frame
  into prompt tokens for the mask decoder.

Every operation is deterministic for fixed inputs and a fixed suite.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from ..errors import DimensionError

NORM_TOL = 1e-5


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    kind: str  # "stub" | "pretrained"
    d_v: int
    d_a: int
    d_text: int
    num_layers: int
    channels: tuple
    grid: int  # feature maps are grid x grid per frame
    num_tokens: int
    token_dim: int

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        dims = (self.d_v, self.d_a, self.d_text, self.num_layers, self.grid,
                self.num_tokens, self.token_dim, *self.channels)
        if any(d <= 0 for d in dims):
            raise ValueError(f"backend dimensions must be strictly positive: {self}")
        if len(self.channels) != self.num_layers:
            raise ValueError(
                f"channels has {len(self.channels)} entries for num_layers={self.num_layers}"
            )

    @property
    def num_positions(self) -> int:
        """Spatial positions per frame in backbone feature space."""
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "d_v": self.d_v,
            "d_a": self.d_a,
            "d_text": self.d_text,
            "num_layers": self.num_layers,
            "channels": list(self.channels),
            "grid": self.grid,
            "num_tokens": self.num_tokens,
            "token_dim": self.token_dim,
        }


def _check_normalized(vector: torch.Tensor, what: str) -> None:
    norm = float(torch.linalg.vector_norm(vector))
    if abs(norm - 1.0) > NORM_TOL:
        raise ValueError(f"{what} must be L2-normalized, got norm {norm!r}")


@dataclass(frozen=True)
class ImageEmbedding:
    vector: torch.Tensor  # (d_v,), unit L2 norm

    def __post_init__(self):
        _check_normalized(self.vector, "ImageEmbedding.vector")


@dataclass(frozen=True)
class AudioEmbedding:
    vector: torch.Tensor  # (d_a,), unit L2 norm

    def __post_init__(self):
        _check_normalized(self.vector, "AudioEmbedding.vector")


@dataclass(frozen=True)
class BackboneFeatures:
    """Per-layer spatial features; layer j has shape (T, positions, C_j)."""

    layer_outputs: tuple
    num_layers: int

    def __post_init__(self):
        object.__setattr__(self, "layer_outputs", tuple(self.layer_outputs))
        if len(self.layer_outputs) != self.num_layers:
            raise ValueError(
                f"{len(self.layer_outputs)} layer outputs for num_layers={self.num_layers}"
            )
        leading = {int(t.shape[0]) for t in self.layer_outputs}
        if len(leading) > 1:
            raise ValueError(f"inconsistent leading (frame) dimensions: {sorted(leading)}")

    @property
    def last(self) -> torch.Tensor:
        return self.layer_outputs[-1]


def validate_prompts(
    prompts: Optional[Sequence[Optional[torch.Tensor]]],
    descriptor: BackendDescriptor,
    num_frames: int,
) -> None:
    """Check per-layer prompt tensors against (T, positions, C_j); name the bad layer."""
    if prompts is None:
        return
    if len(prompts) != descriptor.num_layers:
        raise DimensionError(
            f"expected {descriptor.num_layers} per-layer prompts, got {len(prompts)}"
        )
    positions = descriptor.num_positions
    for j, p in enumerate(prompts):
        if p is None:
            continue
        expected = (num_frames, positions, descriptor.channels[j])
        if tuple(p.shape) != expected:
            raise DimensionError(
                f"prompt tensor at layer {j} has shape {tuple(p.shape)}, expected {expected}"
            )


def tensor_checksum(tensors: Sequence[torch.Tensor]) -> str:
    """Order-sensitive sha256 over raw tensor bytes; used for freeze audits."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
