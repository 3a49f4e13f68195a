"""Cross-modal prompt construction.

The audio and visual embeddings are projected into a shared space by two
bias-free linear maps, combined with the Hadamard (elementwise) product so
only coordinates active in both modalities survive, and pushed through a
two-layer MLP (activation after the hidden layer only) into the text-prompt
space of the segmentation backbone.

Single-modality ablation arms route the projected CLIP-side or CLAP-side
vector straight to the MLP with no placeholder partner.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import PROMPT_SOURCES
from .encoders.base import AudioEmbedding, ImageEmbedding
from .errors import DimensionError

ACTIVATIONS = {
    "silu": F.silu,
    "gelu": F.gelu,
    "tanh": torch.tanh,
}


def _seeded_weight(rows: int, cols: int, generator: Optional[torch.Generator],
                   dtype: torch.dtype) -> torch.Tensor:
    w = torch.empty(rows, cols, dtype=dtype)
    w.normal_(mean=0.0, std=cols ** -0.5, generator=generator)
    return w


class ProjectionParams(nn.Module):
    """Learned maps into the shared space and on to text-prompt space.

    ``w_a`` (d_s x d_a) and ``w_v`` (d_s x d_v) carry no bias; the MLP
    layers are affine with an activation after the hidden layer only.
    """

    def __init__(
        self,
        d_a: int,
        d_v: int,
        d_s: int,
        d_text: int,
        d_h: Optional[int] = None,
        activation: str = "silu",
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        d_h = d_h if d_h is not None else d_s
        self.dims = {"d_a": d_a, "d_v": d_v, "d_s": d_s, "d_h": d_h, "d_text": d_text}
        self.activation_name = activation
        self.w_a = nn.Parameter(_seeded_weight(d_s, d_a, generator, dtype))
        self.w_v = nn.Parameter(_seeded_weight(d_s, d_v, generator, dtype))
        self.mlp_hidden = nn.Parameter(_seeded_weight(d_h, d_s, generator, dtype))
        self.mlp_hidden_bias = nn.Parameter(torch.zeros(d_h, dtype=dtype))
        self.mlp_out = nn.Parameter(_seeded_weight(d_text, d_h, generator, dtype))
        self.mlp_out_bias = nn.Parameter(torch.zeros(d_text, dtype=dtype))

    @property
    def activation(self):
        return ACTIVATIONS[self.activation_name]


@dataclass(frozen=True)
class PromptFeature:
    """The projected modality vectors, their combination, and its text-space image.

    ``fused`` is whatever vector was routed to the text-space MLP: the
    Hadamard product for the fused source, or the single projected vector
    for the clip_only / clap_only ablation arms.
    """

    f_clap: torch.Tensor
    f_clip: torch.Tensor
    fused: torch.Tensor
    text_space: torch.Tensor
    source: str

    def __post_init__(self):
        if self.source not in PROMPT_SOURCES:
            raise ValueError(f"source must be one of {PROMPT_SOURCES}, got {self.source!r}")
        for name in ("f_clap", "f_clip", "fused", "text_space"):
            t = getattr(self, name)
            if not bool(torch.isfinite(t).all()):
                raise ValueError(f"PromptFeature.{name} contains non-finite entries")
        if self.source == "fused":
            expected = self.f_clip * self.f_clap
            if not torch.equal(self.fused, expected):
                raise ValueError("fused vector is not the elementwise product of f_clip and f_clap")


def _as_vector(x: Union[torch.Tensor, ImageEmbedding, AudioEmbedding]) -> torch.Tensor:
    vec = x.vector if hasattr(x, "vector") else torch.as_tensor(x)
    if vec.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {tuple(vec.shape)}")
    return vec


def project_audio(a: Union[AudioEmbedding, torch.Tensor], params: ProjectionParams) -> torch.Tensor:
    """W_a @ a: one bias-free linear map into the shared space."""
    vec = _as_vector(a)
    if vec.shape[0] != params.dims["d_a"]:
        raise DimensionError(
            f"audio embedding has dimension {vec.shape[0]}, expected {params.dims['d_a']}"
        )
    return params.w_a @ vec.to(params.w_a.dtype)


def project_visual(v: Union[ImageEmbedding, torch.Tensor], params: ProjectionParams) -> torch.Tensor:
    """W_v @ v: one bias-free linear map into the shared space."""
    vec = _as_vector(v)
    if vec.shape[0] != params.dims["d_v"]:
        raise DimensionError(
            f"image embedding has dimension {vec.shape[0]}, expected {params.dims['d_v']}"
        )
    return params.w_v @ vec.to(params.w_v.dtype)


def fuse(f_clip: torch.Tensor, f_clap: torch.Tensor) -> torch.Tensor:
    """Hadamard product; keeps coordinates where both modalities are active."""
    if f_clip.shape != f_clap.shape:
        raise DimensionError(
            f"cannot fuse vectors of shapes {tuple(f_clip.shape)} and {tuple(f_clap.shape)}"
        )
    return f_clip * f_clap


def to_text_space(fused: torch.Tensor, params: ProjectionParams) -> torch.Tensor:
    """Two-layer MLP into text-prompt space; activation after the hidden layer only."""
    if fused.shape[-1] != params.dims["d_s"]:
        raise DimensionError(
            f"fused vector has dimension {fused.shape[-1]}, expected {params.dims['d_s']}"
        )
    if not bool(torch.isfinite(fused).all()):
        raise ValueError("to_text_space requires finite input")
    hidden = params.activation(params.mlp_hidden @ fused + params.mlp_hidden_bias)
    return params.mlp_out @ hidden + params.mlp_out_bias


def build_prompt(
    a: Union[AudioEmbedding, torch.Tensor],
    v: Union[ImageEmbedding, torch.Tensor],
    params: ProjectionParams,
    source: str = "fused",
) -> PromptFeature:
    """Project both modalities, combine per ``source``, and map to text space."""
    if source not in PROMPT_SOURCES:
        raise ValueError(f"source must be one of {PROMPT_SOURCES}, got {source!r}")
    f_clap = project_audio(a, params)
    f_clip = project_visual(v, params)
    if source == "fused":
        routed = fuse(f_clip, f_clap)
    elif source == "clip_only":
        routed = f_clip
    else:
        routed = f_clap
    text = to_text_space(routed, params)
    return PromptFeature(f_clap=f_clap, f_clip=f_clip, fused=routed, text_space=text, source=source)
