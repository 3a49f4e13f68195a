"""Deterministic, differentiable stand-ins for the pretrained encoders.

Each stub is a small seeded random-projection network: the input is pooled
to a fixed size, multiplied by a frozen random matrix drawn from the
configured seed, passed through a smooth nonlinearity, and (for the
embedding encoders) L2-normalized. Identical inputs give bit-identical
outputs across process restarts because the matrices come from a PCG64
stream seeded by config, and all ops run in float64 on CPU.

Degenerate all-zero inputs (e.g. silent audio) cannot be normalized, so
they map to a reserved unit vector drawn from the same seed; this keeps
the output finite and documented rather than NaN.

The stub backbone's final layer is activation-free so additivity of prompt
injection can be asserted through a real layer transform; all earlier
layers use tanh.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..datamodel import AudioSegment, Frame
from ..errors import DimensionError
from .base import (
    AudioEmbedding,
    BackboneFeatures,
    BackendDescriptor,
    ImageEmbedding,
    tensor_checksum,
    validate_prompts,
)

IMAGE_POOL = 4   # frames pool to (3, 4, 4) -> 48 inputs
AUDIO_BINS = 64  # waveforms pool to 64 bins
MM_IMAGE_DIM = 16


def _matrix(rng: np.random.Generator, rows: int, cols: int) -> torch.Tensor:
    w = rng.normal(size=(rows, cols)) / np.sqrt(cols)
    return torch.from_numpy(w).to(torch.float64)


def _unit(rng: np.random.Generator, dim: int) -> torch.Tensor:
    v = rng.normal(size=dim)
    v = v / np.linalg.norm(v)
    return torch.from_numpy(v).to(torch.float64)


class StubSuite:
    """Seeded random-projection encoder suite for desk-scale runs."""

    dtype = torch.float64

    def __init__(self, descriptor: BackendDescriptor, seed: int):
        if descriptor.kind != "stub":
            raise ValueError(f"StubSuite requires a stub descriptor, got kind={descriptor.kind!r}")
        self.descriptor = descriptor
        self.seed = int(seed)
        rng = np.random.Generator(np.random.PCG64(self.seed))

        d = descriptor
        self.w_image = _matrix(rng, d.d_v, 3 * IMAGE_POOL * IMAGE_POOL)
        self.image_fallback = _unit(rng, d.d_v)
        self.w_audio = _matrix(rng, d.d_a, AUDIO_BINS)
        self.audio_fallback = _unit(rng, d.d_a)

        in_dims = (3,) + d.channels[:-1]
        # stored as (c_in, c_out), fan-in scaled; applied as h @ W + b
        self.backbone_weights = [_matrix(rng, c_out, c_in).T.contiguous()
                                 for c_in, c_out in zip(in_dims, d.channels)]
        self.backbone_biases = [torch.from_numpy(rng.normal(size=c) * 0.1).to(torch.float64)
                                for c in d.channels]
        self.linear_layer_index = d.num_layers - 1  # activation-free test layer

        self.w_mm_image = _matrix(rng, MM_IMAGE_DIM, 3 * IMAGE_POOL * IMAGE_POOL)
        self.w_tokens = _matrix(rng, d.num_tokens * d.token_dim, d.d_text + MM_IMAGE_DIM)
        self.b_tokens = torch.from_numpy(rng.normal(size=d.num_tokens * d.token_dim) * 0.1).to(torch.float64)

    # -- embedding encoders -------------------------------------------------

    def encode_image(self, frame: Frame) -> ImageEmbedding:
        pooled = self._pool_image(self._frame_tensor(frame))
        pre = torch.tanh(self.w_image @ pooled)
        return ImageEmbedding(self._normalize(pre, self.image_fallback))

    def encode_audio(self, segment: AudioSegment) -> AudioEmbedding:
        x = torch.from_numpy(np.asarray(segment.samples, dtype=np.float64))
        if x.ndim != 1:
            raise DimensionError(f"audio samples must be 1-D, got shape {tuple(x.shape)}")
        pooled = F.adaptive_avg_pool1d(x.view(1, 1, -1), AUDIO_BINS).reshape(-1)
        pre = torch.tanh(self.w_audio @ pooled)
        return AudioEmbedding(self._normalize(pre, self.audio_fallback))

    # -- backbone ------------------------------------------------------------

    def encode_backbone(
        self,
        frames: Sequence[Frame],
        prompts: Optional[Sequence[Optional[torch.Tensor]]] = None,
    ) -> BackboneFeatures:
        """Run the backbone; prompt tensor j is added to layer j's output.

        With ``prompts`` absent or all-zero the result is identical to the
        unprompted backbone.
        """
        if not frames:
            raise DimensionError("encode_backbone requires at least one frame")
        shapes = {(f.height, f.width) for f in frames}
        if len(shapes) > 1:
            raise DimensionError(f"frames must share one resolution, got {sorted(shapes)}")
        validate_prompts(prompts, self.descriptor, len(frames))

        pixels = torch.stack([self._frame_tensor(f) for f in frames])  # (T, 3, H, W)
        g = self.descriptor.grid
        h = F.adaptive_avg_pool2d(pixels, (g, g)).flatten(2).transpose(1, 2)  # (T, g*g, 3)

        outputs = []
        for j in range(self.descriptor.num_layers):
            z = h @ self.backbone_weights[j] + self.backbone_biases[j]
            if j != self.linear_layer_index:
                z = torch.tanh(z)
            if prompts is not None and prompts[j] is not None:
                z = z + prompts[j].to(z.dtype)
            outputs.append(z)
            h = z
        return BackboneFeatures(layer_outputs=tuple(outputs), num_layers=self.descriptor.num_layers)

    # -- multimodal prompt encoder (frozen) -----------------------------------

    def encode_multimodal_prompt(self, text_space_vector: torch.Tensor, frame: Frame) -> torch.Tensor:
        """Mix a text-space vector with frame content into decoder prompt tokens.

        Returns a (num_tokens, token_dim) tensor. Differentiable in the
        vector; the mixing weights are frozen.
        """
        vec = torch.as_tensor(text_space_vector, dtype=torch.float64)
        if vec.ndim != 1 or vec.shape[0] != self.descriptor.d_text:
            raise DimensionError(
                f"text-space vector must have dimension {self.descriptor.d_text}, "
                f"got shape {tuple(vec.shape)}"
            )
        img_feat = torch.tanh(self.w_mm_image @ self._pool_image(self._frame_tensor(frame)))
        x = torch.cat([vec, img_feat])
        tokens = torch.tanh(self.w_tokens @ x + self.b_tokens)
        return tokens.reshape(self.descriptor.num_tokens, self.descriptor.token_dim)

    # -- audits ----------------------------------------------------------------

    def parameter_checksums(self) -> dict:
        return {
            "image_encoder": tensor_checksum([self.w_image, self.image_fallback]),
            "audio_encoder": tensor_checksum([self.w_audio, self.audio_fallback]),
            "backbone": tensor_checksum([*self.backbone_weights, *self.backbone_biases]),
            "multimodal_encoder": tensor_checksum([self.w_mm_image, self.w_tokens, self.b_tokens]),
        }

    # -- helpers -----------------------------------------------------------------

    @staticmethod
    def _frame_tensor(frame: Frame) -> torch.Tensor:
        px = torch.from_numpy(np.asarray(frame.pixels, dtype=np.float64))
        if px.ndim != 3 or px.shape[0] != 3:
            raise DimensionError(f"frame pixels must have shape (3, H, W), got {tuple(px.shape)}")
        return px

    @staticmethod
    def _pool_image(pixels: torch.Tensor) -> torch.Tensor:
        return F.adaptive_avg_pool2d(pixels.unsqueeze(0), (IMAGE_POOL, IMAGE_POOL)).reshape(-1)

    @staticmethod
    def _normalize(pre: torch.Tensor, fallback: torch.Tensor) -> torch.Tensor:
        norm = torch.linalg.vector_norm(pre)
        if float(norm) < 1e-12:
            return fallback.clone()
        return pre / norm
