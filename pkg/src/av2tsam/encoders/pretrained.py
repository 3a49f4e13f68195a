"""Pretrained encoder suite backed by exported TorchScript assets.

Full-scale runs wrap exported modules rather than bundling model code.
The weight root is ``weights_dir`` from the backend config, overridable
with the ``AV2T_BACKEND_DIR`` environment variable. Expected files:

    image_encoder.pt        frame (1, 3, H, W) float32 -> (d_v,) embedding
    audio_encoder.pt        waveform (1, S) float32 -> (d_a,) embedding
    backbone.pt             frames (T, 3, H, W), prompts list -> per-layer features
    multimodal_encoder.pt   (text-space vector, frame) -> prompt tokens

Loading is lazy: nothing is read until a component is first used, so
desk-scale code paths never require the assets. A missing file raises
:class:`BackendUnavailableError` naming the path; there is no silent
fallback to the stub suite. The multimodal encoder is frozen on load and
never receives gradient updates.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Sequence

import torch

from ..datamodel import AudioSegment, Frame
from ..errors import BackendUnavailableError, DimensionError
from .base import (
    AudioEmbedding,
    BackboneFeatures,
    BackendDescriptor,
    ImageEmbedding,
    tensor_checksum,
    validate_prompts,
)

ENV_BACKEND_DIR = "AV2T_BACKEND_DIR"

ASSET_FILES = {
    "image_encoder": "image_encoder.pt",
    "audio_encoder": "audio_encoder.pt",
    "backbone": "backbone.pt",
    "multimodal_encoder": "multimodal_encoder.pt",
}


class PretrainedSuite:
    dtype = torch.float32

    def __init__(self, descriptor: BackendDescriptor, weights_dir: Optional[str] = None):
        if descriptor.kind != "pretrained":
            raise ValueError(
                f"PretrainedSuite requires a pretrained descriptor, got kind={descriptor.kind!r}"
            )
        self.descriptor = descriptor
        self._weights_dir = weights_dir
        self._modules: dict = {}

    @property
    def weights_dir(self) -> Path:
        root = os.environ.get(ENV_BACKEND_DIR) or self._weights_dir
        if not root:
            raise BackendUnavailableError(
                "no pretrained weight directory configured: set backend.pretrained.weights_dir "
                f"or the {ENV_BACKEND_DIR} environment variable"
            )
        return Path(root)

    def _load(self, component: str):
        if component not in self._modules:
            path = self.weights_dir / ASSET_FILES[component]
            if not path.is_file():
                raise BackendUnavailableError(f"missing pretrained asset for {component}: {path}")
            module = torch.jit.load(str(path), map_location="cpu")
            module.eval()
            if component == "multimodal_encoder":
                for p in module.parameters():
                    p.requires_grad_(False)
            self._modules[component] = module
        return self._modules[component]

    def encode_image(self, frame: Frame) -> ImageEmbedding:
        module = self._load("image_encoder")
        px = torch.from_numpy(frame.pixels.copy()).to(self.dtype).unsqueeze(0)
        with torch.no_grad():
            vec = module(px).reshape(-1)
        if vec.shape[0] != self.descriptor.d_v:
            raise DimensionError(
                f"image encoder produced dimension {vec.shape[0]}, expected {self.descriptor.d_v}"
            )
        return ImageEmbedding(vec / torch.linalg.vector_norm(vec))

    def encode_audio(self, segment: AudioSegment) -> AudioEmbedding:
        module = self._load("audio_encoder")
        wav = torch.from_numpy(segment.samples.copy()).to(self.dtype).unsqueeze(0)
        with torch.no_grad():
            vec = module(wav).reshape(-1)
        if vec.shape[0] != self.descriptor.d_a:
            raise DimensionError(
                f"audio encoder produced dimension {vec.shape[0]}, expected {self.descriptor.d_a}"
            )
        return AudioEmbedding(vec / torch.linalg.vector_norm(vec))

    def encode_backbone(
        self,
        frames: Sequence[Frame],
        prompts: Optional[Sequence[Optional[torch.Tensor]]] = None,
    ) -> BackboneFeatures:
        module = self._load("backbone")
        validate_prompts(prompts, self.descriptor, len(frames))
        pixels = torch.stack([torch.from_numpy(f.pixels.copy()).to(self.dtype) for f in frames])
        if prompts is None:
            prompt_list = [torch.zeros(len(frames), self.descriptor.num_positions, c, dtype=self.dtype)
                           for c in self.descriptor.channels]
        else:
            prompt_list = [
                p.to(self.dtype) if p is not None
                else torch.zeros(len(frames), self.descriptor.num_positions,
                                 self.descriptor.channels[j], dtype=self.dtype)
                for j, p in enumerate(prompts)
            ]
        outputs = module(pixels, prompt_list)
        return BackboneFeatures(layer_outputs=tuple(outputs), num_layers=self.descriptor.num_layers)

    def encode_multimodal_prompt(self, text_space_vector: torch.Tensor, frame: Frame) -> torch.Tensor:
        module = self._load("multimodal_encoder")
        vec = torch.as_tensor(text_space_vector, dtype=self.dtype)
        if vec.ndim != 1 or vec.shape[0] != self.descriptor.d_text:
            raise DimensionError(
                f"text-space vector must have dimension {self.descriptor.d_text}, "
                f"got shape {tuple(vec.shape)}"
            )
        px = torch.from_numpy(frame.pixels.copy()).to(self.dtype).unsqueeze(0)
        tokens = module(vec, px)
        return tokens.reshape(self.descriptor.num_tokens, self.descriptor.token_dim)

    def parameter_checksums(self) -> dict:
        """Checksums of every suite component; loads any not yet touched."""
        sums = {}
        for component in ASSET_FILES:
            params = list(self._load(component).parameters())
            sums[component] = tensor_checksum(params) if params else "no-parameters"
        return sums
