"""Per-layer prompt injection into the segmentation backbone.

Each selected backbone layer gets a small affine adapter that projects the
prompt vector to that layer's channel width; the resulting vector is
repeated over every frame/spatial position and added to the layer output.
Adapters initialize to exactly zero (weights and bias), so a freshly built
model behaves bit-identically to the no-adapter model until training moves
the parameters.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import torch
import torch.nn as nn

from .config import ADAPTER_TAPS
from .encoders.base import BackboneFeatures, BackendDescriptor
from .errors import DimensionError
from .fusion import PromptFeature


class AdapterStack(nn.Module):
    """Affine maps from the prompt vector to channel space, one per selected layer."""

    def __init__(
        self,
        descriptor: BackendDescriptor,
        d_in: int,
        layer_selection: Optional[Sequence[int]] = None,
        tap: str = "fused",
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if tap not in ADAPTER_TAPS:
            raise ValueError(f"tap must be one of {ADAPTER_TAPS}, got {tap!r}")
        if layer_selection is None:
            layer_selection = range(descriptor.num_layers)
        selection = tuple(sorted(int(j) for j in layer_selection))
        for j in selection:
            if not (0 <= j < descriptor.num_layers):
                raise ValueError(
                    f"layer {j} is not a valid backbone layer (0..{descriptor.num_layers - 1})"
                )
        if len(set(selection)) != len(selection):
            raise ValueError(f"duplicate layers in selection: {selection}")
        self.layer_selection = selection
        self.tap = tap
        self.d_in = int(d_in)
        self.num_layers = descriptor.num_layers
        self.maps = nn.ModuleDict()
        for j in selection:
            linear = nn.Linear(self.d_in, descriptor.channels[j], dtype=dtype)
            nn.init.zeros_(linear.weight)
            nn.init.zeros_(linear.bias)
            self.maps[str(j)] = linear

    def tap_vector(self, prompt: PromptFeature) -> torch.Tensor:
        vec = prompt.fused if self.tap == "fused" else prompt.text_space
        if vec.shape[0] != self.d_in:
            raise DimensionError(
                f"adapter input ({self.tap}) has dimension {vec.shape[0]}, expected {self.d_in}"
            )
        return vec


def make_prompt_tensor(
    prompt: Union[PromptFeature, Sequence[PromptFeature]],
    layer: int,
    spatial: tuple,
    stack: AdapterStack,
) -> torch.Tensor:
    """Project the prompt through layer ``layer``'s adapter and tile it.

    ``spatial`` is (T, positions). A single PromptFeature is broadcast over
    every frame; a sequence supplies one prompt per frame (length T). The
    returned tensor has shape (T, positions, C_layer) and is constant along
    the spatial axis by construction.
    """
    if layer not in stack.layer_selection:
        raise DimensionError(f"layer {layer} has no adapter (selection: {list(stack.layer_selection)})")
    t, positions = int(spatial[0]), int(spatial[1])
    linear = stack.maps[str(layer)]
    if isinstance(prompt, PromptFeature):
        vec = linear(stack.tap_vector(prompt))  # (C,)
        return vec.view(1, 1, -1).expand(t, positions, -1)
    prompts = list(prompt)
    if len(prompts) != t:
        raise DimensionError(f"got {len(prompts)} per-frame prompts for T={t}")
    rows = torch.stack([linear(stack.tap_vector(p)) for p in prompts])  # (T, C)
    return rows.unsqueeze(1).expand(t, positions, -1)


def inject(
    frames,
    prompt: Union[PromptFeature, Sequence[PromptFeature]],
    stack: AdapterStack,
    suite,
) -> BackboneFeatures:
    """Run the backbone with adapter prompts; unselected layers get no injection."""
    descriptor = suite.descriptor
    spatial = (len(frames), descriptor.num_positions)
    per_layer = [
        make_prompt_tensor(prompt, j, spatial, stack) if j in stack.layer_selection else None
        for j in range(descriptor.num_layers)
    ]
    return suite.encode_backbone(frames, per_layer)
