"""Core data types for audio-visual segmentation clips.

A clip pairs T visual frames with T one-second audio segments and an
optional set of ground-truth masks. All types are immutable after
construction (the backing numpy arrays are marked read-only), so they can
be shared freely across threads.

Construction is deliberately lenient: inconsistent clips are representable,
and :func:`validate_clip` reports every invariant violation as data rather
than raising. This lets ingestion surface all problems of a bad tree at
once instead of stopping at the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np


class Subset(str, Enum):
    S4 = "s4"
    MS3 = "ms3"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class MaskKind(str, Enum):
    BINARY = "binary"
    SOFT = "soft"


def _freeze(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    out = np.asarray(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Frame:
    """One visual frame: 3-channel pixels in [0, 1], 1-based position index."""

    pixels: np.ndarray  # shape (3, height, width)
    height: int
    width: int
    index: int

    def __post_init__(self):
        object.__setattr__(self, "pixels", _freeze(self.pixels))

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, index: int) -> "Frame":
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[0] != 3:
            raise ValueError(f"expected pixels of shape (3, H, W), got {pixels.shape}")
        return cls(pixels=pixels, height=pixels.shape[1], width=pixels.shape[2], index=index)


@dataclass(frozen=True)
class AudioSegment:
    """One second of mono waveform paired with the frame of the same index."""

    samples: np.ndarray  # shape (sample_rate,), amplitudes in [-1, 1]
    sample_rate: int
    index: int

    def __post_init__(self):
        object.__setattr__(self, "samples", _freeze(self.samples))


@dataclass(frozen=True)
class MaskSet:
    """Per-frame segmentation maps for a subset of a clip's frames.

    ``frame_indices`` lists the 1-based frame positions the masks belong to,
    aligned with ``masks``. Binary masks hold only {0, 1}; soft masks hold
    probabilities in [0, 1].
    """

    masks: tuple
    kind: MaskKind
    frame_indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(_freeze(m) for m in self.masks))
        object.__setattr__(self, "frame_indices", tuple(int(i) for i in self.frame_indices))
        if len(self.masks) != len(self.frame_indices):
            raise ValueError(
                f"masks ({len(self.masks)}) and frame_indices ({len(self.frame_indices)}) differ in length"
            )

    def mask_for(self, frame_index: int) -> Optional[np.ndarray]:
        for i, fi in enumerate(self.frame_indices):
            if fi == frame_index:
                return self.masks[i]
        return None


@dataclass(frozen=True)
class VideoClip:
    """T paired frames/audio segments plus optional ground truth.

    For S4 training clips only the first frame carries a mask; every other
    annotated (subset, split) combination masks all T frames.
    """

    clip_id: str
    frames: tuple
    audio: tuple
    ground_truth: Optional[MaskSet]
    subset: Subset
    split: Split
    category: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "audio", tuple(self.audio))
        object.__setattr__(self, "subset", Subset(self.subset))
        object.__setattr__(self, "split", Split(self.split))

    @property
    def num_frames(self) -> int:
        return len(self.frames)


ValidationReport = list  # list[str]; empty report means the clip is valid


def validate_clip(clip: VideoClip) -> ValidationReport:
    """Return every invariant violation of ``clip``. Pure; empty iff valid."""
    report: list[str] = []
    t = clip.num_frames

    if len(clip.audio) != t:
        report.append(
            f"clip {clip.clip_id}: {t} frames but {len(clip.audio)} audio segments"
        )

    for pos, frame in enumerate(clip.frames, start=1):
        tag = f"frame {frame.index}"
        if frame.pixels.ndim != 3 or frame.pixels.shape != (3, frame.height, frame.width):
            report.append(
                f"{tag}: pixels shape {frame.pixels.shape} != (3, {frame.height}, {frame.width})"
            )
        if not (1 <= frame.index <= t):
            report.append(f"{tag}: index outside [1, {t}]")
        if frame.index != pos:
            report.append(f"{tag}: stored at position {pos}")
        if frame.pixels.size and (frame.pixels.min() < 0.0 or frame.pixels.max() > 1.0):
            report.append(f"{tag}: pixel intensities outside [0, 1]")

    frame_indices = {f.index for f in clip.frames}
    for seg in clip.audio:
        tag = f"audio {seg.index}"
        if seg.samples.ndim != 1 or len(seg.samples) != seg.sample_rate:
            report.append(
                f"{tag}: {len(seg.samples)} samples != sample_rate {seg.sample_rate} (segments are 1 second)"
            )
        if seg.index not in frame_indices:
            report.append(f"{tag}: no frame with matching index")
        if seg.samples.size and (seg.samples.min() < -1.0 or seg.samples.max() > 1.0):
            report.append(f"{tag}: amplitudes outside [-1, 1]")

    gt = clip.ground_truth
    if gt is not None:
        report.extend(_validate_masks(clip, gt))
        if clip.subset is Subset.S4 and clip.split is Split.TRAIN:
            if tuple(gt.frame_indices) != (1,):
                report.append(
                    f"clip {clip.clip_id}: S4 training clips are annotated on frame 1 only, "
                    f"got frames {list(gt.frame_indices)}"
                )
        else:
            if tuple(gt.frame_indices) != tuple(range(1, t + 1)):
                report.append(
                    f"clip {clip.clip_id}: {clip.subset.value}/{clip.split.value} requires masks "
                    f"on all {t} frames, got {list(gt.frame_indices)}"
                )
    return report


def _validate_masks(clip: VideoClip, gt: MaskSet) -> list:
    report = []
    by_index = {f.index: f for f in clip.frames}
    for mask, fi in zip(gt.masks, gt.frame_indices):
        tag = f"mask for frame {fi}"
        frame = by_index.get(fi)
        if frame is None:
            report.append(f"{tag}: no such frame")
        elif mask.shape != (frame.height, frame.width):
            report.append(f"{tag}: shape {mask.shape} != frame shape ({frame.height}, {frame.width})")
        if mask.size:
            if gt.kind is MaskKind.BINARY:
                if not np.isin(mask, (0.0, 1.0)).all():
                    report.append(f"{tag}: binary mask contains values outside {{0, 1}}")
            else:
                if mask.min() < 0.0 or mask.max() > 1.0:
                    report.append(f"{tag}: soft mask contains values outside [0, 1]")
    return report
