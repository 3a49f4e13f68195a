"""AVSBench-layout ingestion and the synthetic desk-scale generator.

On-disk layout (names configurable through :class:`DatasetLayout`)::

    root/<subset>/<split>/<clip_id>/
        frames/frame_01.png ... frame_0T.png     # RGB, any size
        audio/audio_01.wav  ... audio_0T.wav     # 1 s mono PCM each
        masks/mask_01.png   ...                  # bilevel {0, 255}
        meta.json                                # category, num_frames

Annotation conventions are enforced at scan time: S4 training clips carry
exactly one mask (frame 1); every other annotated combination masks all T
frames. Mask images must be strictly bilevel — a gray value is treated as
corruption, never thresholded.

The synthetic generator emits grid-aligned rectangles over flat backgrounds
with pure-tone audio, quantized so that a write/read cycle is lossless
(uint8 pixels, int16 samples). MS3 clips carry two shapes and a two-tone
mix; S4 clips carry one of each.
"""

from __future__ import annotations

import json
import re
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .datamodel import AudioSegment, Frame, MaskKind, MaskSet, Split, Subset, VideoClip
from .errors import DatasetError

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

# Full-scale AVSBench split sizes, used for reporting only (desk-scale trees
# are far smaller).
FULL_SCALE_SIZES = {
    (Subset.S4, Split.TRAIN): 3452,
    (Subset.S4, Split.VAL): 740,
    (Subset.S4, Split.TEST): 740,
    (Subset.MS3, Split.TRAIN): 296,
    (Subset.MS3, Split.VAL): 64,
    (Subset.MS3, Split.TEST): 64,
}

CATEGORIES = ("bell", "drum", "engine", "flute", "gull")
_TONE_HZ = {name: 220.0 * (i + 1) for i, name in enumerate(CATEGORIES)}
_SHAPE_RGB = {
    "bell": (208, 48, 48),
    "drum": (48, 160, 48),
    "engine": (48, 64, 200),
    "flute": (200, 176, 32),
    "gull": (160, 48, 176),
}


@dataclass(frozen=True)
class DatasetLayout:
    """File/directory naming scheme inside a clip folder."""

    frames_dir: str = "frames"
    audio_dir: str = "audio"
    masks_dir: str = "masks"
    frame_pattern: str = "frame_{:02d}.png"
    audio_pattern: str = "audio_{:02d}.wav"
    mask_pattern: str = "mask_{:02d}.png"
    meta_name: str = "meta.json"


DEFAULT_LAYOUT = DatasetLayout()

_INDEX_RE = re.compile(r"(\d+)")


def _file_index(name: str) -> Optional[int]:
    m = _INDEX_RE.search(Path(name).stem)
    return int(m.group(1)) if m else None


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    category: str
    frames: Tuple[str, ...]   # paths relative to the dataset root
    audio: Tuple[str, ...]
    masks: Tuple[str, ...]
    mask_indices: Tuple[int, ...]  # 1-based frame positions of ``masks``

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "category": self.category,
            "frames": list(self.frames),
            "audio": list(self.audio),
            "masks": list(self.masks),
            "mask_indices": list(self.mask_indices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(
            clip_id=d["clip_id"],
            category=d["category"],
            frames=tuple(d["frames"]),
            audio=tuple(d["audio"]),
            masks=tuple(d["masks"]),
            mask_indices=tuple(int(i) for i in d["mask_indices"]),
        )


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    subset: Subset
    split: Split
    sample_rate: int
    entries: Tuple[ManifestEntry, ...]
    errors: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subset", Subset(self.subset))
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "errors", tuple(self.errors))

    @property
    def clip_ids(self) -> Tuple[str, ...]:
        return tuple(e.clip_id for e in self.entries)

    def entry(self, clip_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.clip_id == clip_id:
                return e
        raise DatasetError(f"clip {clip_id!r} not in manifest for {self.subset.value}/{self.split.value}")

    def to_dict(self) -> dict:
        return {
            "manifest_version": MANIFEST_VERSION,
            "subset": self.subset.value,
            "split": self.split.value,
            "sample_rate": self.sample_rate,
            "num_entries": len(self.entries),
            "entries": [e.to_dict() for e in self.entries],
            "errors": list(self.errors),
        }

    @classmethod
    def from_dict(cls, d: dict, root) -> "DatasetManifest":
        version = d.get("manifest_version")
        if version != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest_version {version!r} (expected {MANIFEST_VERSION})")
        entries = tuple(ManifestEntry.from_dict(e) for e in d["entries"])
        if d.get("num_entries") != len(entries):
            raise DatasetError(
                f"manifest declares {d.get('num_entries')} entries but lists {len(entries)}"
            )
        return cls(
            root=str(root),
            subset=Subset(d["subset"]),
            split=Split(d["split"]),
            sample_rate=int(d["sample_rate"]),
            entries=entries,
            errors=tuple(d.get("errors", ())),
        )


def manifest_path(root, subset: Subset, split: Split) -> Path:
    return Path(root) / Subset(subset).value / Split(split).value / MANIFEST_NAME


def write_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path else manifest_path(manifest.root, manifest.subset, manifest.split)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(root, subset: Subset, split: Split) -> DatasetManifest:
    path = manifest_path(root, subset, split)
    if not path.is_file():
        raise DatasetError(f"no manifest at {path}")
    return DatasetManifest.from_dict(json.loads(path.read_text()), root)


def _check_mask_file(path: Path) -> Optional[str]:
    """Return an error string unless ``path`` decodes to a strict {0,255} image."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except Exception as exc:  # noqa: BLE001 - any decode failure is a data error
        return f"unreadable mask image {path}: {exc}"
    values = np.unique(arr)
    bad = [int(v) for v in values if v not in (0, 255)]
    if bad:
        return f"mask image {path} is not bilevel: contains value(s) {bad}"
    return None


def _scan_clip(
    clip_dir: Path,
    subset: Subset,
    split: Split,
    layout: DatasetLayout,
    root: Path,
) -> Tuple[Optional[ManifestEntry], List[str]]:
    problems: List[str] = []
    cid = clip_dir.name

    def rel(p: Path) -> str:
        return p.relative_to(root).as_posix()

    frames = sorted((clip_dir / layout.frames_dir).glob("*.png")) if (clip_dir / layout.frames_dir).is_dir() else []
    audio = sorted((clip_dir / layout.audio_dir).glob("*.wav")) if (clip_dir / layout.audio_dir).is_dir() else []
    masks = sorted((clip_dir / layout.masks_dir).glob("*.png")) if (clip_dir / layout.masks_dir).is_dir() else []

    if not frames:
        problems.append(f"clip {cid}: no frame images under {layout.frames_dir}/")
    if not audio:
        problems.append(f"clip {cid}: no audio files under {layout.audio_dir}/")
    t = len(frames)
    if frames and audio and len(audio) != t:
        problems.append(f"clip {cid}: {t} frames but {len(audio)} audio files")

    frame_idx = [_file_index(p.name) for p in frames]
    if frames and (None in frame_idx or frame_idx != list(range(1, t + 1))):
        problems.append(f"clip {cid}: frame files are not numbered 1..{t}")
    audio_idx = [_file_index(p.name) for p in audio]
    if audio and (None in audio_idx or audio_idx != list(range(1, len(audio) + 1))):
        problems.append(f"clip {cid}: audio files are not numbered 1..{len(audio)}")

    mask_idx = [_file_index(p.name) for p in masks]
    if None in mask_idx:
        problems.append(f"clip {cid}: mask file without a frame number")
        mask_idx = [i for i in mask_idx if i is not None]
    if subset is Subset.S4 and split is Split.TRAIN:
        if mask_idx != [1]:
            problems.append(
                f"clip {cid}: s4/train annotates frame 1 only (expected exactly mask_01), "
                f"found masks for frames {mask_idx}"
            )
    else:
        if t and mask_idx != list(range(1, t + 1)):
            problems.append(
                f"clip {cid}: {subset.value}/{split.value} requires masks on all {t} frames, "
                f"found masks for frames {mask_idx}"
            )
    for p in masks:
        err = _check_mask_file(p)
        if err:
            problems.append(f"clip {cid}: {err}")

    if problems:
        return None, problems

    category = ""
    meta_path = clip_dir / layout.meta_name
    if meta_path.is_file():
        try:
            category = str(json.loads(meta_path.read_text()).get("category", ""))
        except json.JSONDecodeError as exc:
            return None, [f"clip {cid}: malformed {layout.meta_name}: {exc}"]

    entry = ManifestEntry(
        clip_id=cid,
        category=category,
        frames=tuple(rel(p) for p in frames),
        audio=tuple(rel(p) for p in audio),
        masks=tuple(rel(p) for p in masks),
        mask_indices=tuple(mask_idx),
    )
    return entry, []


def scan(
    root,
    subset: Subset,
    split: Split,
    sample_rate: int = 16000,
    layout: DatasetLayout = DEFAULT_LAYOUT,
    write_sidecar: bool = True,
) -> DatasetManifest:
    """Walk one subset/split tree into a manifest (lexicographic clip order).

    Per-clip convention violations are collected into ``manifest.errors``
    rather than aborting the scan; clips with violations are excluded from
    ``entries``. A missing tree is a hard error.
    """
    root = Path(root)
    subset = Subset(subset)
    split = Split(split)
    split_dir = root / subset.value / split.value
    if not split_dir.is_dir():
        raise DatasetError(f"dataset tree not found: {split_dir}")

    entries: List[ManifestEntry] = []
    errors: List[str] = []
    for clip_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        entry, problems = _scan_clip(clip_dir, subset, split, layout, root)
        if entry is not None:
            entries.append(entry)
        errors.extend(problems)

    manifest = DatasetManifest(
        root=str(root),
        subset=subset,
        split=split,
        sample_rate=sample_rate,
        entries=tuple(entries),
        errors=tuple(errors),
    )
    if write_sidecar:
        write_manifest(manifest)
    return manifest


# -- decoding ------------------------------------------------------------------

def _load_frame(path: Path, index: int) -> Frame:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # noqa: BLE001
        raise DatasetError(f"unreadable frame image {path}: {exc}") from exc
    pixels = arr.astype(np.float32).transpose(2, 0, 1) / 255.0
    return Frame.from_pixels(pixels, index=index)


def _load_wav(path: Path) -> Tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, OSError, EOFError) as exc:
        raise DatasetError(f"unreadable audio file {path}: {exc}") from exc
    if channels != 1:
        raise DatasetError(f"audio file {path} has {channels} channels; expected mono")
    if width != 2:
        raise DatasetError(f"audio file {path} has sample width {width}; expected 16-bit PCM")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return samples, rate


def _resample(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    """Linear-interpolation resample of a 1-second segment to dst_rate samples."""
    if src_rate == dst_rate and len(samples) == dst_rate:
        return samples
    duration = len(samples) / float(src_rate)
    src_t = np.arange(len(samples), dtype=np.float64) / src_rate
    dst_t = np.arange(round(duration * dst_rate), dtype=np.float64) / dst_rate
    return np.interp(dst_t, src_t, samples.astype(np.float64)).astype(np.float32)


def _load_mask(path: Path) -> np.ndarray:
    err = _check_mask_file(path)
    if err:
        raise DatasetError(err)
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr == 255).astype(np.float32)


def load_clip(manifest: DatasetManifest, clip_id: str) -> VideoClip:
    """Decode one manifest entry into a validated in-memory clip."""
    entry = manifest.entry(clip_id)
    root = Path(manifest.root)

    frames = tuple(_load_frame(root / p, index=i) for i, p in enumerate(entry.frames, start=1))
    audio = []
    for i, p in enumerate(entry.audio, start=1):
        samples, rate = _load_wav(root / p)
        samples = _resample(samples, rate, manifest.sample_rate)
        if len(samples) != manifest.sample_rate:
            raise DatasetError(
                f"audio file {root / p}: {len(samples)} samples after resampling "
                f"(expected {manifest.sample_rate}; segments are 1 second)"
            )
        audio.append(AudioSegment(samples=samples, sample_rate=manifest.sample_rate, index=i))

    masks = tuple(_load_mask(root / p) for p in entry.masks)
    gt = MaskSet(masks=masks, kind=MaskKind.BINARY, frame_indices=entry.mask_indices) if masks else None
    return VideoClip(
        clip_id=clip_id,
        frames=frames,
        audio=tuple(audio),
        ground_truth=gt,
        subset=manifest.subset,
        split=manifest.split,
        category=entry.category,
    )


def iter_clips(manifest: DatasetManifest):
    for entry in manifest.entries:
        yield load_clip(manifest, entry.clip_id)


def load_single_clip(
    clip_dir,
    sample_rate: int = 16000,
    subset: Subset = Subset.S4,
    split: Split = Split.TEST,
    layout: DatasetLayout = DEFAULT_LAYOUT,
) -> VideoClip:
    """Load one bare clip folder outside any dataset tree (masks optional).

    Intended for ad-hoc inference on a directory holding frames/ and audio/;
    annotation conventions are not enforced and ground truth is loaded only
    if mask files are present and bilevel.
    """
    clip_dir = Path(clip_dir)
    if not clip_dir.is_dir():
        raise DatasetError(f"clip directory not found: {clip_dir}")
    frames_dir = clip_dir / layout.frames_dir
    audio_dir = clip_dir / layout.audio_dir
    frame_paths = sorted(frames_dir.glob("*.png")) if frames_dir.is_dir() else []
    audio_paths = sorted(audio_dir.glob("*.wav")) if audio_dir.is_dir() else []
    if not frame_paths:
        raise DatasetError(f"no frame images under {frames_dir}")
    if len(audio_paths) != len(frame_paths):
        raise DatasetError(
            f"{clip_dir}: {len(frame_paths)} frames but {len(audio_paths)} audio files"
        )

    frames = tuple(_load_frame(p, index=i) for i, p in enumerate(frame_paths, start=1))
    audio = []
    for i, p in enumerate(audio_paths, start=1):
        samples, rate = _load_wav(p)
        samples = _resample(samples, rate, sample_rate)
        audio.append(AudioSegment(samples=samples, sample_rate=sample_rate, index=i))

    gt = None
    masks_dir = clip_dir / layout.masks_dir
    mask_paths = sorted(masks_dir.glob("*.png")) if masks_dir.is_dir() else []
    if mask_paths:
        indices = tuple(_file_index(p.name) for p in mask_paths)
        if None not in indices:
            gt = MaskSet(
                masks=tuple(_load_mask(p) for p in mask_paths),
                kind=MaskKind.BINARY,
                frame_indices=indices,
            )
    return VideoClip(
        clip_id=clip_dir.name,
        frames=frames,
        audio=tuple(audio),
        ground_truth=gt,
        subset=subset,
        split=split,
    )


# -- synthetic generation ------------------------------------------------------

def _rect_mask(resolution: int, block: int, r0: int, c0: int, h: int, w: int) -> np.ndarray:
    mask = np.zeros((resolution, resolution), dtype=np.float32)
    mask[r0 * block:(r0 + h) * block, c0 * block:(c0 + w) * block] = 1.0
    return mask


def _draw_clip_arrays(
    rng: np.random.Generator,
    subset: Subset,
    resolution: int,
    num_frames: int,
    sample_rate: int,
) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray], str]:
    """Returns (uint8 frames HWC, int16 waveforms, {0,1} float masks, category)."""
    block = 8
    cells = resolution // block
    n_shapes = 2 if subset is Subset.MS3 else 1
    cat_ids = sorted(rng.choice(len(CATEGORIES), size=n_shapes, replace=False).tolist())
    cats = [CATEGORIES[i] for i in cat_ids]
    bg = int(rng.integers(190, 230))

    shapes = []
    for k in range(n_shapes):
        h = int(rng.integers(2, max(3, cells // 2)))
        w = int(rng.integers(2, max(3, cells // 2)))
        r0 = int(rng.integers(0, cells - h + 1))
        c0 = int(rng.integers(0, cells - w + 1))
        step = int(rng.integers(0, 2))  # cells moved down per frame, wrapping
        shapes.append((r0, c0, h, w, step))

    frames: List[np.ndarray] = []
    masks: List[np.ndarray] = []
    waves: List[np.ndarray] = []
    t_axis = np.arange(sample_rate, dtype=np.float64) / sample_rate
    for i in range(num_frames):
        img = np.full((resolution, resolution, 3), bg, dtype=np.uint8)
        mask = np.zeros((resolution, resolution), dtype=np.float32)
        tone = np.zeros_like(t_axis)
        for cat, (r0, c0, h, w, step) in zip(cats, shapes):
            r = (r0 + i * step) % max(1, cells - h + 1)
            m = _rect_mask(resolution, block, r, c0, h, w)
            img[m.astype(bool)] = _SHAPE_RGB[cat]
            mask = np.maximum(mask, m)
            tone = tone + np.sin(2.0 * np.pi * _TONE_HZ[cat] * (t_axis + i))
        tone = tone / max(1, n_shapes)
        waves.append(np.round(tone * 0.5 * 32767.0).astype(np.int16))
        frames.append(img)
        masks.append(mask)
    return frames, waves, masks, "+".join(cats)


def _write_wav(path: Path, samples_i16: np.ndarray, sample_rate: int) -> None:
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(samples_i16.astype("<i2").tobytes())


def make_synthetic(
    root,
    subset: Subset,
    split: Split,
    num_clips: int,
    resolution: int = 64,
    num_frames: int = 5,
    sample_rate: int = 16000,
    seed: int = 0,
    layout: DatasetLayout = DEFAULT_LAYOUT,
) -> DatasetManifest:
    """Materialize a deterministic synthetic tree and return its manifest.

    Shapes sit on an 8-pixel lattice so coarse backbone grids can represent
    the masks exactly; ``resolution`` must be a positive multiple of 8.
    """
    if num_clips <= 0 or num_frames <= 0:
        raise ValueError("num_clips and num_frames must be positive")
    if resolution <= 0 or resolution % 8 != 0:
        raise ValueError(f"resolution must be a positive multiple of 8, got {resolution}")
    root = Path(root)
    subset = Subset(subset)
    split = Split(split)
    rng = np.random.Generator(np.random.PCG64(seed))

    for n in range(num_clips):
        cid = f"clip_{n:04d}"
        clip_dir = root / subset.value / split.value / cid
        frames, waves, masks, category = _draw_clip_arrays(
            rng, subset, resolution, num_frames, sample_rate
        )
        (clip_dir / layout.frames_dir).mkdir(parents=True, exist_ok=True)
        (clip_dir / layout.audio_dir).mkdir(exist_ok=True)
        (clip_dir / layout.masks_dir).mkdir(exist_ok=True)
        for i, (img, wav) in enumerate(zip(frames, waves), start=1):
            Image.fromarray(img).save(clip_dir / layout.frames_dir / layout.frame_pattern.format(i))
            _write_wav(clip_dir / layout.audio_dir / layout.audio_pattern.format(i), wav, sample_rate)
        annotated = [1] if (subset is Subset.S4 and split is Split.TRAIN) else list(range(1, num_frames + 1))
        for i in annotated:
            m8 = (masks[i - 1] * 255).astype(np.uint8)
            Image.fromarray(m8, mode="L").save(clip_dir / layout.masks_dir / layout.mask_pattern.format(i))
        meta = {"category": category, "num_frames": num_frames, "resolution": resolution}
        (clip_dir / layout.meta_name).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    return scan(root, subset, split, sample_rate=sample_rate, layout=layout)
