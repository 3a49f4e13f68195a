"""End-to-end composition: inference pipeline, training loop, checkpoints.

Inference runs per frame with no temporal coupling: encode image and audio,
project and fuse, map to text space, prompt the backbone (through the
adapters when enabled) and the multimodal prompt encoder, then decode a
soft mask. Training minimizes BCE + soft IoU over annotated frames with
AdamW, touching only non-frozen parameter groups; the frozen encoder suite
is checksummed before and after as an audit.

Clips are resized to the configured square resolution for the forward pass
and the loss; predictions are restored to native resolution (nearest
neighbor) for metrics. Every stochastic choice — parameter init and data
order — derives from the run seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import objectives
from .adapter_injection import AdapterStack, inject
from .avsbench_io import DatasetManifest, iter_clips, load_clip
from .config import RunConfig
from .datamodel import Frame, MaskKind, MaskSet, Split, VideoClip, validate_clip
from .encoders import BackendDescriptor, descriptor_from_config, make_suite
from .errors import (
    CheckpointFormatError,
    ConventionError,
    DimensionError,
    TrainingDivergedError,
)
from .fusion import ProjectionParams, PromptFeature, build_prompt
from .metrics import MetricSummary, clip_frame_scores, summarize

CHECKPOINT_VERSION = 1
FROZEN_BASE = ("image_encoder", "audio_encoder", "backbone", "multimodal_encoder")


class DecoderHead(nn.Module):
    """Small convolutional mask decoder for the stub suite.

    Takes the backbone's last-layer features plus the multimodal prompt
    tokens (as a per-frame channel bias), upsamples to frame resolution
    with exact nearest-neighbor block replication, optionally concatenates
    the raw pixels as a skip path, and maps to per-pixel probabilities.
    Resolution is a forward-time argument, so one head serves any square
    size.
    """

    def __init__(
        self,
        descriptor: BackendDescriptor,
        hidden: int = 8,
        pixel_skip: bool = True,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        c_feat = descriptor.channels[-1]
        d_tok = descriptor.num_tokens * descriptor.token_dim
        self.grid = descriptor.grid
        self.pixel_skip = bool(pixel_skip)
        c_in = c_feat + (3 if self.pixel_skip else 0)
        self.token_proj = nn.Linear(d_tok, c_feat, dtype=dtype)
        self.conv1 = nn.Conv2d(c_in, hidden, kernel_size=3, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(hidden, 1, kernel_size=1, dtype=dtype)
        self._seed_init(generator)

    def _seed_init(self, generator: Optional[torch.Generator]) -> None:
        # fan-in scaled normals from the run generator; biases start at zero
        for w in (self.token_proj.weight, self.conv1.weight, self.conv2.weight):
            fan_in = w[0].numel()
            with torch.no_grad():
                w.normal_(0.0, fan_in ** -0.5, generator=generator)
        for b in (self.token_proj.bias, self.conv1.bias, self.conv2.bias):
            nn.init.zeros_(b)

    def forward(
        self,
        feats: torch.Tensor,    # (T, positions, C) last backbone layer
        tokens: torch.Tensor,   # (T, num_tokens, token_dim)
        pixels: torch.Tensor,   # (T, 3, R, R)
        resolution: int,
    ) -> torch.Tensor:
        t, positions, c = feats.shape
        g = self.grid
        if positions != g * g:
            raise DimensionError(f"decoder expected {g * g} positions, got {positions}")
        fmap = feats.transpose(1, 2).reshape(t, c, g, g)
        bias = self.token_proj(tokens.reshape(t, -1))
        fmap = fmap + bias[:, :, None, None]
        up = F.interpolate(fmap, size=(resolution, resolution), mode="nearest-exact")
        if self.pixel_skip:
            up = torch.cat([up, pixels.to(up.dtype)], dim=1)
        h = torch.tanh(self.conv1(up))
        return torch.sigmoid(self.conv2(h)).squeeze(1)


class ModelState:
    """Trainable modules plus bookkeeping (seed, step, frozen set)."""

    def __init__(
        self,
        projection: ProjectionParams,
        adapters: AdapterStack,
        decoder: DecoderHead,
        descriptor: BackendDescriptor,
        frozen: Sequence[str],
        seed: int,
        step: int = 0,
    ):
        frozen = tuple(frozen)
        if "multimodal_encoder" not in frozen:
            raise ValueError("the multimodal encoder is always frozen")
        self.projection = projection
        self.adapters = adapters
        self.decoder = decoder
        self.descriptor = descriptor
        self.frozen = frozen
        self.seed = int(seed)
        self.step = int(step)

    def trainable_groups(self) -> Dict[str, nn.Module]:
        groups = {"projection": self.projection, "adapters": self.adapters}
        if "decoder_head" not in self.frozen:
            groups["decoder_head"] = self.decoder
        return groups

    def trainable_parameters(self) -> List[torch.nn.Parameter]:
        params: List[torch.nn.Parameter] = []
        for module in self.trainable_groups().values():
            params.extend(module.parameters())
        return params

    def state_dicts(self) -> Dict[str, dict]:
        return {
            "projection": self.projection.state_dict(),
            "adapters": self.adapters.state_dict(),
            "decoder": self.decoder.state_dict(),
        }


def build_state(cfg: RunConfig, descriptor: Optional[BackendDescriptor] = None,
                dtype: Optional[torch.dtype] = None) -> ModelState:
    """Construct a fresh model state, every init drawn from the run seed."""
    descriptor = descriptor if descriptor is not None else descriptor_from_config(cfg)
    if dtype is None:
        dtype = torch.float64 if descriptor.kind == "stub" else torch.float32
    generator = torch.Generator().manual_seed(cfg.seed)
    projection = ProjectionParams(
        d_a=descriptor.d_a,
        d_v=descriptor.d_v,
        d_s=int(cfg.fusion["d_s"]),
        d_text=descriptor.d_text,
        d_h=cfg.d_h,
        activation=cfg.fusion["activation"],
        generator=generator,
        dtype=dtype,
    )
    tap = cfg.adapter["tap"]
    d_in = int(cfg.fusion["d_s"]) if tap == "fused" else descriptor.d_text
    adapters = AdapterStack(
        descriptor,
        d_in=d_in,
        layer_selection=cfg.adapter["layers"],
        tap=tap,
        dtype=dtype,
    )
    decoder = DecoderHead(
        descriptor,
        hidden=int(cfg.train["decoder_hidden"]),
        pixel_skip=bool(cfg.train["decoder_pixel_skip"]),
        generator=generator,
        dtype=dtype,
    )
    frozen = FROZEN_BASE if cfg.train["decoder_trainable"] else FROZEN_BASE + ("decoder_head",)
    return ModelState(projection, adapters, decoder, descriptor, frozen, seed=cfg.seed)


# -- forward pass ----------------------------------------------------------------

def _frame_tensor_stack(frames: Sequence[Frame], dtype: torch.dtype) -> torch.Tensor:
    # frame pixel buffers are read-only; copy before handing them to torch
    return torch.stack([torch.from_numpy(np.array(f.pixels, copy=True)).to(dtype) for f in frames])


def _resize_frames(clip: VideoClip, resolution: int, dtype: torch.dtype) -> Tuple[Sequence[Frame], torch.Tensor]:
    """Clip frames at the working resolution plus their (T,3,R,R) tensor."""
    pixels = _frame_tensor_stack(clip.frames, dtype)
    if pixels.shape[-2:] == (resolution, resolution):
        return clip.frames, pixels
    resized = F.interpolate(pixels, size=(resolution, resolution), mode="bilinear", align_corners=False)
    resized = resized.clamp(0.0, 1.0)
    frames = tuple(
        Frame.from_pixels(resized[i].numpy().astype(np.float32), index=f.index)
        for i, f in enumerate(clip.frames)
    )
    return frames, resized


def _resize_mask(mask: np.ndarray, resolution: int, dtype: torch.dtype) -> torch.Tensor:
    m = torch.from_numpy(np.array(mask, copy=True)).to(dtype)
    if m.shape == (resolution, resolution):
        return m
    out = F.interpolate(m[None, None], size=(resolution, resolution), mode="nearest-exact")
    return out[0, 0]


def forward_clip(clip: VideoClip, state: ModelState, suite, cfg: RunConfig) -> torch.Tensor:
    """Differentiable per-frame soft masks at config resolution, shape (T, R, R)."""
    resolution = cfg.resolution
    frames, pixels = _resize_frames(clip, resolution, suite.dtype)
    if len(clip.audio) != len(frames):
        raise DimensionError(
            f"clip {clip.clip_id}: {len(frames)} frames but {len(clip.audio)} audio segments"
        )

    prompts: List[PromptFeature] = []
    for frame, segment in zip(frames, clip.audio):
        a = suite.encode_audio(segment)
        v = suite.encode_image(frame)
        prompts.append(build_prompt(a, v, state.projection, source=cfg.prompt_source))

    if cfg.adapter["enabled"]:
        feats = inject(frames, prompts, state.adapters, suite)
    else:
        feats = suite.encode_backbone(frames)

    tokens = torch.stack([
        suite.encode_multimodal_prompt(p.text_space, frame)
        for p, frame in zip(prompts, frames)
    ])
    return state.decoder(feats.last, tokens, pixels, resolution)


def infer_clip(clip: VideoClip, state: ModelState, suite, cfg: RunConfig) -> MaskSet:
    """Soft masks for every frame, restored to the clip's native resolution."""
    with torch.no_grad():
        probs = forward_clip(clip, state, suite, cfg)
    native = (clip.frames[0].height, clip.frames[0].width)
    if probs.shape[-2:] != native:
        probs = F.interpolate(probs[:, None], size=native, mode="nearest-exact")[:, 0]
    masks = tuple(probs[i].numpy().astype(np.float32) for i in range(probs.shape[0]))
    return MaskSet(
        masks=masks,
        kind=MaskKind.SOFT,
        frame_indices=tuple(f.index for f in clip.frames),
    )


def clip_loss(clip: VideoClip, probs: torch.Tensor, resolution: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """(bce, iou) over the clip's annotated frames, masks rescaled to ``resolution``."""
    gt = clip.ground_truth
    if gt is None or not gt.frame_indices:
        raise ValueError(f"clip {clip.clip_id} has no ground truth to train on")
    pred_rows, gt_rows = [], []
    for mask, fi in zip(gt.masks, gt.frame_indices):
        pred_rows.append(probs[fi - 1])
        gt_rows.append(_resize_mask(mask, resolution, probs.dtype))
    pred = torch.stack(pred_rows)
    target = torch.stack(gt_rows)
    bce = objectives.bce_terms(pred.reshape(-1), target.reshape(-1))
    iou = objectives.iou_terms(pred, target)
    return bce, iou


# -- training ------------------------------------------------------------------

def _load_training_clips(manifest: DatasetManifest) -> List[VideoClip]:
    if manifest.split is not Split.TRAIN:
        raise ConventionError([f"training requires the train split, got {manifest.split.value!r}"])
    if manifest.errors:
        raise ConventionError(list(manifest.errors))
    clips = list(iter_clips(manifest))
    if not clips:
        raise ConventionError(["training manifest lists no clips"])
    violations = [v for clip in clips for v in validate_clip(clip)]
    if violations:
        raise ConventionError(violations)
    return clips


def train(
    manifest: DatasetManifest,
    cfg: RunConfig,
    output_dir,
    manifest_extra: Optional[dict] = None,
) -> Tuple[ModelState, dict]:
    """Run the training loop; returns the final state and the run manifest.

    Artifacts written under ``output_dir``: per-epoch checkpoints,
    ``checkpoint_final.pt``, ``loss_curve.csv`` (step, bce, iou, total), and
    ``run_manifest.json`` with the resolved config, seed, loss curve, and
    frozen-component checksums before/after training.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    clips = _load_training_clips(manifest)

    suite = make_suite(cfg)
    state = build_state(cfg, suite.descriptor, suite.dtype)
    frozen_before = suite.parameter_checksums()

    opt = torch.optim.AdamW(
        state.trainable_parameters(),
        lr=float(cfg.train["lr"]),
        weight_decay=float(cfg.train["weight_decay"]),
        betas=tuple(cfg.train["betas"]),
    )
    order_rng = np.random.Generator(np.random.PCG64(cfg.seed))
    batch_size = max(1, int(cfg.train["batch_size"]))
    epochs = int(cfg.train["epochs"])
    checkpoint_every = max(1, int(cfg.train["checkpoint_every"]))

    loss_rows: List[Tuple[int, float, float, float]] = []
    checkpoints: List[str] = []
    for epoch in range(epochs):
        order = order_rng.permutation(len(clips))
        for start in range(0, len(clips), batch_size):
            batch = [clips[i] for i in order[start:start + batch_size]]
            opt.zero_grad()
            bces, ious = [], []
            for clip in batch:
                probs = forward_clip(clip, state, suite, cfg)
                bce, iou = clip_loss(clip, probs, cfg.resolution)
                bces.append(bce)
                ious.append(iou)
            bce = torch.stack(bces).mean()
            iou = torch.stack(ious).mean()
            total = bce + iou
            if not bool(torch.isfinite(total.detach())):
                dump_path = output_dir / "diverged_batch.pt"
                torch.save(
                    {
                        "step": state.step,
                        "epoch": epoch,
                        "clip_ids": [c.clip_id for c in batch],
                        "bce": bce.item(),
                        "iou": iou.item(),
                        "state": state.state_dicts(),
                    },
                    dump_path,
                )
                raise TrainingDivergedError(
                    f"non-finite loss at step {state.step} (epoch {epoch}); "
                    f"batch dumped to {dump_path}",
                    dump_path=str(dump_path),
                )
            total.backward()
            opt.step()
            state.step += 1
            loss_rows.append((state.step, bce.item(), iou.item(), total.item()))
        if (epoch + 1) % checkpoint_every == 0 or epoch == epochs - 1:
            name = f"checkpoint_ep{epoch + 1:04d}.pt"
            save_checkpoint(state, cfg, output_dir / name)
            checkpoints.append(name)

    final_path = output_dir / "checkpoint_final.pt"
    save_checkpoint(state, cfg, final_path)
    checkpoints.append(final_path.name)
    frozen_after = suite.parameter_checksums()
    if frozen_after != frozen_before:
        raise RuntimeError("frozen component parameters changed during training")

    csv_path = output_dir / "loss_curve.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("step,bce,iou,total\n")
        for row in loss_rows:
            fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")

    run_manifest = {
        "command": "train",
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "dataset": {
            "root": str(manifest.root),
            "subset": manifest.subset.value,
            "split": manifest.split.value,
            "num_clips": len(clips),
        },
        "steps": state.step,
        "loss_curve": [list(r) for r in loss_rows],
        "loss_curve_csv": csv_path.name,
        "checkpoints": checkpoints,
        "final_loss": {
            "bce": loss_rows[-1][1],
            "iou": loss_rows[-1][2],
            "total": loss_rows[-1][3],
        },
        "frozen": list(state.frozen),
        "frozen_checksums_before": frozen_before,
        "frozen_checksums_after": frozen_after,
    }
    if manifest_extra:
        run_manifest.update(manifest_extra)
    (output_dir / "run_manifest.json").write_text(
        json.dumps(run_manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return state, run_manifest


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(state: ModelState, cfg: RunConfig, path) -> Path:
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "seed": state.seed,
        "step": state.step,
        "frozen": list(state.frozen),
        "config": cfg.to_dict(),
        "descriptor": state.descriptor.to_dict(),
        "tensors": state.state_dicts(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> Tuple[ModelState, RunConfig]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointFormatError(f"no checkpoint at {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - torch raises several container errors
        raise CheckpointFormatError(f"unreadable or truncated checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointFormatError(f"checkpoint {path} has no format_version header")
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"checkpoint {path} has format_version {version}, expected {CHECKPOINT_VERSION}"
        )
    cfg = RunConfig(payload["config"])
    descriptor = BackendDescriptor(**payload["descriptor"])
    state = build_state(cfg, descriptor)
    state.projection.load_state_dict(payload["tensors"]["projection"])
    state.adapters.load_state_dict(payload["tensors"]["adapters"])
    state.decoder.load_state_dict(payload["tensors"]["decoder"])
    state.step = int(payload["step"])
    state.frozen = tuple(payload["frozen"])
    state.seed = int(payload["seed"])
    return state, cfg


# -- evaluation ------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    summary: MetricSummary
    threshold: float
    beta2: float
    prompt_source: str
    adapter_enabled: bool
    subset: str
    split: str
    checkpoint: str
    config: dict

    def to_dict(self) -> dict:
        d = self.summary.to_dict()
        d.update(
            threshold=self.threshold,
            beta2=self.beta2,
            prompt_source=self.prompt_source,
            adapter_enabled=self.adapter_enabled,
            subset=self.subset,
            split=self.split,
            checkpoint=self.checkpoint,
            config=self.config,
        )
        return d


def evaluate_run(
    checkpoint_path,
    manifest: DatasetManifest,
    cfg: Optional[RunConfig] = None,
    output_path=None,
) -> MetricsReport:
    """Infer every manifest clip under a checkpoint and aggregate metrics.

    The dataset must be fully annotated (every frame of every clip); the
    config defaults to the one stored in the checkpoint, with ``cfg``
    overriding it when supplied.
    """
    state, ckpt_cfg = load_checkpoint(checkpoint_path)
    cfg = cfg if cfg is not None else ckpt_cfg
    if manifest.errors:
        raise ConventionError(list(manifest.errors))
    suite = make_suite(cfg)

    pairs = []
    for entry in manifest.entries:
        clip = load_clip(manifest, entry.clip_id)
        if clip.ground_truth is None:
            raise ConventionError([f"clip {clip.clip_id}: no ground truth to evaluate against"])
        if tuple(clip.ground_truth.frame_indices) != tuple(range(1, clip.num_frames + 1)):
            raise ConventionError([
                f"clip {clip.clip_id}: evaluation requires masks on all frames, "
                f"got {list(clip.ground_truth.frame_indices)}"
            ])
        pred = infer_clip(clip, state, suite, cfg)
        pairs.append((pred, clip.ground_truth))

    summary = summarize(
        pairs,
        threshold=float(cfg.eval["threshold"]),
        beta2=float(cfg.eval["beta2"]),
    )
    report = MetricsReport(
        summary=summary,
        threshold=float(cfg.eval["threshold"]),
        beta2=float(cfg.eval["beta2"]),
        prompt_source=cfg.prompt_source,
        adapter_enabled=bool(cfg.adapter["enabled"]),
        subset=manifest.subset.value,
        split=manifest.split.value,
        checkpoint=str(checkpoint_path),
        config=cfg.to_dict(),
    )
    if output_path is not None:
        Path(output_path).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return report
