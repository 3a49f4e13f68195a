"""Shared test utilities: independent pixel-count oracles, finite-difference
gradient checking, deterministic clip builders, and tree hashing."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Tuple

import numpy as np
import torch

from av2tsam.datamodel import AudioSegment, Frame, MaskKind, MaskSet, Split, Subset, VideoClip


# -- brute-force metric oracles (nested loops, integer counting) ---------------

def oracle_iou(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    assert pred.shape == gt.shape
    inter = 0
    union = 0
    for r in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            p, g = pred[r, c], gt[r, c]
            if p and g:
                inter += 1
            if p or g:
                union += 1
    if union == 0:
        return 1.0
    return inter / union


def oracle_fscore(pred, gt, beta2: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    assert pred.shape == gt.shape
    tp = np_pred = np_gt = 0
    for r in range(pred.shape[0]):
        for c in range(pred.shape[1]):
            p, g = pred[r, c], gt[r, c]
            if p:
                np_pred += 1
            if g:
                np_gt += 1
            if p and g:
                tp += 1
    precision = 1.0 if np_pred == 0 else tp / np_pred
    recall = 1.0 if np_gt == 0 else tp / np_gt
    denom = beta2 * precision + recall
    if denom == 0.0:
        return 0.0
    return (1.0 + beta2) * precision * recall / denom


def all_binary_masks(shape: Tuple[int, int]):
    """Every {0,1} mask of the given shape, in integer order."""
    n = shape[0] * shape[1]
    for bits in range(1 << n):
        flat = np.array([(bits >> k) & 1 for k in range(n)], dtype=np.float32)
        yield flat.reshape(shape)


# -- finite differences ----------------------------------------------------------

def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    named_params: Dict[str, torch.Tensor],
    eps: float = 1e-5,
    extra_coords: int = 3,
    seed: int = 0,
) -> List[Tuple[str, float, float, float]]:
    """Compare autograd gradients of ``loss_fn`` with central differences.

    ``loss_fn`` must rebuild the graph from the live parameter tensors on
    every call. For each parameter the first/middle/last coordinates plus a
    few seeded random ones are perturbed in place. Returns
    (coordinate, relative_error, fd, analytic) rows.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(named_params.values()))
    rng = np.random.Generator(np.random.PCG64(seed))
    rows: List[Tuple[str, float, float, float]] = []
    for (name, p), g in zip(named_params.items(), grads):
        flat = p.detach().view(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        coords = {0, n // 2, n - 1} | {int(i) for i in rng.integers(0, n, size=extra_coords)}
        for i in sorted(coords):
            orig = flat[i].item()
            flat[i] = orig + eps
            lo_p = float(loss_fn().detach())
            flat[i] = orig - eps
            lo_m = float(loss_fn().detach())
            flat[i] = orig
            fd = (lo_p - lo_m) / (2.0 * eps)
            an = float(gflat[i])
            scale = max(abs(fd), abs(an))
            rel = abs(fd - an) / scale if scale > 1e-7 else abs(fd - an)
            rows.append((f"{name}[{i}]", rel, fd, an))
    return rows


def max_rel_error(rows) -> float:
    return max(r[1] for r in rows)


# -- in-memory clip builders -------------------------------------------------------

def make_frame(size: int = 8, index: int = 1, seed: int = 0) -> Frame:
    rng = np.random.Generator(np.random.PCG64(seed + index))
    return Frame.from_pixels(rng.random((3, size, size)).astype(np.float32), index=index)


def make_audio(sample_rate: int = 1600, index: int = 1, freq: float = 220.0) -> AudioSegment:
    t = np.arange(sample_rate, dtype=np.float64) / sample_rate
    samples = (0.5 * np.sin(2 * np.pi * freq * (t + index))).astype(np.float32)
    return AudioSegment(samples=samples, sample_rate=sample_rate, index=index)


def make_clip(
    num_frames: int = 1,
    size: int = 8,
    sample_rate: int = 1600,
    subset: Subset = Subset.MS3,
    split: Split = Split.TRAIN,
    seed: int = 0,
    annotate: bool = True,
) -> VideoClip:
    """A small valid in-memory clip; MS3 conventions annotate every frame."""
    frames = tuple(make_frame(size, i, seed) for i in range(1, num_frames + 1))
    audio = tuple(make_audio(sample_rate, i) for i in range(1, num_frames + 1))
    gt = None
    if annotate:
        rng = np.random.Generator(np.random.PCG64(seed + 99))
        if subset is Subset.S4 and split is Split.TRAIN:
            indices = (1,)
        else:
            indices = tuple(range(1, num_frames + 1))
        masks = tuple(
            (rng.random((size, size)) > 0.6).astype(np.float32) for _ in indices
        )
        gt = MaskSet(masks=masks, kind=MaskKind.BINARY, frame_indices=indices)
    return VideoClip(
        clip_id=f"mem_{seed}",
        frames=frames,
        audio=audio,
        ground_truth=gt,
        subset=subset,
        split=split,
    )


# -- filesystem --------------------------------------------------------------------

def hash_tree(root) -> str:
    """Order-stable sha256 over every file's relative path and bytes."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()
