"""Command-line entry points for batch experiments.

Commands: synth, ingest, train, infer, eval, ablate. Every command writes a
run manifest (resolved config, seed, package version) into its output
location, so two identical invocations produce identical artifacts.

Exit codes: 0 success, 1 validation/convention failure, 2 missing input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, avsbench_io, pipeline
from .config import RunConfig, load_config
from .datamodel import Split, Subset
from .errors import (
    Av2tError,
    BackendUnavailableError,
    CheckpointFormatError,
    ConfigKeyError,
    ConventionError,
    DatasetError,
    TrainingDivergedError,
)
from .metrics import binarize

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_MISSING = 2

PROMPT_SOURCE_FLAGS = {"fused": "fused", "clip-only": "clip_only", "clap-only": "clap_only"}

# Full-scale AVSBench reference results for AV2T-SAM, reported as footnotes
# only; desk-scale synthetic runs are not comparable to these magnitudes.
REFERENCE_RESULTS = {
    "prompt_features": {
        # arm: (S4 mJ, S4 mF, MS3 mJ, MS3 mF)
        "clip_only": (86.29, 0.920, 64.23, 0.738),
        "clap_only": (85.67, 0.915, 68.15, 0.743),
        "fused": (86.67, 0.924, 69.65, 0.777),
    },
    "adapter": {
        # adapter setting: (S4 mJ, S4 mF, MS3 mJ, MS3 mF), SAM2 backbone
        "off": (85.63, 0.920, 64.47, 0.704),
        "on": (86.67, 0.924, 69.65, 0.777),
    },
}


OVERLAY_RGB = np.array([224, 32, 32], dtype=np.float64)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _resolve_config(args) -> RunConfig:
    flag_overrides = {}
    if getattr(args, "seed", None) is not None:
        flag_overrides["seed"] = int(args.seed)
    if getattr(args, "backend", None) is not None:
        flag_overrides["backend.kind"] = args.backend
    if getattr(args, "prompt_source", None) is not None:
        flag_overrides["prompt_source"] = PROMPT_SOURCE_FLAGS[args.prompt_source]
    if getattr(args, "adapter", None) is not None:
        flag_overrides["adapter.enabled"] = args.adapter == "on"
    if getattr(args, "threshold", None) is not None:
        flag_overrides["eval.threshold"] = float(args.threshold)
    if getattr(args, "beta2", None) is not None:
        flag_overrides["eval.beta2"] = float(args.beta2)
    config_path = getattr(args, "config", None)
    if config_path is not None and not Path(config_path).is_file():
        raise FileNotFoundError(f"config file not found: {config_path}")
    return load_config(config_path, sets=args.set or (), flag_overrides=flag_overrides)


def _write_run_manifest(path: Path, command: str, cfg: RunConfig, extra: dict) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    payload.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _scan_tree(root: str, subset: str, split: str, cfg: RunConfig) -> avsbench_io.DatasetManifest:
    root_path = Path(root)
    if not root_path.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    if not (root_path / subset / split).is_dir():
        raise FileNotFoundError(f"dataset tree not found: {root_path / subset / split}")
    return avsbench_io.scan(
        root_path, Subset(subset), Split(split), sample_rate=int(cfg.data["sample_rate"])
    )


def _eval_config(args, ckpt_cfg: RunConfig, cli_cfg: RunConfig) -> RunConfig:
    """Checkpoint config wins for model structure; CLI supplies eval-time knobs.

    The prompt-source/adapter arm is only overridden when the flag was given
    explicitly, so evaluating a clap_only checkpoint without flags stays on
    its training arm.
    """
    tree = ckpt_cfg.to_dict()
    tree["eval"] = cli_cfg.to_dict()["eval"]
    if getattr(args, "prompt_source", None) is not None:
        tree["prompt_source"] = PROMPT_SOURCE_FLAGS[args.prompt_source]
    if getattr(args, "adapter", None) is not None:
        tree["adapter"]["enabled"] = args.adapter == "on"
    return RunConfig(tree)


# -- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    manifest = avsbench_io.make_synthetic(
        args.root,
        Subset(args.subset),
        Split(args.split),
        num_clips=args.clips,
        resolution=args.resolution,
        num_frames=args.frames,
        sample_rate=int(cfg.data["sample_rate"]),
        seed=cfg.seed,
    )
    _write_run_manifest(
        Path(args.root) / f"synth_{args.subset}_{args.split}_run.json",
        "synth",
        cfg,
        {"num_clips": len(manifest.entries), "subset": args.subset, "split": args.split,
         "resolution": args.resolution, "frames": args.frames},
    )
    print(f"wrote {len(manifest.entries)} {args.subset}/{args.split} clips under {args.root}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _resolve_config(args)
    manifest = _scan_tree(args.root, args.subset, args.split, cfg)
    _write_run_manifest(
        Path(args.root) / f"ingest_{args.subset}_{args.split}_run.json",
        "ingest",
        cfg,
        {"num_clips": len(manifest.entries), "num_errors": len(manifest.errors),
         "subset": args.subset, "split": args.split},
    )
    expected = avsbench_io.FULL_SCALE_SIZES[(manifest.subset, manifest.split)]
    print(
        f"{args.subset}/{args.split}: {len(manifest.entries)} clips "
        f"(full-scale AVSBench: {expected}); manifest at "
        f"{avsbench_io.manifest_path(args.root, manifest.subset, manifest.split)}"
    )
    if manifest.errors:
        for violation in manifest.errors:
            print(f"violation: {violation}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest = _scan_tree(args.root, args.subset, args.split, cfg)
    _, run_manifest = pipeline.train(
        manifest,
        cfg,
        args.output_dir,
        manifest_extra={"version": __version__},
    )
    final = run_manifest["final_loss"]
    print(
        f"trained {run_manifest['steps']} steps; final losses "
        f"bce={final['bce']:.6f} iou={final['iou']:.6f} total={final['total']:.6f}; "
        f"artifacts in {args.output_dir}"
    )
    return EXIT_OK


def _save_mask_png(path: Path, binary: np.ndarray) -> None:
    Image.fromarray((binary.astype(np.uint8) * 255), mode="L").save(path)


def _save_overlay_png(path: Path, frame_pixels: np.ndarray, binary: np.ndarray) -> None:
    rgb = np.asarray(frame_pixels).transpose(1, 2, 0) * 255.0
    blended = rgb.copy()
    blended[binary.astype(bool)] = 0.5 * rgb[binary.astype(bool)] + 0.5 * OVERLAY_RGB
    Image.fromarray(np.clip(blended, 0, 255).astype(np.uint8)).save(path)


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    state, ckpt_cfg = pipeline.load_checkpoint(ckpt)
    cfg = _eval_config(args, ckpt_cfg, cfg)
    suite = pipeline.make_suite(cfg)

    if args.clip_dir:
        if not Path(args.clip_dir).is_dir():
            raise FileNotFoundError(f"clip directory not found: {args.clip_dir}")
        clips = [avsbench_io.load_single_clip(args.clip_dir, sample_rate=int(cfg.data["sample_rate"]))]
    else:
        if not (args.root and args.subset and args.split):
            return _fail(EXIT_MISSING, "provide either --clip-dir or --root/--subset/--split")
        manifest = _scan_tree(args.root, args.subset, args.split, cfg)
        if manifest.errors:
            for violation in manifest.errors:
                print(f"violation: {violation}", file=sys.stderr)
            return EXIT_INVALID
        ids = [args.clip] if args.clip else list(manifest.clip_ids)
        clips = [avsbench_io.load_clip(manifest, cid) for cid in ids]

    out_root = Path(args.output_dir)
    threshold = float(cfg.eval["threshold"])
    written = 0
    for clip in clips:
        clip_out = out_root / clip.clip_id
        clip_out.mkdir(parents=True, exist_ok=True)
        soft = pipeline.infer_clip(clip, state, suite, cfg)
        for frame, mask in zip(clip.frames, soft.masks):
            binary = binarize(mask, threshold)
            _save_mask_png(clip_out / f"mask_{frame.index:02d}.png", binary)
            if args.overlay:
                _save_overlay_png(clip_out / f"overlay_{frame.index:02d}.png", frame.pixels, binary)
            written += 1
    _write_run_manifest(
        out_root / "run_manifest.json",
        "infer",
        cfg,
        {"checkpoint": str(ckpt), "clips": [c.clip_id for c in clips],
         "frames_written": written, "overlay": bool(args.overlay), "threshold": threshold},
    )
    print(f"wrote masks for {len(clips)} clip(s), {written} frame(s) under {out_root}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    _, ckpt_cfg = pipeline.load_checkpoint(ckpt)
    cfg = _eval_config(args, ckpt_cfg, cfg)
    manifest = _scan_tree(args.root, args.subset, args.split, cfg)
    if manifest.errors:
        for violation in manifest.errors:
            print(f"violation: {violation}", file=sys.stderr)
        return EXIT_INVALID
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = pipeline.evaluate_run(ckpt, manifest, cfg, output_path=out_dir / "metrics.json")
    _write_run_manifest(
        out_dir / "run_manifest.json",
        "eval",
        cfg,
        {"checkpoint": str(ckpt), "subset": args.subset, "split": args.split},
    )
    print(
        f"{args.subset}/{args.split}: mJ={report.summary.m_j:.2f} mF={report.summary.m_f:.3f} "
        f"({report.summary.num_frames} frames, {report.summary.num_clips} clips)"
    )
    return EXIT_OK


def _arm_name(source: str, adapter_on: bool) -> str:
    return f"{source}_adapter_{'on' if adapter_on else 'off'}"


def _reference_footnotes() -> list:
    ref = REFERENCE_RESULTS["prompt_features"]
    adapter = REFERENCE_RESULTS["adapter"]
    lines = [
        "reference: full-scale AVSBench results for AV2T-SAM (not desk-scale targets)",
    ]
    for arm in ("clip_only", "clap_only", "fused"):
        s4_j, s4_f, ms3_j, ms3_f = ref[arm]
        lines.append(
            f"reference prompt={arm}: S4 mJ={s4_j} mF={s4_f}, MS3 mJ={ms3_j} mF={ms3_f}"
        )
    for setting in ("off", "on"):
        s4_j, s4_f, ms3_j, ms3_f = adapter[setting]
        lines.append(
            f"reference adapter={setting}: S4 mJ={s4_j} mF={s4_f}, MS3 mJ={ms3_j} mF={ms3_f}"
        )
    return lines


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    sources = [PROMPT_SOURCE_FLAGS[s] for s in args.arms]
    adapter_arms = {"on": [True], "off": [False], "both": [True, False]}[args.adapter_arms]
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_manifest = _scan_tree(args.root, args.subset, args.train_split, cfg)
    eval_manifest = _scan_tree(args.root, args.subset, args.eval_split, cfg)
    for manifest in (train_manifest, eval_manifest):
        if manifest.errors:
            for violation in manifest.errors:
                print(f"violation: {violation}", file=sys.stderr)
            return EXIT_INVALID

    rows = []
    for source in sources:
        for adapter_on in adapter_arms:
            arm = _arm_name(source, adapter_on)
            arm_dir = out_dir / "arms" / arm
            arm_cfg = cfg.with_overrides([
                f"prompt_source={source}",
                f"adapter.enabled={'true' if adapter_on else 'false'}",
            ])
            ckpt = arm_dir / "checkpoint_final.pt"
            if args.train_all:
                pipeline.train(train_manifest, arm_cfg, arm_dir, manifest_extra={"version": __version__})
            if not ckpt.is_file():
                raise FileNotFoundError(
                    f"missing checkpoint for arm {arm}: {ckpt} (run with --train-all to produce it)"
                )
            report = pipeline.evaluate_run(
                ckpt, eval_manifest, arm_cfg, output_path=arm_dir / "metrics.json"
            )
            rows.append({
                "prompt_source": source,
                "adapter": "on" if adapter_on else "off",
                "mJ": report.summary.m_j,
                "mF": report.summary.m_f,
                "checkpoint": str(ckpt),
            })

    # vision-bias check: clip-only within margin of fused (adapter-matched)
    bias = {"raised": False, "margin": args.bias_margin}
    for adapter_on in adapter_arms:
        tag = "on" if adapter_on else "off"
        by_source = {r["prompt_source"]: r for r in rows if r["adapter"] == tag}
        if "fused" in by_source and "clip_only" in by_source:
            gap = by_source["fused"]["mJ"] - by_source["clip_only"]["mJ"]
            bias.update(
                raised=bool(gap <= args.bias_margin),
                fused_mj=by_source["fused"]["mJ"],
                clip_only_mj=by_source["clip_only"]["mJ"],
                gap=gap,
                adapter=tag,
            )
            break

    footnotes = _reference_footnotes()
    grid_path = out_dir / "ablation_grid.tsv"
    with open(grid_path, "w", encoding="utf-8") as fh:
        fh.write("prompt_source\tadapter\tmJ\tmF\tcheckpoint\n")
        for r in rows:
            fh.write(f"{r['prompt_source']}\t{r['adapter']}\t{r['mJ']:.2f}\t{r['mF']:.3f}\t{r['checkpoint']}\n")
        for line in footnotes:
            fh.write(f"# {line}\n")
        if bias["raised"]:
            fh.write(
                f"# vision-bias flag: clip_only mJ within {bias['margin']} of fused "
                f"(gap {bias['gap']:.2f}) — audio contributes little on this set\n"
            )

    report_payload = {"rows": rows, "footnotes": footnotes, "vision_bias": bias}
    (out_dir / "ablation_report.json").write_text(
        json.dumps(report_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_run_manifest(
        out_dir / "run_manifest.json",
        "ablate",
        cfg,
        {"arms": [r["prompt_source"] + "/" + r["adapter"] for r in rows],
         "subset": args.subset, "train_split": args.train_split, "eval_split": args.eval_split,
         "trained": bool(args.train_all)},
    )
    for r in rows:
        print(f"{r['prompt_source']:10s} adapter={r['adapter']:3s} mJ={r['mJ']:.2f} mF={r['mF']:.3f}")
    if bias["raised"]:
        print(f"vision-bias flag raised (fused - clip_only = {bias['gap']:.2f} mJ <= {bias['margin']})")
    print(f"grid written to {grid_path}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file layered over defaults")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dot-path config override, e.g. train.lr=0.01 (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    p.add_argument("--backend", choices=("stub", "pretrained"))
    p.add_argument("--prompt-source", choices=tuple(PROMPT_SOURCE_FLAGS))
    p.add_argument("--adapter", choices=("on", "off"))
    p.add_argument("--threshold", type=float, help="binarization threshold")
    p.add_argument("--beta2", type=float, help="F-score beta^2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="av2tsam",
        description="Audio-visual segmentation experiments: data, training, evaluation, ablations.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic desk-scale dataset tree")
    _add_common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--subset", choices=("s4", "ms3"), required=True)
    p.add_argument("--split", choices=("train", "val", "test"), required=True)
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--frames", type=int, default=5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="scan a dataset tree into a manifest, enforcing conventions")
    _add_common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--subset", choices=("s4", "ms3"), required=True)
    p.add_argument("--split", choices=("train", "val", "test"), required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train on a train-split manifest")
    _add_common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--subset", choices=("s4", "ms3"), required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write binarized masks (and overlays) for clips")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip-dir", help="bare clip folder (frames/ + audio/)")
    p.add_argument("--root")
    p.add_argument("--subset", choices=("s4", "ms3"))
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--clip", help="restrict to one clip id")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--overlay", action="store_true", help="also write mask-over-frame blends")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fully annotated split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--subset", choices=("s4", "ms3"), required=True)
    p.add_argument("--split", choices=("train", "val", "test"), required=True)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="prompt-source x adapter grid with reference footnotes")
    _add_common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--subset", choices=("s4", "ms3"), required=True)
    p.add_argument("--train-split", choices=("train", "val", "test"), default="train")
    p.add_argument("--eval-split", choices=("train", "val", "test"), default="val")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--arms", nargs="+", choices=tuple(PROMPT_SOURCE_FLAGS),
                   default=list(PROMPT_SOURCE_FLAGS))
    p.add_argument("--adapter-arms", choices=("on", "off", "both"), default="both")
    p.add_argument("--train-all", action="store_true",
                   help="train every arm before evaluating it")
    p.add_argument("--bias-margin", type=float, default=1.0,
                   help="mJ gap at or under which the vision-bias flag is raised")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, str(exc))
    except (BackendUnavailableError, CheckpointFormatError) as exc:
        return _fail(EXIT_MISSING, str(exc))
    except (ConventionError, DatasetError, ConfigKeyError, TrainingDivergedError) as exc:
        return _fail(EXIT_INVALID, str(exc))
    except Av2tError as exc:
        return _fail(EXIT_INVALID, str(exc))
    except ValueError as exc:
        return _fail(EXIT_INVALID, str(exc))


if __name__ == "__main__":
    sys.exit(main())
