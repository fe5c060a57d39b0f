"""Command-line entry point covering the whole pipeline: corpus generation
and packing, pretraining under any of the four objectives, the evaluation
family (probe / finetune / semi / multiview / temporal), and ablation sweeps.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import traceback
from pathlib import Path

from . import evalsuite, trainer
from .config import ConfigError, ExperimentConfig, build_config, config_from_dict
from .corpus import (
    ManifestError,
    SynthSpec,
    describe,
    generate_synthetic,
    load_manifest,
    pack_directory,
)

SEED_ENV_VAR = "PAIRMAE_SEED"


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV_VAR, "0"))


def _seed_flag(args) -> int | None:
    """--seed wins; otherwise the env default applies only when set."""
    if args.seed is not None:
        return args.seed
    if SEED_ENV_VAR in os.environ:
        return int(os.environ[SEED_ENV_VAR])
    return None


def _parse_overrides(pairs: list[str] | None) -> dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _load_config(args) -> ExperimentConfig:
    return build_config(
        json_path=getattr(args, "config", None),
        overrides=_parse_overrides(getattr(args, "set", None)),
        seed=_seed_flag(args),
        objective=getattr(args, "objective", None),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = SynthSpec(
        num_videos=args.num_videos,
        num_images=args.num_images,
        frames_per_video=args.frames,
        canvas=args.canvas,
        motion_classes=tuple(args.motion_classes.split(",")),
        seed=args.seed if args.seed is not None else _default_seed(),
        cue_scale=args.cue_scale,
    )
    if args.dry_run:
        print(json.dumps(dataclasses.asdict(spec), indent=1, sort_keys=True))
        return 0
    manifest = generate_synthetic(spec, args.out)
    print(Path(args.out) / "manifest.json")
    print(json.dumps(describe(manifest)), file=sys.stderr)
    return 0


def cmd_pack(args) -> int:
    labels = None
    if args.labels:
        labels = {k: int(v) for k, v in json.loads(Path(args.labels).read_text()).items()}
    manifest = pack_directory(args.src, args.out, split=args.split, labels=labels)
    print(args.out)
    print(json.dumps(describe(manifest)), file=sys.stderr)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        print(cfg.to_json())
        return 0
    manifest = load_manifest(args.data)
    final = trainer.pretrain(manifest, cfg.pretrain, args.out, resume=args.resume)
    print(final)
    return 0


def _eval_seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def cmd_eval_probe(args) -> int:
    cfg = _load_config(args)
    spec = dataclasses.replace(cfg.probe, seed=_eval_seed(args))
    result = evalsuite.linear_probe(
        args.ckpt, load_manifest(args.train_data), load_manifest(args.val_data), spec
    )
    evalsuite.write_result(result, args.out, spec.seed, args.ckpt)
    print(json.dumps(dataclasses.asdict(result)))
    return 0


def cmd_eval_finetune(args) -> int:
    cfg = _load_config(args)
    spec = dataclasses.replace(cfg.finetune, seed=_eval_seed(args))
    train = load_manifest(args.train_data)
    val = load_manifest(args.val_data)
    if args.video:
        result, clf = evalsuite.video_finetune(
            args.ckpt, train, val, spec, clip_len=cfg.clip_len
        )
        out_dir = Path(args.out).parent
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "video_classifier.npz"
        evalsuite.save_video_classifier(clf, ckpt_path)
        print(ckpt_path, file=sys.stderr)
    else:
        result = evalsuite.finetune(args.ckpt, train, val, spec)
    evalsuite.write_result(result, args.out, spec.seed, args.ckpt)
    print(json.dumps(dataclasses.asdict(result)))
    return 0


def cmd_eval_semi(args) -> int:
    cfg = _load_config(args)
    spec = dataclasses.replace(cfg.finetune, seed=_eval_seed(args))
    fractions = (
        tuple(float(f) for f in args.fractions.split(","))
        if args.fractions
        else cfg.semi_fractions
    )
    results = evalsuite.semi_supervised_sweep(
        args.ckpt,
        load_manifest(args.train_data),
        load_manifest(args.val_data),
        fractions,
        spec,
    )
    rows = [dataclasses.asdict(r) for r in results]
    Path(args.out).write_text(json.dumps(rows, indent=1) + "\n")
    print(json.dumps(rows))
    return 0


def cmd_eval_multiview(args) -> int:
    result = evalsuite.multiview_video_eval(
        args.ckpt, load_manifest(args.data), args.clips, args.views
    )
    evalsuite.write_result(result, args.out, _eval_seed(args), args.ckpt)
    print(json.dumps(dataclasses.asdict(result)))
    return 0


def cmd_eval_temporal(args) -> int:
    result = evalsuite.temporal_ablation(
        args.ckpt,
        load_manifest(args.data),
        args.mode,
        n_perms=args.perms,
        seed=_eval_seed(args),
    )
    evalsuite.write_result(result, args.out, _eval_seed(args), args.ckpt)
    print(json.dumps(dataclasses.asdict(result)))
    return 0


ABLATION_AXES = ("frame_sep", "pooling", "augment")


def _cell_config(cfg: ExperimentConfig, axis: str, value: str) -> ExperimentConfig:
    doc = cfg.to_dict()
    sampling_doc = doc["pretrain"]["policies"]["sampling"]
    video_aug = doc["pretrain"]["policies"]["video_augment"]
    if axis == "frame_sep":
        if value == "0":
            sampling_doc["mode"] = "same_frame"
        elif value.upper() == "D":
            sampling_doc["mode"] = "distant"
            sampling_doc["n_intervals"] = 2
        else:
            sampling_doc["mode"] = "continuous"
            sampling_doc["delta"] = int(value)
    elif axis == "pooling":
        doc["pretrain"]["model"]["pooling"] = value
    elif axis == "augment":
        if value not in ("color", "spatial", "both"):
            raise ConfigError(f"unknown augment cell {value!r}")
        use_color = value in ("color", "both")
        use_spatial = value in ("spatial", "both")
        video_aug["color"]["enabled"] = use_color
        video_aug["color"]["include_video"] = use_color
        if not use_spatial:
            video_aug["spatial"]["hflip_prob"] = 0.0
            video_aug["spatial"]["crop_scale"] = [1.0, 1.0]
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    return config_from_dict(doc)


def cmd_ablate(args) -> int:
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ConfigError("--values must list at least one cell")
    base = _load_config(args)
    if args.dry_run:
        print(base.to_json())
        print(json.dumps({"axis": args.axis, "values": values}))
        return 0
    train = load_manifest(args.train_data)
    probe_train = load_manifest(args.probe_train_data or args.train_data)
    probe_val = load_manifest(args.val_data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for value in values:
        cell_dir = out_dir / f"{args.axis}_{value}"
        row = {"axis": args.axis, "value": value}
        # Partial-failure policy: a broken cell is recorded and the sweep
        # continues with the remaining cells.
        try:
            cell_cfg = _cell_config(base, args.axis, value)
            ckpt = trainer.pretrain(train, cell_cfg.pretrain, cell_dir)
            spec = dataclasses.replace(cell_cfg.probe, seed=cell_cfg.seed)
            result = evalsuite.linear_probe(ckpt, probe_train, probe_val, spec)
            row.update(top1=result.top1, top5=result.top5, n=result.n_examples)
        except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
        print(json.dumps(row))
    (out_dir / "table.json").write_text(json.dumps(rows, indent=1) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a config key by dotted path (repeatable)",
    )
    p.add_argument("--seed", type=int, default=None, help=f"default: ${SEED_ENV_VAR} or 0")
    p.add_argument("--dry-run", action="store_true", help="validate and print config only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairmae",
        description="masked-reconstruction + pooled-contrastive pretraining lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--num-videos", type=int, default=32)
    p.add_argument("--num-images", type=int, default=32)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--motion-classes", default="left,right,up,down")
    p.add_argument("--cue-scale", type=float, default=1.0)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pack", help="build a manifest from a directory of frames")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--labels", help="JSON file mapping record id to class id")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--objective", choices=trainer.OBJECTIVES, default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    evsub = ev.add_subparsers(dest="eval_command", required=True)

    p = evsub.add_parser("probe", help="linear probe on frozen features")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--val-data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_probe)

    p = evsub.add_parser("finetune", help="end-to-end finetuning")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--val-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--video", action="store_true", help="inflate and finetune on clips")
    p.set_defaults(func=cmd_eval_finetune)

    p = evsub.add_parser("semi", help="semi-supervised label-fraction sweep")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--val-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", help="comma list, default 0.05..1.0")
    p.set_defaults(func=cmd_eval_semi)

    p = evsub.add_parser("multiview", help="K temporal clips x spatial views")
    p.add_argument("--ckpt", required=True, help="video classifier checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=7)
    p.add_argument("--views", type=int, default=3, choices=(1, 3))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval_multiview)

    p = evsub.add_parser("temporal", help="ordered / shuffled / repeated frames")
    p.add_argument("--ckpt", required=True, help="video classifier checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", required=True, choices=evalsuite.TEMPORAL_MODES)
    p.add_argument("--perms", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval_temporal)

    p = sub.add_parser("ablate", help="pretrain+probe sweep over one axis")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True, help="comma list of cells")
    p.add_argument("--train-data", required=True)
    p.add_argument("--val-data", required=True)
    p.add_argument("--probe-train-data", help="defaults to --train-data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - map anything else to exit 1
        traceback.print_exc()
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
