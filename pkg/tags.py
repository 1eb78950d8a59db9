#!/usr/bin/env python3
"""
████████╗ █████╗  ██████╗ ███████╗
╚══██╔══╝██╔══██╗██╔════╝ ██╔════╝
   ██║   ███████║██║  ███╗███████╗
   ██║   ██╔══██║██║   ██║╚════██║
   ██║   ██║  ██║╚██████╔╝███████║
   ╚═╝   ╚═╝  ╚═╝ ╚═════╝ ╚══════╝

TAGS - proposal-free temporal action detection with global segmentation masks
synth, train, infer, eval, profile-fp, gradcheck, simdump
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

# Add modules to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import torch

from core.config import TIOU_PRESETS, RunConfig
from core.errors import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, TagsError, ValidationError
from core.status_bar import StatusBar, configure_logging
from core.theme import N01DTheme
from modules.data_io import load_dataset, read_annotations, read_predictions, write_annotations, \
    write_features, write_predictions
from modules.evaluation import fp_profile, map_report, similarity_dump
from modules.gradcheck import GradCheckSettings, all_passed, gradient_check
from modules.inference import ORACLES, run_inference
from modules.model import DTYPE
from modules.synthetic import SyntheticSpec, generate_synthetic
from modules.training import load_model, train

VERSION = "1.0.0"
APP_NAME = "tags"


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the validation code"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _tious(text: str):
    if text in TIOU_PRESETS:
        return TIOU_PRESETS[text]
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list or one of {sorted(TIOU_PRESETS)}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--preset", choices=sorted(RunConfig.PRESETS), help="named configuration preset")
    common.add_argument("--seed", type=int, help="single source of randomness")
    common.add_argument("--workers", type=int, help="videos processed concurrently (default 1)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging and progress bars")

    parser = _Parser(prog=APP_NAME, description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic dataset")
    p.add_argument("--videos", type=int, default=20)
    p.add_argument("--val-videos", type=int, default=0, help="extra held-out videos (subset 'val')")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--snippets", type=int, default=64)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--max-len", type=int, default=SyntheticSpec.max_len, help="longest instance in snippets")
    p.add_argument("--max-instances", type=int, default=SyntheticSpec.max_instances)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", type=Path, help="directory of .tagf feature files")
    p.add_argument("--gt", type=Path, help="annotation JSON")
    p.add_argument("--subset", default="train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("infer", parents=[common], help="detect actions with a checkpoint")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--gt", type=Path, help="annotation JSON (durations, subsets)")
    p.add_argument("--subset")
    p.add_argument("--oracle", choices=ORACLES, help="replace one branch with ground truth")
    p.add_argument("--dump-dir", type=Path, help="write P and M of every scale here")

    p = sub.add_parser("eval", parents=[common], help="mAP report for a predictions file")
    p.add_argument("--preds", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--tious", type=_tious, help="comma list or preset name")
    p.add_argument("--subset")
    p.add_argument("--fp", action="store_true", help="include the false-positive profile")

    p = sub.add_parser("profile-fp", parents=[common], help="false-positive profile")
    p.add_argument("--preds", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--tiou", type=float)
    p.add_argument("--budgets", type=int)
    p.add_argument("--subset")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--configs", type=int, default=GradCheckSettings.configs)

    p = sub.add_parser("simdump", parents=[common], help="snippet embedding similarity matrix")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--gt", type=Path)
    p.add_argument("--video", required=True, help="video id")
    return parser


def _require(value, flag: str):
    if value is None:
        raise ValidationError(f"{flag} is required (flag or config paths)")
    return value


def resolve_config(args, base: Optional[RunConfig] = None) -> RunConfig:
    """Preset (or checkpoint config), then --config, then flags"""
    config = base or (RunConfig.from_preset(args.preset) if args.preset else RunConfig())
    if args.config:
        config.update(RunConfig.read_json(args.config))
    config.override({
        "train.seed": args.seed,
        "train.workers": args.workers,
        "train.epochs": getattr(args, "epochs", None),
        "train.lr": getattr(args, "lr", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "eval.tious": getattr(args, "tious", None),
        "eval.fp_tiou": getattr(args, "tiou", None),
        "eval.fp_budgets": getattr(args, "budgets", None),
        "paths.data": str(args.data) if getattr(args, "data", None) else None,
        "paths.annotations": str(args.gt) if getattr(args, "gt", None) else None,
        "paths.checkpoint": str(args.checkpoint) if getattr(args, "checkpoint", None) else None,
        "paths.out": str(args.out) if args.out else None,
    })
    return config


def cmd_synth(args, status: StatusBar) -> int:
    out = _require(args.out, "--out")
    spec = SyntheticSpec(num_videos=args.videos, K=args.classes, T=args.snippets, dim=args.dim,
                         noise_sigma=args.noise, val_videos=args.val_videos,
                         max_len=args.max_len, max_instances=args.max_instances,
                         min_len=min(SyntheticSpec.min_len, args.max_len),
                         seed=7 if args.seed is None else args.seed)
    sequences, annotations = generate_synthetic(spec)
    for seq in sequences:
        write_features(seq, out / "features" / f"{seq.video_id}.tagf")
    write_annotations(annotations, out / "annotations.json")
    status.set_message(f"{len(sequences)} videos, {annotations.ground_truth_count()} instances -> {out}")
    return EXIT_OK


def cmd_train(args, status: StatusBar) -> int:
    config = resolve_config(args)
    paths = config.paths
    annotations = read_annotations(_require(paths.annotations, "--gt"))
    samples = load_dataset(_require(paths.data, "--data"), annotations, config.train.T, args.subset)
    out = Path(_require(paths.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    result = train(samples, annotations.classes, config, out, status, show_progress=args.verbose)
    if result.history:
        status.set_message(f"final loss {result.history[-1]['total']:.5f}")
    return EXIT_OK


def _load_for_inference(args):
    ckpt = _require(args.checkpoint, "--checkpoint")
    model, ckpt_config, classes = load_model(ckpt)
    config = resolve_config(args, base=ckpt_config)
    annotations = read_annotations(_require(config.paths.annotations, "--gt"))
    if list(annotations.classes) != list(classes):
        raise ValidationError("annotation classes differ from the checkpoint's classes")
    samples = load_dataset(_require(config.paths.data, "--data"), annotations, model.T,
                           getattr(args, "subset", None))
    return model, config, classes, samples


def cmd_infer(args, status: StatusBar) -> int:
    model, config, classes, samples = _load_for_inference(args)
    out = Path(_require(config.paths.out, "--out"))
    candidates = run_inference(model, samples, config, classes, oracle=args.oracle,
                               dump_dir=args.dump_dir, theme=N01DTheme() if args.dump_dir else None,
                               workers=config.train.workers)
    path = write_predictions(candidates, out / "predictions.json", classes,
                             [s.features.video_id for s in samples])
    status.set_message(f"{len(candidates)} detections in {len(samples)} videos -> {path}")
    return EXIT_OK


def cmd_eval(args, status: StatusBar) -> int:
    config = resolve_config(args)
    report = map_report(read_predictions(args.preds), read_annotations(args.gt), config.eval.tious,
                        subset=args.subset, fp_tiou=config.eval.fp_tiou if args.fp else None,
                        fp_budgets=config.eval.fp_budgets)
    if args.out:
        report.write_json(args.out / "report.json")
        report.write_csv(args.out)
    print(report.to_json())
    status.set_message(f"average mAP {report.average_map:.4f}")
    return EXIT_OK


def cmd_profile_fp(args, status: StatusBar) -> int:
    config = resolve_config(args)
    profile = fp_profile(read_predictions(args.preds), read_annotations(args.gt), config.eval.fp_tiou,
                         config.eval.fp_budgets, subset=args.subset)
    text = json.dumps(profile.to_dict(), indent=2)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "fp_profile.json").write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args, status: StatusBar) -> int:
    settings = GradCheckSettings(configs=args.configs)
    results = gradient_check(seed=7 if args.seed is None else args.seed, settings=settings, status=status)
    for name, res in results.items():
        print(f"{name:6s} max_rel_error={res.max_rel_error:.3e} checks={res.checks}")
    if all_passed(results, settings.tolerance):
        return EXIT_OK
    status.set_message(f"gradient check failed (tolerance {settings.tolerance:g})", error=True)
    return EXIT_RUNTIME


def cmd_simdump(args, status: StatusBar) -> int:
    model, config, classes, samples = _load_for_inference(args)
    sample = next((s for s in samples if s.features.video_id == args.video), None)
    if sample is None:
        raise ValidationError(f"video '{args.video}' not found in {config.paths.data}")
    with torch.no_grad():
        outputs = model(torch.as_tensor(sample.features.values, dtype=DTYPE))
    base = min(outputs, key=lambda o: o.scale)
    out = Path(_require(config.paths.out, "--out"))
    path = out / f"{args.video}_similarity.tagf"
    similarity_dump(base.E.numpy(), path, N01DTheme())
    status.set_message(f"scale-{base.scale} similarity matrix -> {path}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "profile-fp": cmd_profile_fp,
    "gradcheck": cmd_gradcheck,
    "simdump": cmd_simdump,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns 0 on success, 1 on validation errors, 2 on runtime failures"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_VALIDATION

    configure_logging(args.verbose)
    status = StatusBar(args.command)
    try:
        return COMMANDS[args.command](args, status)
    except TagsError as e:
        status.set_message(str(e), error=True)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        status.set_message(f"cannot read input: {e}", error=True)
        return EXIT_VALIDATION
    except Exception:  # noqa: BLE001
        status.logger.exception("unexpected failure", extra={"module_label": status.module})
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
