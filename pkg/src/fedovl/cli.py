"""Command-line entry point.

Subcommands: gen (synthetic FMEB files), train (checkpoint), infer (report
from checkpoint), run (end-to-end), sweep, ablate, report (figures + CSV
from report JSON). Progress goes to stderr; reports go to --out (- for
stdout). Exit status is nonzero on failure, with the failing stage named.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .data import SyntheticConfig, generate_synthetic, prompts_as_dataset
from .experiment import (
    SWEEP_AXES,
    ExperimentConfig,
    StageError,
    infer_from_checkpoint,
    report_to_json,
    run_ablation_study,
    run_experiment,
    run_sweep,
    train_checkpoint,
)


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_config(args) -> ExperimentConfig:
    if args.config:
        with open(args.config) as f:
            cfg = ExperimentConfig.from_dict(json.load(f))
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "repeats", None) is not None:
        cfg = replace(cfg, repeats=args.repeats)
    if getattr(args, "no_adaptive_agg", False):
        cfg = replace(cfg, no_adaptive_aggregation=True)
    if getattr(args, "no_prototyping", False):
        cfg = replace(cfg, no_prototyping=True)
    return cfg


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)
        _progress(f"wrote {out}")


def _cmd_gen(args) -> int:
    from .fmeb import write_fmeb

    cfg = SyntheticConfig(
        dim=args.dim,
        num_classes=args.classes,
        class_separation=args.separation,
        image_noise=args.image_noise,
        text_noise=args.text_noise,
        shots_per_class=args.shots,
        seed=args.seed if args.seed is not None else 0,
    )
    dataset, prompts = generate_synthetic(cfg)
    write_fmeb(dataset, args.out_images)
    write_fmeb(prompts_as_dataset(prompts, dataset.dim), args.out_prompts)
    _progress(
        f"wrote {args.out_images} ({len(dataset.records)} records) and "
        f"{args.out_prompts} ({len(prompts)} prompts), dim {dataset.dim}"
    )
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    report = run_experiment(cfg, progress=_progress)
    _emit(report_to_json(report), args.out)
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    checkpoint = train_checkpoint(cfg, args.seed)
    _emit(report_to_json(checkpoint), args.out)
    return 0


def _cmd_infer(args) -> int:
    with open(args.checkpoint) as f:
        checkpoint = json.load(f)
    overrides: dict = {}
    if args.no_adaptive_agg:
        overrides["no_adaptive_aggregation"] = True
    if args.no_prototyping:
        overrides["no_prototyping"] = True
    report = infer_from_checkpoint(checkpoint, overrides)
    _emit(report_to_json(report), args.out)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values = None
    if args.values:
        values = [float(v) if "." in v else int(v) for v in args.values.split(",")]
    report = run_sweep(cfg, args.axis, values, progress=_progress)
    _emit(report_to_json(report), args.out)
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    report = run_ablation_study(cfg, progress=_progress)
    _emit(report_to_json(report), args.out)
    return 0


def _cmd_report(args) -> int:
    from .plots import render_report

    with open(args.report) as f:
        report = json.load(f)
    written = render_report(report, args.out_dir)
    for path in written:
        _progress(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedovl",
        description="Federated open-vocabulary learning simulator over embedding files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic FMEB embedding files")
    gen.add_argument("--dim", type=int, default=64)
    gen.add_argument("--classes", type=int, default=30)
    gen.add_argument("--shots", type=int, default=50)
    gen.add_argument("--separation", type=float, default=1.0)
    gen.add_argument("--image-noise", type=float, default=0.3)
    gen.add_argument("--text-noise", type=float, default=0.1)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out-images", required=True)
    gen.add_argument("--out-prompts", required=True)
    gen.set_defaults(func=_cmd_gen)

    def common(p, repeats=True):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--out", default="-", help="output path, - for stdout")
        p.add_argument("--seed", type=int, default=None)
        if repeats:
            p.add_argument("--repeats", type=int, default=None)
        p.add_argument("--no-adaptive-agg", action="store_true")
        p.add_argument("--no-prototyping", action="store_true")

    run = sub.add_parser("run", help="end-to-end experiment + JSON report")
    common(run)
    run.set_defaults(func=_cmd_run)

    train = sub.add_parser("train", help="federated training only; writes a checkpoint")
    common(train)
    train.set_defaults(func=_cmd_train)

    infer = sub.add_parser("infer", help="aggregate + streaming inference from a checkpoint")
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--out", default="-")
    infer.add_argument("--no-adaptive-agg", action="store_true")
    infer.add_argument("--no-prototyping", action="store_true")
    infer.set_defaults(func=_cmd_infer)

    sweep = sub.add_parser("sweep", help="one experiment per axis value")
    common(sweep)
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", help="comma-separated values (alpha defaults to a 0.1-then-0.01 grid)")
    sweep.set_defaults(func=_cmd_sweep)

    ablate = sub.add_parser("ablate", help="full vs no-adaptive-aggregation vs no-prototyping")
    common(ablate)
    ablate.set_defaults(func=_cmd_ablate)

    report = sub.add_parser("report", help="render CSV + figures from a report JSON")
    report.add_argument("--report", required=True, help="report JSON produced by run/sweep/ablate")
    report.add_argument("--out-dir", default="figures")
    report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as e:
        print(f"fedovl: error in {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        print(f"fedovl: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
