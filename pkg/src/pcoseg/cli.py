"""Command-line entry points for the segmentation/classification experiment."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataset import SynthDatasetSpec, load_manifest, make_folds, synthesize_dataset
from .pipeline import (
    PipelineError,
    RunConfig,
    apply_thread_limit,
    generate_gt2_masks,
    run_pipeline,
    stage_classify,
    stage_evaluate,
    stage_gt2,
    stage_report,
    stage_select_cutoff,
    stage_synth,
    stage_train,
)


def _load_config(args) -> RunConfig:
    doc = json.loads(Path(args.config).read_text())
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        doc["out"] = args.out
    if getattr(args, "threads", None) is not None:
        doc["threads"] = args.threads
    cfg = RunConfig.from_dict(doc)
    apply_thread_limit(cfg)
    return cfg


def _add_config_args(p):
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--threads", type=int, default=None, help="torch CPU thread count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcoseg",
        description="Segment posterior capsular opacification and classify treatment need.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=int, default=64)
    p.add_argument("--label-threshold", type=float, default=4.0)
    p.add_argument("--negative-fraction", type=float, default=0.15)

    p = sub.add_parser("folds", help="print the k-fold plan for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gt2", help="generate automated masks for a run or a manifest")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--manifest", help="operate directly on a manifest instead")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="override output directory (config mode)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--clusters", type=int, default=None)

    p = sub.add_parser("train", help="train one fold for one ground-truth source")
    _add_config_args(p)
    p.add_argument("--gt", choices=["1", "2"], required=True)
    p.add_argument("--fold", type=int, required=True)

    for name, help_text in (
        ("evaluate", "predict held-out folds and write segmentation tables"),
        ("select-cutoff", "sweep candidate cutoffs and pick operating points"),
        ("classify", "label every case at the selected cutoffs"),
        ("report", "assemble plots, tables and report.json"),
        ("run-all", "run the whole experiment end to end"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_args(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            spec = SynthDatasetSpec(
                count=args.count,
                radius=args.radius,
                label_threshold=args.label_threshold,
                negative_fraction=args.negative_fraction,
            )
            manifest = synthesize_dataset(spec, args.seed, args.out)
            counts = manifest.label_counts()
            print(f"wrote {len(manifest.items)} samples to {args.out} ({counts})")
        elif args.command == "folds":
            manifest = load_manifest(args.manifest)
            items = manifest.active_items()
            plan = make_folds(
                [it.id for it in items],
                args.k,
                args.seed,
                labels={it.id: it.label for it in items},
            )
            print(json.dumps({"k": plan.k, "assignments": plan.assignments}, indent=2, sort_keys=True))
        elif args.command == "gt2":
            if (args.manifest is None) == (args.config is None):
                print("error: gt2 needs exactly one of --config or --manifest", file=sys.stderr)
                return 1
            clusters = args.clusters if args.clusters is not None else 3
            if args.manifest is not None:
                manifest = load_manifest(args.manifest)
                generate_gt2_masks(manifest, args.manifest, args.seed or 0, clusters)
                print(f"gt2 masks written under {Path(args.manifest).parent / 'gt2'}")
            else:
                cfg = _load_config(args)
                if args.clusters is not None:
                    cfg.clusters = args.clusters
                stage_synth(cfg)
                stage_gt2(cfg)
                print(f"gt2 masks written under {cfg.out_dir / 'data' / 'gt2'}")
        elif args.command == "train":
            cfg = _load_config(args)
            gt_source = f"gt{args.gt}"
            record = stage_train(cfg, gt_source, args.fold)
            print(
                f"{gt_source} fold {args.fold}: best epoch {record.epoch}, "
                f"valid dice {record.valid_dice:.4f}"
            )
        elif args.command == "evaluate":
            stage_evaluate(_load_config(args))
            print("segmentation tables written")
        elif args.command == "select-cutoff":
            results = stage_select_cutoff(_load_config(args))
            for model, (_, chosen) in sorted(results.items()):
                print(f"{model}: cutoff {chosen.cutoff:.4f} at recall {chosen.recall}")
        elif args.command == "classify":
            stage_classify(_load_config(args))
            print("classification tables written")
        elif args.command == "report":
            report = stage_report(_load_config(args))
            print(report.to_json())
        elif args.command == "run-all":
            cfg = _load_config(args)
            report = run_pipeline(cfg)
            for model, means in sorted(report.validation_means.items()):
                print(f"{model}: mean valid dice {means['dice']:.4f}")
            for model, m in sorted(report.classification.items()):
                f2 = m["f2"]
                print(f"{model}: cutoff {report.selected_cutoffs[model]:.4f}, f2 {f2}")
            print(f"report written to {cfg.out_dir / 'report' / 'report.json'}")
        return 0
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
