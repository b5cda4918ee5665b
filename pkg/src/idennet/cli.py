"""Command-line entry point: ``idennet <verb> [options]``.

Every verb prints a tab-separated report on stdout and, where an ``--out``
directory is given, writes the same tables plus PNG figures there.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import BackboneConfig, LossConfig, TrainConfig, from_mapping, read_config, write_config
from .data import SynthSpec, load_manifest, make_folds, synth_generate, write_manifest
from .model import Variant

log = logging.getLogger("idennet")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config file)")
    p.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    p.add_argument("--variant", choices=[v.value for v in Variant], default="if")
    p.add_argument("--depth", type=int, choices=[16, 22, 40], default=None)
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idennet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a synthetic face dataset (PGMs + manifest)")
    _common(p)
    p.add_argument("--identities", type=int, default=None)
    p.add_argument("--expressions", type=int, default=None)
    p.add_argument("--per-cell", type=int, default=None, help="images per identity/expression pair")
    p.add_argument("--variation", type=float, default=None, help="identity-specific expression strength in [0,1]")

    p = sub.add_parser("pretrain", help="train one stream on expressions or identities")
    _common(p)
    p.add_argument("--task", choices=["emotion", "identity"], required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("finetune", help="cross-validated fine-tuning of one variant")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--emotion-ckpt", type=Path, required=True)
    p.add_argument("--identity-ckpt", type=Path, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--fold", type=int, action="append", default=None, help="run only this fold (repeatable)")
    p.add_argument("--cache-features", action="store_true",
                   help="precompute frozen stream outputs (forces centre crops, no augmentation)")

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("heatmap", help="export fusion-block heatmaps")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--limit", type=int, default=None, help="export only the first N samples")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _common(p)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per op")

    p = sub.add_parser("benchmark", help="synthetic ablation of original/f/if over folds and seeds")
    _common(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--variants", nargs="+", default=None, choices=[v.value for v in Variant])
    return parser


def _values(args) -> dict[str, str]:
    return read_config(args.config) if args.config else {}


def _backbone(args, values) -> BackboneConfig:
    return from_mapping(BackboneConfig, values, depth=args.depth)


def _train_config(args, values, stage: str, **overrides) -> TrainConfig:
    overrides = {k: v for k, v in overrides.items() if v is not None}
    cfg = from_mapping(TrainConfig, values, stage=stage, seed=args.seed, **overrides)
    return cfg


def _out(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    values = _values(args)
    spec = from_mapping(SynthSpec, values, seed=args.seed, num_identities=args.identities,
                        num_expressions=args.expressions, samples_per_cell=args.per_cell,
                        variation_strength=args.variation)
    out = _out(args, "synth")
    samples = synth_generate(spec)
    write_manifest(out / "manifest.tsv", samples)
    write_config(out / "synth.cfg", spec)
    print(f"samples\t{len(samples)}")
    print(f"identities\t{spec.num_identities}")
    print(f"expressions\t{spec.num_expressions}")
    print(f"subjects\t{len({s.subject_id for s in samples})}")
    print(f"manifest\t{out / 'manifest.tsv'}")
    return 0


def cmd_pretrain(args) -> int:
    from .plotting import plot_history
    from .train import pretrain

    values = _values(args)
    backbone = _backbone(args, values)
    cfg = _train_config(args, values, "pretrain", epochs=args.epochs)
    samples = load_manifest(args.manifest)
    out = _out(args, f"pretrain_{args.task}")
    write_config(out / "run.cfg", backbone, cfg)
    res = pretrain(args.task, samples, backbone, cfg, out_dir=out)
    plot_history(res.history, out / f"pretrain_{args.task}_history.png", title=f"pretrain {args.task}")
    print("epoch\tloss\ttrain_acc\tval_acc")
    for e, acc in zip(res.history, res.val_accuracy):
        print(f"{e.epoch}\t{e.total:.6f}\t{e.train_acc:.6f}\t{acc:.6f}")
    print(f"best_epoch\t{res.best_epoch}")
    print(f"checkpoint\t{out / f'pretrain_{args.task}_best.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    from .plotting import plot_confusion, plot_history
    from .train import finetune, precompute_features

    values = _values(args)
    variant = Variant.parse(args.variant)
    overrides = {"epochs": args.epochs}
    if args.cache_features:
        overrides.update(augment=False, train_crop="center")
    cfg = _train_config(args, values, "finetune", **overrides)
    samples = load_manifest(args.manifest)
    emo = ckpt_io.to_pretrain(ckpt_io.load(args.emotion_ckpt))
    ident = ckpt_io.to_pretrain(ckpt_io.load(args.identity_ckpt)) if args.identity_ckpt else None
    if args.depth is not None and emo.backbone.depth != args.depth:
        raise ValueError(f"--depth {args.depth} does not match the emotion checkpoint (depth {emo.backbone.depth})")
    loss_cfg = from_mapping(LossConfig, values,
                            num_expressions=max(s.expression_label for s in samples) + 1,
                            num_identities=max(s.identity_label for s in samples) + 1)
    folds = make_folds(samples, cfg.folds, cfg.seed)
    out = _out(args, f"finetune_{variant.value}")
    write_config(out / "run.cfg", emo.backbone, cfg, loss_cfg)
    features = None
    if args.cache_features:
        features = precompute_features(emo, ident if variant.has_identity_stream else None, samples)
    res = finetune(variant, emo, ident, samples, folds, cfg, loss_cfg, out_dir=out, features=features,
                   fold_ids=args.fold)
    for fold, hist in zip(args.fold or range(folds.k), res.histories):
        plot_history(hist, out / f"finetune_{variant.value}_fold{fold:02d}_history.png",
                     title=f"{variant.value} fold {fold}")
    plot_confusion(res.report, out / f"finetune_{variant.value}_confusion.png")
    sys.stdout.write(res.report.to_text())
    return 0


def cmd_eval(args) -> int:
    from .plotting import plot_confusion
    from .train import evaluate

    model = ckpt_io.to_model(ckpt_io.load(args.checkpoint))
    samples = load_manifest(args.manifest)
    report = evaluate(model, samples)
    sys.stdout.write(report.to_text())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        report.write(args.out / "eval_report.tsv")
        plot_confusion(report, args.out / "eval_confusion.png")
    return 0


def cmd_heatmap(args) -> int:
    from .train import heatmap_export

    model = ckpt_io.to_model(ckpt_io.load(args.checkpoint))
    samples = load_manifest(args.manifest)
    if args.limit is not None:
        samples = samples[: args.limit]
    out = args.out or Path("heatmaps")
    written = heatmap_export(model, samples, out)
    print(f"samples\t{len(samples)}")
    print(f"files\t{len(written)}")
    print(f"index\t{out / 'index.tsv'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_all

    base = args.seed or 0
    report = gradcheck_all(seeds=tuple(range(base, base + args.seeds)))
    print(report.to_text())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.tsv").write_text(report.to_text() + "\n", encoding="utf-8")
    return 0 if report.passed else 1


def cmd_benchmark(args) -> int:
    from .benchmark import BenchmarkConfig, run_benchmark

    values = _values(args)
    base = BenchmarkConfig()
    seed = args.seed or 0
    cfg = replace(
        base,
        backbone=from_mapping(BackboneConfig, values, depth=args.depth or base.backbone.depth),
        finetune=from_mapping(TrainConfig, values, **{f: getattr(base.finetune, f) for f in
                                                      ("stage", "augment", "train_crop")},
                              epochs=int(values.get("epochs", base.finetune.epochs)),
                              batch_size=int(values.get("batch_size", base.finetune.batch_size)),
                              dropout=float(values.get("dropout", base.finetune.dropout))),
        seeds=tuple(range(seed, seed + args.seeds)),
    )
    res = run_benchmark(cfg, out_dir=args.out or Path("benchmark"), variants=args.variants)
    sys.stdout.write(res.to_text())
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "gradcheck": cmd_gradcheck,
    "benchmark": cmd_benchmark,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.verb](args)
    except (ValueError, OSError, ckpt_io.CheckpointError) as exc:
        print(f"idennet {args.verb}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
