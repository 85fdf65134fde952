"""Command-line interface.

Subcommands: stats, sr-train, sr-apply, variant, train, eval, matrix,
category, report, synth. A config file (--config, 'key value' lines)
overrides flags; flags override defaults.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .data import (DatasetVariant, apply_variant, balance_classes, dataset_stats,
                   load_manifest, read_ppm, read_ppm_dims, save_manifest,
                   split_dataset)
from .errors import ContractError, FoodrecError, NumericError, ValidationError
from .image import write_ppm
from .metrics import aggregate_experiment_scores
from .models import build_from_config
from .report import (read_results_csv, results_markdown, stats_csv,
                     write_cm_heatmap, write_dims_scatter, write_ranking_csv,
                     write_results_csv)
from .sr import (load_scn, sample_patch_pairs, save_scn, super_resolve,
                 train_scn, upscale_factor)
from .synth import generate_synthetic_dataset

log = logging.getLogger("foodrec")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _add_common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=Path, default=None,
                   help="key/value config file; overrides flags")
    p.add_argument("--out", type=Path, default=Path("out"))


def _train_config(args) -> ex.TrainConfig:
    flags = {}
    for key in ("seed", "freeze_mode", "max_iterations", "learning_rate",
                "batch_size", "crop", "resize_to"):
        if hasattr(args, key) and getattr(args, key) is not None:
            flags[key] = getattr(args, key)
    file_overrides = ex.load_config_file(args.config) if args.config else {}
    return ex.make_train_config(flags, file_overrides)


def _extra_config(args, key, default):
    if args.config:
        overrides = ex.load_config_file(args.config)
        if key in overrides:
            return overrides[key]
    val = getattr(args, key, None)
    return default if val is None else val


def _load_split_manifest(args, config):
    manifest = load_manifest(args.manifest)
    if getattr(args, "balanced", False):
        manifest = balance_classes(manifest, _extra_config(args, "cap", 500), config.seed)
    if all(r.split == "unassigned" for r in manifest.records):
        manifest = split_dataset(manifest, (0.8, 0.1, 0.1), config.seed)
    return manifest


def _build_model(args, num_classes, config):
    if getattr(args, "model_config", None):
        return build_from_config(Path(args.model_config).read_text(encoding="utf-8"),
                                 seed=config.seed)
    return ex._build_for("inception" if args.arch == "inception" else "vgg_style",
                         num_classes, config, seed=config.seed)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    out = args.out
    seed = args.seed if args.seed is not None else 0
    a = generate_synthetic_dataset(out, "A", classes=args.classes,
                                   per_class=args.per_class,
                                   size_range=(88, 120), seed=seed)
    b = generate_synthetic_dataset(out, "B", classes=args.classes,
                                   per_class=args.per_class,
                                   size_range=(36, 72), seed=seed + 1)
    print(f"wrote {len(a.records)} A records and {len(b.records)} B records under {out}")
    return 0


def cmd_stats(args):
    manifest = load_manifest(args.manifest)
    stats = dataset_stats(manifest)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "stats.csv").write_text(stats_csv(stats), encoding="utf-8")
    if stats.dims:
        write_dims_scatter(args.out / "dims.svg", stats.dims,
                           title=f"{len(stats.dims)} images")
    for path, msg in stats.errors:
        print(f"warning: {path}: {msg}", file=sys.stderr)
    print(f"{stats.total_images} images, {stats.total_dishes} dishes, "
          f"{len(stats.per_category)} categories")
    for cat, nd, pct, ni in stats.per_category:
        print(f"  {cat}: {nd} dishes ({pct:.2f}%), {ni} images")
    return 0


def cmd_sr_train(args):
    manifest = load_manifest(args.manifest)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    records = [r for r in manifest.records if r.split in ("train", "unassigned")]
    images = [read_ppm(r.image_path) for r in records]
    pairs = sample_patch_pairs(images, args.patches, factor=args.factor,
                               patch_size=args.patch_size, rng=rng)
    params = train_scn(pairs, factor=args.factor, epochs=args.epochs,
                       patch_size=args.patch_size, dict_atoms=args.atoms,
                       lista_iterations=args.iterations,
                       seed=args.seed if args.seed is not None else 0)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_scn(args.out, params)
    print(f"trained upscaler: loss {params.loss_trace[0]:.6f} -> {params.loss_trace[-1]:.6f}, "
          f"saved to {args.out}")
    return 0


def cmd_sr_apply(args):
    import os

    from .data import Manifest, _mirror_path

    manifest = load_manifest(args.manifest)
    scn = load_scn(args.scn)
    args.out.mkdir(parents=True, exist_ok=True)
    errors = []
    out_records = []
    parents = [str(Path(r.image_path).parent) for r in manifest.records]
    src_root = os.path.commonpath(parents) if parents else "."
    for r in manifest.records:
        if args.source != "all" and r.source != args.source:
            out_records.append(r)
            continue
        try:
            w, h = read_ppm_dims(r.image_path)
            f = upscale_factor(w, h, args.target)
            if f < 2:
                out_records.append(r)
                continue
            lifted = super_resolve(read_ppm(r.image_path), f, scn)
            dest = _mirror_path(r.image_path, args.out / "images", src_root)
            dest.parent.mkdir(parents=True, exist_ok=True)
            write_ppm(dest, lifted)
            out_records.append(replace(r, image_path=str(dest)))
        except Exception as exc:
            errors.append((r.image_path, str(exc)))
    save_manifest(args.out / "manifest.tsv", Manifest.from_records(out_records))
    for path, msg in errors:
        print(f"error: {path}: {msg}", file=sys.stderr)
    print(f"wrote {args.out / 'manifest.tsv'} ({len(errors)} failures)")
    return 2 if errors else 0


def cmd_variant(args):
    manifest = load_manifest(args.manifest)
    scn = load_scn(args.scn) if args.scn else None
    variant = DatasetVariant(args.variant)
    out_manifest, errors = apply_variant(manifest, variant, scn,
                                         out_root=args.out / "images",
                                         target=args.target)
    args.out.mkdir(parents=True, exist_ok=True)
    save_manifest(args.out / "manifest.tsv", out_manifest)
    for path, msg in errors:
        print(f"error: {path}: {msg}", file=sys.stderr)
    print(f"wrote {args.out / 'manifest.tsv'} ({len(errors)} failures)")
    return 2 if errors else 0


def cmd_train(args):
    config = _train_config(args)
    manifest = _load_split_manifest(args, config)
    model = _build_model(args, manifest.num_classes, config)
    if args.pretrained:
        model.load(args.pretrained)
    outcome = ex.train(model, manifest, config)
    args.out.mkdir(parents=True, exist_ok=True)
    model.load_state_dict(outcome.best_state)
    model.save(args.out / "model.ckpt")
    with open(args.out / "loss_trace.csv", "w", encoding="utf-8") as f:
        f.write("iteration,loss\n")
        for it, value in outcome.loss_trace:
            f.write(f"{it},{value!r}\n")
    save_manifest(args.out / "manifest.tsv", manifest)
    print(f"best iteration {outcome.best_iteration} "
          f"(val AT1 {max(outcome.best_val_at1, 0.0):.4f}); "
          f"checkpoint at {args.out / 'model.ckpt'}")
    return 0


def cmd_eval(args):
    config = _train_config(args)
    manifest = load_manifest(args.manifest)
    model = _build_model(args, manifest.num_classes, config)
    model.load(args.checkpoint)
    try:
        from .data import compute_channel_means
        means = compute_channel_means(manifest, resize_to=config.resize_to)
    except ContractError:
        print("warning: no train split for channel means; using zeros", file=sys.stderr)
        means = np.zeros(3)
    result = ex.evaluate(model, manifest, args.scope, config, means=means)
    args.out.mkdir(parents=True, exist_ok=True)
    from .metrics import save_prediction_log
    save_prediction_log(args.out / "predictions.tsv", result.log)
    write_cm_heatmap(args.out / "cm_eval.svg", result.report.confusion,
                     title=f"scope {args.scope}")
    rep = result.report
    print(f"scope {args.scope}: AT1 {rep.at1 * 100:.2f}  AT5 {rep.at5 * 100:.2f}  "
          f"NAT1 {rep.nat1 * 100:.2f}  (n={result.n_test})")
    return 0


def cmd_matrix(args):
    seed = args.seed if args.seed is not None else 42
    opts = ex.MatrixOptions(workdir=args.out, seed=seed)
    if args.cap is not None:
        opts.cap = args.cap
    overrides = ex.load_config_file(args.config) if args.config else {}
    for key in ("cap", "classes", "per_class", "sr_target", "sr_epochs", "sr_patches"):
        if key in overrides:
            setattr(opts, key, overrides[key])
    config = replace(ex.matrix_train_config(seed),
                     **{k: v for k, v in overrides.items() if k in ex._CONFIG_TYPES})
    results = ex.run_matrix(opts, config=config, pretrained=args.pretrained)
    rows = ex.results_to_rows(results)
    for rank, (run, total) in enumerate(ex.ranking_from_rows(rows), start=1):
        print(f"{rank}. experiment {run}: {total:.2f}")
    print(f"report written under {args.out}")
    return 0


def cmd_category(args):
    config = _train_config(args)
    manifest = _load_split_manifest(args, config)
    modes = [args.freeze_mode] if args.freeze_mode else ["all_layers", "last_fc_only"]
    results = [ex.run_category_experiment(mode, manifest, config) for mode in modes]
    args.out.mkdir(parents=True, exist_ok=True)
    ex.emit_report([], args.out, category_results=results)
    for r in results:
        rep = r.metrics["A,B"]
        print(f"{r.plan_id}: AT1 {rep.at1 * 100:.2f}  AT5 {rep.at5 * 100:.2f}  "
              f"NAT1 {rep.nat1 * 100:.2f}  best iteration {r.best_iteration}")
    return 0


def cmd_report(args):
    rows = read_results_csv(args.results)
    ranking = ex.ranking_from_rows(rows)
    args.out.mkdir(parents=True, exist_ok=True)
    write_results_csv(args.out / "results.csv", rows)
    if ranking:
        write_ranking_csv(args.out / "ranking.csv", ranking)
    (args.out / "results.md").write_text(results_markdown(rows, ranking), encoding="utf-8")
    for rank, (run, total) in enumerate(ranking, start=1):
        print(f"{rank}. experiment {run}: {total:.2f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="foodrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic mini-dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=20, dest="per_class")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="dataset statistics and dimension scatter")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sr-train", help="train the patch upscaler")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--factor", type=int, default=2)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--patches", type=int, default=5000)
    p.add_argument("--patch-size", type=int, default=8, dest="patch_size")
    p.add_argument("--atoms", type=int, default=64)
    p.add_argument("--iterations", type=int, default=3)
    p.set_defaults(func=cmd_sr_train, out=Path("scn.ckpt"))

    p = sub.add_parser("sr-apply", help="lift small images with the trained upscaler")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--scn", type=Path, required=True)
    p.add_argument("--target", type=int, default=256)
    p.add_argument("--source", choices=["A", "B", "all"], default="all")
    p.set_defaults(func=cmd_sr_apply)

    p = sub.add_parser("variant", help="materialize a dataset variant")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--variant", choices=[v.value for v in DatasetVariant], required=True)
    p.add_argument("--scn", type=Path, default=None)
    p.add_argument("--target", type=int, default=256)
    p.set_defaults(func=cmd_variant)

    def add_train_flags(p):
        p.add_argument("--arch", choices=["inception", "vgg"], default="inception")
        p.add_argument("--model-config", type=Path, default=None, dest="model_config")
        p.add_argument("--freeze", choices=["all_layers", "last_fc_only"],
                       default=None, dest="freeze_mode")
        p.add_argument("--balanced", action="store_true")
        p.add_argument("--cap", type=int, default=None)
        p.add_argument("--pretrained", type=Path, default=None)
        p.add_argument("--max-iterations", type=int, default=None, dest="max_iterations")
        p.add_argument("--crop", type=int, default=None)
        p.add_argument("--resize-to", type=int, default=None, dest="resize_to")

    p = sub.add_parser("train", help="train one model on a manifest")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--arch", choices=["inception", "vgg"], default="inception")
    p.add_argument("--model-config", type=Path, default=None, dest="model_config")
    p.add_argument("--scope", choices=["A,B", "B"], default="A,B")
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--resize-to", type=int, default=None, dest="resize_to")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="run all six experiment plans end to end")
    _add_common(p)
    p.add_argument("--cap", type=int, default=None)
    p.add_argument("--pretrained", type=Path, default=None)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("category", help="category-level fine-tune comparison")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_category)

    p = sub.add_parser("report", help="re-emit reports from a results.csv")
    _add_common(p)
    p.add_argument("--results", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args) or 0)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FoodrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
