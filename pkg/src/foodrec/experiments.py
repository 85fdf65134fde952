"""Experiment orchestration: training loops, evaluation, the 6-run matrix.

The matrix reproduces the experiment structure at desk scale on the
generated synthetic dataset: two architectures crossed with resolution
variants and class balancing, each run evaluated on both scopes ("A,B" =
everything, "B" = the Mediterranean-source records only). Runs start
from random initialization unless a prior checkpoint is supplied.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import (DatasetVariant, Manifest, apply_variant, balance_classes,
                   compute_channel_means, merge_datasets, prepare_eval_sample,
                   prepare_train_sample, read_ppm, split_dataset)
from .errors import ContractError, NumericError, ValidationError
from .metrics import MetricsReport, PredictionLog, aggregate_experiment_scores
from .models import (Model, apply_freeze_mode, build_toy_inception_net,
                     build_vgg_style_net, default_toy_inception_spec,
                     default_toy_vgg_args, total_loss)
from .report import (category_markdown, results_markdown, write_cm_heatmap,
                     write_dims_scatter, write_ranking_csv, write_results_csv)
from .sr import sample_patch_pairs, train_scn
from .synth import generate_synthetic_dataset

log = logging.getLogger(__name__)

ARCH_CODES = {"G": "inception", "V": "vgg_style"}
SCOPES = ("A,B", "B")


@dataclass(frozen=True)
class ExperimentPlan:
    id: int
    architecture: str  # "inception" or "vgg_style"
    variant: DatasetVariant
    balanced: bool

    @property
    def code(self) -> str:
        return "G" if self.architecture == "inception" else "V"


def plan_matrix() -> list[ExperimentPlan]:
    """The fixed six-run experiment matrix, in order."""
    return [
        ExperimentPlan(1, "inception", DatasetVariant.b_super_resolved, False),
        ExperimentPlan(2, "inception", DatasetVariant.b_super_resolved, True),
        ExperimentPlan(3, "inception", DatasetVariant.a_halved, False),
        ExperimentPlan(4, "inception", DatasetVariant.a_halved, True),
        ExperimentPlan(5, "vgg_style", DatasetVariant.original, False),
        ExperimentPlan(6, "vgg_style", DatasetVariant.original, True),
    ]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    max_iterations: int = 500
    validation_interval: int = 50
    seed: int = 42
    freeze_mode: str = "all_layers"
    aux_discount: float = 0.3
    crop: int = 224
    resize_to: int = 256
    lr_decay: float = 0.1          # applied at each third of max_iterations
    validate_on: str = "val"       # "val" or "train"
    stop_at_val_at1: float = 0.0   # early stop threshold; 0 disables

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_iterations < 0:
            raise ValidationError("hyperparameters must be positive")
        if self.validation_interval < 1:
            raise ValidationError("validation_interval must be >= 1")
        if self.validate_on not in ("val", "train"):
            raise ValidationError(f"validate_on must be val or train, got {self.validate_on!r}")


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_EXTRA_CONFIG_KEYS = {
    "cap": int, "classes": int, "per_class": int, "sr_target": int,
    "sr_epochs": int, "sr_patches": int,
}


def load_config_file(path) -> dict:
    """Parse 'key value' lines into typed overrides."""
    out: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                key, value = line.split(None, 1)
            except ValueError:
                raise ValidationError(f"{path} line {lineno}: expected 'key value'") from None
            if key in ("freeze_mode", "validate_on"):
                out[key] = value.strip()
            elif key in _CONFIG_TYPES:
                caster = float if "float" in str(_CONFIG_TYPES[key]) else int
                out[key] = caster(value)
            elif key in _EXTRA_CONFIG_KEYS:
                out[key] = _EXTRA_CONFIG_KEYS[key](value)
            else:
                raise ValidationError(f"{path} line {lineno}: unknown config key {key!r}")
    return out


def make_train_config(flags: dict | None = None, config: dict | None = None) -> TrainConfig:
    """Defaults, overridden by CLI flags, overridden by the config file."""
    merged: dict = {}
    for layer in (flags or {}), (config or {}):
        for k, v in layer.items():
            if k in _CONFIG_TYPES and v is not None:
                merged[k] = v
    return TrainConfig(**merged)


@dataclass
class TrainOutcome:
    best_iteration: int
    best_val_at1: float
    best_state: dict
    loss_trace: list = field(default_factory=list)   # (iteration, loss)
    val_trace: list = field(default_factory=list)    # (iteration, at1)


@dataclass
class EvalResult:
    report: MetricsReport
    log: PredictionLog
    n_test: int


@dataclass
class RunResult:
    plan_id: object            # int for matrix runs, str labels otherwise
    arch: str
    variant: str
    balanced: bool
    best_iteration: int
    max_iterations: int
    metrics: dict              # scope -> MetricsReport
    duration_seconds: float = 0.0
    train_at1: float | None = None

    def __post_init__(self):
        if self.best_iteration > self.max_iterations:
            raise ValidationError("best_iteration cannot exceed max_iterations")


class _SampleCache:
    """Decoded images resized once; crops are cut per iteration."""

    def __init__(self, resize_to: int, limit_px: int = 160):
        self.resize_to = resize_to
        self.cache_enabled = resize_to <= limit_px
        self._store: dict = {}

    def image(self, path: str):
        img = self._store.get(path)
        if img is None:
            img = read_ppm(path)
            if self.cache_enabled:
                self._store[path] = img
        return img


def _batch_loss(model: Model, samples, labels, aux_discount: float):
    per_sample = []
    for x, y in zip(samples, labels):
        main, auxes = model.forward(x)
        loss = ag.softmax_cross_entropy(main, y)
        if auxes:
            aux_losses = [ag.softmax_cross_entropy(a, y) for a in auxes]
            loss = total_loss(loss, aux_losses, aux_discount)
        per_sample.append(loss)
    acc = per_sample[0]
    for term in per_sample[1:]:
        acc = ag.add(acc, term)
    return ag.scale(acc, 1.0 / len(per_sample))


def _quick_top1(model: Model, records, class_of, means, config, cache) -> float:
    hits = 0
    for r in records:
        x = prepare_eval_sample(cache.image(r.image_path), crop=config.crop,
                                mean=means, resize_to=config.resize_to)
        logits, _ = model.forward(x)
        if int(np.argmax(logits.data)) == class_of[r.dish_label]:
            hits += 1
    return hits / len(records)


def train(model: Model, manifest: Manifest, config: TrainConfig,
          means=None) -> TrainOutcome:
    """Mini-batch SGD with step decay; retains the best-validation checkpoint.

    Batches are drawn (with replacement) by the seeded generator, so the
    iteration order is a pure function of the seed. Validation runs every
    validation_interval iterations and at the end.
    """
    apply_freeze_mode(model, config.freeze_mode)
    train_records = [r for r in manifest.records if r.split == "train"]
    if not train_records:
        raise ContractError("manifest has no training split")
    val_split = "train" if config.validate_on == "train" else "val"
    val_records = [r for r in manifest.records if r.split == val_split]
    if means is None:
        means = compute_channel_means(manifest, resize_to=config.resize_to)
    cache = _SampleCache(config.resize_to)
    class_of = manifest.class_index

    outcome = TrainOutcome(best_iteration=0, best_val_at1=float("-inf"),
                           best_state=model.state_dict())
    if config.max_iterations == 0:
        outcome.best_val_at1 = 0.0
        return outcome

    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    velocity: dict = {}
    n = len(train_records)
    for it in range(1, config.max_iterations + 1):
        stage = ((it - 1) * 3) // config.max_iterations
        lr = config.learning_rate * (config.lr_decay ** stage)
        idxs = rng.integers(0, n, size=config.batch_size)
        samples, labels = [], []
        for i in idxs:
            r = train_records[i]
            samples.append(prepare_train_sample(cache.image(r.image_path), crop=config.crop,
                                                rng=rng, mean=means, resize_to=config.resize_to))
            labels.append(class_of[r.dish_label])
        with ag.Graph() as g:
            loss = _batch_loss(model, samples, labels, config.aux_discount)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite training loss at iteration {it}")
        ag.backward(g, loss)
        ag.sgd_step(params, lr, config.momentum, velocity)
        outcome.loss_trace.append((it, value))

        if val_records and (it % config.validation_interval == 0 or it == config.max_iterations):
            at1 = _quick_top1(model, val_records, class_of, means, config, cache)
            outcome.val_trace.append((it, at1))
            if at1 > outcome.best_val_at1:
                outcome.best_val_at1 = at1
                outcome.best_iteration = it
                outcome.best_state = model.state_dict()
            if config.stop_at_val_at1 and at1 >= config.stop_at_val_at1:
                break
    return outcome


def evaluate(model: Model, manifest: Manifest, scope: str,
             config: TrainConfig | None = None, means=None) -> EvalResult:
    """Center-crop evaluation over the test split of one scope."""
    if scope not in SCOPES:
        raise ContractError(f"scope must be one of {SCOPES}, got {scope!r}")
    if config is None:
        config = TrainConfig()
    records = [r for r in manifest.records
               if r.split == "test" and (scope == "A,B" or r.source == "B")]
    if not records:
        raise ContractError(f"no test records in scope {scope!r}")
    if means is None:
        means = compute_channel_means(manifest, resize_to=config.resize_to)
    cache = _SampleCache(config.resize_to)
    class_of = manifest.class_index
    entries = []
    for r in records:
        x = prepare_eval_sample(cache.image(r.image_path), crop=config.crop,
                                mean=means, resize_to=config.resize_to)
        logits, _ = model.forward(x)
        ranked = np.argsort(-logits.data, kind="stable")
        entries.append((class_of[r.dish_label], tuple(int(c) for c in ranked)))
    plog = PredictionLog.from_entries(entries, manifest.num_classes)
    return EvalResult(report=MetricsReport.from_log(plog), log=plog, n_test=len(records))


def _build_for(arch: str, num_classes: int, config: TrainConfig, seed: int) -> Model:
    shape = (3, config.crop, config.crop)
    if arch == "inception":
        return build_toy_inception_net(
            default_toy_inception_spec(num_classes, shape, aux_discount=config.aux_discount),
            seed=seed)
    return build_vgg_style_net(seed=seed,
                               **default_toy_vgg_args(num_classes, shape))


def run_plan(plan: ExperimentPlan, manifest: Manifest, config: TrainConfig,
             pretrained=None) -> RunResult:
    """Train and evaluate one already-materialized matrix entry."""
    t0 = time.perf_counter()
    model = _build_for(plan.architecture, manifest.num_classes, config, seed=config.seed + plan.id)
    if pretrained:
        model.load(pretrained)
    means = compute_channel_means(manifest, resize_to=config.resize_to)
    outcome = train(model, manifest, config, means=means)
    model.load_state_dict(outcome.best_state)
    metrics = {scope: evaluate(model, manifest, scope, config, means=means).report
               for scope in SCOPES}
    return RunResult(plan_id=plan.id, arch=plan.code, variant=plan.variant.value,
                     balanced=plan.balanced, best_iteration=outcome.best_iteration,
                     max_iterations=config.max_iterations, metrics=metrics,
                     duration_seconds=time.perf_counter() - t0)


def run_category_experiment(mode: str, manifest: Manifest, config: TrainConfig) -> RunResult:
    """Train a category-level classifier under one freeze mode."""
    t0 = time.perf_counter()
    labeled = [r for r in manifest.records if r.category_label]
    skipped = len(manifest.records) - len(labeled)
    if skipped:
        log.warning("%d records lack a category label and were excluded", skipped)
    if not labeled:
        raise ContractError("manifest has no category labels")
    relabeled = Manifest.from_records(
        replace(r, dish_label=r.category_label) for r in labeled)
    if all(r.split == "unassigned" for r in relabeled.records):
        relabeled = split_dataset(relabeled, (0.8, 0.1, 0.1), config.seed)
    config = replace(config, freeze_mode=mode)
    model = _build_for("inception", relabeled.num_classes, config, seed=config.seed)
    means = compute_channel_means(relabeled, resize_to=config.resize_to)
    outcome = train(model, relabeled, config, means=means)
    model.load_state_dict(outcome.best_state)
    result = evaluate(model, relabeled, "A,B", config, means=means)
    cache = _SampleCache(config.resize_to)
    train_records = [r for r in relabeled.records if r.split == "train"]
    run = RunResult(plan_id=f"category_{mode}", arch="G", variant="original",
                    balanced=False, best_iteration=outcome.best_iteration,
                    max_iterations=config.max_iterations,
                    metrics={"A,B": result.report},
                    duration_seconds=time.perf_counter() - t0,
                    train_at1=_quick_top1(model, train_records, relabeled.class_index,
                                          means, config, cache))
    run.loss_trace = outcome.loss_trace  # kept for convergence checks
    return run


# ---------------------------------------------------------------------------
# the full matrix on the bundled synthetic dataset

@dataclass
class MatrixOptions:
    workdir: Path
    seed: int = 42
    classes: int = 6
    per_class: int = 16
    cap: int = 12
    ratios: tuple = (0.8, 0.1, 0.1)
    sr_target: int = 64
    sr_epochs: int = 3
    sr_patches: int = 1200


def matrix_train_config(seed: int = 42) -> TrainConfig:
    """Desk-scale defaults for the synthetic matrix run."""
    return TrainConfig(learning_rate=0.02, batch_size=8, max_iterations=60,
                       validation_interval=20, seed=seed, crop=32, resize_to=40)


def run_matrix(opts: MatrixOptions, config: TrainConfig | None = None,
               pretrained=None) -> list[RunResult]:
    """Generate data, train the upscaler, run all six plans, emit reports."""
    if config is None:
        config = matrix_train_config(opts.seed)
    work = Path(opts.workdir)
    work.mkdir(parents=True, exist_ok=True)

    a = generate_synthetic_dataset(work / "synth", "A", classes=opts.classes,
                                   per_class=opts.per_class, size_range=(88, 120),
                                   seed=opts.seed)
    b = generate_synthetic_dataset(work / "synth", "B", classes=opts.classes,
                                   per_class=opts.per_class, size_range=(36, 72),
                                   seed=opts.seed + 1)

    rng = np.random.default_rng(opts.seed)
    b_images = [read_ppm(r.image_path) for r in b.records]
    pairs = sample_patch_pairs(b_images, opts.sr_patches, factor=2, rng=rng)
    scn = train_scn(pairs, factor=2, epochs=opts.sr_epochs, seed=opts.seed)
    log.info("upscaler training loss: %.6f -> %.6f", scn.loss_trace[0], scn.loss_trace[-1])

    merged = merge_datasets(a, b)
    variants: dict[DatasetVariant, Manifest] = {}
    for plan in plan_matrix():
        if plan.variant not in variants:
            mf, errors = apply_variant(merged, plan.variant, scn,
                                       out_root=work / "variants" / plan.variant.value,
                                       target=opts.sr_target)
            if errors:
                raise ValidationError(f"variant {plan.variant.value}: "
                                      + "; ".join(f"{p}: {m}" for p, m in errors[:5]))
            variants[plan.variant] = mf

    results = []
    for plan in plan_matrix():
        mf = variants[plan.variant]
        if plan.balanced:
            mf = balance_classes(mf, opts.cap, opts.seed)
        mf = split_dataset(mf, opts.ratios, opts.seed)
        result = run_plan(plan, mf, config, pretrained=pretrained)
        results.append(result)
        log.info("plan %d done: AT1[A,B]=%.3f", plan.id, result.metrics["A,B"].at1)

    emit_report(results, work, variants={v.value: m for v, m in variants.items()})
    return results


def results_to_rows(results) -> list[dict]:
    rows = []
    for res in results:
        for scope in SCOPES:
            if scope not in res.metrics:
                continue
            rep = res.metrics[scope]
            rows.append({
                "run": str(res.plan_id), "arch": res.arch, "variant": res.variant,
                "balanced": res.balanced, "best_iteration": res.best_iteration,
                "scope": scope,
                "at1": rep.at1 * 100.0, "at5": rep.at5 * 100.0, "nat1": rep.nat1 * 100.0,
                "n_test": int(rep.per_class_counts.sum()),
            })
    return rows


def ranking_from_rows(rows: list[dict]) -> list[tuple]:
    """Rank experiments that report both scopes by summed AT1 + AT5."""
    per_run: dict = {}
    for row in rows:
        per_run.setdefault(row["run"], {})[row["scope"]] = (row["at1"], row["at5"], row["nat1"])
    complete = {run: scopes for run, scopes in per_run.items()
                if all(s in scopes for s in SCOPES)}
    if not complete:
        return []
    keyed = {}
    for run, scopes in complete.items():
        key = int(run) if run.isdigit() else run
        keyed[key] = scopes
    return aggregate_experiment_scores(keyed)


def emit_report(results, out_dir, variants: dict | None = None,
                category_results=None) -> dict:
    """Write results.csv/.md, ranking.csv, confusion heatmaps and dim scatters."""
    if not results and not category_results:
        raise ContractError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    rows = results_to_rows(results)
    ranking = ranking_from_rows(rows)
    write_results_csv(out / "results.csv", rows)
    written["results.csv"] = out / "results.csv"
    if ranking:
        write_ranking_csv(out / "ranking.csv", ranking)
        written["ranking.csv"] = out / "ranking.csv"

    md = results_markdown(rows, ranking,
                          durations={str(r.plan_id): r.duration_seconds for r in results})
    if category_results:
        cat_rows = [{
            "mode": str(r.plan_id).replace("category_", ""),
            "at1": r.metrics["A,B"].at1 * 100.0,
            "at5": r.metrics["A,B"].at5 * 100.0,
            "nat1": r.metrics["A,B"].nat1 * 100.0,
            "max_iterations": r.max_iterations,
            "best_iteration": r.best_iteration,
        } for r in category_results]
        md += "\n" + category_markdown(cat_rows)
    with open(out / "results.md", "w", encoding="utf-8") as f:
        f.write(md)
    written["results.md"] = out / "results.md"

    for res in list(results) + list(category_results or []):
        scope_rep = res.metrics.get("A,B") or next(iter(res.metrics.values()))
        path = out / f"cm_{res.plan_id}.svg"
        if write_cm_heatmap(path, scope_rep.confusion, title=f"run {res.plan_id}"):
            written[path.name] = path
    if variants:
        from .data import dataset_stats
        for name, manifest in variants.items():
            stats = dataset_stats(manifest)
            if stats.dims:
                path = out / f"dims_{name}.svg"
                write_dims_scatter(path, stats.dims, title=f"variant {name}")
                written[path.name] = path
    return written
