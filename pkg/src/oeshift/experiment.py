"""Training loop, multi-trial runs and artifact emission."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import distshift as ds
from . import metrics as mt
from .config import ExperimentConfig, SourceConfig
from .data import (
    Dataset,
    LabelSchema,
    batches,
    gen_disk_square,
    gen_gaussian,
    gen_gaussian_mixture,
    gen_mesh_grid,
    load_csv_labels,
    load_image_dir,
    mesh_points,
)
from .losses import (
    ClassWeights,
    LambdaSchedule,
    class_weights,
    combined_objective,
    oe_labeled_loss,
    oe_uniform_loss,
    weighted_cross_entropy,
)
from .models import CnnConfig, MlpConfig, Model, build_cnn, build_mlp, save_model

log = logging.getLogger(__name__)

__all__ = [
    "History",
    "PreparedData",
    "RunArtifacts",
    "TrainingAbort",
    "emit_probability_grid",
    "mine_outliers",
    "prepare_data",
    "run_experiment",
    "train",
]

METRIC_NAMES = ("precision", "recall", "accuracy", "f1", "auroc")


class TrainingAbort(RuntimeError):
    def __init__(self, epoch: int, batch: int, message: str):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def lambdas(self) -> list[float]:
        return [r["lambda"] for r in self.rows]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lambda", "in_loss", "oe_loss", "total_loss"])
            for r in self.rows:
                w.writerow([r["epoch"]] + [f"{r[k]:.12g}" for k in ("lambda", "in_loss", "oe_loss", "total_loss")])


@dataclass
class PreparedData:
    train: Dataset
    test: Dataset
    oe: Optional[Dataset] = None
    grid: Optional[Dataset] = None
    manifest: Optional[Path] = None


@dataclass
class RunArtifacts:
    out_dir: Path
    trial_rows: list[dict]
    aggregate: dict[str, tuple[Optional[float], Optional[float]]]
    files: list[Path]
    failed: bool = False


# ---------------------------------------------------------------------------
# data + model construction
# ---------------------------------------------------------------------------


def _load_source(src: SourceConfig, role: str, size: int, labeled: bool | None = None) -> Dataset:
    schema = LabelSchema(src.schema_attr)
    labeled = src.labeled if labeled is None else labeled
    if src.csv:
        dset = load_csv_labels(src.dir, src.csv, schema, role=role, size=size)
    else:
        dset = load_image_dir(src.dir, schema, role=role, size=size, labeled=labeled)
    if src.name:
        dset.name = src.name
    return dset


def _toy_oe(cfg: ExperimentConfig) -> Dataset:
    toy = cfg.toy
    if cfg.kind == "toy_example1":
        grid = gen_mesh_grid(toy.grid_bounds, toy.oe_points_per_axis, rule="disk", radius_sq=toy.radius_sq)
        keep = [s for s in grid if np.max(np.abs(s.input)) > toy.oe_inner]
        return Dataset(keep, "mesh_periphery").with_role("outlier_exposure")
    return gen_gaussian_mixture(
        toy.oe_count, cfg.seed + 10_007, toy.ood_means, toy.ood_covs, toy.ood_weights,
        **_toy2_rule(cfg), role="outlier_exposure",
    )


def _toy2_rule(cfg: ExperimentConfig) -> dict:
    toy = cfg.toy
    rule = toy.label_rule or "annulus"
    if rule == "disk":
        return {"rule": "disk", "radius_sq": toy.radius_sq}
    return {"rule": "annulus", "r_min_sq": toy.r_min_sq, "r_max_sq": toy.r_max_sq}


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    toy = cfg.toy
    if cfg.kind == "toy_example1":
        train = gen_disk_square(toy.train_count, cfg.seed, toy.half_width, toy.radius_sq)
        grid = gen_mesh_grid(toy.grid_bounds, toy.grid_points, rule="disk", radius_sq=toy.radius_sq)
        oe = _toy_oe(cfg) if cfg.loss.oe_mode != "none" else None
        return PreparedData(train, grid, oe, grid)
    if cfg.kind == "toy_example2":
        rule = _toy2_rule(cfg)
        train = gen_gaussian(toy.train_count, cfg.seed, toy.id_mean, toy.id_cov, **rule)
        test = gen_gaussian_mixture(toy.test_count, cfg.seed + 1, toy.ood_means, toy.ood_covs, toy.ood_weights, **rule)
        grid = gen_mesh_grid(toy.grid_bounds, toy.grid_points, **rule)
        oe = _toy_oe(cfg) if cfg.loss.oe_mode != "none" else None
        return PreparedData(train, test, oe, grid)

    size = cfg.data.image_size
    train = _load_source(cfg.data.train, "train", size)
    test = _load_source(cfg.data.test, "test", size)
    oe, manifest = None, None
    if cfg.loss.oe_mode != "none":
        if cfg.loss.oe_source == "mined_top_fraction":
            manifest, oe = mine_outliers(cfg, train=train)
        else:
            labeled = cfg.loss.oe_mode == "labeled" or None
            parts = [_load_source(s, "outlier_exposure", size, labeled) for s in cfg.data.outliers]
            oe = _merge(parts, "outliers")
    return PreparedData(train, test, oe, None, manifest)


def _merge(parts: list[Dataset], name: str) -> Dataset:
    if len(parts) == 1:
        return parts[0].with_role("outlier_exposure")
    samples = []
    for i, part in enumerate(parts):
        prefix = part.name or f"source{i}"
        for s in part.with_role("outlier_exposure"):
            s.identifier = f"{prefix}/{s.identifier}"
            samples.append(s)
    return Dataset(samples, name)


def build_model(cfg: ExperimentConfig, seed: int) -> Model:
    m = cfg.model
    if cfg.kind == "image":
        cnn = CnnConfig(
            conv1_out=m.conv1_out, conv1_kernel=m.conv1_kernel, pool_kernel=m.pool_kernel,
            conv2_out=m.conv2_out, conv2_kernel=m.conv2_kernel, fc_hidden=m.fc_hidden,
            num_classes=m.num_classes, input_side=cfg.data.image_size,
        )
        return build_cnn(cnn, seed)
    mlp = MlpConfig(input_dim=2, hidden_layers=m.hidden_layers, hidden_width=m.hidden_width, num_classes=m.num_classes)
    return build_mlp(mlp, seed)


def _class_weights(cfg: ExperimentConfig, train: Dataset) -> Optional[ClassWeights]:
    mode = cfg.loss.weights
    if mode == "none":
        return None
    if mode == "manual":
        return class_weights(mode="manual", manual=cfg.loss.manual_weights)
    return class_weights(train.class_counts(cfg.model.num_classes), mode=mode)


def _schedule(cfg: ExperimentConfig, data: PreparedData) -> LambdaSchedule:
    lam = cfg.lambda_
    d_kl = lam.d_kl
    if lam.mode != "fixed" and d_kl is None and lam.kl_scope == "full_distribution":
        if data.oe is None:
            d_kl = 0.0
        else:
            d_kl = ds.kl_divergence(ds.dataset_pixel_histogram(data.train), ds.dataset_pixel_histogram(data.oe))
            log.info("pixel KL between training and outlier sets: %.6g", d_kl)
    return LambdaSchedule(lam.mode, lam.value, d_kl or 0.0, cfg.epochs, lam.kl_scope)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _oe_batches(n: int, batch_size: int, seed: int):
    """Endless OE index batches, reshuffled on every pass."""
    rnd = 0
    while True:
        order = np.random.default_rng([seed, rnd, 1]).permutation(n)
        for i in range(0, n, batch_size):
            yield order[i : i + batch_size]
        rnd += 1


# overflow is caught as a non-finite AutodiffError, so numpy's warning adds nothing
@np.errstate(over="ignore", invalid="ignore")
def train(
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    data: Optional[PreparedData] = None,
) -> tuple[Model, History]:
    """Train one model; returns the model and per-epoch loss history."""
    seed = cfg.seed if seed is None else seed
    data = data or prepare_data(cfg)
    model = build_model(cfg, seed)
    opt = ad.Adam(model.params, lr=cfg.learning_rate)
    weights = _class_weights(cfg, data.train)
    oe_weights = weights if cfg.loss.weight_oe else None
    schedule = _schedule(cfg, data)
    per_batch = cfg.lambda_.mode != "fixed" and schedule.kl_scope == "per_batch" and cfg.lambda_.d_kl is None

    x_train, y_train = data.train.inputs, data.train.labels
    use_oe = cfg.loss.oe_mode != "none" and data.oe is not None and len(data.oe) > 0
    if use_oe:
        x_oe = data.oe.inputs
        y_oe = data.oe.labels if cfg.loss.oe_mode == "labeled" else None
        oe_iter = _oe_batches(len(data.oe), cfg.batch_size, seed)

    history = History()
    for epoch in range(cfg.epochs):
        sums = {"in": 0.0, "oe_weighted": 0.0, "oe": 0.0, "lam": 0.0, "total": 0.0}
        plan = batches(data.train, cfg.batch_size, seed, epoch)
        for b, idx in enumerate(plan):
            opt.zero_grad()
            try:
                in_loss = weighted_cross_entropy(model(x_train[idx]), y_train[idx], weights)
                if use_oe:
                    oidx = next(oe_iter)
                    lp_oe = model(x_oe[oidx])
                    if y_oe is None:
                        oe_loss = oe_uniform_loss(lp_oe)
                    else:
                        oe_loss = oe_labeled_loss(lp_oe, y_oe[oidx], oe_weights)
                    d_kl = None
                    if per_batch:
                        d_kl = ds.kl_divergence(
                            ds.dataset_pixel_histogram(x_train[idx]), ds.dataset_pixel_histogram(x_oe[oidx])
                        )
                    value = combined_objective(in_loss, oe_loss, schedule, epoch, d_kl)
                else:
                    value = combined_objective(in_loss, 0.0, schedule, epoch)
                if not math.isfinite(value.total):
                    raise TrainingAbort(epoch, b, f"non-finite loss {value.total}")
                ad.backward(value.tensor)
                opt.step()
            except ad.AutodiffError as exc:
                raise TrainingAbort(epoch, b, str(exc)) from exc
            sums["in"] += value.in_dist_term
            sums["oe"] += value.oe_term
            sums["oe_weighted"] += value.lambda_used * value.oe_term
            sums["lam"] += value.lambda_used
            sums["total"] += value.total
        nb = len(plan)
        lam = sums["lam"] / nb
        # lambda-weighted OE mean keeps total == in + lambda * oe when lambda varies per batch
        oe_mean = sums["oe_weighted"] / sums["lam"] if per_batch and sums["lam"] > 0 else sums["oe"] / nb
        history.rows.append(
            {
                "epoch": epoch,
                "lambda": lam,
                "in_loss": sums["in"] / nb,
                "oe_loss": oe_mean,
                "total_loss": sums["total"] / nb,
            }
        )
        log.debug("epoch %d lambda=%.4g total=%.6g", epoch, lam, sums["total"] / nb)
    return model, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_proba(model: Model, inputs: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    out = [np.exp(model(inputs[i : i + batch_size]).data) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out)


def emit_probability_grid(model: Model, mesh: Dataset | np.ndarray, path: str | Path) -> Path:
    """CSV ``x1,x2,p_class1`` for every grid point."""
    pts = mesh.inputs if isinstance(mesh, Dataset) else np.asarray(mesh, dtype=np.float64)
    p1 = predict_proba(model, pts)[:, 1]
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "p_class1"])
        for (a, b), p in zip(pts, p1):
            w.writerow([f"{a:.10g}", f"{b:.10g}", f"{p:.12g}"])
    return path


def toy_confidence_stats(model: Model, cfg: ExperimentConfig, train: Dataset, grid: Dataset) -> dict[str, float]:
    """Over-confidence diagnostics on the probability grid.

    ``overconfident_fraction``: class-0 grid points outside the training square with p(class 1) > 0.9.
    ``far_ood_confidence`` / ``confident_wrong_fraction``: mean max-softmax, and share with
    p(wrong class) > 0.9, over class-0 points with ``||x||_inf > far_ood``.
    """
    toy = cfg.toy
    probs_train = predict_proba(model, train.inputs)
    stats = {"train_accuracy": float(np.mean(probs_train.argmax(axis=1) == train.labels))}
    pts, y = grid.inputs, grid.labels
    probs = predict_proba(model, pts)
    linf = np.max(np.abs(pts), axis=1)
    outside = (linf > toy.half_width) & (y == 0)
    stats["overconfident_fraction"] = float(np.mean(probs[outside, 1] > 0.9)) if outside.any() else float("nan")
    far = (linf > toy.far_ood) & (y == 0)
    stats["far_ood_confidence"] = float(np.mean(probs[far].max(axis=1)))
    stats["confident_wrong_fraction"] = float(np.mean(probs[far, 1] > 0.9))
    return stats


def _write_predictions(path: Path, ids, labels, probs: np.ndarray, positive: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["identifier", "label", "prediction", "score"])
        for i, y, p in zip(ids, labels, probs):
            w.writerow([i, int(y), int(np.argmax(p)), f"{p[positive]:.12g}"])


def _evaluate(model: Model, cfg: ExperimentConfig, test: Dataset) -> tuple[mt.MetricsReport, mt.RocCurve | None, np.ndarray]:
    probs = predict_proba(model, test.inputs)
    pos = cfg.positive_class
    preds = probs.argmax(axis=1)
    labels = test.labels
    report = mt.evaluate(probs[:, pos], labels, pos, predictions=np.where(preds == pos, pos, 1 - pos))
    try:
        curve, _ = mt.roc_auc(probs[:, pos], labels, pos)
    except mt.MetricsError:
        curve = None
    return report, curve, probs


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


def _run_trial(cfg: ExperimentConfig, trial: int, seed: int, data: PreparedData, out: Path, files: list[Path]) -> dict:
    tdir = out / f"trial_{trial}"
    tdir.mkdir(parents=True, exist_ok=True)
    model, history = train(cfg, seed, data)
    history.write_csv(tdir / "history.csv")
    report, curve, probs = _evaluate(model, cfg, data.test)
    mt.write_metrics_csv(tdir / "metrics.csv", report)
    mt.write_confusion_csv(tdir / "confusion.csv", report.confusion)
    written = [tdir / "history.csv", tdir / "metrics.csv", tdir / "confusion.csv"]
    if curve is not None:
        mt.write_roc_csv(tdir / "roc.csv", curve)
        written.append(tdir / "roc.csv")
    _write_predictions(tdir / "predictions.csv", [s.identifier for s in data.test], data.test.labels, probs, cfg.positive_class)
    written.append(tdir / "predictions.csv")
    save_model(model, tdir / "model.oodf")
    written += [tdir / "model.oodf", tdir / "model.oodf.json"]
    row = {"trial": trial, "seed": seed, **report.as_row()}
    if data.grid is not None:
        emit_probability_grid(model, data.grid, tdir / "grid.csv")
        written.append(tdir / "grid.csv")
        row.update(toy_confidence_stats(model, cfg, data.train, data.grid))
    files.extend(written)
    return row


def aggregate(rows: list[dict], keys) -> dict[str, tuple[Optional[float], Optional[float]]]:
    """Per-key mean and standard error (sample std / sqrt(n)); ``None`` if any trial is undefined."""
    out = {}
    for k in keys:
        vals = [r.get(k) for r in rows]
        if any(v is None or (isinstance(v, float) and math.isnan(v)) for v in vals):
            out[k] = (None, None)
            continue
        arr = np.asarray(vals, dtype=np.float64)
        se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
        out[k] = (float(arr.mean()), se)
    return out


def _write_trials(path: Path, rows: list[dict], keys: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "seed"] + keys)
        for r in rows:
            w.writerow([r["trial"], r["seed"]] + [mt.fmt(r.get(k)) for k in keys])


def _write_aggregate(path: Path, agg: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "mean", "stderr"])
        for k, (mean, se) in agg.items():
            w.writerow([k, mt.fmt(mean), mt.fmt(se)])


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    """Run ``cfg.trials`` trials with seeds ``seed + k`` and write every artifact under ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    rows: list[dict] = []
    failed = False
    for k in range(cfg.trials):
        seed = cfg.seed + k
        trial_cfg = cfg.model_copy(update={"seed": seed})
        try:
            data = prepare_data(trial_cfg)
            if data.manifest is not None:
                files.append(data.manifest)
            rows.append(_run_trial(trial_cfg, k, seed, data, out, files))
        except TrainingAbort as exc:
            log.error("trial %d aborted: %s", k, exc)
            (out / f"trial_{k}").mkdir(parents=True, exist_ok=True)
            (out / f"trial_{k}" / "ABORTED").write_text(str(exc) + "\n", encoding="utf-8")
            failed = True
            break
    keys = list(METRIC_NAMES)
    extra = [k for k in (rows[0] if rows else {}) if k not in keys and k not in ("trial", "seed")]
    keys += extra
    agg = aggregate(rows, keys) if rows else {}
    if rows:
        _write_trials(out / "trials.csv", rows, keys)
        _write_aggregate(out / "aggregate.csv", agg)
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(METRIC_NAMES))
            w.writerow([mt.fmt(agg[k][0]) for k in METRIC_NAMES])
        files += [out / "trials.csv", out / "aggregate.csv", out / "metrics.csv"]
    if failed:
        (out / "PARTIAL").write_text("one or more trials aborted\n", encoding="utf-8")
    return RunArtifacts(out, rows, agg, files, failed)


# ---------------------------------------------------------------------------
# outlier mining
# ---------------------------------------------------------------------------


def mine_outliers(cfg: ExperimentConfig, train: Optional[Dataset] = None) -> tuple[Path, Dataset]:
    """Rank every outlier source by pixel KL and keep the top fraction of each.

    The reference histogram is each source's own (``reference: own``) or the
    training set's (``reference: train``).  Writes the manifest under ``cfg.out``.
    """
    if not cfg.data.outliers:
        raise ValueError("mining needs at least one data.outliers source")
    size = cfg.data.image_size
    mining = cfg.mining
    labeled = cfg.loss.oe_mode == "labeled" or None
    if mining.reference == "train":
        if train is None:
            if cfg.data.train is None:
                raise ValueError("reference=train needs data.train")
            train = _load_source(cfg.data.train, "train", size)
        ref_hist = ds.dataset_pixel_histogram(train)
    parts, entries = [], []
    multi = len(cfg.data.outliers) > 1
    for i, src in enumerate(cfg.data.outliers):
        dset = _load_source(src, "outlier_exposure", size, labeled)
        name = dset.name or f"source{i}"
        if mining.reference == "own":
            reference, ref_name = ds.dataset_pixel_histogram(dset), f"{name}:own"
        else:
            reference, ref_name = ref_hist, "train"
        table = ds.rank_outliers(dset, reference, ref_name)
        chosen = ds.select_top_fraction(table, mining.fraction)
        scores = dict(table.entries)
        picked = dset.subset(chosen)
        picked.name = name
        parts.append(picked)
        prefix = f"{name}/" if multi else ""
        entries += [(prefix + c, scores[c], ref_name) for c in chosen]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / mining.manifest
    refs = sorted({e[2] for e in entries})
    table = ds.OutlierScoreTable([(e[0], e[1]) for e in entries], ",".join(refs))
    ds.write_manifest(manifest, table, table.identifiers, mining.fraction)
    oe = _merge(parts, "mined_outliers") if multi else parts[0].with_role("outlier_exposure")
    return manifest, oe


def grid_from_checkpoint(checkpoint: str | Path, bounds: tuple[float, float], resolution: int, out: str | Path) -> Path:
    from .models import load_model

    model = load_model(checkpoint)
    return emit_probability_grid(model, mesh_points(bounds, resolution), out)
