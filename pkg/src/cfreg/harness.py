"""Experiment drivers behind the ``cf`` command: train, compare, memtest, sweep, gradcheck."""

from __future__ import annotations

import csv
import io
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as D
from .config import SWEEP_KEYS, RunSpec, serialize_config
from .consistent import CFConfig
from .files import atomic_write_text
from .gradcheck import format_report, run_suite
from .nn import ConfigError, Model, build_model, forward
from .plot import emit_plot
from .trainer import (STREAM_DATA, STREAM_INIT, STREAM_LABELS, MetricsRecord, TrainConfig, avg_last_k,
                      derive_seed, train_run, write_metrics_csv)

log = logging.getLogger(__name__)

SUMMARY_METRICS = ("min_val_loss", "max_top1", "max_top5", "last10_val_loss", "last10_top1", "last10_top5")


def make_datasets(spec: RunSpec, seed: int, randomize: Optional[bool] = None,
                  label_noise: Optional[float] = None) -> Tuple[D.Dataset, D.Dataset]:
    """Train/val datasets for one replicate; overrides replace the configured label corruption."""
    ds = spec.dataset
    data_seed = derive_seed(seed, STREAM_DATA)
    if ds.generator == "gaussian":
        full = D.gen_gaussian_clusters(ds.classes, ds.dim, ds.n_train + ds.n_val, ds.sep, data_seed)
        train, val = D.train_val_split(full, ds.n_val, data_seed)
    elif ds.generator == "patterns":
        full = D.gen_pattern_images(ds.classes, ds.hw, ds.n_train + ds.n_val, data_seed, ds.pixel_noise)
        train, val = D.train_val_split(full, ds.n_val, data_seed)
    else:
        train = D.load_csv(ds.path, ds.classes)
        val = D.load_csv(ds.val_path, train.num_classes)
    noise = ds.label_noise if label_noise is None else label_noise
    if noise > 0:
        train = D.inject_label_noise(train, noise, derive_seed(seed, STREAM_LABELS))
    if ds.randomize_labels if randomize is None else randomize:
        train = D.randomize_labels(train, derive_seed(seed, STREAM_LABELS))
    return train, val


def make_model(spec: RunSpec, cfg: TrainConfig, train: D.Dataset) -> Model:
    desc = cfg.cf.desc_channel if cfg.cf is not None else spec.cf.desc_channel
    arch = replace(spec.arch, desc_channel=desc, dropout=cfg.dropout)
    return build_model(arch, train.sample_shape, train.num_classes, derive_seed(cfg.seed, STREAM_INIT))


def run_once(spec: RunSpec, cfg: TrainConfig, datasets=None) -> Tuple[Model, List[MetricsRecord]]:
    train, val = datasets if datasets is not None else make_datasets(spec, cfg.seed)
    model = make_model(spec, cfg, train)
    return model, train_run(model, train, val, cfg)


def summarize(runs: Sequence[Sequence[MetricsRecord]]) -> Dict[str, Tuple[float, float]]:
    """Per-metric ``(mean, std)`` across replicate runs (population std)."""
    per_run = []
    for recs in runs:
        per_run.append({
            "min_val_loss": min(r.val_loss for r in recs),
            "max_top1": max(r.val_top1 for r in recs),
            "max_top5": max(r.val_top5 for r in recs),
            "last10_val_loss": avg_last_k(recs, 10, "val_loss"),
            "last10_top1": avg_last_k(recs, 10, "val_top1"),
            "last10_top5": avg_last_k(recs, 10, "val_top5"),
        })
    return {k: (float(np.mean([r[k] for r in per_run])), float(np.std([r[k] for r in per_run])))
            for k in SUMMARY_METRICS}


def summary_csv(rows: Sequence[Tuple[str, int, Dict[str, Tuple[float, float]]]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_seeds"] + [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")])
    for method, n, stats in rows:
        w.writerow([method, n] + [f"{v:.6f}" for m in SUMMARY_METRICS for v in stats[m]])
    return buf.getvalue()


def summary_line(method: str, stats: Dict[str, Tuple[float, float]]) -> str:
    parts = [f"{m} {stats[m][0]:.4f}±{stats[m][1]:.4f}" for m in SUMMARY_METRICS]
    return f"{method}: " + " | ".join(parts)


def _write_config(spec: RunSpec, out: Path) -> None:
    atomic_write_text(out / "config.txt", serialize_config(spec))


def export_features(model: Model, ds: D.Dataset, out) -> Path:
    """Eval-mode backbone features, one row per sample: ``label,f0,...``."""
    feats, _ = forward(model, ds.inputs, "eval")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + [f"f{i}" for i in range(feats.shape[1])])
    for y, row in zip(ds.labels, feats.data):
        w.writerow([int(y)] + [repr(float(v)) for v in row])
    out = Path(out)
    atomic_write_text(out, buf.getvalue())
    return out


def run_train(spec: RunSpec, out) -> List[str]:
    out = Path(out)
    _write_config(spec, out)
    runs, paths = [], []
    for seed in spec.seeds:
        cfg = spec.train_config(seed)
        datasets = make_datasets(spec, seed)
        model, recs = run_once(spec, cfg, datasets)
        path = out / f"train_seed{seed}.csv"
        write_metrics_csv(recs, path)
        if spec.export_features:
            export_features(model, datasets[0], out / f"features_seed{seed}.csv")
        runs.append(recs)
        paths.append(path)
    name = "cf" if spec.cf_enabled else "baseline"
    stats = summarize(runs)
    atomic_write_text(out / "summary.csv", summary_csv([(name, len(runs), stats)]))
    emit_plot(paths, "val_loss", out / "val_loss.svg")
    return [summary_line(name, stats)]


def run_compare(spec: RunSpec, out, jobs: int = 1) -> List[str]:
    out = Path(out)
    _write_config(spec, out)
    tasks = [(m, s) for m in spec.compare.methods for s in spec.seeds]

    def one(task):
        method, seed = task
        return run_once(spec, spec.train_config(seed, method))[1]

    results = _map(one, tasks, jobs)
    rows, lines, first = [], [], []
    for method in spec.compare.methods:
        runs = []
        for seed in spec.seeds:
            recs = results[(method, seed)]
            path = out / f"{method}_seed{seed}.csv"
            write_metrics_csv(recs, path)
            if seed == spec.seeds[0]:
                first.append(path)
            runs.append(recs)
        stats = summarize(runs)
        rows.append((method, len(runs), stats))
        lines.append(summary_line(method, stats))
    atomic_write_text(out / "summary.csv", summary_csv(rows))
    for field in ("val_loss", "val_top1", "train_loss"):
        emit_plot(first, field, out / f"{field}.svg")
    return lines


MEMTEST_FIELDS = ["method", "seed", "epoch", "mem_train_loss", "mem_train_top1", "clean_val_loss", "clean_val_top1"]


def run_memtest(spec: RunSpec, out, jobs: int = 1) -> List[str]:
    """Random-label memorization run and clean-data run per method and seed, side by side."""
    out = Path(out)
    _write_config(spec, out)
    tasks = [(m, s, kind) for m in spec.compare.methods for s in spec.seeds for kind in ("random", "clean")]

    def one(task):
        method, seed, kind = task
        datasets = make_datasets(spec, seed, randomize=(kind == "random"), label_noise=0.0)
        return run_once(spec, spec.train_config(seed, method), datasets)[1]

    results = _map(one, tasks, jobs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MEMTEST_FIELDS)
    lines, mem_paths, clean_paths = [], [], []
    for method in spec.compare.methods:
        final_mem, final_clean = [], []
        for seed in spec.seeds:
            rnd, cln = results[(method, seed, "random")], results[(method, seed, "clean")]
            p_r, p_c = out / f"{method}_random_seed{seed}.csv", out / f"{method}_clean_seed{seed}.csv"
            write_metrics_csv(rnd, p_r)
            write_metrics_csv(cln, p_c)
            if seed == spec.seeds[0]:
                mem_paths.append(p_r)
                clean_paths.append(p_c)
            for a, b in zip(rnd, cln):
                w.writerow([method, seed, a.epoch, f"{a.train_loss:.6f}", f"{a.train_top1:.6f}",
                            f"{b.val_loss:.6f}", f"{b.val_top1:.6f}"])
            final_mem.append(max(r.train_top1 for r in rnd))
            final_clean.append(avg_last_k(cln, 10, "val_loss"))
        lines.append(f"{method}: max memorization train_top1 {np.mean(final_mem):.4f} | "
                     f"clean last10 val_loss {np.mean(final_clean):.4f}")
    atomic_write_text(out / "memtest.csv", buf.getvalue())
    emit_plot(mem_paths, "train_top1", out / "memory_train_top1.svg")
    emit_plot(mem_paths, "train_loss", out / "memory_train_loss.svg")
    emit_plot(clean_paths, "val_loss", out / "clean_val_loss.svg")
    return lines


@dataclass(frozen=True)
class SweepPoint:
    label: str
    cf: Optional[CFConfig]


def sweep_points(spec: RunSpec) -> List[SweepPoint]:
    base = spec.cf_config()
    sw = spec.sweep
    grid = {k: getattr(sw, k) for k in SWEEP_KEYS if getattr(sw, k)}
    if not grid:
        raise ConfigError("sweep grid is empty; set at least one of sweep.p/weight/history_len/desc_channel/warm_up")
    points: List[SweepPoint] = [SweepPoint("baseline", None)] if sw.include_baseline else []
    seen = set()

    def add(cf: CFConfig, label: str):
        if cf not in seen:
            seen.add(cf)
            points.append(SweepPoint(label, cf))

    if sw.mode == "grid":
        keys = list(grid)
        for combo in itertools.product(*(grid[k] for k in keys)):
            changes = dict(zip(keys, combo))
            add(replace(base, **changes), ",".join(f"{k}={v}" for k, v in changes.items()))
    else:
        for key, values in grid.items():
            for v in values:
                cf = replace(base, **{key: v})
                add(cf, "default" if cf == base else f"{key}={v}")
    return points


SWEEP_FIELDS = ["label", "p", "desc_channel", "history_len", "warm_up", "weight", "seed",
                "top1_acc", "val_loss", "avg_val_loss_last10"]


def run_sweep(spec: RunSpec, out, jobs: int = 1) -> List[str]:
    """Long-form CSV, one row per (config, seed); metrics are best top-1, best val loss, last-10 mean."""
    out = Path(out)
    _write_config(spec, out)
    points = sweep_points(spec)
    tasks = [(i, s) for i in range(len(points)) for s in spec.seeds]

    def one(task):
        i, seed = task
        cfg = replace(spec.train_config(seed, "baseline"), cf=points[i].cf)
        return run_once(spec, cfg)[1]

    results = _map(one, tasks, jobs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    lines = []
    for i, pt in enumerate(points):
        cf = pt.cf
        hp = ["n/a"] * 5 if cf is None else [repr(cf.p), cf.desc_channel, cf.history_len, cf.warm_up, repr(cf.weight)]
        last10 = []
        for seed in spec.seeds:
            recs = results[(i, seed)]
            top1 = max(r.val_top1 for r in recs)
            vloss = min(r.val_loss for r in recs)
            l10 = avg_last_k(recs, 10, "val_loss")
            last10.append(l10)
            w.writerow([pt.label] + hp + [seed, f"{top1:.6f}", f"{vloss:.6f}", f"{l10:.6f}"])
        lines.append(f"{pt.label}: avg val_loss last10 {np.mean(last10):.4f}±{np.std(last10):.4f}")
    atomic_write_text(out / "sweep.csv", buf.getvalue())
    return lines


def run_gradcheck(out=None) -> Tuple[bool, str]:
    ok, rows = run_suite()
    report = format_report(rows)
    if out is not None:
        atomic_write_text(Path(out) / "gradcheck.txt", report + "\n")
    return ok, report


def _map(fn, tasks, jobs: int) -> dict:
    """Run independent tasks (optionally on worker threads); results keyed by task."""
    if jobs <= 1:
        return {t: fn(t) for t in tasks}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return dict(zip(tasks, pool.map(fn, tasks)))
