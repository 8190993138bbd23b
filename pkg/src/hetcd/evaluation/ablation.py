"""Label-budget ablation: F1 of each method/feature variant over nested positive sets.

For repetition r the positives are drawn from one seeded permutation, so
every budget in the grid is a prefix of the next. One translation is
shared by all repetitions; step 1 is fitted once per (repetition, budget,
feature variant) and reused by every method on that variant.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..cae import TranslationResult
from ..occ import FeatureVariant, MlpConfig, fit_isvm, fit_step1, fit_step2, predict, predict_step1, stack_features
from ..raster import DatasetBundle, normalize_raster, sample_positive_set
from .metrics import MetricsRecord, f1

log = logging.getLogger(__name__)

DEFAULT_GRID = (25, 50, 100, 250, 500, 1000, 2000, 3000)
DEFAULT_METHODS: tuple[tuple[str, str], ...] = (
    ("two-step", "full"),
    ("two-step", "no-orig"),
    ("two-step", "no-diff"),
    ("step1", "full"),
    ("isvm", "full"),
)
METRICS_HEADER = ["method", "variant", "npos", "rep", "f1", "tp", "fp", "fn", "tn"]
REPORT_HEADER = ["method", "variant", "npos", "mean_f1", "p10_f1", "p90_f1"]


def repetition_seed(master_seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([master_seed, rep]).generate_state(1)[0])


def training_seed(master_seed: int, rep: int, npos: int) -> int:
    return int(np.random.SeedSequence([master_seed, rep, npos]).generate_state(1)[0])


@dataclass(frozen=True)
class RunRecord:
    method: str
    variant: str
    npos: int
    rep: int
    metrics: MetricsRecord


@dataclass(frozen=True)
class CellSummary:
    method: str
    variant: str
    npos: int
    mean_f1: float
    p10_f1: float
    p90_f1: float
    scores: tuple[float, ...]


@dataclass
class AblationReport:
    records: list[RunRecord]
    cells: list[CellSummary]
    seeds: list[int] = field(default_factory=list)

    def cell(self, method: str, variant: str, npos: int) -> CellSummary:
        for c in self.cells:
            if (c.method, c.variant, c.npos) == (method, variant, npos):
                return c
        raise KeyError((method, variant, npos))


def summarize(records: Sequence[RunRecord]) -> list[CellSummary]:
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.variant, r.npos), []).append(r)
    cells = []
    for key in sorted(groups, key=lambda k: (k[2], k[0], k[1])):
        scores = np.array([r.metrics.f1 for r in sorted(groups[key], key=lambda r: r.rep)])
        cells.append(
            CellSummary(
                *key,
                float(scores.mean()),
                float(np.percentile(scores, 10)),
                float(np.percentile(scores, 90)),
                tuple(float(s) for s in scores),
            )
        )
    return cells


def _run_cell(features: dict, gt: np.ndarray, methods, npos: int, rep: int, sample_seed: int, train_seed: int, mlp: MlpConfig):
    gt_flat = gt.ravel()
    p = sample_positive_set(gt, npos, sample_seed)
    step1 = {}
    out = []
    for method, variant in methods:
        fs = features[variant]
        if variant not in step1:
            step1[variant] = fit_step1(fs, p)
        s1 = step1[variant]
        if method == "step1":
            pred = predict_step1(s1.model, fs)
        elif method == "two-step":
            ens = fit_step2(fs, p, s1.reliable_negatives, train_seed, mlp)
            pred = predict(ens, fs).binary.ravel()
        elif method == "isvm":
            pred = fit_isvm(fs, p, s1.reliable_negatives, train_seed).model.predict(fs.vectors)
        else:
            raise ValueError(f"unknown method {method!r}")
        out.append(RunRecord(method, variant, npos, rep, f1(pred, gt_flat)))
        log.info("rep %d npos %d %s/%s F1 %.4f", rep, npos, method, variant, out[-1].metrics.f1)
    return out


def run_ablation(
    bundle: DatasetBundle,
    translation: TranslationResult,
    npos_grid: Sequence[int] = DEFAULT_GRID,
    reps: int = 10,
    master_seed: int = 0,
    methods: Sequence[tuple[str, str]] = DEFAULT_METHODS,
    jobs: int = 1,
    mlp: MlpConfig = MlpConfig(),
) -> AblationReport:
    if bundle.ground_truth is None:
        raise ValueError("ablation needs a bundle with ground truth")
    gt = bundle.ground_truth
    available = int(gt.sum())
    too_big = [n for n in npos_grid if n > available]
    if too_big:
        raise ValueError(f"npos {too_big} exceed the {available} positive pixels in the ground truth")
    x, y = normalize_raster(bundle.t1), normalize_raster(bundle.t2)
    variants = sorted({v for _, v in methods})
    features = {v: stack_features(x, y, translation, FeatureVariant(v)) for v in variants}
    seeds = [repetition_seed(master_seed, r) for r in range(reps)]
    jobs_args = [
        (features, gt, tuple(methods), n, r, seeds[r], training_seed(master_seed, r, n), mlp)
        for r in range(reps)
        for n in npos_grid
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, *zip(*jobs_args)))
    else:
        results = [_run_cell(*a) for a in jobs_args]
    records = sorted(
        (r for chunk in results for r in chunk), key=lambda r: (r.npos, r.method, r.variant, r.rep)
    )
    return AblationReport(records, summarize(records), seeds)


# ------------------------------------------------------------------ output


def write_metrics_csv(records: Sequence[RunRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRICS_HEADER)
        for r in records:
            m = r.metrics
            wr.writerow([r.method, r.variant, r.npos, r.rep, f"{m.f1:.6f}", m.tp, m.fp, m.fn, m.tn])


def write_report_csv(report: AblationReport, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(REPORT_HEADER)
        for c in report.cells:
            wr.writerow([c.method, c.variant, c.npos, f"{c.mean_f1:.6f}", f"{c.p10_f1:.6f}", f"{c.p90_f1:.6f}"])


LABELS = {
    ("two-step", "full"): "MLP ensemble",
    ("two-step", "no-orig"): "W/o originals",
    ("two-step", "no-diff"): "W/o differences",
    ("step1", "full"): "W/o step 2",
    ("isvm", "full"): "ISVM",
}


def plot_curves(report: AblationReport, path, title: Optional[str] = None) -> None:
    """Mean F1 against the label budget on a log axis, with 10th-90th percentile bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    keys = sorted({(c.method, c.variant) for c in report.cells}, key=lambda k: list(LABELS).index(k) if k in LABELS else 99)
    for key in keys:
        cells = sorted((c for c in report.cells if (c.method, c.variant) == key), key=lambda c: c.npos)
        n = np.array([c.npos for c in cells])
        mean = np.array([c.mean_f1 for c in cells])
        lo = mean - np.array([c.p10_f1 for c in cells])
        hi = np.array([c.p90_f1 for c in cells]) - mean
        ax.errorbar(n, mean, yerr=[lo, hi], marker="o", capsize=3, label=LABELS.get(key, f"{key[0]} ({key[1]})"))
    ax.set_xscale("log")
    ax.set_xlabel("number of labelled positives")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.02)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
