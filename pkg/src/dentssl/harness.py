"""Benchmark protocol: split generation, few-shot subsampling, metrics,
aggregation, significance testing, and the report-producing runner.

The runner executes the (task x split x few-shot x resample) grid, writes
one line-structured record per cell, and is deterministic per seed set:
rerunning with the same configuration reproduces the report byte for byte.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import InvalidInputError
from . import rawio

logger = logging.getLogger(__name__)

DEFAULT_SPLIT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_TRAIN_RATIO = 0.7
FEWSHOT_LEVELS = (25, 50, 75, 100)
RESAMPLES_PER_LEVEL = 5
DEFAULT_SDR_RADII = (2.0, 2.5, 3.0, 4.0)  # mm


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    ratio: float
    train: np.ndarray
    test: np.ndarray


def make_splits(n: int, seeds=DEFAULT_SPLIT_SEEDS, ratio: float = DEFAULT_TRAIN_RATIO) -> list[SplitPlan]:
    """Disjoint, covering train/test index plans, one per seed."""
    if n < 2:
        raise InvalidInputError("need at least 2 samples to split")
    n_train = int(round(ratio * n))
    n_train = min(max(n_train, 1), n - 1)
    plans = []
    for seed in seeds:
        perm = np.random.default_rng(seed).permutation(n)
        plans.append(SplitPlan(seed=seed, ratio=ratio, train=np.sort(perm[:n_train]), test=np.sort(perm[n_train:])))
    return plans


def sample_fewshot(train: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Uniform without-replacement subset of round(k% * |train|); k=100 is the
    identity. The test side of the split is untouched by construction."""
    if k not in FEWSHOT_LEVELS:
        raise InvalidInputError(f"k must be one of {FEWSHOT_LEVELS}, got {k}")
    train = np.asarray(train)
    if k == 100:
        return train.copy()
    size = int(round(k / 100.0 * train.size))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(train, size=size, replace=False))


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise InvalidInputError("prediction/label shapes disagree")
    if preds.size == 0:
        raise InvalidInputError("empty prediction array")
    return float((preds == labels).mean())


@dataclass(frozen=True)
class OverlapScores:
    dice: np.ndarray  # per class
    iou: np.ndarray
    mdice: float
    miou: float


def dice_iou(pred_mask, true_mask, classes: int) -> OverlapScores:
    """Per-class Dice/IoU over integer label maps (classes 1..classes), with
    the empty-vs-empty case defined as 1; m-metrics are unweighted means."""
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise InvalidInputError("mask shapes disagree")
    if classes < 1:
        raise InvalidInputError("classes must be >= 1")
    dice = np.zeros(classes)
    iou = np.zeros(classes)
    for c in range(1, classes + 1):
        a = pred == c
        b = true == c
        inter = int(np.logical_and(a, b).sum())
        sa, sb = int(a.sum()), int(b.sum())
        union = sa + sb - inter
        dice[c - 1] = 1.0 if sa + sb == 0 else 2.0 * inter / (sa + sb)
        iou[c - 1] = 1.0 if union == 0 else inter / union
    return OverlapScores(dice=dice, iou=iou, mdice=float(dice.mean()), miou=float(iou.mean()))


def mre_sdr(pred_pts, true_pts, radii=DEFAULT_SDR_RADII) -> tuple[float, dict[float, float]]:
    """Mean radial error and per-radius success detection rate."""
    pred = np.asarray(pred_pts, dtype=float)
    true = np.asarray(true_pts, dtype=float)
    if pred.shape != true.shape:
        raise InvalidInputError("landmark shapes disagree")
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise InvalidInputError("expected a nonempty (points, dims) array")
    dists = np.linalg.norm(pred - true, axis=1)
    mre = float(dists.mean())
    sdr = {float(r): float((dists <= r).mean()) for r in radii}
    return mre, sdr


def aggregate(values) -> tuple[float, float]:
    """Arithmetic mean and sample standard deviation (n-1); n=1 gives std 0."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise InvalidInputError("cannot aggregate an empty sequence")
    mean = float(arr.mean())
    std = 0.0 if arr.size == 1 else float(arr.std(ddof=1))
    return mean, std


def two_tailed_t_test(a, b) -> float:
    """Welch two-sample t-test p-value (two-tailed, unpaired)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise InvalidInputError("both samples need at least 2 values")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    se2 = va / na + vb / nb
    if se2 == 0.0:
        return 1.0 if a.mean() == b.mean() else 0.0
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))


@dataclass
class TaskSpec:
    """A classification task backed by precomputed embeddings.

    `features` is a rank-2 raw container (N, K); `labels` a rank-1 int64
    container of the same length.
    """

    name: str
    features_path: str
    labels_path: str
    metric: str = "ACC"


@dataclass
class BenchmarkConfig:
    tasks: list[TaskSpec] = field(default_factory=list)
    split_seeds: tuple[int, ...] = DEFAULT_SPLIT_SEEDS
    train_ratio: float = DEFAULT_TRAIN_RATIO
    fewshot: bool = False
    fewshot_levels: tuple[int, ...] = FEWSHOT_LEVELS
    resamples_per_level: int = RESAMPLES_PER_LEVEL
    probe_c_count: int = 45
    base_dir: str = "."


def _resolve(path: str, base: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(base) / p


def _evaluate_probe_cell(features, labels, train_idx, test_idx, c_count: int, seed: int) -> float:
    from .adapters.probe import ProbeGrid, linear_probe  # deferred: avoids an import cycle

    grid = ProbeGrid.log_spaced(c_count)
    result = linear_probe(
        features[train_idx], labels[train_idx], grid=grid, seed=seed,
        test_embeddings=features[test_idx], test_labels=labels[test_idx],
    )
    return result.test_accuracy


def run_benchmark(cfg: BenchmarkConfig, out_dir: str | Path, resume: bool = True) -> Path:
    """Execute the task x split (x few-shot) grid and write report files.

    Produces `report.jsonl` (one record per cell, canonically ordered),
    `summary.json`, `summary.txt`, and plot files. Existing cells are reused
    when `resume` is set.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.jsonl"

    done: dict[tuple, dict] = {}
    if resume and report_path.is_file():
        with open(report_path) as fh:
            for line in fh:
                rec = json.loads(line)
                done[(rec["task"], rec["split_seed"], rec["k"], rec["resample_seed"])] = rec

    rows = []
    for task in cfg.tasks:
        features = rawio.load_tensor(_resolve(task.features_path, cfg.base_dir)).astype(np.float64)
        labels = rawio.load_tensor(_resolve(task.labels_path, cfg.base_dir)).astype(np.int64)
        if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
            raise InvalidInputError(f"task {task.name}: features/labels shapes disagree")
        plans = make_splits(features.shape[0], seeds=cfg.split_seeds, ratio=cfg.train_ratio)
        levels = cfg.fewshot_levels if cfg.fewshot else (100,)
        for plan in plans:
            for k in levels:
                resample_seeds = range(cfg.resamples_per_level) if (cfg.fewshot and k != 100) else (0,)
                for rs in resample_seeds:
                    key = (task.name, plan.seed, k, rs)
                    if key in done:
                        rows.append(done[key])
                        continue
                    subset = sample_fewshot(plan.train, k, seed=(plan.seed * 1000 + rs))
                    value = _evaluate_probe_cell(features, labels, subset, plan.test, cfg.probe_c_count, seed=plan.seed)
                    rows.append(
                        {
                            "task": task.name,
                            "split_seed": plan.seed,
                            "k": k,
                            "resample_seed": rs,
                            "metric": task.metric,
                            "value": value,
                            "n_train": int(subset.size),
                            "n_test": int(plan.test.size),
                        }
                    )
                    logger.info("cell %s split=%d k=%d rs=%d -> %.4f", task.name, plan.seed, k, rs, value)

    rows.sort(key=lambda r: (r["task"], r["split_seed"], r["k"], r["resample_seed"]))
    with open(report_path, "w") as fh:
        for rec in rows:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    summary = _summarize(rows)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(out_dir / "summary.txt", "w") as fh:
        for key, agg in sorted(summary.items()):
            fh.write(f"{key}: mean={agg['mean']:.4f} std={agg['std']:.4f} n={agg['n']}\n")
    _write_plots(rows, out_dir)
    return report_path


def _summarize(rows: list[dict]) -> dict:
    grouped: dict[str, list[float]] = {}
    for rec in rows:
        grouped.setdefault(f"{rec['task']}@k={rec['k']}", []).append(rec["value"])
    out = {}
    for key, values in grouped.items():
        mean, std = aggregate(values)
        out[key] = {"mean": mean, "std": std, "n": len(values)}
    return out


def _write_plots(rows: list[dict], out_dir: Path) -> None:
    if not rows:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tasks = sorted({r["task"] for r in rows})
    # Bar chart with std error bars at k=100.
    means, stds = [], []
    for t in tasks:
        vals = [r["value"] for r in rows if r["task"] == t and r["k"] == 100]
        m, s = aggregate(vals)
        means.append(m)
        stds.append(s)
    fig, ax = plt.subplots(figsize=(max(4, len(tasks) * 1.2), 4))
    ax.bar(range(len(tasks)), means, yerr=stds, capsize=4)
    ax.set_xticks(range(len(tasks)))
    ax.set_xticklabels(tasks, rotation=30, ha="right")
    ax.set_ylabel("metric")
    fig.tight_layout()
    fig.savefig(out_dir / "benchmark_bars.png")
    plt.close(fig)

    ks = sorted({r["k"] for r in rows})
    if len(ks) > 1:
        fig, ax = plt.subplots(figsize=(5, 4))
        for t in tasks:
            line_m, line_s = [], []
            for k in ks:
                vals = [r["value"] for r in rows if r["task"] == t and r["k"] == k]
                m, s = aggregate(vals)
                line_m.append(m)
                line_s.append(s)
            line_m = np.array(line_m)
            line_s = np.array(line_s)
            ax.plot(ks, line_m, marker="o", label=t)
            ax.fill_between(ks, line_m - line_s, line_m + line_s, alpha=0.2)
        ax.set_xlabel("k% of training data")
        ax.set_ylabel("metric")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "benchmark_fewshot.png")
        plt.close(fig)
