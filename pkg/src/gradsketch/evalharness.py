"""Counterfactual evaluation (LDS), damping search and compressor benchmarks.

LDS here: draw ``m`` half-size training subsets, retrain from the same
initialization on each, record every test point's loss, and rank-correlate
those losses with the attribution-predicted group effect over the subsets.
"""

from __future__ import annotations

import csv
import logging
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import _ops
from . import factgrass as fg
from .attribution import AttributionMode, FactorizationError, GradientStore, attribute, fit_fims
from .model import Dataset, LinearLayerTrace, Loss, MlpModel, TrainingDiverged, init_mlp, sample_losses, train_sgd
from .pipeline import BoundCompressor

log = logging.getLogger(__name__)

DAMPING_GRID = tuple(10.0**e for e in range(-7, 3))

# An influence score approximates the loss *decrease* caused by including a
# sample, so the predicted loss of a model trained on S is -sum_{i in S} score_i.
PREDICTION_SIGN = -1.0


class RetrainDiverged(TrainingDiverged):
    def __init__(self, subset: int, cause: Exception):
        super().__init__(f"retraining diverged on subset {subset}: {cause}")
        self.subset = subset


@dataclass
class LdsConfig:
    subsets: int = 50
    fraction: float = 0.5
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    val_fraction: float = 0.1
    damping_grid: tuple = DAMPING_GRID
    null_shuffles: int = 20

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ValueError("subset fraction must be in (0, 1)")
        if self.subsets < 2:
            raise ValueError("need at least two subsets")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if not self.damping_grid:
            raise ValueError("damping grid is empty")


@dataclass
class LdsReport:
    rho: np.ndarray  # per evaluated test point
    damping: float
    subset_seeds: list
    test_indices: np.ndarray
    val_indices: np.ndarray
    null_mean: float = float("nan")
    null_std: float = float("nan")
    grid: list = field(default_factory=list)  # (lambda, mean val rho or nan)

    @property
    def mean(self) -> float:
        return float(np.nanmean(self.rho)) if self.rho.size else float("nan")


# ---------------------------------------------------------------------------
# rank correlation


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rho with average ranks for ties; nan if either side is constant."""
    ra = rankdata(a)
    rb = rankdata(b)
    da = ra - ra.mean()
    db = rb - rb.mean()
    sa, sb = da @ da, db @ db
    if sa == 0 or sb == 0:
        return float("nan")
    r = float(da @ db / np.sqrt(sa * sb))
    # identical or reversed rankings are exactly +-1 up to the last ulp
    if abs(abs(r) - 1.0) < 1e-12:
        return float(np.sign(r))
    return min(1.0, max(-1.0, r))


def lds_from(predicted: np.ndarray, actual: np.ndarray) -> np.ndarray:
    """Per-test-point Spearman between ``(m, n_test)`` predicted and actual losses."""
    predicted = np.atleast_2d(predicted)
    actual = np.atleast_2d(actual)
    if predicted.shape != actual.shape:
        raise ValueError(f"prediction shape {predicted.shape} does not match losses {actual.shape}")
    return np.array([spearman(predicted[:, j], actual[:, j]) for j in range(actual.shape[1])])


# ---------------------------------------------------------------------------
# subsets and retraining


def sample_subsets(n: int, m: int, fraction: float, seed: int) -> np.ndarray:
    """``(m, n)`` boolean membership, each row with exactly ``floor(fraction * n)`` members."""
    size = int(np.floor(fraction * n))
    rng = np.random.Generator(np.random.Philox(key=seed))
    masks = np.zeros((m, n), dtype=bool)
    for b in range(m):
        masks[b, rng.choice(n, size=size, replace=False)] = True
    return masks


def predict_group_losses(scores: np.ndarray, subsets: np.ndarray, sign: float = PREDICTION_SIGN) -> np.ndarray:
    """``(m, n_test)`` predicted loss: ``sign * sum_{i in S_b} score(test, i)``."""
    return sign * (subsets.astype(np.float64) @ np.asarray(scores, np.float64).T)


def retrain_losses(
    init: MlpModel,
    X: np.ndarray,
    y: np.ndarray,
    X_test: np.ndarray,
    y_test: np.ndarray,
    subsets: np.ndarray,
    config: LdsConfig,
    loss: Loss = Loss.CROSS_ENTROPY,
) -> tuple[np.ndarray, list]:
    """Test losses of models retrained from ``init`` on each subset, plus the shuffle seeds."""
    out = np.empty((subsets.shape[0], np.asarray(X_test).shape[0]))
    seeds = []
    for b, rows in enumerate(subsets):
        seed = config.seed * 100_003 + b
        seeds.append(seed)
        try:
            res = train_sgd(init, X, y, config.epochs, config.lr, seed, config.batch_size, rows, loss, config.weight_decay)
            out[b] = sample_losses(res.model, X_test, y_test, loss)
        except FloatingPointError as exc:
            raise RetrainDiverged(b, exc) from None
    return out, seeds


# ---------------------------------------------------------------------------
# damping search


def damping_grid_search(
    grid: Sequence[float],
    scores_for: Callable[[float], np.ndarray],
    subsets: np.ndarray,
    actual: np.ndarray,
) -> tuple[float, list]:
    """λ with the best mean validation LDS; ties go to the smaller λ.

    ``scores_for(lam)`` must return scores for the validation test points only,
    aligned with the columns of ``actual``.
    """
    if not grid:
        raise ValueError("damping grid is empty")
    results = []
    best, best_val = None, -np.inf
    for lam in sorted(grid):
        try:
            rho = lds_from(predict_group_losses(scores_for(lam), subsets), actual)
        except FactorizationError:
            results.append((lam, float("nan")))
            continue
        val = float(np.nanmean(rho)) if np.any(np.isfinite(rho)) else -np.inf
        results.append((lam, val))
        if val > best_val:
            best, best_val = lam, val
    if best is None:
        raise FactorizationError("every damping value in the grid failed to factorize")
    return best, results


def null_distribution(scores: np.ndarray, subsets: np.ndarray, actual: np.ndarray, shuffles: int, seed: int) -> np.ndarray:
    """Mean LDS of scores whose train indices were randomly permuted, one value per shuffle."""
    rng = np.random.Generator(np.random.Philox(key=seed + 7919))
    out = np.empty(shuffles)
    for r in range(shuffles):
        perm = rng.permutation(scores.shape[1])
        out[r] = np.nanmean(lds_from(predict_group_losses(scores[:, perm], subsets), actual))
    return out


# ---------------------------------------------------------------------------
# end to end


def split_val(n_test: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (validation, evaluation) test-point indices."""
    n_val = int(round(fraction * n_test))
    if fraction > 0 and n_test > 1:
        n_val = max(1, n_val)
    rng = np.random.Generator(np.random.Philox(key=seed + 31))
    order = rng.permutation(n_test)
    return np.sort(order[:n_val]), np.sort(order[n_val:])


@dataclass
class LdsSetup:
    """Everything compressor-independent: subsets and retrained losses."""

    subsets: np.ndarray
    actual: np.ndarray  # (m, n_test)
    seeds: list
    val: np.ndarray
    evaluation: np.ndarray


def prepare_lds(init: MlpModel, dataset: Dataset, config: LdsConfig, loss: Loss = Loss.CROSS_ENTROPY) -> LdsSetup:
    X, y = dataset.train()
    Xt, yt = dataset.test()
    subsets = sample_subsets(X.shape[0], config.subsets, config.fraction, config.seed)
    actual, seeds = retrain_losses(init, X, y, Xt, yt, subsets, config, loss)
    val, ev = split_val(Xt.shape[0], config.val_fraction, config.seed)
    return LdsSetup(subsets, actual, seeds, val, ev)


def lds_evaluate(
    config: LdsConfig,
    dataset: Dataset,
    model: MlpModel,
    compressor: BoundCompressor,
    mode: Optional[AttributionMode] = None,
    setup: Optional[LdsSetup] = None,
    init: Optional[MlpModel] = None,
    loss: Loss = Loss.CROSS_ENTROPY,
    damping: Optional[float] = None,
) -> LdsReport:
    """LDS of influence scores computed from ``compressor`` features of the trained ``model``.

    ``setup`` may be shared across compressors so every method is scored on
    the same retrained models. ``damping`` skips the grid search.
    """
    if setup is None:
        if init is None:
            raise ValueError("need either a prepared setup or the initial model")
        setup = prepare_lds(init, dataset, config, loss)
    mode = mode or AttributionMode.whole(compressor.k)
    X, y = dataset.train()
    Xt, yt = dataset.test()
    train = GradientStore(compressor.compress(model, X, y, loss), compressor.fingerprint)
    test = GradientStore(compressor.compress(model, Xt, yt, loss), compressor.fingerprint)

    def scores_for(lam, cols):
        sub = GradientStore(test.records[cols], test.fingerprint)
        return attribute(mode, train, sub, lam, fit_fims(mode, train, lam))

    grid = []
    if damping is None:
        damping, grid = damping_grid_search(
            list(config.damping_grid),
            lambda lam: scores_for(lam, setup.val),
            setup.subsets,
            setup.actual[:, setup.val],
        )
    scores = scores_for(damping, setup.evaluation)
    rho = lds_from(predict_group_losses(scores, setup.subsets), setup.actual[:, setup.evaluation])
    null = null_distribution(scores, setup.subsets, setup.actual[:, setup.evaluation], config.null_shuffles, config.seed)
    return LdsReport(
        rho=rho,
        damping=damping,
        subset_seeds=setup.seeds,
        test_indices=setup.evaluation,
        val_indices=setup.val,
        null_mean=float(null.mean()),
        null_std=float(null.std(ddof=1)) if null.size > 1 else float("nan"),
        grid=grid,
    )


def write_lds_csv(path, report: LdsReport) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["test_index", "rho"])
        for idx, r in zip(report.test_indices, report.rho):
            w.writerow([int(idx), f"{r:.6f}"])
    return path


def write_lds_summary(path, report: LdsReport, label: str = "") -> Path:
    lines = [
        f"method: {label}" if label else None,
        f"mean_rho: {report.mean:.6f}",
        f"null_mean: {report.null_mean:.6f}",
        f"null_std: {report.null_std:.6f}",
        f"damping: {report.damping:g}",
        f"eval_points: {report.rho.size}",
        f"val_points: {report.val_indices.size}",
        f"subsets: {len(report.subset_seeds)}",
    ]
    lines += [f"grid {lam:g}: {v:.6f}" for lam, v in report.grid]
    Path(path).write_text("\n".join(l for l in lines if l is not None) + "\n")
    return Path(path)


# ---------------------------------------------------------------------------
# throughput


@dataclass
class ThroughputRow:
    method: str
    k_l: int
    wall_time: float  # seconds per sample
    op_count: float  # multiply-adds per sample
    peak_aux_memory: int  # bytes, traced during one sample


def synthetic_traces(d_in: int, d_out: int, T: int, n: int, seed: int = 0) -> list[LinearLayerTrace]:
    rng = np.random.Generator(np.random.Philox(key=seed))
    return [
        LinearLayerTrace(0, rng.standard_normal((d_in, T)).astype(np.float32), rng.standard_normal((d_out, T)).astype(np.float32))
        for _ in range(n)
    ]


def compare_throughput(samples: Sequence[Sequence[LinearLayerTrace]], specs: Sequence[str], repeats: int = 3) -> list[ThroughputRow]:
    """Per-sample compress cost of each factorized spec over the same layer traces.

    ``samples`` is a list of per-sample layer-trace lists. Wall time is the
    median over ``repeats``; op counts come from the instrumented kernels.
    """
    dims = [(t.d_in, t.d_out) for t in samples[0]]
    rows = []
    for text in specs:
        comps = fg.bind_model(fg.parse_factorized(text), dims)
        fg.compress_model(comps, samples[0])  # warm caches
        tracemalloc.start()
        try:
            base = tracemalloc.get_traced_memory()[0]
            tracemalloc.reset_peak()
            fg.compress_model(comps, samples[0])
            peak = tracemalloc.get_traced_memory()[1] - base
        finally:
            tracemalloc.stop()
        times = []
        with _ops.count_ops() as ops:
            for _ in range(repeats):
                t0 = time.perf_counter()
                for traces in samples:
                    fg.compress_model(comps, traces)
                times.append((time.perf_counter() - t0) / len(samples))
        rows.append(
            ThroughputRow(
                method=text.split(":")[0],
                k_l=sum(c.k_l for c in comps),
                wall_time=float(np.median(times)),
                op_count=sum(ops.values()) / (repeats * len(samples)),
                peak_aux_memory=int(peak),
            )
        )
    return rows


def write_rows_csv(path, rows: Sequence) -> Path:
    path = Path(path)
    dicts = [asdict(r) if not isinstance(r, dict) else r for r in rows]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(dicts[0]) if dicts else [])
        w.writeheader()
        w.writerows(dicts)
    return path
