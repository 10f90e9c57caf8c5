"""Score-level fusion of several embedding models.

``fuse_average`` is the plain mean used for identification tasks. For pair
verification a linear ensemble (simplex weights plus a threshold) is fitted by
directly minimizing training classification error over a weight grid.
"""

from __future__ import annotations

import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .evalproto import EvaluationError, ScoreSet, _accuracy, threshold_candidates
from .feature_store import FoldSplit

__all__ = [
    "EnsembleModel",
    "GridConfig",
    "fuse_average",
    "fuse_weighted",
    "simplex_grid",
    "training_error",
    "grid_search_ensemble",
    "tenfold_ensemble",
    "TenfoldEnsembleResult",
    "save_ensemble",
    "load_ensemble",
]

# Above this many grid points "auto" switches from full enumeration to coordinate search.
EXHAUSTIVE_LIMIT = 20_000


@dataclass(frozen=True)
class EnsembleModel:
    weights: tuple[float, ...]
    threshold: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"ensemble weights must be nonnegative and sum to 1: {self.weights}")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))
        object.__setattr__(self, "threshold", float(self.threshold))

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "threshold": self.threshold}


@dataclass(frozen=True)
class GridConfig:
    weight_step: float = 0.05
    method: str = "auto"  # "exhaustive" | "coordinate" | "auto"
    max_sweeps: int = 50
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.weight_step <= 1:
            raise ValueError("weight_step must lie in (0, 1]")
        n = 1.0 / self.weight_step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("1/weight_step must be an integer")
        if self.method not in ("auto", "exhaustive", "coordinate"):
            raise ValueError(f"unknown grid method {self.method!r}")

    @property
    def n_steps(self) -> int:
        return int(round(1.0 / self.weight_step))


def fuse_average(scoreset: ScoreSet) -> np.ndarray:
    return scoreset.scores.mean(axis=1)


def fuse_weighted(scoreset: ScoreSet, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.size != scoreset.n_models:
        raise EvaluationError(f"{w.size} weights for {scoreset.n_models} model columns")
    if scoreset.n_models == 1 or np.all(w == w[0]):
        # uniform weights must reproduce the plain average element for element
        return fuse_average(scoreset)
    return scoreset.scores @ w


def simplex_grid(n_models: int, n_steps: int) -> np.ndarray:
    """Every weight vector with entries in {0, 1/n_steps, ..., 1} summing to 1, lexicographic order."""
    rows = []
    # stars and bars: bar positions give the integer composition
    for bars in combinations(range(n_steps + n_models - 1), n_models - 1):
        prev, parts = -1, []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(n_steps + n_models - 2 - prev)
        rows.append(parts)
    grid = np.array(rows, dtype=np.int64).reshape(-1, n_models)
    order = np.lexsort(grid.T[::-1])
    return grid[order]


def _best_threshold_errors(fused: np.ndarray, labels: np.ndarray) -> tuple[int, float]:
    """Fewest training errors over the fused-score threshold candidates; smallest threshold on ties."""
    pos = np.sort(fused[labels])
    neg = np.sort(fused[~labels])
    t = threshold_candidates(fused)
    false_rej = np.searchsorted(pos, t, side="left")
    false_acc = neg.size - np.searchsorted(neg, t, side="left")
    err = false_rej + false_acc
    i = int(np.argmin(err))
    return int(err[i]), float(t[i])


def training_error(scoreset: ScoreSet, weights, threshold: float, rows=None) -> int:
    fused = fuse_weighted(scoreset, weights)
    labels = scoreset.labels
    if rows is not None:
        fused, labels = fused[rows], labels[rows]
    return int(np.sum((fused >= threshold) != labels))


def _weights_from_counts(counts, n_steps: int) -> np.ndarray:
    return np.asarray(counts, dtype=np.float64) / n_steps


def _evaluate(scores, labels, counts_block, n_steps):
    out = []
    for counts in counts_block:
        w = _weights_from_counts(counts, n_steps)
        if np.all(w == w[0]) or w.size == 1:
            fused = scores.mean(axis=1)
        else:
            fused = scores @ w
        out.append(_best_threshold_errors(fused, labels))
    return out


def _search(scores, labels, candidates, n_steps, threads):
    """Best (errors, counts, threshold) over candidate count vectors under a total order."""
    if threads > 1 and len(candidates) > 1:
        blocks = np.array_split(candidates, threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: _evaluate(scores, labels, b, n_steps), blocks))
        results = [r for part in parts for r in part]
    else:
        results = _evaluate(scores, labels, candidates, n_steps)
    best = None
    for counts, (err, thr) in zip(candidates, results):
        key = (err, tuple(int(c) for c in counts), thr)
        if best is None or key < best:
            best = key
    return best


def _coordinate_search(scores, labels, n_models, n_steps, max_sweeps, threads):
    """Coordinate-wise refinement on the grid, starting near uniform.

    One sweep visits each model j in turn and tries every grid value for its
    weight, moving the difference onto (or off) the other models in order of
    index so that the vector stays on the grid. Stops after a sweep without
    improvement or after ``max_sweeps`` sweeps.
    """
    base, extra = divmod(n_steps, n_models)
    current = np.array([base + (1 if j < extra else 0) for j in range(n_models)], dtype=np.int64)
    best = _search(scores, labels, current[None, :], n_steps, 1)
    for _ in range(max_sweeps):
        improved = False
        for j in range(n_models):
            cands = []
            for v in range(n_steps + 1):
                c = current.copy()
                delta = v - c[j]
                c[j] = v
                others = [i for i in range(n_models) if i != j]
                if delta > 0:
                    for i in others:
                        take = min(c[i], delta)
                        c[i] -= take
                        delta -= take
                    if delta > 0:
                        continue
                elif delta < 0:
                    if not others:
                        continue
                    c[others[0]] -= delta
                cands.append(c)
            cand = _search(scores, labels, np.array(cands), n_steps, threads)
            if cand < best:
                best = cand
                current = np.array(cand[1], dtype=np.int64)
                improved = True
        if not improved:
            break
    return best


def grid_search_ensemble(scoreset: ScoreSet, train_indices=None, grid: GridConfig | None = None) -> EnsembleModel:
    """Weights on the simplex grid plus threshold minimizing training error.

    Ties go to the lexicographically smallest weight vector, then the smallest
    threshold.
    """
    grid = grid or GridConfig()
    rows = np.arange(len(scoreset.pairs)) if train_indices is None else np.asarray(train_indices)
    scores = scoreset.scores[rows]
    labels = scoreset.labels[rows]
    if labels.all() or not labels.any():
        raise EvaluationError("training rows contain a single class")
    m, n = scoreset.n_models, grid.n_steps
    n_points = math.comb(n + m - 1, m - 1)
    method = grid.method
    if method == "auto":
        method = "exhaustive" if n_points <= EXHAUSTIVE_LIMIT else "coordinate"
    if method == "exhaustive":
        best = _search(scores, labels, simplex_grid(m, n), n, grid.threads)
    else:
        best = _coordinate_search(scores, labels, m, n, grid.max_sweeps, grid.threads)
    _, counts, thr = best
    return EnsembleModel(tuple(_weights_from_counts(counts, n)), thr)


@dataclass(frozen=True)
class TenfoldEnsembleResult:
    mean_accuracy: float
    accuracies: tuple[float, ...]
    models: tuple[EnsembleModel, ...]

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "fold_accuracies": list(self.accuracies),
            "fold_models": [m.to_dict() for m in self.models],
        }


def tenfold_ensemble(scoreset: ScoreSet, folds: FoldSplit, grid: GridConfig | None = None) -> TenfoldEnsembleResult:
    labels = scoreset.labels
    accs, models = [], []
    for i in range(folds.k):
        tr, te = folds.train_indices(i), folds.test_indices(i)
        try:
            model = grid_search_ensemble(scoreset, tr, grid)
        except EvaluationError:
            raise EvaluationError(f"fold {i}: training folds contain a single class") from None
        fused = fuse_weighted(scoreset, model.weights)
        accs.append(_accuracy(fused[te], labels[te], model.threshold))
        models.append(model)
    return TenfoldEnsembleResult(statistics.fmean(accs), tuple(accs), tuple(models))


def save_ensemble(model: EnsembleModel, path, extra: dict | None = None) -> None:
    doc = model.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_ensemble(path) -> EnsembleModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return EnsembleModel(tuple(doc["weights"]), doc["threshold"])
