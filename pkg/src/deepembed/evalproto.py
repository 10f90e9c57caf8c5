"""Face-recognition evaluation protocols.

All scores are similarities and the decision rule is ``accept iff score >= t``.
Thresholds come from empirical counting with no interpolation.

The five headline metrics::

    pairwise_accuracy        ten-fold pair verification accuracy
    rank1                    closed-set rank-1 identification rate
    dir_at_far_0.01_rank1    open-set detection-and-identification rate, FAR 1%
    tar_at_far_0.001         verification rate at FAR 0.1%
    openset_rank1_far_0.001  open-set identification, rank 1, FAR 0.1%
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import EmbeddingModel, embed
from .feature_store import Dataset, DatasetError, FoldSplit, LabeledPair

__all__ = [
    "EvaluationError",
    "ScoreSet",
    "RocCurve",
    "IdentificationSetup",
    "TenfoldResult",
    "FailureCase",
    "METRIC_NAMES",
    "pair_labels",
    "embed_dataset",
    "raw_cosine_vectors",
    "score_pairs",
    "score_pairs_from_vectors",
    "roc_curve",
    "auc",
    "tar_at_far",
    "best_threshold",
    "threshold_candidates",
    "pairwise_accuracy_tenfold",
    "build_identification_setup",
    "rank1_identification",
    "cmc_curve",
    "dir_at_far",
    "failure_report",
    "table3_metrics",
    "write_curve_csv",
    "read_curve_csv",
]

METRIC_NAMES = (
    "pairwise_accuracy",
    "rank1",
    "dir_at_far_0.01_rank1",
    "tar_at_far_0.001",
    "openset_rank1_far_0.001",
)


class EvaluationError(ValueError):
    pass


def pair_labels(pairs: Sequence[LabeledPair]) -> np.ndarray:
    return np.array([p.same for p in pairs], dtype=bool)


@dataclass(eq=False)
class ScoreSet:
    pairs: list[LabeledPair]
    scores: np.ndarray

    def __post_init__(self):
        self.pairs = list(self.pairs)
        self.scores = np.array(self.scores, dtype=np.float64, ndmin=2)
        if self.scores.shape[0] != len(self.pairs):
            raise EvaluationError(
                f"{self.scores.shape[0]} score rows for {len(self.pairs)} pairs"
            )
        if self.scores.shape[1] < 1:
            raise EvaluationError("score set needs at least one model column")
        if not np.all(np.isfinite(self.scores)):
            raise EvaluationError("non-finite scores")

    @property
    def labels(self) -> np.ndarray:
        return pair_labels(self.pairs)

    @property
    def n_models(self) -> int:
        return self.scores.shape[1]

    def column(self, m: int) -> np.ndarray:
        return self.scores[:, m]

    def subset(self, rows) -> "ScoreSet":
        rows = np.asarray(rows, dtype=np.intp)
        return ScoreSet([self.pairs[i] for i in rows], self.scores[rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["face_a", "face_b", "same"] + [f"model_{m}" for m in range(self.n_models)])
            for p, row in zip(self.pairs, self.scores):
                w.writerow([p.face_a, p.face_b, int(p.same)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "ScoreSet":
        path = Path(path)
        if not path.is_file():
            raise EvaluationError(f"score file not found: {path}")
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:3] != ["face_a", "face_b", "same"]:
            raise EvaluationError(f"{path}: missing face_a,face_b,same header")
        pairs, scores = [], []
        for lineno, row in enumerate(rows[1:], 2):
            if len(row) != len(rows[0]):
                raise EvaluationError(f"{path}:{lineno}: expected {len(rows[0])} fields")
            pairs.append(LabeledPair(row[0], row[1], row[2] == "1"))
            scores.append([float(v) for v in row[3:]])
        return cls(pairs, np.array(scores).reshape(len(pairs), len(rows[0]) - 3))


# ---------------------------------------------------------------------------
# scoring


def embed_dataset(
    models: Sequence[EmbeddingModel], dataset: Dataset, patch_ids=None
) -> np.ndarray:
    """Row-aligned fused embeddings of every record.

    Unit embeddings of all models are concatenated and scaled by
    ``1/sqrt(len(models))``, so an inner product of two rows is the average of
    the per-model similarities.
    """
    if not models:
        raise EvaluationError("no models given")
    X = dataset.matrix(patch_ids)
    parts = []
    for m in models:
        if not m.normalize:
            raise EvaluationError("scoring requires normalizing models")
        parts.append(embed(m, X))
    return np.hstack(parts) / math.sqrt(len(models))


def raw_cosine_vectors(dataset: Dataset, patch_ids=None) -> np.ndarray:
    """Unit-normalized raw concatenated descriptors (the no-learning baseline)."""
    X = dataset.matrix(patch_ids)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EvaluationError("zero feature vector cannot be cosine-normalized")
    return X / norms


def _pair_positions(dataset: Dataset, pairs: Sequence[LabeledPair]) -> tuple[np.ndarray, np.ndarray]:
    try:
        a = np.array([dataset.position(p.face_a) for p in pairs], dtype=np.intp)
        b = np.array([dataset.position(p.face_b) for p in pairs], dtype=np.intp)
    except DatasetError as exc:
        raise EvaluationError(str(exc)) from None
    return a, b


def score_pairs_from_vectors(vectors: np.ndarray, dataset: Dataset, pairs) -> np.ndarray:
    a, b = _pair_positions(dataset, pairs)
    return np.clip(np.einsum("ij,ij->i", vectors[a], vectors[b]), -1.0, 1.0)


def score_pairs(
    models: Sequence[EmbeddingModel], dataset: Dataset, pairs: Sequence[LabeledPair], patch_ids=None
) -> ScoreSet:
    """One similarity column per model."""
    if not models:
        raise EvaluationError("no models given")
    a, b = _pair_positions(dataset, pairs)
    X = dataset.matrix(patch_ids)
    cols = []
    for m in models:
        if not m.normalize:
            raise EvaluationError("scoring requires normalizing models")
        E = embed(m, X)
        cols.append(np.clip(np.einsum("ij,ij->i", E[a], E[b]), -1.0, 1.0))
    return ScoreSet(list(pairs), np.column_stack(cols))


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class RocCurve:
    """(threshold, FAR, TAR) points, thresholds descending from +inf to -inf."""

    thresholds: np.ndarray
    far: np.ndarray
    tar: np.ndarray

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.tar.tolist()))


def _split_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if scores.shape != labels.shape:
        raise EvaluationError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("non-finite scores")
    pos, neg = np.sort(scores[labels]), np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("need at least one positive and one negative label")
    return scores, pos, neg


def _count_ge(sorted_vals: np.ndarray, t: np.ndarray) -> np.ndarray:
    return sorted_vals.size - np.searchsorted(sorted_vals, t, side="left")


def roc_curve(scores, labels) -> RocCurve:
    scores, pos, neg = _split_labels(scores, labels)
    t = np.concatenate([[np.inf], np.unique(scores)[::-1], [-np.inf]])
    far = _count_ge(neg, t) / neg.size
    tar = _count_ge(pos, t) / pos.size
    return RocCurve(t, far, tar)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under TAR(FAR); ties count one half, as in Mann-Whitney."""
    return float(np.sum(np.diff(curve.far) * (curve.tar[1:] + curve.tar[:-1]) / 2.0))


def tar_at_far(scores, labels, far_target: float) -> tuple[float, float]:
    """TAR at the most permissive observed threshold whose FAR stays within the target.

    Returns ``(0.0, inf)`` when no observed score achieves it.
    """
    if not 0.0 <= far_target <= 1.0:
        raise EvaluationError("far_target must lie in [0, 1]")
    scores, pos, neg = _split_labels(scores, labels)
    t = np.unique(scores)
    ok = _count_ge(neg, t) / neg.size <= far_target
    if not np.any(ok):
        return 0.0, math.inf
    thr = t[np.argmax(ok)]
    return float(_count_ge(pos, np.array([thr]))[0] / pos.size), float(thr)


def threshold_candidates(scores) -> np.ndarray:
    """Ascending candidates: each distinct score, each midpoint between neighbours, then ``+inf``.

    Taking the smallest maximizer over this set places a decision boundary in
    the middle of a score gap rather than on the lowest accepted training score.
    """
    u = np.unique(scores)
    t = np.empty(2 * u.size, dtype=np.float64)
    t[0::2] = u
    t[1:-1:2] = (u[:-1] + u[1:]) / 2.0
    t[-1] = np.inf
    return t


def best_threshold(scores, labels) -> tuple[float, int]:
    """Threshold maximizing correct decisions (smallest on ties) and that count."""
    scores, pos, neg = _split_labels(scores, labels)
    t = threshold_candidates(scores)
    correct = _count_ge(pos, t) + (neg.size - _count_ge(neg, t))
    i = int(np.argmax(correct))
    return float(t[i]), int(correct[i])


def _accuracy(scores, labels, threshold) -> float:
    return float(np.mean((np.asarray(scores) >= threshold) == np.asarray(labels, dtype=bool)))


@dataclass(frozen=True)
class TenfoldResult:
    mean_accuracy: float
    accuracies: tuple[float, ...]
    thresholds: tuple[float, ...]


def pairwise_accuracy_tenfold(score_per_pair, pairs, folds: FoldSplit) -> TenfoldResult:
    scores = np.asarray(score_per_pair, dtype=np.float64).reshape(-1)
    labels = pair_labels(pairs)
    if scores.size != labels.size:
        raise EvaluationError("one score per pair required")
    covered = sorted(i for f in folds.folds for i in f)
    if covered != list(range(labels.size)):
        raise EvaluationError("folds do not partition the pairs")
    accs, thrs = [], []
    for i in range(folds.k):
        tr, te = folds.train_indices(i), folds.test_indices(i)
        try:
            thr, _ = best_threshold(scores[tr], labels[tr])
        except EvaluationError:
            raise EvaluationError(f"fold {i}: training folds contain a single class") from None
        thrs.append(thr)
        accs.append(_accuracy(scores[te], labels[te], thr))
    return TenfoldResult(statistics.fmean(accs), tuple(accs), tuple(thrs))


# ---------------------------------------------------------------------------
# identification


@dataclass(eq=False)
class IdentificationSetup:
    gallery_ids: list[str]
    gallery: np.ndarray
    mated_ids: list[str]
    mated: np.ndarray
    nonmated: np.ndarray

    def __post_init__(self):
        self.gallery = np.array(self.gallery, dtype=np.float64, ndmin=2)
        d = self.gallery.shape[1]
        self.mated = np.array(self.mated, dtype=np.float64).reshape(-1, d)
        self.nonmated = np.array(self.nonmated, dtype=np.float64).reshape(-1, d)
        if self.mated.shape[0] != len(self.mated_ids):
            raise EvaluationError("one mated probe vector per mated identity label required")
        self.gallery_ids = list(self.gallery_ids)
        self.mated_ids = list(self.mated_ids)
        if len(set(self.gallery_ids)) != len(self.gallery_ids):
            raise EvaluationError("gallery identity ids must be unique")
        if len(self.gallery_ids) != self.gallery.shape[0]:
            raise EvaluationError("one gallery vector per gallery identity required")
        missing = set(self.mated_ids) - set(self.gallery_ids)
        if missing:
            raise EvaluationError(f"mated probe identities absent from gallery: {sorted(missing)[:5]}")

    def truth_index(self) -> np.ndarray:
        where = {g: i for i, g in enumerate(self.gallery_ids)}
        return np.array([where[m] for m in self.mated_ids], dtype=np.intp)


def build_identification_setup(
    vectors: np.ndarray, dataset: Dataset, gallery_fraction: float = 0.5, seed: int = 0
) -> IdentificationSetup:
    """Open-set split of a dataset.

    A seeded permutation of identities puts ``gallery_fraction`` of them in the
    gallery. Each gallery identity enrolls its first face (dataset order); its
    remaining faces are mated probes. Every face of the other identities is a
    non-mated probe.
    """
    if not 0.0 < gallery_fraction <= 1.0:
        raise EvaluationError("gallery_fraction must lie in (0, 1]")
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] != len(dataset):
        raise EvaluationError("vectors must be row-aligned with the dataset")
    idents = dataset.identities
    order = np.random.default_rng(seed).permutation(len(idents))
    n_gal = max(1, int(round(gallery_fraction * len(idents))))
    gallery_idents = [idents[i] for i in sorted(order[:n_gal])]
    gallery_set = set(gallery_idents)
    index = dataset.identity_index
    gal_rows, mated_rows, mated_ids = [], [], []
    for ident in gallery_idents:
        rows = index[ident]
        gal_rows.append(rows[0])
        mated_rows.extend(rows[1:])
        mated_ids.extend([ident] * (len(rows) - 1))
    non_rows = [i for i, r in enumerate(dataset.records) if r.identity_id not in gallery_set]
    return IdentificationSetup(
        gallery_idents,
        vectors[gal_rows],
        mated_ids,
        vectors[mated_rows] if mated_rows else np.empty((0, vectors.shape[1])),
        vectors[non_rows] if non_rows else np.empty((0, vectors.shape[1])),
    )


def _mated_ranks(setup: IdentificationSetup) -> tuple[np.ndarray, np.ndarray]:
    """Genuine score of each mated probe and its 1-based rank (ties: lower gallery position first)."""
    S = setup.mated @ setup.gallery.T
    truth = setup.truth_index()
    rows = np.arange(S.shape[0])
    genuine = S[rows, truth]
    higher = np.sum(S > genuine[:, None], axis=1)
    cols = np.arange(S.shape[1])
    tied_before = np.sum((S == genuine[:, None]) & (cols[None, :] < truth[:, None]), axis=1)
    return genuine, 1 + higher + tied_before


def rank1_identification(setup: IdentificationSetup) -> float:
    if setup.gallery.shape[0] == 0 or len(setup.mated_ids) == 0:
        raise EvaluationError("rank-1 needs a nonempty gallery and mated probe set")
    S = setup.mated @ setup.gallery.T
    return float(np.mean(np.argmax(S, axis=1) == setup.truth_index()))


def cmc_curve(setup: IdentificationSetup, max_rank: int | None = None) -> np.ndarray:
    """Identification rate at ranks 1..max_rank."""
    if len(setup.mated_ids) == 0:
        raise EvaluationError("CMC needs mated probes")
    max_rank = setup.gallery.shape[0] if max_rank is None else max_rank
    _, ranks = _mated_ranks(setup)
    return np.array([np.mean(ranks <= r) for r in range(1, max_rank + 1)])


def dir_at_far(setup: IdentificationSetup, far_target: float, rank: int = 1) -> tuple[float, float]:
    """Open-set detection and identification rate.

    A non-mated probe's alarm score is its best gallery similarity. The
    threshold is the smallest observed score (alarm or genuine) whose alarm
    rate stays within ``far_target``; ``inf`` when none does. A mated probe
    counts when its identity ranks within ``rank`` and its genuine score
    clears the threshold.
    """
    if setup.nonmated.shape[0] == 0:
        raise EvaluationError("DIR needs non-mated probes")
    if len(setup.mated_ids) == 0:
        raise EvaluationError("DIR needs mated probes")
    if not 1 <= rank <= setup.gallery.shape[0]:
        raise EvaluationError(f"rank {rank} outside 1..{setup.gallery.shape[0]}")
    if not 0.0 <= far_target <= 1.0:
        raise EvaluationError("far_target must lie in [0, 1]")
    alarms = np.sort(np.max(setup.nonmated @ setup.gallery.T, axis=1))
    genuine, ranks = _mated_ranks(setup)
    t = np.unique(np.concatenate([alarms, genuine]))
    ok = _count_ge(alarms, t) / alarms.size <= far_target
    thr = float(t[np.argmax(ok)]) if np.any(ok) else math.inf
    return float(np.mean((ranks <= rank) & (genuine >= thr))), thr


# ---------------------------------------------------------------------------
# failure analysis and reports


@dataclass(frozen=True)
class FailureCase:
    pair: LabeledPair
    score: float
    kind: str  # "false_accept" | "false_reject"


def failure_report(score_per_pair, pairs: Sequence[LabeledPair], threshold: float) -> list[FailureCase]:
    """Misclassified pairs, most confidently wrong first (stable on ties)."""
    out = []
    for p, s in zip(pairs, np.asarray(score_per_pair, dtype=np.float64)):
        accepted = s >= threshold
        if accepted and not p.same:
            out.append(FailureCase(p, float(s), "false_accept"))
        elif not accepted and p.same:
            out.append(FailureCase(p, float(s), "false_reject"))
    out.sort(key=lambda c: -abs(c.score - threshold))
    return out


def table3_metrics(
    pair_scores, pairs: Sequence[LabeledPair], folds: FoldSplit, setup: IdentificationSetup
) -> dict[str, float]:
    labels = pair_labels(pairs)
    return {
        "pairwise_accuracy": pairwise_accuracy_tenfold(pair_scores, pairs, folds).mean_accuracy,
        "rank1": rank1_identification(setup),
        "dir_at_far_0.01_rank1": dir_at_far(setup, 0.01, 1)[0],
        "tar_at_far_0.001": tar_at_far(pair_scores, labels, 0.001)[0],
        "openset_rank1_far_0.001": dir_at_far(setup, 0.001, 1)[0],
    }


def write_curve_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "tar"])
        for t, f, r in curve.points:
            w.writerow([repr(t), repr(f), repr(r)])


def read_curve_csv(path) -> RocCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["threshold", "far", "tar"]:
        raise EvaluationError(f"{path}: bad curve header")
    arr = np.array([[float(v) for v in r] for r in rows[1:]])
    return RocCurve(arr[:, 0], arr[:, 1], arr[:, 2])
