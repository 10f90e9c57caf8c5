"""Training-data-size and patch-count sweeps on synthetic data.

Every sweep cell generates its own training identities, trains an embedding,
and measures ten-fold pair verification error on one held-out evaluation set
whose identities never appear in training. The evaluation set, its pairs and
its folds are fixed for the whole sweep.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .embedding import TrainConfig, train
from .evalproto import pairwise_accuracy_tenfold, raw_cosine_vectors, score_pairs, score_pairs_from_vectors
from .feature_store import make_folds, sample_pairs
from .synth import SynthConfig, generate

__all__ = [
    "ProtocolConfig",
    "SweepRow",
    "SweepResult",
    "EvalSet",
    "make_eval_set",
    "run_cell",
    "baseline_error",
    "data_sweep",
    "patch_sweep",
    "SWEEP_HEADER",
]

SWEEP_HEADER = ["label", "n_identities", "n_faces", "n_patches", "error_rate", "seed"]


@dataclass(frozen=True)
class ProtocolConfig:
    """Training hyper-parameters and the held-out evaluation protocol."""

    train: TrainConfig = field(default_factory=lambda: TrainConfig(output_dim=32))
    eval_identities: int = 100
    eval_faces: int = 10
    n_same: int = 500
    n_diff: int = 500
    k: int = 10
    eval_seed: int | None = None  # None: derived from the sweep's base seed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        d = dict(d)
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        return cls(**d)


@dataclass(frozen=True)
class SweepRow:
    label: str
    n_identities: int
    n_faces: int
    n_patches: int
    error_rate: float
    seed: int


@dataclass
class SweepResult:
    rows: list[SweepRow]
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in self.rows:
            w.writerow([r.label, r.n_identities, r.n_faces, r.n_patches, repr(r.error_rate), r.seed])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str, metadata: dict | None = None) -> "SweepResult":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != SWEEP_HEADER:
            raise ValueError(f"bad sweep header {rows[0]}")
        out = [
            SweepRow(r[0], int(r[1]), int(r[2]), int(r[3]), float(r[4]), int(r[5])) for r in rows[1:]
        ]
        return cls(out, dict(metadata or {}))

    def to_json(self) -> str:
        return json.dumps(
            {"rows": [asdict(r) for r in self.rows], "metadata": self.metadata}, sort_keys=True
        )

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        doc = json.loads(text)
        return cls([SweepRow(**r) for r in doc["rows"]], doc["metadata"])

    def error(self, label: str) -> float:
        for r in self.rows:
            if r.label == label:
                return r.error_rate
        raise KeyError(label)


@dataclass(frozen=True, eq=False)
class EvalSet:
    dataset: object
    pairs: list
    folds: object


def make_eval_set(base: SynthConfig, protocol: ProtocolConfig) -> EvalSet:
    seed = base.seed + 10_000 if protocol.eval_seed is None else protocol.eval_seed
    cfg = replace(
        base,
        n_identities=protocol.eval_identities,
        faces_per_identity=protocol.eval_faces,
        seed=seed,
        identity_prefix="eval",
    )
    ds = generate(cfg)
    pairs = sample_pairs(ds, protocol.n_same, protocol.n_diff, seed)
    folds = make_folds(pairs, protocol.k, seed, stratified=True)
    return EvalSet(ds, pairs, folds)


def run_cell(
    config: SynthConfig,
    protocol: ProtocolConfig,
    n_patches_used: int | None = None,
    eval_set: EvalSet | None = None,
) -> float:
    """Ten-fold pair error of one trained embedding on the held-out set."""
    n_used = config.n_patches if n_patches_used is None else n_patches_used
    if not 1 <= n_used <= config.n_patches:
        raise ValueError(f"cannot use {n_used} of {config.n_patches} patches")
    eval_set = eval_set or make_eval_set(config, protocol)
    patch_ids = list(range(n_used))
    model = train(generate(config), patch_ids, replace(protocol.train, seed=config.seed))
    scores = score_pairs([model], eval_set.dataset, eval_set.pairs, patch_ids).column(0)
    return 1.0 - pairwise_accuracy_tenfold(scores, eval_set.pairs, eval_set.folds).mean_accuracy


def baseline_error(
    config: SynthConfig, protocol: ProtocolConfig, n_patches_used: int | None = None,
    eval_set: EvalSet | None = None,
) -> float:
    """Same protocol scored with cosine similarity of the raw concatenated features."""
    n_used = config.n_patches if n_patches_used is None else n_patches_used
    eval_set = eval_set or make_eval_set(config, protocol)
    patch_ids = list(range(n_used))
    vecs = raw_cosine_vectors(eval_set.dataset, patch_ids)
    scores = score_pairs_from_vectors(vecs, eval_set.dataset, eval_set.pairs)
    return 1.0 - pairwise_accuracy_tenfold(scores, eval_set.pairs, eval_set.folds).mean_accuracy


def _run(cells, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda c: c(), cells))
    return [c() for c in cells]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def data_sweep(
    base: SynthConfig,
    sizes: Sequence[tuple[int, int]],
    protocol: ProtocolConfig | None = None,
    threads: int = 1,
) -> SweepResult:
    """One row per (n_identities, faces_per_identity) training size."""
    protocol = protocol or ProtocolConfig()
    if not sizes:
        raise ValueError("sizes must be nonempty")
    totals = [a * b for a, b in sizes]
    if any(b < a for a, b in zip(totals, totals[1:])):
        raise ValueError("sizes must be nondecreasing in total faces")
    started = _now()
    eval_set = make_eval_set(base, protocol)
    cfgs = [replace(base, n_identities=a, faces_per_identity=b) for a, b in sizes]
    errors = _run([lambda c=c: run_cell(c, protocol, eval_set=eval_set) for c in cfgs], threads)
    rows = [
        SweepRow(f"{c.n_identities}x{c.faces_per_identity}", c.n_identities,
                 c.n_identities * c.faces_per_identity, c.n_patches, e, base.seed)
        for c, e in zip(cfgs, errors)
    ]
    meta = {"kind": "data", "seed": base.seed, "base": base.to_dict(),
            "protocol": protocol.to_dict(), "started_at": started, "finished_at": _now()}
    return SweepResult(rows, meta)


def patch_sweep(
    base: SynthConfig,
    patch_counts: Sequence[int],
    protocol: ProtocolConfig | None = None,
    threads: int = 1,
) -> SweepResult:
    """One row per patch count c, training on the concatenation of patches 0..c-1."""
    protocol = protocol or ProtocolConfig()
    if not patch_counts:
        raise ValueError("patch_counts must be nonempty")
    bad = [c for c in patch_counts if not 1 <= c <= base.n_patches]
    if bad:
        raise ValueError(f"patch counts {bad} outside 1..{base.n_patches}")
    started = _now()
    eval_set = make_eval_set(base, protocol)
    errors = _run(
        [lambda c=c: run_cell(base, protocol, c, eval_set=eval_set) for c in patch_counts], threads
    )
    n_faces = base.n_identities * base.faces_per_identity
    rows = [
        SweepRow(f"{c}_patches", base.n_identities, n_faces, c, e, base.seed)
        for c, e in zip(patch_counts, errors)
    ]
    meta = {"kind": "patch", "seed": base.seed, "base": base.to_dict(),
            "protocol": protocol.to_dict(), "started_at": started, "finished_at": _now()}
    return SweepResult(rows, meta)
