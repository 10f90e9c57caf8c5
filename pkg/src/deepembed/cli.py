"""Command-line entry point: ``deepembed {synth,train,score,eval,ensemble,sweep}``.

Parameters resolve as built-in defaults < ``--config`` JSON < explicit flags.
A config file may be a flat object of parameter names or any report written
by this tool (its ``config`` section is used), so every report can be re-run.
Failures print one ``error: ...`` line to stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import __version__
from .embedding import EmbeddingError, TrainConfig, TrainingDiverged, load_model, save_model, train
from .ensemble import EXHAUSTIVE_LIMIT, GridConfig, grid_search_ensemble, save_ensemble, tenfold_ensemble
from .evalproto import (
    EvaluationError,
    ScoreSet,
    build_identification_setup,
    embed_dataset,
    failure_report,
    pair_labels,
    pairwise_accuracy_tenfold,
    raw_cosine_vectors,
    roc_curve,
    auc,
    score_pairs,
    score_pairs_from_vectors,
    table3_metrics,
    write_curve_csv,
)
from .experiments import ProtocolConfig, data_sweep, patch_sweep
from .feature_store import DatasetError, load_dataset, make_folds, read_pairs, sample_pairs, save_dataset, write_pairs
from .synth import SynthConfig, generate


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: {message}\n")
        sys.exit(2)


_TRAIN_DEFAULTS = TrainConfig().to_dict()
_SYNTH_DEFAULTS = {k: v for k, v in SynthConfig().to_dict().items()}

DEFAULTS = {
    "synth": {**_SYNTH_DEFAULTS, "pairs_same": 500, "pairs_diff": 500},
    "train": {"manifest": None, "patches": None, **_TRAIN_DEFAULTS},
    "score": {"manifest": None, "pairs": None, "models": None, "patches": None},
    "eval": {
        "manifest": None, "pairs": None, "models": [], "patches": None, "folds": 10,
        "gallery_fraction": 0.5, "failures": False, "failure_threshold": None,
    },
    "ensemble": {"scores": None, "weight_step": 0.05, "method": "auto", "folds": 10, "max_sweeps": 50},
    "sweep": {
        "kind": "data", "sizes": "25x20,100x20", "patch_counts": "1,4",
        **{k: v for k, v in _SYNTH_DEFAULTS.items() if k != "identity_prefix"},
        **{k: v for k, v in _TRAIN_DEFAULTS.items() if k != "seed"},
        "output_dim": 32,
        "eval_identities": 100, "eval_faces": 10, "n_same": 500, "n_diff": 500, "folds": 10,
    },
}


def _int_list(text):
    if text is None or isinstance(text, list):
        return text
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise CLIError(f"expected comma-separated integers, got {text!r}") from None


def _sizes(text):
    out = []
    for item in str(text).split(","):
        try:
            a, b = item.lower().split("x")
            out.append((int(a), int(b)))
        except ValueError:
            raise CLIError(f"bad size {item!r}; expected IDENTITIESxFACES") from None
    return out


def _add_global(p):
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON parameter file (or a previous report)")
    p.add_argument("--seed", type=int, default=S, help="random seed (default 0)")
    p.add_argument("--out", default=S, help="output directory (required)")
    p.add_argument("--threads", type=int, default=S, help="worker threads (default 1)")


def _add_train_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--output-dim", type=int, default=S)
    p.add_argument("--margin", type=float, default=S)
    p.add_argument("--learning-rate", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--triplets-per-epoch", type=int, default=S)
    p.add_argument("--sampling", choices=["uniform", "semi_hard"], default=S)
    p.add_argument("--init-scale", type=float, default=S)
    p.add_argument("--hidden-dim", type=int, default=S)


def _add_synth_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--n-identities", type=int, default=S)
    p.add_argument("--faces-per-identity", type=int, default=S)
    p.add_argument("--n-patches", type=int, default=S)
    p.add_argument("--patch-dim", type=int, default=S)
    p.add_argument("--within-noise-sigma", type=float, default=S)
    p.add_argument("--patch-noise-sigma", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(
        prog="deepembed",
        description="Synthetic features, triplet-loss embeddings, score fusion and face-recognition evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"deepembed {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset and pair list")
    _add_global(p)
    _add_synth_flags(p)
    p.add_argument("--identity-prefix", default=S)
    p.add_argument("--pairs-same", type=int, default=S)
    p.add_argument("--pairs-diff", type=int, default=S)

    p = sub.add_parser("train", help="train a triplet-loss embedding model")
    _add_global(p)
    p.add_argument("--manifest", default=S)
    p.add_argument("--patches", default=S, help="comma-separated patch ids (default all)")
    _add_train_flags(p)

    p = sub.add_parser("score", help="score pairs with one or more models")
    _add_global(p)
    p.add_argument("--manifest", default=S)
    p.add_argument("--pairs", default=S)
    p.add_argument("--models", nargs="+", default=S)
    p.add_argument("--patches", default=S)

    p = sub.add_parser("eval", help="run the five evaluation tasks")
    _add_global(p)
    p.add_argument("--manifest", default=S)
    p.add_argument("--pairs", default=S)
    p.add_argument("--models", nargs="*", default=S, help="model files; none = raw cosine only")
    p.add_argument("--patches", default=S)
    p.add_argument("--folds", type=int, default=S)
    p.add_argument("--gallery-fraction", type=float, default=S)
    p.add_argument("--failures", action="store_true", default=S, help="write failures.csv")
    p.add_argument("--failure-threshold", type=float, default=S)

    p = sub.add_parser("ensemble", help="fit grid-search linear ensembles, ten-fold")
    _add_global(p)
    p.add_argument("--scores", default=S)
    p.add_argument("--weight-step", type=float, default=S)
    p.add_argument("--method", choices=["auto", "exhaustive", "coordinate"], default=S)
    p.add_argument("--folds", type=int, default=S)
    p.add_argument("--max-sweeps", type=int, default=S)

    p = sub.add_parser("sweep", help="data-size or patch-count sweep on synthetic data")
    _add_global(p)
    p.add_argument("--kind", choices=["data", "patch"], default=S)
    p.add_argument("--sizes", default=S, help="e.g. 25x20,100x20")
    p.add_argument("--patch-counts", default=S, help="e.g. 1,4,7,9")
    _add_synth_flags(p)
    _add_train_flags(p)
    p.add_argument("--eval-identities", type=int, default=S)
    p.add_argument("--eval-faces", type=int, default=S)
    p.add_argument("--n-same", type=int, default=S)
    p.add_argument("--n-diff", type=int, default=S)
    p.add_argument("--folds", type=int, default=S)
    return parser


def _resolve(command: str, ns: argparse.Namespace) -> tuple[dict, Path, int]:
    given = vars(ns).copy()
    given.pop("command")
    params = dict(DEFAULTS[command])
    params["seed"] = 0
    if "config" in given:
        path = Path(given.pop("config"))
        if not path.is_file():
            raise CLIError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CLIError(f"invalid JSON in {path}: {exc}") from None
        if isinstance(doc, dict) and isinstance(doc.get("config"), dict):
            doc = doc["config"]
        if not isinstance(doc, dict):
            raise CLIError(f"{path}: config must be a JSON object")
        unknown = set(doc) - set(params) - {"command"}
        if unknown:
            raise CLIError(f"{path}: unknown parameter(s) {sorted(unknown)} for {command}")
        params.update({k: v for k, v in doc.items() if k != "command"})
    out = given.pop("out", None)
    threads = given.pop("threads", 1)
    params.update(given)
    if out is None:
        raise CLIError("--out is required")
    if threads < 1:
        raise CLIError("--threads must be >= 1")
    return params, Path(out), threads


def _require(params, *names):
    for n in names:
        if params.get(n) in (None, []):
            raise CLIError(f"--{n.replace('_', '-')} is required")


def _require_file(path, what):
    if not Path(path).is_file():
        raise CLIError(f"{what} not found: {path}")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _train_config(params) -> TrainConfig:
    return TrainConfig(**{k: params[k] for k in _TRAIN_DEFAULTS if k != "seed"}, seed=params["seed"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(params, out: Path, threads: int):
    cfg = SynthConfig(**{k: params[k] for k in _SYNTH_DEFAULTS if k != "seed"}, seed=params["seed"])
    ds = generate(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    pairs = sample_pairs(ds, params["pairs_same"], params["pairs_diff"], params["seed"])
    write_pairs(pairs, out / "pairs.txt")
    _write_json(out / "synth_report.json", {"command": "synth", "config": params,
                                            "n_records": len(ds), "n_pairs": len(pairs)})


def cmd_train(params, out: Path, threads: int):
    _require(params, "manifest")
    _require_file(params["manifest"], "manifest")
    ds = load_dataset(params["manifest"])
    patch_ids = _int_list(params["patches"]) or list(ds.patch_ids)
    config = _train_config(params)
    history: list[float] = []
    model = train(ds, patch_ids, config, history)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.defm")
    _write_json(out / "train_report.json", {
        "command": "train", "config": params, "patch_ids": patch_ids,
        "input_dim": model.input_dim, "output_dim": model.output_dim,
        "epoch_losses": history,
    })


def _load_eval_inputs(params):
    _require(params, "manifest", "pairs")
    _require_file(params["manifest"], "manifest")
    _require_file(params["pairs"], "pairs file")
    for m in params.get("models") or []:
        _require_file(m, "model file")
    return load_dataset(params["manifest"]), read_pairs(params["pairs"])


def cmd_score(params, out: Path, threads: int):
    _require(params, "models")
    ds, pairs = _load_eval_inputs(params)
    models = [load_model(m) for m in params["models"]]
    scoreset = score_pairs(models, ds, pairs, _int_list(params["patches"]))
    out.mkdir(parents=True, exist_ok=True)
    scoreset.to_csv(out / "scores.csv")


def _protocol_block(vectors, ds, pairs, folds, params):
    scores = score_pairs_from_vectors(vectors, ds, pairs)
    setup = build_identification_setup(vectors, ds, params["gallery_fraction"], params["seed"])
    metrics = table3_metrics(scores, pairs, folds, setup)
    curve = roc_curve(scores, pair_labels(pairs))
    metrics["auc"] = auc(curve)
    return scores, metrics, curve


def cmd_eval(params, out: Path, threads: int):
    ds, pairs = _load_eval_inputs(params)
    patch_ids = _int_list(params["patches"])
    folds = make_folds(pairs, params["folds"], params["seed"], stratified=True)
    out.mkdir(parents=True, exist_ok=True)
    report = {"command": "eval", "config": params}

    _, base_metrics, base_curve = _protocol_block(raw_cosine_vectors(ds, patch_ids), ds, pairs, folds, params)
    report["baseline_raw_cosine"] = base_metrics
    write_curve_csv(base_curve, out / "roc_baseline.csv")

    scores = None
    if params["models"]:
        models = [load_model(m) for m in params["models"]]
        vectors = embed_dataset(models, ds, patch_ids)
        scores, metrics, curve = _protocol_block(vectors, ds, pairs, folds, params)
        report["metrics"] = metrics
        write_curve_csv(curve, out / "roc.csv")
    else:
        report["metrics"] = base_metrics
        scores = score_pairs_from_vectors(raw_cosine_vectors(ds, patch_ids), ds, pairs)

    if params["failures"]:
        rows = []
        if params["failure_threshold"] is not None:
            thr = float(params["failure_threshold"])
            rows = [(c, thr) for c in failure_report(scores, pairs, thr)]
        else:
            tenfold = pairwise_accuracy_tenfold(scores, pairs, folds)
            for i, thr in enumerate(tenfold.thresholds):
                te = folds.test_indices(i)
                rows += [(c, thr) for c in failure_report(scores[te], [pairs[j] for j in te], thr)]
            rows.sort(key=lambda r: -abs(r[0].score - r[1]))
        lines = ["face_a,face_b,same,score,threshold,error_kind\n"]
        lines += [f"{c.pair.face_a},{c.pair.face_b},{int(c.pair.same)},{c.score!r},{t!r},{c.kind}\n"
                  for c, t in rows]
        (out / "failures.csv").write_text("".join(lines), encoding="utf-8")
        report["n_failures"] = len(rows)
    _write_json(out / "report.json", report)


def cmd_ensemble(params, out: Path, threads: int):
    _require(params, "scores")
    _require_file(params["scores"], "score file")
    scoreset = ScoreSet.from_csv(params["scores"])
    grid = GridConfig(params["weight_step"], params["method"], params["max_sweeps"], threads)
    n_points = math.comb(grid.n_steps + scoreset.n_models - 1, scoreset.n_models - 1)
    if grid.method == "auto" and n_points > EXHAUSTIVE_LIMIT:
        print("warning: full simplex enumeration is infeasible at this size; "
              "using coordinate-wise grid refinement", file=sys.stderr)
    folds = make_folds(scoreset.pairs, params["folds"], params["seed"], stratified=True)
    result = tenfold_ensemble(scoreset, folds, grid)
    singles = [pairwise_accuracy_tenfold(scoreset.column(m), scoreset.pairs, folds).mean_accuracy
               for m in range(scoreset.n_models)]
    avg = pairwise_accuracy_tenfold(scoreset.scores.mean(axis=1), scoreset.pairs, folds).mean_accuracy
    final = grid_search_ensemble(scoreset, None, grid)
    out.mkdir(parents=True, exist_ok=True)
    save_ensemble(final, out / "ensemble.json", {"config": params})
    _write_json(out / "tenfold_report.json", {
        "command": "ensemble", "config": params, **result.to_dict(),
        "single_model_accuracies": singles, "average_fusion_accuracy": avg,
    })


def cmd_sweep(params, out: Path, threads: int):
    base = SynthConfig(**{k: params[k] for k in _SYNTH_DEFAULTS if k not in ("seed", "identity_prefix")},
                       seed=params["seed"])
    protocol = ProtocolConfig(
        train=_train_config(params), eval_identities=params["eval_identities"],
        eval_faces=params["eval_faces"], n_same=params["n_same"], n_diff=params["n_diff"],
        k=params["folds"],
    )
    if params["kind"] == "data":
        result = data_sweep(base, _sizes(params["sizes"]), protocol, threads)
    else:
        result = patch_sweep(base, _int_list(params["patch_counts"]), protocol, threads)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "sweep.csv")
    _write_json(out / "sweep_config.json", {"command": "sweep", "config": params})


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "score": cmd_score,
    "eval": cmd_eval, "ensemble": cmd_ensemble, "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        parser.print_help()
        return 2
    try:
        params, out, threads = _resolve(ns.command, ns)
        COMMANDS[ns.command](params, out, threads)
    except (CLIError, DatasetError, EvaluationError, EmbeddingError, TrainingDiverged,
            ValueError, TypeError, OSError) as exc:
        msg = " ".join(str(exc).split())
        sys.stderr.write(f"error: {msg}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
