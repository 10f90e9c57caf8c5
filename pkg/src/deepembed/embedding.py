"""Triplet-loss metric learning of a low-dimensional, unit-normalized embedding.

The embedding map is affine (optionally with one ReLU hidden layer) followed by
L2 normalization. It is trained with plain minibatch SGD on the squared-L2
hinge triplet loss::

    max(0, |e_a - e_p|^2 - |e_a - e_n|^2 + margin)

Similarity between two faces is the inner product of their unit embeddings,
so scores lie in [-1, 1] and relate to distance by ``d^2 = 2 - 2 s``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .feature_store import Dataset, DatasetError

__all__ = [
    "EmbeddingError",
    "TrainingDiverged",
    "EmbeddingModel",
    "Triplet",
    "TrainConfig",
    "embed",
    "similarity",
    "triplet_loss",
    "triplet_grad",
    "sample_triplets",
    "mean_triplet_loss",
    "init_model",
    "train",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

MODEL_MAGIC = b"DEFM"


class EmbeddingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _f32(a) -> np.ndarray:
    """Round to float32 precision but keep float64 storage."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(eq=False)
class EmbeddingModel:
    weights: np.ndarray
    bias: np.ndarray
    normalize: bool = True
    hidden_weights: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if (self.hidden_weights is None) != (self.hidden_bias is None):
            raise EmbeddingError("hidden_weights and hidden_bias must be given together")
        if self.hidden_weights is not None:
            self.hidden_weights = np.array(self.hidden_weights, dtype=np.float64, ndmin=2)
            self.hidden_bias = np.array(self.hidden_bias, dtype=np.float64).reshape(-1)
            if self.hidden_bias.size != self.hidden_weights.shape[0]:
                raise EmbeddingError("hidden bias length does not match hidden weights")
            if self.weights.shape[1] != self.hidden_weights.shape[0]:
                raise EmbeddingError("output weights do not consume the hidden layer")
        if self.bias.size != self.weights.shape[0]:
            raise EmbeddingError(
                f"bias length {self.bias.size} != output_dim {self.weights.shape[0]}"
            )
        for name, arr in self._params().items():
            if not np.all(np.isfinite(arr)):
                raise EmbeddingError(f"non-finite entries in {name}")

    @property
    def input_dim(self) -> int:
        w = self.weights if self.hidden_weights is None else self.hidden_weights
        return w.shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def hidden_dim(self) -> int:
        return 0 if self.hidden_weights is None else self.hidden_weights.shape[0]

    def _params(self) -> dict[str, np.ndarray]:
        params = {"weights": self.weights, "bias": self.bias}
        if self.hidden_weights is not None:
            params["hidden_weights"] = self.hidden_weights
            params["hidden_bias"] = self.hidden_bias
        return params

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            self.weights.copy(),
            self.bias.copy(),
            self.normalize,
            None if self.hidden_weights is None else self.hidden_weights.copy(),
            None if self.hidden_bias is None else self.hidden_bias.copy(),
        )

    def __eq__(self, other):
        if not isinstance(other, EmbeddingModel):
            return NotImplemented
        mine, theirs = self._params(), other._params()
        return (
            self.normalize == other.normalize
            and mine.keys() == theirs.keys()
            and all(np.array_equal(mine[k], theirs[k]) for k in mine)
        )

    __hash__ = None

    # Works on (n, D) batches; returns pre-normalization outputs and the hidden cache.
    def _affine(self, X: np.ndarray):
        if self.hidden_weights is None:
            return X @ self.weights.T + self.bias, None
        Z = X @ self.hidden_weights.T + self.hidden_bias
        H = np.maximum(Z, 0.0)
        return H @ self.weights.T + self.bias, (Z, H)


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class TrainConfig:
    output_dim: int = 128
    margin: float = 0.2
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 64
    triplets_per_epoch: int = 4096
    sampling: str = "semi_hard"
    seed: int = 0
    init_scale: float = 0.05
    hidden_dim: int = 0
    normalize: bool = True

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "triplets_per_epoch", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim < 0:
            raise ValueError("hidden_dim must be >= 0")
        if self.sampling not in ("uniform", "semi_hard"):
            raise ValueError(f"unknown sampling strategy {self.sampling!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# forward maps


def _normalize_rows(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(Y, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise EmbeddingError("cannot normalize an exactly-zero embedding")
    return Y / norms, norms


def embed(model: EmbeddingModel, x) -> np.ndarray:
    """Embed one feature vector, or each row of a 2-D batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise EmbeddingError(f"input dim {X.shape[-1]} != model input_dim {model.input_dim}")
    Y, _ = model._affine(X)
    if model.normalize:
        Y, _ = _normalize_rows(Y)
    if not np.all(np.isfinite(Y)):
        raise EmbeddingError("non-finite embedding")
    return Y[0] if single else Y


def similarity(model: EmbeddingModel, x, y) -> float:
    """Inner product of the two unit embeddings, clipped to [-1, 1]."""
    if not model.normalize:
        raise EmbeddingError("similarity is defined only for normalizing models")
    s = float(np.dot(embed(model, x), embed(model, y)))
    return min(1.0, max(-1.0, s))


# ---------------------------------------------------------------------------
# loss


def triplet_loss(e_a, e_p, e_n, margin: float) -> float:
    e_a, e_p, e_n = (np.asarray(v, dtype=np.float64) for v in (e_a, e_p, e_n))
    if not e_a.shape == e_p.shape == e_n.shape:
        raise EmbeddingError("triplet embeddings must share one dimension")
    d_ap = np.sum((e_a - e_p) ** 2)
    d_an = np.sum((e_a - e_n) ** 2)
    return float(max(0.0, d_ap - d_an + margin))


def triplet_grad(e_a, e_p, e_n, margin: float):
    """Subgradient of ``triplet_loss`` w.r.t. (e_a, e_p, e_n); the active branch at the hinge."""
    e_a, e_p, e_n = (np.asarray(v, dtype=np.float64) for v in (e_a, e_p, e_n))
    if not e_a.shape == e_p.shape == e_n.shape:
        raise EmbeddingError("triplet embeddings must share one dimension")
    if np.sum((e_a - e_p) ** 2) - np.sum((e_a - e_n) ** 2) + margin < 0:
        zero = np.zeros_like(e_a)
        return zero, zero.copy(), zero.copy()
    return 2.0 * (e_n - e_p), -2.0 * (e_a - e_p), 2.0 * (e_a - e_n)


def _batch_loss_grad(Ea, Ep, En, margin):
    d_ap = np.sum((Ea - Ep) ** 2, axis=1)
    d_an = np.sum((Ea - En) ** 2, axis=1)
    raw = d_ap - d_an + margin
    losses = np.maximum(raw, 0.0)
    active = (raw >= 0)[:, None]
    return losses, active * 2.0 * (En - Ep), active * -2.0 * (Ea - Ep), active * 2.0 * (Ea - En)


# ---------------------------------------------------------------------------
# sampling


def _label_codes(dataset: Dataset) -> np.ndarray:
    codes = np.empty(len(dataset), dtype=np.intp)
    for code, positions in enumerate(dataset.identity_index.values()):
        codes[list(positions)] = code
    return codes


def sample_triplets(
    dataset: Dataset,
    patch_ids: Sequence[int] | None,
    strategy: str,
    count: int,
    seed: int,
    model: EmbeddingModel | None = None,
    margin: float = 0.2,
) -> list[Triplet]:
    """Draw ``count`` valid triplets.

    Anchor identities are drawn uniformly among identities with at least two
    faces, then anchor and positive uniformly without replacement. ``uniform``
    takes any face of another identity as negative. ``semi_hard`` picks,
    uniformly, a negative with ``d_ap <= d_an < d_ap + margin`` under ``model``
    and falls back to the nearest negative when none exists.
    """
    index = dataset.identity_index
    if len(index) < 2:
        raise DatasetError("triplet sampling needs at least 2 identities")
    multi = [tuple(v) for v in index.values() if len(v) >= 2]
    if not multi:
        raise DatasetError("triplet sampling needs an identity with at least 2 faces")
    if strategy not in ("uniform", "semi_hard"):
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    if strategy == "semi_hard" and model is None:
        raise ValueError("semi_hard sampling requires a model")
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return []

    rng = np.random.default_rng(seed)
    codes = _label_codes(dataset)
    n = len(dataset)

    anchors = np.empty(count, dtype=np.intp)
    positives = np.empty(count, dtype=np.intp)
    which = rng.integers(len(multi), size=count)
    for t in range(count):
        members = multi[which[t]]
        a, p = rng.choice(len(members), size=2, replace=False)
        anchors[t], positives[t] = members[a], members[p]

    if strategy == "uniform":
        negatives = rng.integers(n, size=count)
        bad = codes[negatives] == codes[anchors]
        while np.any(bad):
            negatives[bad] = rng.integers(n, size=int(bad.sum()))
            bad = codes[negatives] == codes[anchors]
    else:
        E = embed(model, dataset.matrix(patch_ids))
        sq = np.sum(E * E, axis=1)
        negatives = np.empty(count, dtype=np.intp)
        tie_break = rng.random(count)
        chunk = max(1, 2**22 // max(n, 1))
        for lo in range(0, count, chunk):
            a = anchors[lo: lo + chunk]
            d_all = np.maximum(sq[a, None] + sq[None, :] - 2.0 * E[a] @ E.T, 0.0)
            d_ap = d_all[np.arange(a.size), positives[lo: lo + chunk]]
            is_neg = codes[None, :] != codes[a, None]
            semi = is_neg & (d_all >= d_ap[:, None]) & (d_all < d_ap[:, None] + margin)
            for r in range(a.size):
                cand = np.flatnonzero(semi[r])
                if cand.size:
                    negatives[lo + r] = cand[int(tie_break[lo + r] * cand.size)]
                else:
                    negatives[lo + r] = np.flatnonzero(is_neg[r])[
                        np.argmin(d_all[r][is_neg[r]])
                    ]
    return [Triplet(int(a), int(p), int(q)) for a, p, q in zip(anchors, positives, negatives)]


def mean_triplet_loss(
    model: EmbeddingModel, X: np.ndarray, triplets: Sequence[Triplet], margin: float
) -> float:
    if not triplets:
        return 0.0
    idx = np.array([(t.anchor, t.positive, t.negative) for t in triplets])
    E = embed(model, X)
    losses, *_ = _batch_loss_grad(E[idx[:, 0]], E[idx[:, 1]], E[idx[:, 2]], margin)
    return float(losses.mean())


# ---------------------------------------------------------------------------
# training


def init_model(input_dim: int, config: TrainConfig) -> EmbeddingModel:
    """Seed-determined uniform initialization in [-init_scale, init_scale], zero biases."""
    rng = np.random.default_rng(config.seed)
    s = config.init_scale
    if config.hidden_dim:
        hw = _f32(rng.uniform(-s, s, size=(config.hidden_dim, input_dim)))
        w = _f32(rng.uniform(-s, s, size=(config.output_dim, config.hidden_dim)))
        return EmbeddingModel(
            w, np.zeros(config.output_dim), config.normalize, hw, np.zeros(config.hidden_dim)
        )
    w = _f32(rng.uniform(-s, s, size=(config.output_dim, input_dim)))
    return EmbeddingModel(w, np.zeros(config.output_dim), config.normalize)


def _loss_and_param_grads(model: EmbeddingModel, Xa, Xp, Xn, margin):
    """Mean triplet loss over a batch and its gradients w.r.t. every parameter."""
    B = Xa.shape[0]
    X = np.vstack([Xa, Xp, Xn])
    Y, cache = model._affine(X)
    if model.normalize:
        norms = np.linalg.norm(Y, axis=1, keepdims=True)
        # a row with all ReLU units dead maps to zero; it contributes no gradient
        live = norms > 0
        norms = np.where(live, norms, 1.0)
        E = Y / norms
    else:
        E = Y
    losses, ga, gp, gn = _batch_loss_grad(E[:B], E[B: 2 * B], E[2 * B:], margin)
    G = np.vstack([ga, gp, gn]) / B
    if model.normalize:
        dY = live * (G - E * np.sum(E * G, axis=1, keepdims=True)) / norms
    else:
        dY = G
    grads = {"bias": dY.sum(axis=0)}
    if cache is None:
        grads["weights"] = dY.T @ X
    else:
        Z, H = cache
        grads["weights"] = dY.T @ H
        dZ = (dY @ model.weights) * (Z > 0)
        grads["hidden_weights"] = dZ.T @ X
        grads["hidden_bias"] = dZ.sum(axis=0)
    return float(losses.mean()), grads


def train(
    dataset: Dataset,
    patch_ids: Sequence[int] | None,
    config: TrainConfig,
    history: list | None = None,
) -> EmbeddingModel:
    """Fit an embedding with minibatch SGD on the mean triplet loss.

    Each epoch draws ``triplets_per_epoch`` triplets (semi-hard mining uses the
    model as it stands at the start of the epoch) and takes
    ``ceil(triplets_per_epoch / batch_size)`` SGD steps. Mean epoch losses are
    appended to ``history`` when given.
    """
    X = dataset.matrix(patch_ids)
    model = init_model(X.shape[1], config)
    if config.epochs == 0:
        return model
    rng = np.random.default_rng([config.seed, 1])
    lr = config.learning_rate
    for epoch in range(config.epochs):
        triplets = sample_triplets(
            dataset,
            patch_ids,
            config.sampling,
            config.triplets_per_epoch,
            int(rng.integers(2**63 - 1)),
            model=model if config.sampling == "semi_hard" else None,
            margin=config.margin,
        )
        idx = np.array([(t.anchor, t.positive, t.negative) for t in triplets], dtype=np.intp)
        epoch_loss = 0.0
        for lo in range(0, len(idx), config.batch_size):
            b = idx[lo: lo + config.batch_size]
            loss, grads = _loss_and_param_grads(model, X[b[:, 0]], X[b[:, 1]], X[b[:, 2]], config.margin)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(
                    f"non-finite loss/gradient at epoch {epoch}, batch {lo // config.batch_size}; "
                    f"try a smaller learning_rate (currently {lr})"
                )
            for name, g in grads.items():
                getattr(model, name)[...] -= lr * g
            if not all(np.all(np.isfinite(p)) for p in model._params().values()):
                raise TrainingDiverged(
                    f"parameters overflowed at epoch {epoch}, batch {lo // config.batch_size}; "
                    f"try a smaller learning_rate (currently {lr})"
                )
            epoch_loss += loss * len(b)
        epoch_loss /= len(idx)
        if history is not None:
            history.append(epoch_loss)
        log.debug("epoch %d mean triplet loss %.6f", epoch, epoch_loss)

    with np.errstate(over="ignore"):
        for name in model._params():
            setattr(model, name, _f32(getattr(model, name)))
    if not all(np.all(np.isfinite(p)) for p in model._params().values()):
        raise TrainingDiverged("trained parameters exceed float32 range")
    return model


# ---------------------------------------------------------------------------
# model files
#
# b"DEFM" | u32 version | u32 input_dim | u32 output_dim | u8 normalize |
#   v1: weights (output_dim x input_dim f32, row-major) | bias (output_dim f32)
#   v2: u32 hidden_dim | hidden weights (hidden x input) | hidden bias |
#       weights (output x hidden) | bias


def save_model(model: EmbeddingModel, path) -> None:
    version = 1 if model.hidden_weights is None else 2
    parts = [
        MODEL_MAGIC,
        struct.pack("<IIIB", version, model.input_dim, model.output_dim, int(model.normalize)),
    ]
    if version == 2:
        parts += [
            struct.pack("<I", model.hidden_dim),
            model.hidden_weights.astype("<f4").tobytes(),
            model.hidden_bias.astype("<f4").tobytes(),
        ]
    parts += [model.weights.astype("<f4").tobytes(), model.bias.astype("<f4").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> EmbeddingModel:
    path = Path(path)
    if not path.is_file():
        raise EmbeddingError(f"model file not found: {path}")
    data = path.read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise EmbeddingError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, d_in, d_out, flag = struct.unpack_from("<IIIB", data, 4)
        off = 17
        reader = _Reader(data, off)
        if version == 1:
            w = reader.take(d_out * d_in).reshape(d_out, d_in)
            b = reader.take(d_out)
            hw = hb = None
        elif version == 2:
            (hidden,) = struct.unpack_from("<I", data, reader.off)
            reader.off += 4
            hw = reader.take(hidden * d_in).reshape(hidden, d_in)
            hb = reader.take(hidden)
            w = reader.take(d_out * hidden).reshape(d_out, hidden)
            b = reader.take(d_out)
        else:
            raise EmbeddingError(f"{path}: unsupported model version {version}")
    except struct.error as exc:
        raise EmbeddingError(f"{path}: truncated model file") from exc
    if reader.off != len(data):
        raise EmbeddingError(f"{path}: {len(data) - reader.off} trailing bytes")
    return EmbeddingModel(w, b, bool(flag), hw, hb)


class _Reader:
    def __init__(self, data: bytes, off: int):
        self.data, self.off = data, off

    def take(self, n: int) -> np.ndarray:
        if self.off + 4 * n > len(self.data):
            raise struct.error("truncated")
        arr = np.frombuffer(self.data, dtype="<f4", count=n, offset=self.off).astype(np.float64)
        self.off += 4 * n
        return arr
