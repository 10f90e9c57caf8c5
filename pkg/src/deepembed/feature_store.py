"""Per-patch feature datasets: binary feature files, manifests, pair lists and folds.

A face is stored as one little-endian ``DEFV`` file holding one float32 vector
per patch::

    b"DEFV" | u32 version (=1) | u32 patch_count |
    patch_count x (u32 patch_id | u32 dim | dim x f32)

A manifest is a text file with one ``face_id,identity_id,path`` line per face;
relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DatasetError",
    "FaceRecord",
    "Dataset",
    "LabeledPair",
    "FoldSplit",
    "read_feature_file",
    "write_feature_file",
    "load_dataset",
    "save_dataset",
    "concat_patches",
    "sample_pairs",
    "read_pairs",
    "write_pairs",
    "make_folds",
]

FEATURE_MAGIC = b"DEFV"
FEATURE_VERSION = 1
_U32 = struct.Struct("<I")


class DatasetError(ValueError):
    """Malformed feature file, manifest, pair list or dataset."""


def _as_feature(values, where: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32).reshape(-1)
    if arr.size == 0:
        raise DatasetError(f"{where}: empty feature vector")
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{where}: non-finite value in feature vector")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FaceRecord:
    """One face: an identity label and an ordered map patch_id -> float32 vector."""

    face_id: str
    identity_id: str
    patches: Mapping[int, np.ndarray]

    def __post_init__(self):
        checked = {}
        for pid, vec in self.patches.items():
            if int(pid) < 0:
                raise DatasetError(f"face {self.face_id!r}: negative patch_id {pid}")
            checked[int(pid)] = _as_feature(vec, f"face {self.face_id!r} patch {pid}")
        if not checked:
            raise DatasetError(f"face {self.face_id!r}: no patches")
        object.__setattr__(self, "patches", MappingProxyType(checked))

    @property
    def patch_ids(self) -> tuple[int, ...]:
        return tuple(self.patches)

    def __eq__(self, other):
        if not isinstance(other, FaceRecord):
            return NotImplemented
        return (
            self.face_id == other.face_id
            and self.identity_id == other.identity_id
            and self.patch_ids == other.patch_ids
            and all(np.array_equal(self.patches[p], other.patches[p]) for p in self.patch_ids)
        )

    __hash__ = None


@dataclass(frozen=True)
class LabeledPair:
    face_a: str
    face_b: str
    same: bool

    def __post_init__(self):
        if self.face_a == self.face_b:
            raise DatasetError(f"pair compares face {self.face_a!r} with itself")


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_indices(self, i: int) -> np.ndarray:
        rest = [idx for j, f in enumerate(self.folds) if j != i for idx in f]
        return np.array(sorted(rest), dtype=np.intp)

    def test_indices(self, i: int) -> np.ndarray:
        return np.array(self.folds[i], dtype=np.intp)


class Dataset:
    """Immutable, validated collection of FaceRecords sharing one patch schema."""

    def __init__(self, records: Iterable[FaceRecord]):
        records = tuple(records)
        if not records:
            raise DatasetError("dataset has no records")
        schema = records[0].patch_ids
        dims = {p: records[0].patches[p].size for p in schema}
        position: dict[str, int] = {}
        identity_index: dict[str, list[int]] = {}
        for i, rec in enumerate(records):
            if rec.face_id in position:
                raise DatasetError(f"record {i}: duplicate face_id {rec.face_id!r}")
            if rec.patch_ids != schema:
                raise DatasetError(
                    f"record {i} ({rec.face_id!r}): patch ids {rec.patch_ids} != schema {schema}"
                )
            for p in schema:
                if rec.patches[p].size != dims[p]:
                    raise DatasetError(
                        f"record {i} ({rec.face_id!r}): patch {p} dim "
                        f"{rec.patches[p].size} != {dims[p]}"
                    )
            position[rec.face_id] = i
            identity_index.setdefault(rec.identity_id, []).append(i)
        self._records = records
        self._position = position
        self._identity_index = {k: tuple(v) for k, v in identity_index.items()}
        self._schema = schema
        self._dims = dims
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def records(self) -> tuple[FaceRecord, ...]:
        return self._records

    @property
    def identity_index(self) -> Mapping[str, tuple[int, ...]]:
        return MappingProxyType(self._identity_index)

    @property
    def patch_ids(self) -> tuple[int, ...]:
        return self._schema

    @property
    def patch_dims(self) -> Mapping[int, int]:
        return MappingProxyType(self._dims)

    @property
    def identities(self) -> list[str]:
        return list(self._identity_index)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.identity_id for r in self._records])

    def __len__(self):
        return len(self._records)

    def __getitem__(self, i: int) -> FaceRecord:
        return self._records[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self._records == other._records

    __hash__ = None

    def position(self, face_id: str) -> int:
        try:
            return self._position[face_id]
        except KeyError:
            raise DatasetError(f"unknown face_id {face_id!r}") from None

    def feature_dim(self, patch_ids: Sequence[int] | None = None) -> int:
        patch_ids = self._schema if patch_ids is None else patch_ids
        return sum(self._dims[p] for p in self._check_patches(patch_ids))

    def _check_patches(self, patch_ids) -> tuple[int, ...]:
        patch_ids = tuple(int(p) for p in patch_ids)
        if not patch_ids:
            raise DatasetError("no patch ids selected")
        missing = [p for p in patch_ids if p not in self._dims]
        if missing:
            raise DatasetError(f"unknown patch_id(s) {missing}; schema is {self._schema}")
        return patch_ids

    def matrix(self, patch_ids: Sequence[int] | None = None) -> np.ndarray:
        """Concatenated descriptors of every record as a float64 (n, D) array."""
        patch_ids = self._check_patches(self._schema if patch_ids is None else patch_ids)
        if patch_ids not in self._cache:
            mat = np.hstack(
                [np.stack([r.patches[p] for r in self._records]) for p in patch_ids]
            ).astype(np.float64)
            mat.flags.writeable = False
            self._cache[patch_ids] = mat
        return self._cache[patch_ids]

    def subset(self, positions: Iterable[int]) -> "Dataset":
        return Dataset(self._records[i] for i in positions)

    def select_identities(self, identity_ids: Iterable[str]) -> "Dataset":
        keep = set(identity_ids)
        return Dataset(r for r in self._records if r.identity_id in keep)

    def with_patches(self, patch_ids: Sequence[int]) -> "Dataset":
        patch_ids = self._check_patches(patch_ids)
        return Dataset(
            FaceRecord(r.face_id, r.identity_id, {p: r.patches[p] for p in patch_ids})
            for r in self._records
        )


# ---------------------------------------------------------------------------
# binary feature files


def write_feature_file(path, patches: Mapping[int, np.ndarray]) -> None:
    parts = [FEATURE_MAGIC, _U32.pack(FEATURE_VERSION), _U32.pack(len(patches))]
    for pid, vec in patches.items():
        vec = np.asarray(vec, dtype="<f4").reshape(-1)
        parts += [_U32.pack(int(pid)), _U32.pack(vec.size), vec.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_feature_file(path) -> dict[int, np.ndarray]:
    data = Path(path).read_bytes()
    where = str(path)
    if data[:4] != FEATURE_MAGIC:
        raise DatasetError(f"{where}: bad magic {data[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(data) < 12:
        raise DatasetError(f"{where}: truncated header")
    version, count = _U32.unpack_from(data, 4)[0], _U32.unpack_from(data, 8)[0]
    if version != FEATURE_VERSION:
        raise DatasetError(f"{where}: unsupported version {version}")
    off = 12
    patches: dict[int, np.ndarray] = {}
    for _ in range(count):
        if off + 8 > len(data):
            raise DatasetError(f"{where}: truncated patch header at byte {off}")
        pid, dim = _U32.unpack_from(data, off)[0], _U32.unpack_from(data, off + 4)[0]
        off += 8
        if dim == 0:
            raise DatasetError(f"{where}: patch {pid} has dim 0")
        if off + 4 * dim > len(data):
            raise DatasetError(f"{where}: truncated values for patch {pid}")
        if pid in patches:
            raise DatasetError(f"{where}: duplicate patch_id {pid}")
        patches[pid] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float32)
        off += 4 * dim
    if off != len(data):
        raise DatasetError(f"{where}: {len(data) - off} trailing bytes")
    return patches


# ---------------------------------------------------------------------------
# manifests


def load_dataset(manifest_path) -> Dataset:
    """Read a manifest and every feature file it lists, in manifest order."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    records = []
    seen: dict[str, int] = {}
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if len(fields) != 3:
                raise DatasetError(
                    f"{manifest_path}:{lineno}: expected face_id,identity_id,path; got {line!r}"
                )
            face_id, identity_id, rel = fields
            if face_id in seen:
                raise DatasetError(
                    f"{manifest_path}:{lineno}: duplicate face_id {face_id!r} "
                    f"(first at line {seen[face_id]})"
                )
            seen[face_id] = lineno
            fpath = Path(rel) if os.path.isabs(rel) else root / rel
            if not fpath.is_file():
                raise DatasetError(f"{manifest_path}:{lineno}: feature file not found: {fpath}")
            try:
                patches = read_feature_file(fpath)
                records.append(FaceRecord(face_id, identity_id, patches))
            except DatasetError as exc:
                raise DatasetError(f"{manifest_path}:{lineno}: {exc}") from None
    try:
        return Dataset(records)
    except DatasetError as exc:
        raise DatasetError(f"{manifest_path}: {exc}") from None


def save_dataset(dataset: Dataset, out_dir, manifest_name: str = "manifest.csv") -> Path:
    """Write ``out_dir/manifest_name`` plus ``out_dir/features/<n>.defv``; returns the manifest path."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, rec in enumerate(dataset.records):
        for s in (rec.face_id, rec.identity_id):
            if "," in s or "\n" in s:
                raise DatasetError(f"record {i}: id {s!r} cannot be stored in a manifest")
        rel = f"features/{i:06d}.defv"
        write_feature_file(out_dir / rel, rec.patches)
        lines.append(f"{rec.face_id},{rec.identity_id},{rel}\n")
    manifest = out_dir / manifest_name
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def concat_patches(record: FaceRecord, patch_ids: Sequence[int]) -> np.ndarray:
    """Selected patch vectors joined end to end, in the requested order."""
    missing = [p for p in patch_ids if p not in record.patches]
    if missing:
        raise DatasetError(f"face {record.face_id!r}: unknown patch_id(s) {missing}")
    if len(patch_ids) == 0:
        raise DatasetError("no patch ids selected")
    return np.concatenate([record.patches[p] for p in patch_ids])


# ---------------------------------------------------------------------------
# pairs and folds


def sample_pairs(dataset: Dataset, n_same: int, n_diff: int, seed: int) -> list[LabeledPair]:
    """Draw distinct genuine and impostor pairs; genuine pairs first, then impostors."""
    rng = np.random.default_rng(seed)
    idx = dataset.identity_index
    ids = list(idx)
    multi = [i for i in ids if len(idx[i]) >= 2]
    n_genuine = sum(len(idx[i]) * (len(idx[i]) - 1) // 2 for i in multi)
    n_impostor = (len(dataset) ** 2 - sum(len(v) ** 2 for v in idx.values())) // 2
    if n_same > n_genuine:
        raise DatasetError(f"requested {n_same} genuine pairs, only {n_genuine} exist")
    if n_diff > n_impostor:
        raise DatasetError(f"requested {n_diff} impostor pairs, only {n_impostor} exist")

    recs = dataset.records
    out: list[LabeledPair] = []
    seen: set[tuple[int, int]] = set()
    while len(out) < n_same:
        members = idx[multi[rng.integers(len(multi))]]
        a, b = rng.choice(len(members), size=2, replace=False)
        key = tuple(sorted((members[a], members[b])))
        if key not in seen:
            seen.add(key)
            out.append(LabeledPair(recs[key[0]].face_id, recs[key[1]].face_id, True))
    while len(out) < n_same + n_diff:
        ia, ib = rng.choice(len(ids), size=2, replace=False)
        ma, mb = idx[ids[ia]], idx[ids[ib]]
        key = tuple(sorted((ma[rng.integers(len(ma))], mb[rng.integers(len(mb))])))
        if key not in seen:
            seen.add(key)
            out.append(LabeledPair(recs[key[0]].face_id, recs[key[1]].face_id, False))
    return out


def write_pairs(pairs: Sequence[LabeledPair], path) -> None:
    Path(path).write_text(
        "".join(f"{p.face_a} {p.face_b} {int(p.same)}\n" for p in pairs), encoding="utf-8"
    )


def read_pairs(path) -> list[LabeledPair]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"pairs file not found: {path}")
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) != 3 or fields[2] not in ("0", "1"):
            raise DatasetError(f"{path}:{lineno}: expected 'face_a face_b 0|1', got {line!r}")
        try:
            pairs.append(LabeledPair(fields[0], fields[1], fields[2] == "1"))
        except DatasetError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return pairs


def make_folds(
    pairs: Sequence[LabeledPair], k: int = 10, seed: int = 0, stratified: bool = False
) -> FoldSplit:
    """Seeded shuffle, then contiguous slicing into k folds.

    With ``stratified`` the genuine and impostor indices are shuffled
    separately and interleaved before slicing. Fold sizes differ by at most one.
    """
    n = len(pairs)
    if k <= 0:
        raise DatasetError("k must be positive")
    if k > n:
        raise DatasetError(f"k={k} exceeds the number of pairs ({n})")
    rng = np.random.default_rng(seed)
    if stratified:
        same = np.array([i for i, p in enumerate(pairs) if p.same], dtype=np.intp)
        diff = np.array([i for i, p in enumerate(pairs) if not p.same], dtype=np.intp)
        same, diff = rng.permutation(same), rng.permutation(diff)
        # Round-robin dealing: each class lands in the folds as evenly as possible.
        buckets: list[list[int]] = [[] for _ in range(k)]
        for j, i in enumerate(np.concatenate([same, diff])):
            buckets[j % k].append(int(i))
        order = buckets
    else:
        perm = rng.permutation(n)
        bounds = np.linspace(0, n, k + 1).round().astype(int)
        order = [perm[bounds[j]: bounds[j + 1]].tolist() for j in range(k)]
    return FoldSplit(tuple(tuple(int(i) for i in f) for f in order))
