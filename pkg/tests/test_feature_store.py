import filecmp
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepembed.feature_store import (
    Dataset,
    DatasetError,
    FaceRecord,
    LabeledPair,
    concat_patches,
    load_dataset,
    make_folds,
    read_feature_file,
    read_pairs,
    sample_pairs,
    save_dataset,
    write_feature_file,
    write_pairs,
)
from deepembed.synth import SynthConfig, generate


def _write_manifest(tmp_path, rows):
    lines = []
    for face_id, ident, patches in rows:
        path = tmp_path / f"{face_id}.defv"
        write_feature_file(path, patches)
        lines.append(f"{face_id},{ident},{path.name}\n")
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("".join(lines))
    return manifest


class TestFeatureFile:
    def test_layout(self, tmp_path):
        path = tmp_path / "f.defv"
        write_feature_file(path, {3: np.array([1.0, 2.0], dtype=np.float32)})
        data = path.read_bytes()
        assert data[:4] == b"DEFV"
        assert struct.unpack("<III", data[4:16]) == (1, 1, 3)
        assert struct.unpack("<I", data[16:20]) == (2,)
        assert struct.unpack("<2f", data[20:]) == (1.0, 2.0)

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "f.defv"
        patches = {0: np.arange(4, dtype=np.float32), 7: np.float32([-1.5])}
        write_feature_file(path, patches)
        back = read_feature_file(path)
        assert list(back) == [0, 7]
        for k in patches:
            assert np.array_equal(back[k], patches[k])

    @pytest.mark.parametrize("mutate, message", [
        (lambda b: b"XXXX" + b[4:], "bad magic"),
        (lambda b: b[:-2], "truncated"),
        (lambda b: b + b"\0", "trailing"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    ])
    def test_corrupt_files_rejected(self, tmp_path, mutate, message):
        path = tmp_path / "f.defv"
        write_feature_file(path, {0: np.ones(3, dtype=np.float32)})
        path.write_bytes(mutate(path.read_bytes()))
        with pytest.raises(DatasetError, match=message):
            read_feature_file(path)


class TestLoadDataset:
    def test_two_faces_one_patch(self, tmp_path):
        manifest = _write_manifest(tmp_path, [
            ("a", "p1", {0: np.float32([1, 2, 3, 4])}),
            ("b", "p2", {0: np.float32([5, 6, 7, 8])}),
        ])
        ds = load_dataset(manifest)
        assert len(ds) == 2
        assert ds.patch_ids == (0,)
        assert ds.patch_dims[0] == 4
        assert [r.face_id for r in ds.records] == ["a", "b"]

    def test_duplicate_face_id(self, tmp_path):
        manifest = _write_manifest(tmp_path, [("a", "p1", {0: np.float32([1])})])
        manifest.write_text(manifest.read_text() * 2)
        with pytest.raises(DatasetError, match="duplicate face_id"):
            load_dataset(manifest)

    def test_dim_mismatch_reports_record(self, tmp_path):
        manifest = _write_manifest(tmp_path, [
            ("a", "p1", {0: np.float32([1, 2])}),
            ("b", "p1", {0: np.float32([1, 2, 3])}),
        ])
        with pytest.raises(DatasetError, match=r"record 1 \('b'\).*dim"):
            load_dataset(manifest)

    def test_non_finite_reports_line(self, tmp_path):
        manifest = _write_manifest(tmp_path, [
            ("a", "p1", {0: np.float32([1, 2])}),
            ("b", "p1", {0: np.float32([np.nan, 2])}),
        ])
        with pytest.raises(DatasetError, match=r"manifest.csv:2.*non-finite"):
            load_dataset(manifest)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_dataset(tmp_path / "nope.csv")

    def test_synthetic_roundtrip_is_bit_identical(self, tmp_path):
        ds = generate(SynthConfig(n_identities=100, faces_per_identity=5, n_patches=3, patch_dim=4, seed=5))
        m1 = save_dataset(ds, tmp_path / "one")
        back = load_dataset(m1)
        assert back == ds
        m2 = save_dataset(back, tmp_path / "two")
        assert m1.read_bytes() == m2.read_bytes()
        for i in range(len(ds)):
            rel = f"features/{i:06d}.defv"
            assert filecmp.cmp(tmp_path / "one" / rel, tmp_path / "two" / rel, shallow=False)


class TestDataset:
    def test_identity_index(self, small_dataset):
        idx = small_dataset.identity_index
        assert len(idx) == 10
        for ident, rows in idx.items():
            assert all(small_dataset[r].identity_id == ident for r in rows)

    def test_schema_mismatch(self):
        a = FaceRecord("a", "x", {0: [1.0]})
        b = FaceRecord("b", "x", {1: [1.0]})
        with pytest.raises(DatasetError, match="schema"):
            Dataset([a, b])

    def test_records_are_read_only(self, small_dataset):
        with pytest.raises(ValueError):
            small_dataset[0].patches[0][0] = 1.0
        with pytest.raises(TypeError):
            small_dataset[0].patches[5] = np.zeros(8)

    def test_matrix_matches_concat(self, small_dataset):
        X = small_dataset.matrix([1, 0])
        for i, rec in enumerate(small_dataset.records):
            np.testing.assert_array_equal(X[i], concat_patches(rec, [1, 0]))


class TestConcatPatches:
    def test_single_patch_unchanged(self):
        rec = FaceRecord("f", "i", {0: [1.0, 2.0]})
        np.testing.assert_array_equal(concat_patches(rec, [0]), rec.patches[0])

    def test_two_patches(self):
        rec = FaceRecord("f", "i", {0: [1, 2], 1: [3, 4, 5]})
        np.testing.assert_array_equal(concat_patches(rec, [0, 1]), [1, 2, 3, 4, 5])

    def test_nine_patches_offsets(self, rng):
        patches = {p: rng.standard_normal(64).astype(np.float32) for p in range(9)}
        rec = FaceRecord("f", "i", patches)
        order = [4, 0, 8, 2, 6, 1, 7, 3, 5]
        v = concat_patches(rec, order)
        assert v.size == 576
        for rank, p in enumerate(order):
            for j in range(64):
                assert v[64 * rank + j] == patches[p][j]

    def test_unknown_patch(self):
        rec = FaceRecord("f", "i", {0: [1.0]})
        with pytest.raises(DatasetError, match="unknown patch_id"):
            concat_patches(rec, [0, 3])

    @given(st.permutations(range(5)), st.integers(0, 5))
    def test_concat_is_associative(self, order, cut):
        rec = FaceRecord("f", "i", {p: np.arange(p + 1, dtype=np.float32) + 10 * p for p in range(5)})
        s1, s2 = list(order[:cut]), list(order[cut:])
        parts = [concat_patches(rec, s) for s in (s1, s2) if s]
        np.testing.assert_array_equal(concat_patches(rec, list(order)), np.concatenate(parts))


def _pairs(n_same, n_diff):
    return [LabeledPair(f"a{i}", f"b{i}", True) for i in range(n_same)] + [
        LabeledPair(f"c{i}", f"d{i}", False) for i in range(n_diff)
    ]


class TestFolds:
    def test_6000_pairs_ten_folds(self):
        split = make_folds(_pairs(3000, 3000), k=10, seed=0)
        assert [len(f) for f in split.folds] == [600] * 10

    def test_k1(self):
        split = make_folds(_pairs(3, 4), k=1, seed=0)
        assert sorted(split.folds[0]) == list(range(7))

    def test_stratified_counts(self):
        pairs = _pairs(50, 50)
        split = make_folds(pairs, k=5, seed=3, stratified=True)
        for f in split.folds:
            same = sum(pairs[i].same for i in f)
            assert (same, len(f) - same) == (10, 10)

    @pytest.mark.parametrize("k", [0, 8])
    def test_bad_k(self, k):
        with pytest.raises(DatasetError):
            make_folds(_pairs(3, 4), k=k, seed=0)

    @given(st.integers(1, 60), st.integers(0, 60), st.integers(1, 12), st.integers(0, 2**31), st.booleans())
    @settings(max_examples=80)
    def test_partition_property(self, n_same, n_diff, k, seed, stratified):
        pairs = _pairs(n_same, n_diff)
        k = min(k, len(pairs))
        split = make_folds(pairs, k, seed, stratified)
        flat = sorted(i for f in split.folds for i in f)
        assert flat == list(range(len(pairs)))
        sizes = [len(f) for f in split.folds]
        assert max(sizes) - min(sizes) <= 1
        if stratified:
            same = [sum(pairs[i].same for i in f) for f in split.folds]
            assert max(same) - min(same) <= 1
        assert make_folds(pairs, k, seed, stratified) == split


class TestPairs:
    def test_sample_pairs_labels(self, medium_dataset):
        pairs = sample_pairs(medium_dataset, 40, 60, seed=1)
        assert sum(p.same for p in pairs) == 40
        keys = {tuple(sorted((p.face_a, p.face_b))) for p in pairs}
        assert len(keys) == 100
        for p in pairs:
            ia = medium_dataset[medium_dataset.position(p.face_a)].identity_id
            ib = medium_dataset[medium_dataset.position(p.face_b)].identity_id
            assert (ia == ib) == p.same

    def test_too_many_pairs(self, small_dataset):
        with pytest.raises(DatasetError, match="genuine"):
            sample_pairs(small_dataset, 31, 0, seed=0)

    def test_pairs_file_roundtrip(self, tmp_path):
        pairs = _pairs(2, 3)
        write_pairs(pairs, tmp_path / "pairs.txt")
        assert (tmp_path / "pairs.txt").read_text().splitlines()[0] == "a0 b0 1"
        assert read_pairs(tmp_path / "pairs.txt") == pairs

    def test_bad_pairs_line(self, tmp_path):
        (tmp_path / "p.txt").write_text("a b 2\n")
        with pytest.raises(DatasetError, match="p.txt:1"):
            read_pairs(tmp_path / "p.txt")

    def test_self_pair_rejected(self):
        with pytest.raises(DatasetError):
            LabeledPair("x", "x", True)
