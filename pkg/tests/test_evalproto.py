import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from deepembed.embedding import init_model, TrainConfig, similarity
from deepembed.evalproto import (
    EvaluationError,
    IdentificationSetup,
    ScoreSet,
    auc,
    best_threshold,
    build_identification_setup,
    cmc_curve,
    dir_at_far,
    embed_dataset,
    failure_report,
    pairwise_accuracy_tenfold,
    rank1_identification,
    read_curve_csv,
    roc_curve,
    score_pairs,
    score_pairs_from_vectors,
    tar_at_far,
    write_curve_csv,
)
from deepembed.feature_store import FaceRecord, Dataset, LabeledPair, make_folds, sample_pairs


def _pairs(labels):
    return [LabeledPair(f"a{i}", f"b{i}", bool(l)) for i, l in enumerate(labels)]


def _unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# scoring


class TestScorePairs:
    def test_identical_faces_score_one(self, rng):
        v = rng.standard_normal(6).astype(np.float32)
        ds = Dataset([FaceRecord("x", "p", {0: v}), FaceRecord("y", "p", {0: v})])
        models = [init_model(6, TrainConfig(output_dim=3, seed=s)) for s in range(3)]
        ss = score_pairs(models, ds, [LabeledPair("x", "y", True)])
        np.testing.assert_allclose(ss.scores, 1.0, atol=1e-12)

    def test_single_pair_equals_similarity(self, small_dataset):
        m = init_model(small_dataset.feature_dim(), TrainConfig(output_dim=4))
        a, b = small_dataset[0], small_dataset[5]
        ss = score_pairs([m], small_dataset, [LabeledPair(a.face_id, b.face_id, False)])
        assert ss.scores.shape == (1, 1)
        X = small_dataset.matrix()
        assert ss.scores[0, 0] == pytest.approx(similarity(m, X[0], X[5]), abs=1e-14)

    def test_columns_match_individual_models(self, medium_dataset):
        pairs = sample_pairs(medium_dataset, 100, 100, seed=0)
        models = [init_model(medium_dataset.feature_dim(), TrainConfig(output_dim=8, seed=s)) for s in range(10)]
        ss = score_pairs(models, medium_dataset, pairs)
        assert ss.scores.shape == (200, 10)
        for m, model in enumerate(models):
            np.testing.assert_array_equal(ss.column(m), score_pairs([model], medium_dataset, pairs).column(0))

    def test_unknown_face(self, small_dataset):
        m = init_model(small_dataset.feature_dim(), TrainConfig(output_dim=4))
        with pytest.raises(EvaluationError, match="unknown face_id"):
            score_pairs([m], small_dataset, [LabeledPair("nobody", small_dataset[0].face_id, False)])

    def test_fused_vectors_average_similarities(self, medium_dataset):
        pairs = sample_pairs(medium_dataset, 30, 30, seed=2)
        models = [init_model(medium_dataset.feature_dim(), TrainConfig(output_dim=8, seed=s)) for s in range(3)]
        fused = score_pairs_from_vectors(embed_dataset(models, medium_dataset), medium_dataset, pairs)
        np.testing.assert_allclose(fused, score_pairs(models, medium_dataset, pairs).scores.mean(axis=1),
                                   atol=1e-14)

    def test_csv_roundtrip(self, tmp_path, rng):
        ss = ScoreSet(_pairs([1, 0, 1]), rng.uniform(-1, 1, (3, 2)))
        ss.to_csv(tmp_path / "s.csv")
        back = ScoreSet.from_csv(tmp_path / "s.csv")
        assert back.pairs == ss.pairs
        np.testing.assert_array_equal(back.scores, ss.scores)


# ---------------------------------------------------------------------------
# ROC / TAR


class TestRoc:
    def test_perfect_separation(self):
        curve = roc_curve([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
        assert (0.0, 1.0) in list(zip(curve.far.tolist(), curve.tar.tolist()))
        assert auc(curve) == 1.0

    def test_inverted_labels(self, rng):
        s = np.round(rng.uniform(-1, 1, 50), 1)
        l = rng.random(50) < 0.5
        assert auc(roc_curve(s, ~l)) == pytest.approx(1 - auc(roc_curve(s, l)), abs=1e-12)

    def test_handwritten_against_oracle(self):
        s = [0.9, 0.3, 0.5, 0.5, -0.2, 0.7, 0.1, 0.5, -0.8, 0.3]
        l = [1, 0, 1, 0, 0, 1, 1, 1, 0, 0]
        curve = roc_curve(s, l)
        assert curve.points == oracles.roc_points(s, [bool(x) for x in l])
        assert curve.points[0][1:] == (0.0, 0.0)
        assert curve.points[-1][1:] == (1.0, 1.0)

    def test_requires_both_classes(self):
        with pytest.raises(EvaluationError):
            roc_curve([0.1, 0.2], [1, 1])

    @given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=40))
    def test_monotone_and_shift_invariant(self, data):
        s = np.array([d[0] for d in data], dtype=float) / 5
        l = np.array([d[1] for d in data])
        if l.all() or not l.any():
            return
        curve = roc_curve(s, l)
        assert np.all(np.diff(curve.far) >= 0) and np.all(np.diff(curve.tar) >= 0)
        assert np.all(np.diff(curve.thresholds) < 0)
        shifted = roc_curve(s + 3.0, l)
        np.testing.assert_array_equal(shifted.far, curve.far)
        np.testing.assert_array_equal(shifted.tar, curve.tar)
        assert auc(curve) == pytest.approx(oracles.auc_pairs(s.tolist(), l.tolist()), abs=1e-12)
        assert auc(roc_curve(np.exp(s), l)) == pytest.approx(auc(curve), abs=1e-12)

    def test_curve_csv(self, tmp_path):
        curve = roc_curve([0.3, 0.1, 0.2], [1, 0, 1])
        write_curve_csv(curve, tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "threshold,far,tar"
        back = read_curve_csv(tmp_path / "c.csv")
        assert back.points == curve.points


class TestTarAtFar:
    def test_separated(self):
        s = np.r_[np.linspace(0.5, 1, 50), np.linspace(-1, 0.4, 2000)]
        l = np.r_[np.ones(50, bool), np.zeros(2000, bool)]
        tar, thr = tar_at_far(s, l, 0.001)
        assert tar == 1.0 and 0.39 < thr <= 0.5

    def test_accept_all(self, rng):
        s = rng.standard_normal(30)
        l = np.arange(30) % 2 == 0
        tar, thr = tar_at_far(s, l, 1.0)
        assert tar == 1.0 and thr == s.min()

    def test_unreachable_target(self):
        # the top score is a negative: FAR 0 cannot be met by any observed threshold
        tar, thr = tar_at_far([0.9, 0.5, 0.1], [0, 1, 0], 0.0)
        assert (tar, thr) == (0.0, math.inf)

    def test_thousand_scores_against_oracle(self, rng):
        s = np.round(rng.standard_normal(1000), 2)
        l = rng.random(1000) < 0.3
        s[l] += 1.0
        for far in (0.0, 0.001, 0.01, 0.1, 0.5):
            assert tar_at_far(s, l, far) == oracles.tar_at_far(s.tolist(), l.tolist(), far)

    @given(st.lists(st.tuples(st.integers(-9, 9), st.booleans()), min_size=2, max_size=60),
           st.floats(0, 1), st.floats(0, 1))
    def test_nondecreasing_in_far(self, data, f1, f2):
        s = np.array([d[0] for d in data], dtype=float)
        l = np.array([d[1] for d in data])
        if l.all() or not l.any():
            return
        lo, hi = sorted((f1, f2))
        assert tar_at_far(s, l, lo)[0] <= tar_at_far(s, l, hi)[0]


# ---------------------------------------------------------------------------
# ten-fold


class TestTenfold:
    def test_separable(self, rng):
        l = np.arange(100) % 2 == 0
        s = np.where(l, 1.0, -1.0) + 0.1 * rng.random(100)
        pairs = _pairs(l)
        res = pairwise_accuracy_tenfold(s, pairs, make_folds(pairs, 10, 0, True))
        assert res.mean_accuracy == 1.0

    def test_uninformative(self):
        l = np.arange(100) % 2 == 0
        pairs = _pairs(l)
        res = pairwise_accuracy_tenfold(np.zeros(100), pairs, make_folds(pairs, 10, 0, True))
        assert res.mean_accuracy == 0.5

    def test_thresholds_match_exhaustive_sweep(self, rng):
        l = rng.random(200) < 0.5
        s = np.round(rng.standard_normal(200) + l, 1)
        pairs = _pairs(l)
        folds = make_folds(pairs, 10, 4)
        res = pairwise_accuracy_tenfold(s, pairs, folds)
        accs, thrs = oracles.tenfold(s.tolist(), l.tolist(), [list(f) for f in folds.folds])
        assert list(res.thresholds) == thrs
        assert list(res.accuracies) == accs

    def test_mean_is_mean(self, rng):
        l = rng.random(97) < 0.5
        s = rng.standard_normal(97) + l
        pairs = _pairs(l)
        res = pairwise_accuracy_tenfold(s, pairs, make_folds(pairs, 10, 1))
        assert res.mean_accuracy == math.fsum(res.accuracies) / 10

    def test_single_class_training(self):
        pairs = _pairs([1, 1, 1, 0])
        from deepembed.feature_store import FoldSplit
        with pytest.raises(EvaluationError, match="single class"):
            pairwise_accuracy_tenfold([0.1, 0.2, 0.3, 0.4], pairs, FoldSplit(((3,), (0, 1, 2))))

    def test_best_threshold_tie_goes_low(self):
        # accepting {0.2, 0.5, 0.9} or {0.9} both give 3/4 correct; the lower gap wins
        t, c = best_threshold([0.1, 0.2, 0.5, 0.9], [0, 1, 0, 1])
        assert t == pytest.approx(0.15) and c == 3
        assert (t, c) == oracles.best_threshold([0.1, 0.2, 0.5, 0.9], [0, 1, 0, 1])

    def test_threshold_sits_mid_gap(self):
        t, c = best_threshold([-1.0, -0.5, 0.5, 1.0], [0, 0, 1, 1])
        assert (t, c) == (0.0, 4)

    def test_increasing_transform_invariance(self, rng):
        l = rng.random(150) < 0.5
        s = rng.standard_normal(150) + l
        pairs = _pairs(l)
        folds = make_folds(pairs, 10, 2)
        a = pairwise_accuracy_tenfold(s, pairs, folds)
        b = pairwise_accuracy_tenfold(np.tanh(s) * 3 + 1, pairs, folds)
        assert a.accuracies == b.accuracies


# ---------------------------------------------------------------------------
# identification


def _setup_from(rng, n_ids=20, n_probe=3, n_non=30, d=8, noise=0.3):
    centers = _unit(rng, n_ids + n_non, d)
    gallery = centers[:n_ids]
    mated_ids, mated = [], []
    for i in range(n_ids):
        for _ in range(n_probe):
            mated_ids.append(f"g{i}")
            mated.append(centers[i] + noise * rng.standard_normal(d))
    nonmated = centers[n_ids:] + noise * rng.standard_normal((n_non, d))
    return IdentificationSetup([f"g{i}" for i in range(n_ids)], gallery, mated_ids, np.array(mated), nonmated)


def _oracle_args(setup):
    return (setup.gallery_ids, setup.gallery.tolist(), setup.mated_ids, setup.mated.tolist())


class TestRank1:
    def test_exact_match_wins(self, rng):
        g = _unit(rng, 5, 4)
        setup = IdentificationSetup(list("abcde"), g, ["c"], g[2:3], np.empty((0, 4)))
        assert rank1_identification(setup) == 1.0

    def test_single_identity_gallery(self, rng):
        setup = IdentificationSetup(["a"], _unit(rng, 1, 4), ["a"] * 4, _unit(rng, 4, 4), np.empty((0, 4)))
        assert rank1_identification(setup) == 1.0

    def test_tie_goes_to_lowest_position(self):
        g = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert rank1_identification(IdentificationSetup(["a", "b"], g, ["a"], [[1.0, 0.0]], [])) == 1.0
        assert rank1_identification(IdentificationSetup(["a", "b"], g, ["b"], [[1.0, 0.0]], [])) == 0.0

    def test_50_identity_against_oracle(self, rng):
        setup = _setup_from(rng, n_ids=50, noise=0.6)
        assert rank1_identification(setup) == oracles.rank1(*_oracle_args(setup))

    def test_invariants(self):
        with pytest.raises(EvaluationError, match="unique"):
            IdentificationSetup(["a", "a"], np.eye(2), [], np.empty((0, 2)), [])
        with pytest.raises(EvaluationError, match="absent"):
            IdentificationSetup(["a"], np.eye(2)[:1], ["z"], np.eye(2)[:1], [])

    def test_cmc(self, rng):
        setup = _setup_from(rng, noise=0.8)
        cmc = cmc_curve(setup)
        assert cmc[0] == rank1_identification(setup)
        assert cmc[-1] == 1.0
        assert np.all(np.diff(cmc) >= 0)


class TestDirAtFar:
    def test_zero_noise_separated(self):
        g = np.eye(10)[:5]
        non = -np.eye(10)[:5]
        setup = IdentificationSetup(list("abcde"), g, list("abcde"), g, non)
        d, _ = dir_at_far(setup, 0.01, 1)
        assert d == 1.0

    def test_reject_all(self):
        g = np.eye(3)[:2]
        # every non-mated probe matches the gallery perfectly, mated probes only weakly
        setup = IdentificationSetup(["a", "b"], g, ["a"], [[0.6, 0.0, 0.8]], g.copy())
        d, thr = dir_at_far(setup, 0.0, 1)
        assert d == 0.0 and thr > 0.6

    def test_against_oracle_100_ids(self, rng):
        setup = _setup_from(rng, n_ids=100, n_probe=1, n_non=100, d=16, noise=0.5)
        for far in (0.0, 0.001, 0.01, 0.1, 0.3):
            for rank in (1, 5):
                got = dir_at_far(setup, far, rank)
                want = oracles.dir_at_far(*_oracle_args(setup), setup.nonmated.tolist(), far, rank)
                assert got == want

    def test_monotone(self, rng):
        setup = _setup_from(rng, noise=0.7)
        fars = [0.0, 0.01, 0.05, 0.2, 1.0]
        for r in (1, 2, 5):
            vals = [dir_at_far(setup, f, r)[0] for f in fars]
            assert vals == sorted(vals)
        for f in fars:
            by_rank = [dir_at_far(setup, f, r)[0] for r in range(1, 6)]
            assert by_rank == sorted(by_rank)

    def test_errors(self, rng):
        setup = _setup_from(rng, n_non=0)
        with pytest.raises(EvaluationError, match="non-mated"):
            dir_at_far(setup, 0.01)
        with pytest.raises(EvaluationError, match="rank"):
            dir_at_far(_setup_from(rng), 0.01, rank=999)


class TestBuildSetup:
    def test_split(self, medium_dataset):
        vecs = medium_dataset.matrix()
        setup = build_identification_setup(vecs, medium_dataset, 0.5, seed=0)
        assert len(setup.gallery_ids) == 15
        assert len(setup.mated_ids) == 15 * 5
        assert setup.nonmated.shape[0] == 15 * 6
        assert setup.gallery.shape[1] == vecs.shape[1]


# ---------------------------------------------------------------------------
# failures


class TestFailureReport:
    def test_separated(self):
        assert failure_report([0.9, -0.9], _pairs([1, 0]), 0.0) == []

    def test_single_false_reject(self):
        rep = failure_report([-0.3, 0.9, -0.9], _pairs([1, 1, 0]), 0.0)
        assert len(rep) == 1 and rep[0].kind == "false_reject" and rep[0].score == -0.3

    def test_orders_by_margin(self):
        rep = failure_report([-0.1, 0.6, -0.5, 0.2], _pairs([1, 0, 1, 0]), 0.0)
        assert [c.score for c in rep] == [0.6, -0.5, 0.2, -0.1]
        assert [c.kind for c in rep] == ["false_accept", "false_reject", "false_accept", "false_reject"]

    def test_count_matches_accuracy(self, rng):
        l = rng.random(200) < 0.5
        s = rng.standard_normal(200) + l
        pairs = _pairs(l)
        folds = make_folds(pairs, 10, 0)
        res = pairwise_accuracy_tenfold(s, pairs, folds)
        n_err = 0
        for i, thr in enumerate(res.thresholds):
            te = folds.test_indices(i)
            n_err += len(failure_report(s[te], [pairs[j] for j in te], thr))
        assert n_err == round((1 - res.mean_accuracy) * 200)
