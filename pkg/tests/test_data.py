import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.linear_model import LogisticRegression

from wslab.data import (
    Dataset,
    LabelMatrix,
    SyntheticLFSpec,
    coverage,
    covered_subset,
    format_coverage,
    generate_blobs,
    generate_lfs,
    load_label_matrix,
    load_probabilistic_matrix,
    one_hot,
    save_label_matrix,
    save_probabilistic_matrix,
    votes_from_one_hot,
)

EXAMPLE = [[0, 0], [1, 0], [0, 2]]


def _write(tmp_path, text, name="L.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_label_matrix_parses(tmp_path):
    lm = load_label_matrix(_write(tmp_path, "0,0\n1,0\n0,2"))
    np.testing.assert_array_equal(lm.votes, EXAMPLE)
    assert lm.num_classes == 2


@pytest.mark.parametrize("text,kw,match", [
    ("0,5\n1,0", {"num_classes": 2}, "out of range"),
    ("", {}, "no rows"),
    ("0,1\n1", {}, "columns"),
    ("0,a\n1,0", {}, "malformed"),
])
def test_load_label_matrix_errors(tmp_path, text, kw, match):
    with pytest.raises(ValueError, match=match):
        load_label_matrix(_write(tmp_path, text), **kw)


def test_label_matrix_roundtrip(tmp_path):
    lm = LabelMatrix(np.array(EXAMPLE), 2)
    save_label_matrix(lm, tmp_path / "out.csv")
    np.testing.assert_array_equal(load_label_matrix(tmp_path / "out.csv", 2).votes, lm.votes)


def test_probabilistic_validation_and_roundtrip(tmp_path):
    probs = np.array([[[0.6, 0.3], [0.0, 0.0]], [[0.0, 1.0], [0.2, 0.1]]])
    lm = LabelMatrix.from_probabilistic(probs)
    np.testing.assert_array_equal(lm.votes, [[1, 0], [2, 1]])
    assert one_hot(lm) is lm.probabilistic
    save_probabilistic_matrix(lm, tmp_path / "p.json")
    np.testing.assert_array_equal(one_hot(load_probabilistic_matrix(tmp_path / "p.json")), probs)
    with pytest.raises(ValueError, match="sum to at most 1"):
        LabelMatrix.from_probabilistic(np.full((1, 1, 2), 0.6))


def test_one_hot_examples():
    oh = one_hot(LabelMatrix(np.array([[1, 0, 2]]), 2))
    np.testing.assert_array_equal(oh[0], [[1, 0], [0, 0], [0, 1]])
    assert not one_hot(LabelMatrix(np.zeros((1, 3), dtype=int), 2)).any()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5).flatmap(
    lambda C: st.tuples(st.just(C), arrays(np.int64, (6, 4), elements=st.integers(0, C)))))
def test_one_hot_inverts(args):
    C, votes = args
    oh = one_hot(LabelMatrix(votes, C))
    assert np.all(oh.sum(axis=2) == (votes != 0))
    np.testing.assert_array_equal(votes_from_one_hot(oh), votes)


def test_coverage_examples():
    assert coverage(LabelMatrix(np.array(EXAMPLE), 2)) == pytest.approx(2 / 3)
    assert coverage(LabelMatrix(np.zeros((4, 2), dtype=int), 2)) == 0.0


def test_coverage_format_reported_precision():
    n = 22254
    covered = round(0.258 * n)
    votes = np.zeros((n, 1), dtype=int)
    votes[:covered] = 1
    assert format_coverage(LabelMatrix(votes, 2)) == "25.8"


def _ds(n=3, train=None):
    train = np.arange(n) if train is None else train
    return Dataset(np.zeros((n, 1)), np.ones(n, dtype=int), [0.5, 0.5], train=train)


def test_covered_subset():
    lm = LabelMatrix(np.array(EXAMPLE), 2)
    _, ds = covered_subset(lm, _ds())
    np.testing.assert_array_equal(ds.train, [1, 2])
    full = LabelMatrix(np.ones((3, 2), dtype=int), 2)
    base = _ds()
    assert covered_subset(full, base)[1] is base
    with pytest.raises(ValueError, match="empty training set"):
        covered_subset(LabelMatrix(np.zeros((3, 1), dtype=int), 2), base)
    with pytest.raises(ValueError):
        covered_subset(lm, _ds(4))


def test_covered_subset_keeps_eval_splits():
    ds = Dataset(np.zeros((4, 1)), [1, 2, 1, 2], [0.5, 0.5], train=[0, 1], val=[2], test=[3])
    lm = LabelMatrix(np.array([[0], [1], [0], [0]]), 2)
    _, sub = covered_subset(lm, ds)
    assert coverage(lm.take(sub.train)) == 1.0
    np.testing.assert_array_equal(sub.val, [2])
    np.testing.assert_array_equal(sub.test, [3])


@pytest.mark.parametrize("kw", [dict(train=[0, 1], val=[1]), dict(train=[5]),
                                dict(class_balance=[0.6, 0.6])])
def test_dataset_invariants(kw):
    args = dict(features=np.zeros((3, 1)), labels=[1, 2, 1], class_balance=[0.5, 0.5], train=[0])
    args.update(kw)
    with pytest.raises(ValueError):
        Dataset(**args)


def test_blobs_linearly_separable_at_large_separation():
    ds = generate_blobs(1000, 5, separation=10.0, seed=0)
    probe = LogisticRegression().fit(ds.split_features("train"), ds.split_labels("train"))
    assert probe.score(ds.split_features("test"), ds.split_labels("test")) >= 0.99


def test_blob_centers_are_equidistant():
    ds = generate_blobs(30000, 4, num_classes=3, separation=5.0, seed=1)
    means = np.array([ds.features[ds.labels == c].mean(axis=0) for c in (1, 2, 3)])
    dists = [np.linalg.norm(means[a] - means[b]) for a, b in ((0, 1), (0, 2), (1, 2))]
    np.testing.assert_allclose(dists, 5.0, atol=0.1)


def test_blobs_zero_separation_is_uninformative():
    ds = generate_blobs(20000, 3, separation=0.0, balance=[0.7, 0.3], seed=2)
    probe = LogisticRegression().fit(ds.split_features("train"), ds.split_labels("train"))
    assert probe.score(ds.split_features("test"), ds.split_labels("test")) == pytest.approx(0.7, abs=0.02)


def test_blobs_deterministic_and_validated():
    a, b = generate_blobs(100, 3, seed=4), generate_blobs(100, 3, seed=4)
    assert a.features.tobytes() == b.features.tobytes()
    with pytest.raises(ValueError):
        generate_blobs(100, 3, balance=[0.2, 0.2])
    with pytest.raises(ValueError):
        generate_blobs(1, 3)


def test_lf_perfect_and_duplicate():
    ds = generate_blobs(500, 2, seed=0)
    lm = generate_lfs(ds, [SyntheticLFSpec(1.0, 1.0), SyntheticLFSpec(0.7, 0.5),
                           SyntheticLFSpec.duplicate_of(1)], seed=0)
    np.testing.assert_array_equal(lm.votes[:, 0], ds.labels)
    np.testing.assert_array_equal(lm.votes[:, 2], lm.votes[:, 1])


@pytest.mark.parametrize("C", [2, 3])
def test_lf_chance_accuracy_frequency(C):
    ds = generate_blobs(50000, 3, num_classes=C, seed=3)
    col = generate_lfs(ds, [SyntheticLFSpec(1 / C, 1.0)], seed=3).votes[:, 0]
    assert abs(np.mean(col == ds.labels) - 1 / C) <= 0.01


def test_lf_coverage_and_wrong_votes_uniform():
    ds = generate_blobs(50000, 3, num_classes=3, seed=5)
    col = generate_lfs(ds, [SyntheticLFSpec(0.6, 0.4)], seed=5).votes[:, 0]
    assert abs(np.mean(col != 0) - 0.4) < 0.01
    fired = col != 0
    assert abs(np.mean(col[fired] == ds.labels[fired]) - 0.6) < 0.01
    wrong = fired & (col != ds.labels)
    offsets = (col[wrong] - ds.labels[wrong]) % 3
    assert abs(np.mean(offsets == 1) - 0.5) < 0.02


def test_independent_lfs_conditionally_uncorrelated():
    ds = generate_blobs(50000, 2, seed=6)
    lm = generate_lfs(ds, [SyntheticLFSpec(0.8, 0.7), SyntheticLFSpec(0.65, 0.5),
                           SyntheticLFSpec(0.9, 0.3)], seed=6)
    for c in (1, 2):
        V = lm.votes[ds.labels == c].astype(float)
        cov = np.cov(V.T)
        assert np.max(np.abs(cov[np.triu_indices(3, 1)])) < 0.02


def test_adversarial_flip_fills_source_abstains():
    ds = generate_blobs(2000, 2, seed=7)
    specs = [SyntheticLFSpec(0.8, 0.2, mode="region", target=2, offset=1.0),
             SyntheticLFSpec.adversarial_flip_of(0)]
    lm = generate_lfs(ds, specs, seed=7)
    src, flip = lm.votes[:, 0], lm.votes[:, 1]
    np.testing.assert_array_equal(flip[src != 0], src[src != 0])
    assert np.all(flip[src == 0] == 1)
    three = generate_blobs(100, 2, num_classes=3, seed=0)
    with pytest.raises(ValueError, match="binary"):
        generate_lfs(three, [SyntheticLFSpec(), SyntheticLFSpec.adversarial_flip_of(0)])


def test_region_lf_hits_accuracy_and_coverage():
    ds = generate_blobs(20000, 4, seed=8)
    for offset in (None, 0.0, 3.0):
        col = generate_lfs(ds, [SyntheticLFSpec(0.75, 0.1, mode="region", target=1, offset=offset)],
                           seed=8).votes[:, 0]
        fired = col != 0
        assert abs(fired.mean() - 0.1) < 1e-3
        assert set(np.unique(col[fired])) == {1}
        assert abs(np.mean(ds.labels[fired] == 1) - 0.75) < 0.02


def test_random_lf_independent_of_labels():
    ds = generate_blobs(50000, 2, balance=[0.3, 0.7], seed=9)
    col = generate_lfs(ds, [SyntheticLFSpec(mode="random")], seed=9).votes[:, 0]
    for c in (1, 2):
        assert abs(np.mean(col[ds.labels == c] == 2) - 0.7) < 0.015


@pytest.mark.parametrize("kw", [dict(accuracy=1.5), dict(coverage=0.0), dict(mode="nope"),
                                dict(mode="duplicate"), dict(offset=-1.0)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SyntheticLFSpec(**kw)


def test_spec_must_reference_earlier_column():
    ds = generate_blobs(50, 2)
    with pytest.raises(ValueError, match="earlier"):
        generate_lfs(ds, [SyntheticLFSpec.duplicate_of(0)])


def test_generation_is_pure():
    ds = generate_blobs(300, 2, seed=1)
    specs = [SyntheticLFSpec(0.7, 0.5), SyntheticLFSpec(0.8, 0.2, mode="region"),
             SyntheticLFSpec(mode="random")]
    assert generate_lfs(ds, specs, seed=2).votes.tobytes() == generate_lfs(ds, specs, seed=2).votes.tobytes()
