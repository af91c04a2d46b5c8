import itertools
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wslab.data import LabelMatrix, SyntheticLFSpec, generate_blobs, generate_lfs
from wslab.labelmodels import (
    ConvergenceWarning,
    MajorityVote,
    NaiveBayesEM,
    TripletLabelModel,
    export_json,
    majority_vote,
    nb_em_fit,
    nb_posterior,
    triplet_fit,
    triplet_from_moments,
    triplet_moments,
    triplet_posterior,
)


def _lm(rows, C=2):
    return LabelMatrix(np.array(rows), C)


# ---------------------------------------------------------------------------
# majority vote

def test_majority_vote_examples():
    assert majority_vote(_lm([[1, 1, 2]]), mode="hard")[0] == 1
    np.testing.assert_array_equal(majority_vote(_lm([[1, 2]])), [[0.5, 0.5]])
    np.testing.assert_array_equal(majority_vote(_lm([[0, 0]]), prior=[0.7, 0.3]), [[0.7, 0.3]])


def test_majority_vote_unanimous_is_one_hot():
    soft = majority_vote(_lm([[2, 2, 0], [1, 0, 1]]))
    np.testing.assert_array_equal(soft, [[0, 1], [1, 0]])


def test_majority_tie_breaking_is_seeded_and_uniform():
    L = _lm([[1, 2]] * 4000)
    a = majority_vote(L, mode="hard", seed=3)
    np.testing.assert_array_equal(a, majority_vote(L, mode="hard", seed=3))
    assert abs(np.mean(a == 1) - 0.5) < 0.03


def test_majority_empty_rows_draw_from_prior():
    hard = majority_vote(_lm([[0, 0]] * 5000), prior=[0.8, 0.2], mode="hard", seed=0)
    assert abs(np.mean(hard == 1) - 0.8) < 0.02


def test_majority_mode_validation():
    with pytest.raises(ValueError):
        majority_vote(_lm([[1]]), mode="x")


# ---------------------------------------------------------------------------
# NB-EM

def _independent(n, accs, seed=0, cov=1.0):
    ds = generate_blobs(n, 2, seed=seed, split=(n, 0, 0))
    return ds, generate_lfs(ds, [SyntheticLFSpec(a, cov) for a in accs], seed=seed)


@pytest.mark.filterwarnings("ignore::wslab.labelmodels.ConvergenceWarning")
def test_nb_perfect_lf_fixed_point():
    ds, lm = _independent(2000, [1.0])
    model = NaiveBayesEM().fit(lm)
    np.testing.assert_array_equal(model.predict(lm), lm.votes[:, 0])


@pytest.mark.filterwarnings("ignore::wslab.labelmodels.ConvergenceWarning")
def test_nb_confusions_are_distributions():
    _, lm = _independent(3000, [0.9, 0.7, 0.6], cov=0.6)
    conf = NaiveBayesEM().fit(lm).confusion_
    assert conf.shape == (3, 3, 2)
    assert np.all(conf >= 0)
    np.testing.assert_allclose(conf.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("smoothing", [1.0, 0.0])
def test_nb_objective_monotone(smoothing):
    _, lm = _independent(4000, [0.75, 0.65, 0.6, 0.55], seed=2, cov=0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        hist = NaiveBayesEM(smoothing=smoothing, tol=1e-12, max_iter=60).fit(lm).objective_history_
    assert len(hist) > 3
    assert np.all(np.diff(hist) >= -1e-9 * np.abs(hist[:-1]))


def test_nb_zero_coverage_errors():
    with pytest.raises(ValueError, match="coverage"):
        NaiveBayesEM().fit(_lm([[0, 0], [0, 0]]))


def test_nb_nonconvergence_is_flagged():
    _, lm = _independent(500, [0.7, 0.6, 0.65], cov=0.7)
    with pytest.warns(ConvergenceWarning):
        model = NaiveBayesEM(max_iter=1, tol=0.0).fit(lm)
    assert model.converged_ is False and model.n_iter_ == 1


def _fitted_nb(conf, prior=(0.5, 0.5)):
    model = NaiveBayesEM(prior=list(prior)).fit(_lm([[1, 2], [2, 1], [1, 1]]))
    model.confusion_ = np.asarray(conf, dtype=np.float64)
    return model


def test_nb_posterior_uniform_and_identity_confusions():
    lm = _lm([[1, 2], [0, 1], [2, 2], [0, 0]])
    uniform = _fitted_nb(np.full((2, 3, 2), 1 / 3), prior=(0.3, 0.7))
    np.testing.assert_allclose(nb_posterior(uniform, lm), np.tile([0.3, 0.7], (4, 1)))
    ident = np.zeros((2, 3, 2))
    ident[:, 1, 0] = ident[:, 2, 1] = 1.0
    with np.errstate(divide="ignore"):
        post = nb_posterior(_fitted_nb(ident), _lm([[2, 2], [1, 1]]))
    np.testing.assert_array_equal(post, [[0, 1], [1, 0]])


def test_nb_posterior_hand_enumeration():
    # LF1: P(v|y=1) = (0.2, 0.6, 0.2), P(v|y=2) = (0.2, 0.1, 0.7); LF2 similar
    conf = np.array([[[0.2, 0.2], [0.6, 0.1], [0.2, 0.7]],
                     [[0.5, 0.3], [0.3, 0.2], [0.2, 0.5]]])
    model = _fitted_nb(conf, prior=(0.4, 0.6))
    votes = [[1, 0], [2, 1], [0, 0]]
    for row, post in zip(votes, nb_posterior(model, _lm(votes))):
        joint = [0.4 * conf[0, row[0], 0] * conf[1, row[1], 0], 0.6 * conf[0, row[0], 1] * conf[1, row[1], 1]]
        np.testing.assert_allclose(post, np.array(joint) / sum(joint), rtol=1e-12)


def test_nb_duplicates_gain_weight_monotonically():
    _, lm = _independent(3000, [0.65, 0.8, 0.8, 0.8], seed=5)
    base = lm.votes
    disagree = base[:, 0] != np.where((base[:, 1:] == 2).sum(axis=1) >= 2, 2, 1)
    shares = []
    for k in (0, 1, 2, 4):
        votes = np.hstack([base] + [base[:, :1]] * k)
        post = NaiveBayesEM().fit(LabelMatrix(votes, 2)).predict_proba(LabelMatrix(votes, 2))
        shares.append(post[disagree, base[disagree, 0] - 1].mean())
    assert np.all(np.diff(shares) > 0), shares


def test_nb_export(tmp_path):
    _, lm = _independent(200, [0.9, 0.8, 0.7])
    model = nb_em_fit(lm)
    export_json(model, tmp_path / "nb.json")
    d = json.loads((tmp_path / "nb.json").read_text())
    assert d["model"] == "nb-em" and np.array(d["confusion"]).shape == (3, 3, 2)


# ---------------------------------------------------------------------------
# triplets

def test_triplet_exact_moments_recover_exactly():
    a = np.array([0.8, 0.6, 0.4])
    M = np.outer(a, a)
    for agg in ("single", "mean", "median"):
        est, fallback = triplet_from_moments(M, agg)
        assert not fallback.any()
        assert np.max(np.abs(est - a)) <= 1e-12
    assert np.sqrt(0.48 * 0.32 / 0.24) == pytest.approx(0.8, abs=1e-15)


def test_triplet_preconditions():
    with pytest.raises(ValueError, match="at least 3"):
        TripletLabelModel().fit(_lm([[1, 2], [2, 2]]))
    with pytest.raises(ValueError, match=r"binary tasks \(C=2\)"):
        TripletLabelModel().fit(LabelMatrix(np.array([[1, 2, 3]]), 3))
    with pytest.raises(ValueError):
        triplet_from_moments(np.eye(3), "mode")


def test_triplet_fallback_warns_and_clamps():
    # LF 3 never co-votes with a correlated pair -> no admissible triplet
    votes = np.array([[1, 1, 0], [2, 2, 0], [1, 1, 0], [2, 2, 0], [0, 0, 1]])
    with pytest.warns(ConvergenceWarning):
        model = TripletLabelModel().fit(LabelMatrix(votes, 2))
    assert model.n_fallback_ >= 1
    assert np.all(model.accuracies_ >= 0.5 + 1e-3) and np.all(model.accuracies_ <= 1 - 1e-3)


def test_triplet_moments_condition_on_joint_votes():
    M, counts = triplet_moments(_lm([[1, 1, 0], [2, 1, 2], [0, 2, 2]]))
    assert counts[0, 1] == 2 and M[0, 1] == 0.0
    assert counts[1, 2] == 2 and M[1, 2] == 0.0
    assert counts[0, 2] == 1 and M[0, 2] == 1.0


def test_triplet_posterior_examples():
    model = triplet_fit(_lm([[1, 1, 1], [2, 2, 2], [1, 2, 1]]))
    model.accuracies_ = np.full(3, 0.5)
    np.testing.assert_allclose(triplet_posterior(model, _lm([[1, 2, 2]]), prior=[0.3, 0.7]), [[0.3, 0.7]])
    model.accuracies_ = np.array([1 - 1e-3, 0.6, 0.6])
    assert triplet_posterior(model, _lm([[1, 0, 0]]))[0, 0] > 0.99


def test_triplet_posterior_equals_nb_with_symmetric_confusions():
    acc = np.array([0.9, 0.7, 0.6])
    abstain = np.array([0.1, 0.3, 0.5])
    conf = np.zeros((3, 3, 2))
    conf[:, 0, :] = abstain[:, None]
    conf[:, 1, 0] = conf[:, 2, 1] = (1 - abstain) * acc
    conf[:, 2, 0] = conf[:, 1, 1] = (1 - abstain) * (1 - acc)
    votes = np.array(list(itertools.product(range(3), repeat=3)))
    lm = LabelMatrix(votes, 2)
    nb = _fitted_nb(conf, prior=(0.35, 0.65))
    tri = triplet_fit(_lm([[1, 1, 1], [2, 2, 2], [1, 2, 1]]))
    tri.accuracies_ = acc
    np.testing.assert_allclose(triplet_posterior(tri, lm, prior=[0.35, 0.65]), nb_posterior(nb, lm), atol=1e-12)


def test_triplet_error_shrinks_with_n():
    errs = []
    for n in (5000, 50000):
        _, lm = _independent(n, [0.9, 0.8, 0.7], seed=7)
        errs.append(np.max(np.abs(TripletLabelModel().fit(lm).accuracies_ - [0.9, 0.8, 0.7])))
    assert errs[1] <= errs[0] + 0.01


def test_triplet_pair_subsampling_is_seeded():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.3, 0.9, 30)
    M = np.outer(a, a)
    e1, _ = triplet_from_moments(M, "median", max_pairs=50, seed=1)
    e2, _ = triplet_from_moments(M, "median", max_pairs=50, seed=1)
    np.testing.assert_array_equal(e1, e2)
    np.testing.assert_allclose(e1, a, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, (12, 4), elements=st.integers(0, 2)))
def test_all_posteriors_row_normalize(votes):
    lm = LabelMatrix(votes, 2)
    outs = [MajorityVote().fit(lm).predict_proba(lm)]
    if lm.covered_mask().any():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            outs.append(NaiveBayesEM().fit(lm).predict_proba(lm))
            outs.append(TripletLabelModel().fit(lm).predict_proba(lm))
    for p in outs:
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(p >= 0)
