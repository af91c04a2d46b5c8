import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wslab.losses import (
    LOSSES,
    asymmetric_ce,
    ce_no_stopgrad,
    cross_entropy,
    get_loss,
    l1_loss,
    mig_loss,
    mig_value,
    squared_hellinger,
    sym_ce_stopgrad,
    symmetric_ce_terms,
)
from wslab.nn import softmax

from conftest import numeric_grad, rel_error

TOL = 1e-4


@pytest.fixture
def logits(rng):
    return rng.standard_normal((4, 3)), rng.standard_normal((4, 3))


def _ce(z_pred, z_target):
    return cross_entropy(z_pred, softmax(z_target))


def test_sym_ce_stopgrad_routes_each_term_to_one_network(logits):
    zf, ze = logits
    out = sym_ce_stopgrad(zf, ze)
    target_e = softmax(ze).copy()
    target_f = softmax(zf).copy()
    # term 1: y_f predicts a frozen y_e; term 2: y_e predicts a frozen y_f
    assert rel_error(out.grad_f, numeric_grad(lambda: cross_entropy(zf, target_e), zf)) <= TOL
    assert rel_error(out.grad_e, numeric_grad(lambda: cross_entropy(ze, target_f), ze)) <= TOL
    assert out.value == pytest.approx(_ce(zf, ze) + _ce(ze, zf), rel=1e-12)


def test_symmetric_terms_each_match_fd(logits):
    zf, ze = logits
    t = symmetric_ce_terms(zf, ze)
    assert rel_error(t[1, "f"], numeric_grad(lambda: _ce(zf, ze), zf)) <= TOL
    assert rel_error(t[1, "e"], numeric_grad(lambda: _ce(zf, ze), ze)) <= TOL
    assert rel_error(t[2, "f"], numeric_grad(lambda: _ce(ze, zf), zf)) <= TOL
    assert rel_error(t[2, "e"], numeric_grad(lambda: _ce(ze, zf), ze)) <= TOL
    out = sym_ce_stopgrad(zf, ze)
    np.testing.assert_array_equal(out.grad_f, t[1, "f"])
    np.testing.assert_array_equal(out.grad_e, t[2, "e"])


def test_ce_no_stopgrad_is_full_gradient(logits):
    zf, ze = logits
    out = ce_no_stopgrad(zf, ze)
    value = lambda: _ce(zf, ze) + _ce(ze, zf)  # noqa: E731
    assert rel_error(out.grad_f, numeric_grad(value, zf)) <= TOL
    assert rel_error(out.grad_e, numeric_grad(value, ze)) <= TOL


def test_asymmetric_ce_is_full_gradient(logits):
    zf, ze = logits
    out = asymmetric_ce(zf, ze)
    assert out.value == pytest.approx(_ce(zf, ze))
    assert rel_error(out.grad_f, numeric_grad(lambda: _ce(zf, ze), zf)) <= TOL
    assert rel_error(out.grad_e, numeric_grad(lambda: _ce(zf, ze), ze)) <= TOL


@pytest.mark.parametrize("fn", [l1_loss, squared_hellinger])
def test_symmetric_losses_full_gradient(logits, fn):
    zf, ze = logits
    out = fn(zf, ze)
    assert rel_error(out.grad_f, numeric_grad(lambda: fn(zf, ze).value, zf)) <= TOL
    assert rel_error(out.grad_e, numeric_grad(lambda: fn(zf, ze).value, ze)) <= TOL


def _mig_bruteforce(pf, pe, prior):
    n = pf.shape[0]
    first = np.mean([np.log(sum(pf[i, c] * pe[i, c] / prior[c] for c in range(pf.shape[1])))
                     for i in range(n)])
    second = sum(sum(pf[i, c] * pe[j, c] / prior[c] for c in range(pf.shape[1]))
                 for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    return -(first - second + 1.0)


def test_mig_value_matches_bruteforce(rng):
    pf = softmax(rng.standard_normal((5, 3)))
    pe = softmax(rng.standard_normal((5, 3)))
    prior = np.array([0.2, 0.3, 0.5])
    assert mig_value(pf, pe, prior) == pytest.approx(_mig_bruteforce(pf, pe, prior), rel=1e-12)


def test_mig_gradients_on_four_samples(rng):
    zf, ze = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    prior = np.array([0.4, 0.6])
    out = mig_loss(zf, ze, prior)
    f = lambda: mig_value(softmax(zf), softmax(ze), prior)  # noqa: E731
    assert rel_error(out.grad_f, numeric_grad(f, zf)) <= TOL
    assert rel_error(out.grad_e, numeric_grad(f, ze)) <= TOL
    assert out.value == pytest.approx(2 * f())


def test_mig_needs_two_samples():
    with pytest.raises(ValueError, match="at least 2"):
        mig_loss(np.zeros((1, 2)), np.zeros((1, 2)))


def test_value_oracles():
    half = np.zeros((3, 2))
    assert sym_ce_stopgrad(half, half).value == pytest.approx(2 * np.log(2))
    onehot = np.array([[60.0, -60.0], [-60.0, 60.0]])
    assert sym_ce_stopgrad(onehot, onehot).value == pytest.approx(0.0, abs=1e-12)
    z = np.random.default_rng(0).standard_normal((4, 3))
    assert l1_loss(z, z).value == 0.0
    assert squared_hellinger(np.array([[100.0, -100.0]]), np.array([[-100.0, 100.0]])).value == \
        pytest.approx(1.0, abs=1e-5)


def test_cross_entropy_clamps_zero_probabilities():
    z = np.array([[1000.0, -1000.0]])
    assert np.isfinite(cross_entropy(z, np.array([[0.0, 1.0]])))
    assert cross_entropy(z, np.array([[0.0, 1.0]])) == pytest.approx(-np.log(1e-12))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-8, 8)),
       arrays(np.float64, (3, 2), elements=st.floats(-8, 8)),
       st.sampled_from(sorted(LOSSES)))
def test_losses_are_finite_and_shaped(zf, ze, name):
    out = get_loss(name)(zf, ze, np.array([0.5, 0.5]))
    assert np.isfinite(out.value)
    assert out.grad_f.shape == zf.shape and out.grad_e.shape == ze.shape
    # logits gradients of a function of softmax outputs sum to zero per row
    np.testing.assert_allclose(out.grad_f.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.grad_e.sum(axis=1), 0.0, atol=1e-12)


def test_unknown_loss():
    with pytest.raises(ValueError, match="unknown loss"):
        get_loss("nope")
