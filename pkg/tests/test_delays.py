import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from cascades import (DataError, ExponentialDelay, ExpMixtureDelay, GammaDelay,
                      PiecewiseUniformDelay, UniformDelay)
from cascades import delays
from cascades.delays import (cdf, delay_mean, density, sample, tail_cutoff,
                             weighted_mle)

FAMILIES = [
    ExponentialDelay(1.7),
    GammaDelay(2.3, 0.8),
    GammaDelay(0.6, 2.0),
    UniformDelay(3.0),
    PiecewiseUniformDelay((0.0, 1.0, 2.5, 6.0), (0.5, 0.3, 0.2)),
    ExpMixtureDelay((0.4, 0.6), (0.3, 4.0)),
]


@pytest.mark.parametrize("spec", FAMILIES, ids=lambda s: type(s).__name__)
def test_density_integrates_to_one(spec):
    hi = tail_cutoff(spec, 1e-12)
    total, err = integrate.quad(lambda t: float(density(spec, t)), 0.0, hi,
                                limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("spec", FAMILIES, ids=lambda s: type(s).__name__)
def test_cdf_matches_quadrature(spec):
    for x in (0.3, 0.9, 1.7, 4.0):
        ref, _ = integrate.quad(lambda t: float(density(spec, t)), 0.0, x,
                                limit=200)
        assert float(cdf(spec, x)) == pytest.approx(ref, abs=1e-8)


@pytest.mark.parametrize("spec", FAMILIES, ids=lambda s: type(s).__name__)
def test_mean_matches_quadrature(spec):
    hi = tail_cutoff(spec, 1e-13)
    ref, _ = integrate.quad(lambda t: t * float(density(spec, t)), 0.0, hi,
                            limit=400)
    assert delay_mean(spec) == pytest.approx(ref, rel=1e-6)


@pytest.mark.parametrize("spec", FAMILIES, ids=lambda s: type(s).__name__)
def test_density_zero_at_and_before_zero(spec):
    dts = np.array([-2.0, -1e-12, 0.0, 1e-9])
    vals = np.asarray(density(spec, dts))
    assert np.all(vals[:3] == 0.0)
    assert float(cdf(spec, 0.0)) == 0.0
    assert float(cdf(spec, -1.0)) == 0.0


@pytest.mark.parametrize("spec,mass", [(s, m) for s in FAMILIES
                                       for m in (1e-4, 1e-6, 1e-9)],
                         ids=lambda v: str(v))
def test_tail_cutoff_leaves_requested_mass(spec, mass):
    cut = tail_cutoff(spec, mass)
    assert float(cdf(spec, cut)) >= 1.0 - mass - 1e-12
    # the cutoff is tight: a noticeably smaller window misses mass
    if not isinstance(spec, (UniformDelay, PiecewiseUniformDelay)):
        assert float(cdf(spec, 0.8 * cut)) < 1.0 - mass


@pytest.mark.parametrize("spec", FAMILIES, ids=lambda s: type(s).__name__)
def test_sampler_matches_cdf(spec):
    rng = np.random.default_rng(42)
    draws = np.asarray(sample(spec, rng, 4000))
    assert np.all(draws > 0)
    from scipy import stats
    res = stats.kstest(draws, lambda x: np.asarray(cdf(spec, x)))
    assert res.pvalue > 0.01


def _weighted_objective(spec, deltas, weights):
    with np.errstate(divide="ignore"):
        logs = np.log(np.asarray(density(spec, deltas)))
    return float(np.dot(weights, logs))


def test_exponential_mle_closed_form_and_grid():
    rng = np.random.default_rng(0)
    for _ in range(25):
        deltas = rng.exponential(1.0 / rng.uniform(0.2, 5.0), size=60)
        weights = rng.uniform(0.0, 2.0, size=60)
        weights[rng.random(60) < 0.1] = 0.0
        if weights.sum() == 0:
            weights[0] = 1.0
        fitted = weighted_mle(ExponentialDelay(1.0), deltas, weights)
        expect = weights.sum() / np.dot(weights, deltas)
        assert fitted.rate == pytest.approx(expect, rel=1e-12)
        grid = np.linspace(0.5 * expect, 2.0 * expect, 401)
        objs = [_weighted_objective(ExponentialDelay(r), deltas, weights)
                for r in grid]
        best = _weighted_objective(fitted, deltas, weights)
        assert best >= max(objs) - 1e-9


def test_gamma_mle_beats_profile_grid():
    rng = np.random.default_rng(1)
    for trial in range(25):
        shape = rng.uniform(0.4, 6.0)
        deltas = rng.gamma(shape, 1.0 / rng.uniform(0.3, 3.0), size=80)
        weights = rng.uniform(0.1, 1.0, size=80)
        fitted = weighted_mle(GammaDelay(1.0, 1.0), deltas, weights)
        best = _weighted_objective(fitted, deltas, weights)
        # profile out the rate: at fixed shape k the optimum is k*sum(w)/sum(w*d)
        for k in np.geomspace(fitted.shape / 3, fitted.shape * 3, 200):
            rate = k * weights.sum() / np.dot(weights, deltas)
            assert best >= _weighted_objective(GammaDelay(k, rate), deltas,
                                               weights) - 1e-7


def test_gamma_mle_score_equation_residual():
    rng = np.random.default_rng(2)
    from scipy.special import digamma
    deltas = rng.gamma(2.0, 0.5, size=100)
    weights = rng.uniform(0.2, 1.0, size=100)
    fitted = weighted_mle(GammaDelay(1.0, 1.0), deltas, weights)
    mean = np.dot(weights, deltas) / weights.sum()
    mean_log = np.dot(weights, np.log(deltas)) / weights.sum()
    s = np.log(mean) - mean_log
    assert abs(np.log(fitted.shape) - digamma(fitted.shape) - s) < 1e-10
    assert fitted.rate == pytest.approx(fitted.shape / mean, rel=1e-12)


def test_gamma_mle_degenerate_samples_error():
    deltas = np.full(10, 2.0)
    weights = np.ones(10)
    with pytest.raises(DataError, match="degenerate"):
        weighted_mle(GammaDelay(1.0, 1.0), deltas, weights)


def test_uniform_mle_is_identity():
    spec = UniformDelay(4.0)
    out = weighted_mle(spec, np.array([0.5, 2.0]), np.array([1.0, 2.0]))
    assert out == spec


def test_piecewise_mle_is_bin_weight_share():
    spec = PiecewiseUniformDelay((0.0, 1.0, 3.0), (0.5, 0.5))
    deltas = np.array([0.5, 0.7, 2.0, 2.5, 2.9])
    weights = np.array([1.0, 1.0, 2.0, 1.0, 1.0])
    out = weighted_mle(spec, deltas, weights)
    assert out.edges == spec.edges
    assert np.allclose(out.probs, (2.0 / 6.0, 4.0 / 6.0))
    with pytest.raises(DataError):
        weighted_mle(spec, np.array([5.0]), np.array([1.0]))  # outside the bins


def test_exp_mixture_single_em_pass_formula():
    spec = ExpMixtureDelay((0.3, 0.7), (0.5, 3.0))
    rng = np.random.default_rng(3)
    deltas = rng.exponential(1.0, size=50)
    weights = rng.uniform(0.1, 1.0, size=50)
    out = weighted_mle(spec, deltas, weights)

    w = np.asarray(spec.weights)
    lam = np.asarray(spec.rates)
    comp = w[None, :] * lam[None, :] * np.exp(-lam[None, :] * deltas[:, None])
    resp = comp / comp.sum(axis=1, keepdims=True)
    credit = weights @ resp
    new_w = credit / credit.sum()
    new_lam = credit / (weights[:, None] * resp * deltas[:, None]).sum(axis=0)
    assert np.allclose(out.weights, new_w, rtol=1e-12)
    assert np.allclose(out.rates, new_lam, rtol=1e-12)
    # one EM pass on the inner objective must not decrease it
    assert (_weighted_objective(out, deltas, weights)
            >= _weighted_objective(spec, deltas, weights) - 1e-10)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(min_value=1e-3, max_value=1e3),
       seed=st.integers(min_value=0, max_value=2**31))
def test_mle_invariant_to_weight_scale(scale, seed):
    rng = np.random.default_rng(seed)
    deltas = rng.exponential(0.7, size=30) + 1e-9
    weights = rng.uniform(0.1, 1.0, size=30)
    for spec in (ExponentialDelay(1.0), GammaDelay(1.5, 1.0),
                 ExpMixtureDelay((0.5, 0.5), (0.4, 2.0))):
        a = weighted_mle(spec, deltas, weights)
        b = weighted_mle(spec, deltas, weights * scale)
        for fa, fb in zip(np.atleast_1d(list(vars(a).values()) or [a.rate]),
                          np.atleast_1d(list(vars(b).values()) or [b.rate])):
            assert np.allclose(np.asarray(fa, dtype=np.float64),
                               np.asarray(fb, dtype=np.float64), rtol=1e-9)


def test_mle_rejects_bad_input():
    spec = ExponentialDelay(1.0)
    with pytest.raises(DataError):
        weighted_mle(spec, np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(DataError):
        weighted_mle(spec, np.array([1.0]), np.array([0.0]))
    with pytest.raises(DataError):
        weighted_mle(spec, np.array([1.0]), np.array([-1.0]))


def test_spec_validation():
    with pytest.raises(DataError):
        delays.validate(ExponentialDelay(0.0))
    with pytest.raises(DataError):
        delays.validate(GammaDelay(-1.0, 1.0))
    with pytest.raises(DataError):
        PiecewiseUniformDelay((0.5, 1.0), (1.0,))  # edges must start at zero
    with pytest.raises(DataError):
        PiecewiseUniformDelay((0.0, 1.0), (0.7,))  # probs must sum to one
    with pytest.raises(DataError):
        ExpMixtureDelay((0.5, 0.6), (1.0, 2.0))
