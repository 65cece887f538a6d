"""Oracles for the categorical and DMoL distributions.

The single-logistic bin mass has a closed form: for a bin of width r
centered on the component location, sigma(z) - sigma(-z) = tanh(z/2), so
the mass is tanh(r / (4 s)). Edge bins equal the raw CDF/tail values.
These oracles are computed with plain math here, independent of the
log-space implementation under test.
"""

import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

import ncrd.autodiff as ad
from ncrd.distributions import (
    LOG_SCALE_MAX,
    LOG_SCALE_MIN,
    NEUTRAL,
    CategoricalParams,
    DMoLParams,
    EmptySupportError,
    SamplingControls,
    categorical_log_prob,
    categorical_log_probs,
    categorical_sample,
    dmol_bin_log_prob,
    dmol_cdf,
    dmol_sample,
)
from fdutil import fd_check


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def mixture_cdf(x, pis, locs, scales):
    return sum(p * sigmoid((x - m) / s) for p, m, s in zip(pis, locs, scales))


def rand_dmol(rng, k=4, lo=0.0, hi=127.0, r=1.0, spread=True):
    locs = rng.uniform(lo, hi, k) if spread else rng.uniform(lo, hi, k)
    return DMoLParams(
        weight_logits=rng.normal(0, 1.5, k),
        locations=locs,
        log_scales=rng.uniform(math.log(0.05 * r), math.log(0.3 * (hi - lo)), k),
        r=r, lo=lo, hi=hi,
    )


def bin_grid(params):
    n = int(round((params.hi - params.lo) / params.r))
    return params.lo + np.arange(n + 1) * params.r


# -- categorical ---------------------------------------------------------------


def test_categorical_log_probs_matches_scipy():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 3, (5, 7))
    got = np.asarray(categorical_log_probs(CategoricalParams(logits)))
    want = scipy.special.log_softmax(logits, axis=-1)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_categorical_log_prob_index_forms():
    rng = np.random.default_rng(1)
    logits = rng.normal(0, 2, 6)
    p = CategoricalParams(logits)
    full = scipy.special.log_softmax(logits)
    for i in range(6):
        assert float(categorical_log_prob(p, i)) == pytest.approx(full[i], rel=1e-12)
    batch = CategoricalParams(rng.normal(0, 2, (3, 6)))
    idx = np.array([0, 5, 2])
    got = np.asarray(categorical_log_prob(batch, idx))
    want = scipy.special.log_softmax(ad.val(batch.logits), axis=-1)[np.arange(3), idx]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_categorical_log_prob_out_of_range():
    p = CategoricalParams(np.zeros(4))
    with pytest.raises(IndexError):
        categorical_log_prob(p, 4)
    with pytest.raises(IndexError):
        categorical_log_prob(p, -1)


def test_categorical_sample_frequencies():
    # gumbel-max must reproduce softmax probabilities
    rng = np.random.default_rng(7)
    logits = np.array([0.0, 1.0, -1.0, 0.5])
    probs = np.exp(scipy.special.log_softmax(logits))
    n = 40_000
    counts = np.zeros(4)
    p = CategoricalParams(logits)
    for _ in range(n):
        counts[categorical_sample(p, NEUTRAL, rng)] += 1
    res = scipy.stats.chisquare(counts, probs * n)
    assert res.pvalue > 1e-3, f"sampling frequencies off: {counts / n} vs {probs}"


def test_categorical_temperature_zero_is_argmax():
    rng = np.random.default_rng(2)
    logits = rng.normal(0, 1, 10)
    p = CategoricalParams(logits)
    greedy = SamplingControls(class_temperature=0.0)
    for _ in range(20):
        assert categorical_sample(p, greedy, rng) == int(np.argmax(logits))


def test_categorical_temperature_flattens():
    rng = np.random.default_rng(3)
    logits = np.array([3.0, 0.0, 0.0, 0.0])
    p = CategoricalParams(logits)
    n = 8000
    hot = sum(categorical_sample(p, SamplingControls(class_temperature=0.25), rng) == 0
              for _ in range(n))
    cold = sum(categorical_sample(p, SamplingControls(class_temperature=4.0), rng) == 0
               for _ in range(n))
    assert hot > cold  # lower temperature concentrates on the mode
    assert hot / n > 0.99
    assert cold / n < 0.75


def test_categorical_masks():
    rng = np.random.default_rng(4)
    p = CategoricalParams(np.zeros(8))
    wl = SamplingControls(whitelist=frozenset({2, 5}))
    for _ in range(50):
        assert categorical_sample(p, wl, rng) in {2, 5}
    bl = SamplingControls(blacklist=frozenset({0, 1, 2, 3}))
    for _ in range(50):
        assert categorical_sample(p, bl, rng) >= 4
    both = SamplingControls(whitelist=frozenset({2, 5}), blacklist=frozenset({2}))
    for _ in range(50):
        assert categorical_sample(p, both, rng) == 5


def test_categorical_empty_support():
    rng = np.random.default_rng(5)
    p = CategoricalParams(np.zeros(4))
    dead = SamplingControls(whitelist=frozenset({1}), blacklist=frozenset({1}))
    with pytest.raises(EmptySupportError):
        categorical_sample(p, dead, rng)
    outside = SamplingControls(whitelist=frozenset({9}))  # off the end
    with pytest.raises(EmptySupportError):
        categorical_sample(p, outside, rng)


def test_controls_validation():
    with pytest.raises(ValueError):
        SamplingControls(class_temperature=-1.0)
    with pytest.raises(ValueError):
        SamplingControls(weight_temperature=-0.5)
    with pytest.raises(ValueError):
        SamplingControls(truncation=(5.0, 1.0))
    with pytest.raises(ValueError):
        SamplingControls(whitelist=frozenset())


# -- DMoL bin log-probs --------------------------------------------------------


def test_single_logistic_center_bin_closed_form():
    # symmetric bin around the location: mass = tanh(r / (4 s))
    s = 2.5
    p = DMoLParams(np.zeros(1), np.array([64.0]), np.array([math.log(s)]),
                   r=1.0, lo=0.0, hi=127.0)
    got = float(np.exp(np.asarray(ad.val(dmol_bin_log_prob(p, 64.0)))))
    assert got == pytest.approx(math.tanh(1.0 / (4 * s)), rel=1e-12)
    assert got == pytest.approx(0.09966799462495582, rel=1e-12)  # tanh(0.1)


def test_single_logistic_interior_bin():
    mu, s = 40.0, 3.0
    p = DMoLParams(np.zeros(1), np.array([mu]), np.array([math.log(s)]),
                   r=1.0, lo=0.0, hi=127.0)
    x = 45.0
    want = sigmoid((x + 0.5 - mu) / s) - sigmoid((x - 0.5 - mu) / s)
    got = float(np.exp(np.asarray(ad.val(dmol_bin_log_prob(p, x)))))
    assert got == pytest.approx(want, rel=1e-10)


def test_edge_bins_absorb_tails():
    mu, s = 30.0, 10.0
    p = DMoLParams(np.zeros(1), np.array([mu]), np.array([math.log(s)]),
                   r=1.0, lo=0.0, hi=127.0)
    lo_mass = float(np.exp(np.asarray(ad.val(dmol_bin_log_prob(p, 0.0)))))
    assert lo_mass == pytest.approx(sigmoid((0.5 - mu) / s), rel=1e-10)
    hi_mass = float(np.exp(np.asarray(ad.val(dmol_bin_log_prob(p, 127.0)))))
    assert hi_mass == pytest.approx(1.0 - sigmoid((126.5 - mu) / s), rel=1e-10)
    # values within r/2 of an edge share the tail bin
    near = float(np.exp(np.asarray(ad.val(dmol_bin_log_prob(p, 0.3)))))
    assert near == pytest.approx(sigmoid((0.8 - mu) / s), rel=1e-10)


def test_mixture_bin_log_prob():
    w = np.array([0.3, -0.2, 1.1])
    locs = np.array([10.0, 50.0, 90.0])
    lss = np.array([math.log(2.0), math.log(5.0), math.log(1.0)])
    p = DMoLParams(w, locs, lss, r=1.0, lo=0.0, hi=127.0)
    pis = np.exp(scipy.special.log_softmax(w))
    x = 50.0
    want = sum(
        pi * (sigmoid((x + 0.5 - m) / math.exp(ls)) - sigmoid((x - 0.5 - m) / math.exp(ls)))
        for pi, m, ls in zip(pis, locs, lss)
    )
    got = float(np.exp(np.asarray(ad.val(dmol_bin_log_prob(p, x)))))
    assert got == pytest.approx(want, rel=1e-10)


def test_bin_log_prob_rejects_outside_domain():
    p = rand_dmol(np.random.default_rng(0))
    with pytest.raises(ValueError):
        dmol_bin_log_prob(p, -0.5)
    with pytest.raises(ValueError):
        dmol_bin_log_prob(p, 127.5)


def test_bin_log_prob_array_input():
    rng = np.random.default_rng(8)
    p = rand_dmol(rng)
    xs = np.array([0.0, 1.0, 63.0, 127.0])
    batch = np.asarray(ad.val(dmol_bin_log_prob(p, xs)))
    singles = [float(np.asarray(ad.val(dmol_bin_log_prob(p, float(x))))) for x in xs]
    np.testing.assert_allclose(batch, singles, rtol=1e-12)


def test_extreme_scales_stay_finite():
    # scales beyond the clamp must not produce nan/inf
    p = DMoLParams(np.zeros(2), np.array([5.0, 5.0]),
                   np.array([LOG_SCALE_MIN - 50.0, LOG_SCALE_MAX + 50.0]),
                   r=0.01, lo=0.0, hi=10.0)
    for x in (0.0, 5.0, 10.0, 4.995):
        v = float(np.asarray(ad.val(dmol_bin_log_prob(p, x))))
        assert math.isfinite(v)


def test_far_tail_bins_stay_finite():
    # a tight component far from the queried bin: probe log-space stability
    p = DMoLParams(np.zeros(1), np.array([127.0]), np.array([math.log(0.01)]),
                   r=1.0, lo=0.0, hi=127.0)
    v = float(np.asarray(ad.val(dmol_bin_log_prob(p, 1.0))))
    assert math.isfinite(v)
    assert v < -100  # astronomically unlikely, but representable


@pytest.mark.parametrize("modality,lo,hi,r", [("velocity", 0.0, 127.0, 1.0),
                                              ("time", 0.0, 10.0, 0.010)])
def test_normalization_random_params(modality, lo, hi, r):
    # bin masses over the canonical grid must sum to 1
    rng = np.random.default_rng(99)
    for _ in range(100):
        k = int(rng.integers(1, 17))
        p = DMoLParams(
            weight_logits=rng.normal(0, 2, k),
            locations=rng.uniform(lo - 0.1 * (hi - lo), hi + 0.1 * (hi - lo), k),
            log_scales=rng.uniform(LOG_SCALE_MIN, math.log(hi - lo), k),
            r=r, lo=lo, hi=hi,
        )
        lp = np.asarray(ad.val(dmol_bin_log_prob(p, bin_grid(p))))
        total = float(np.exp(scipy.special.logsumexp(lp)))
        assert abs(total - 1.0) <= 1e-6, f"{modality}: sum(bins) = {total}"


def test_dmol_cdf_matches_scipy():
    rng = np.random.default_rng(11)
    p = rand_dmol(rng, k=3)
    pis = np.exp(scipy.special.log_softmax(np.asarray(p.weight_logits)))
    xs = np.linspace(-10, 140, 31)
    want = sum(
        pi * scipy.stats.logistic(loc=m, scale=math.exp(ls)).cdf(xs)
        for pi, m, ls in zip(pis, p.locations, p.log_scales)
    )
    got = dmol_cdf(p, xs)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)
    assert isinstance(dmol_cdf(p, 4.0), float)


# -- DMoL gradients ------------------------------------------------------------


@pytest.mark.parametrize("x", [64.0, 0.0, 127.0, 0.2])
def test_bin_log_prob_gradients(x):
    rng = np.random.default_rng(13)
    k = 3
    w = rng.normal(0, 1, k)
    locs = rng.uniform(20, 100, k)
    lss = rng.uniform(math.log(0.5), math.log(20.0), k)

    def build(wt, lt, st_):
        p = DMoLParams(wt, lt, st_, r=1.0, lo=0.0, hi=127.0)
        return dmol_bin_log_prob(p, x)

    fd_check(build, w, locs, lss, rtol=1e-4, atol=1e-7)


def test_categorical_log_prob_gradient():
    rng = np.random.default_rng(14)
    logits = rng.normal(0, 2, 6)
    fd_check(lambda z: categorical_log_prob(CategoricalParams(z), 3), logits)


# -- DMoL sampling -------------------------------------------------------------


def folded_cdf(params, t):
    """Analytic CDF of the edge-folded sampler output."""
    pis = np.exp(scipy.special.log_softmax(np.asarray(params.weight_logits)))
    t = np.asarray(t, dtype=np.float64)
    f = mixture_cdf_vec(t, pis, params.locations, np.exp(np.asarray(params.log_scales)))
    out = np.where(t < params.lo, 0.0, np.where(t >= params.hi, 1.0, f))
    return out


def mixture_cdf_vec(x, pis, locs, scales):
    x = np.asarray(x, dtype=np.float64)[..., None]
    return np.sum(pis * scipy.special.expit((x - np.asarray(locs)) / np.asarray(scales)), axis=-1)


def ks_against_folded(params, samples):
    samples = np.sort(np.asarray(samples))
    grid = np.linspace(params.lo, params.hi, 4001)
    ecdf = np.searchsorted(samples, grid, side="right") / samples.size
    return float(np.max(np.abs(ecdf - folded_cdf(params, grid))))


def test_sampler_ks_statistic():
    rng = np.random.default_rng(21)
    for trial in range(3):
        p = rand_dmol(rng, k=4)
        n = 100_000
        xs = np.array([dmol_sample(p, NEUTRAL, rng) for _ in range(n)])
        d = ks_against_folded(p, xs)
        assert d < 0.02, f"trial {trial}: KS D = {d}"


def test_sampler_ks_scipy_interior():
    # params with negligible tail mass: scipy's one-sample KS applies directly
    rng = np.random.default_rng(22)
    p = DMoLParams(np.array([0.5, -0.5]), np.array([50.0, 70.0]),
                   np.array([math.log(3.0), math.log(2.0)]),
                   r=1.0, lo=0.0, hi=127.0)
    xs = np.array([dmol_sample(p, NEUTRAL, rng) for _ in range(20_000)])
    res = scipy.stats.ks_1samp(xs, lambda t: folded_cdf(p, t))
    assert res.pvalue > 1e-3, f"KS rejected: D={res.statistic}, p={res.pvalue}"


def test_sample_within_domain_and_truncation():
    rng = np.random.default_rng(23)
    for _ in range(200):
        p = rand_dmol(rng, k=3)
        a = float(rng.uniform(-20, 120))
        b = a + float(rng.uniform(0.5, 60))
        c = SamplingControls(truncation=(a, b))
        if max(a, p.lo) > min(b, p.hi):
            with pytest.raises(EmptySupportError):
                dmol_sample(p, c, rng)
            continue
        x = dmol_sample(p, c, rng)
        assert max(a, p.lo) <= x <= min(b, p.hi)


def test_truncation_empty_support():
    p = rand_dmol(np.random.default_rng(24))
    rng = np.random.default_rng(0)
    with pytest.raises(EmptySupportError):
        dmol_sample(p, SamplingControls(truncation=(200.0, 300.0)), rng)
    with pytest.raises(EmptySupportError):
        dmol_sample(p, SamplingControls(truncation=(-50.0, -10.0)), rng)


def test_truncation_point_support():
    p = rand_dmol(np.random.default_rng(25))
    rng = np.random.default_rng(0)
    assert dmol_sample(p, SamplingControls(truncation=(40.0, 40.0)), rng) == 40.0
    # interval clipped to a single point by the domain edge
    assert dmol_sample(p, SamplingControls(truncation=(127.0, 200.0)), rng) == 127.0


def test_truncated_sampler_distribution():
    # conditional law given a<=x<=b: CDF (F(t)-F(a))/(F(b)-F(a))
    rng = np.random.default_rng(26)
    p = DMoLParams(np.array([0.0, 0.4]), np.array([30.0, 80.0]),
                   np.array([math.log(8.0), math.log(4.0)]),
                   r=1.0, lo=0.0, hi=127.0)
    a, b = 25.0, 90.0
    c = SamplingControls(truncation=(a, b))
    xs = np.sort([dmol_sample(p, c, rng) for _ in range(30_000)])
    pis = np.exp(scipy.special.log_softmax(np.asarray(p.weight_logits)))
    scales = np.exp(np.asarray(p.log_scales))
    fa = mixture_cdf_vec(a, pis, p.locations, scales)
    fb = mixture_cdf_vec(b, pis, p.locations, scales)

    grid = np.linspace(a, b, 2001)
    cond = (mixture_cdf_vec(grid, pis, p.locations, scales) - fa) / (fb - fa)
    ecdf = np.searchsorted(xs, grid, side="right") / xs.size
    d = float(np.max(np.abs(ecdf - cond)))
    assert d < 0.02, f"truncated KS D = {d}"


def test_greedy_weight_and_scale():
    # both temperatures at zero: exactly the dominant component's location
    p = DMoLParams(np.array([2.0, -1.0, 0.0]), np.array([12.5, 60.0, 100.0]),
                   np.array([math.log(2.0)] * 3), r=1.0, lo=0.0, hi=127.0)
    rng = np.random.default_rng(27)
    c = SamplingControls(weight_temperature=0.0, scale_temperature=0.0)
    for _ in range(10):
        assert dmol_sample(p, c, rng) == 12.5


def test_scale_temperature_tightens_spread():
    p = DMoLParams(np.zeros(1), np.array([60.0]), np.array([math.log(6.0)]),
                   r=1.0, lo=0.0, hi=127.0)
    rng = np.random.default_rng(28)
    wide = np.std([dmol_sample(p, NEUTRAL, rng) for _ in range(4000)])
    narrow = np.std([
        dmol_sample(p, SamplingControls(scale_temperature=0.1), rng)
        for _ in range(4000)
    ])
    assert narrow < wide / 5


def test_weight_temperature_zero_picks_heaviest():
    # distinct far-apart locations reveal which component got chosen
    p = DMoLParams(np.array([0.0, 3.0]), np.array([20.0, 100.0]),
                   np.array([math.log(0.5)] * 2), r=1.0, lo=0.0, hi=127.0)
    rng = np.random.default_rng(29)
    c = SamplingControls(weight_temperature=0.0)
    xs = [dmol_sample(p, c, rng) for _ in range(200)]
    assert all(x > 60 for x in xs)


def test_weight_temperature_respects_truncation_mass():
    # greedy weights must reweight by in-interval mass, not raw logits
    p = DMoLParams(np.array([3.0, 0.0]), np.array([20.0, 100.0]),
                   np.array([math.log(0.5)] * 2), r=1.0, lo=0.0, hi=127.0)
    rng = np.random.default_rng(30)
    c = SamplingControls(weight_temperature=0.0, truncation=(80.0, 127.0))
    xs = [dmol_sample(p, c, rng) for _ in range(100)]
    assert all(x > 80 for x in xs)  # heavy component has ~zero mass there


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sample_always_in_domain(seed):
    rng = np.random.default_rng(seed)
    p = rand_dmol(rng, k=int(rng.integers(1, 6)), lo=0.0, hi=10.0, r=0.01)
    x = dmol_sample(p, NEUTRAL, rng)
    assert 0.0 <= x <= 10.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bin_log_prob_nonpositive(seed):
    rng = np.random.default_rng(seed)
    p = rand_dmol(rng, k=int(rng.integers(1, 6)))
    x = float(rng.uniform(0, 127))
    lp = float(np.asarray(ad.val(dmol_bin_log_prob(p, x))))
    assert lp <= 1e-12
