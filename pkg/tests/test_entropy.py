import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cevc import tensor as T
from cevc.entropy import (FactorizedPrior, factorized_cdf, factorized_pmf, gmm_likelihood,
                          gmm_pmf, gmm_pmf_table, rate_clamp, rate_nll)
from cevc.errors import DomainError
from cevc.networks import GmmParams, ParamStore
from cevc.tensor import Tape, Tensor, grad_check

L = 255


def make_prior(channels=2, seed=0):
    ps = ParamStore()
    return FactorizedPrior(ps, "p", channels, rng=np.random.default_rng(seed)), ps


def gmm_params(w, mu, s):
    """Wrap [K] or [K, E] arrays as GmmParams over a [1, E, 1, 1] latent."""
    w, mu, s = (np.asarray(a, dtype=np.float64) for a in (w, mu, s))
    if w.ndim == 1:
        w, mu, s = w[:, None], mu[:, None], s[:, None]
    K, E = w.shape
    shape = (1, K, E, 1, 1)
    return GmmParams(Tensor(w.reshape(shape)), Tensor(mu.reshape(shape)), Tensor(s.reshape(shape)))


def random_gmm(rng, K=3, E=1):
    logits = rng.standard_normal((K, E))
    w = np.exp(logits) / np.exp(logits).sum(axis=0)
    mu = rng.uniform(-30, 30, (K, E))
    s = np.exp(rng.uniform(np.log(0.01), np.log(40), (K, E)))
    return w, mu, s


# -- factorized prior --------------------------------------------------------

def test_factorized_cdf_monotone_on_random_pairs():
    prior, _ = make_prior()
    rng = np.random.default_rng(1)
    a = rng.uniform(-50, 50, 1000)
    b = a + rng.uniform(0, 10, 1000)
    for ch in range(2):
        ca = factorized_cdf(Tensor(a), prior, ch).data
        cb = factorized_cdf(Tensor(b), prior, ch).data
        assert np.all(ca <= cb)


def test_factorized_cdf_limits_at_init():
    prior, _ = make_prior()
    for ch in range(2):
        c = factorized_cdf(Tensor([-1e6, 1e6]), prior, ch).data
        assert c[0] < 1e-6 and c[1] > 1 - 1e-6


def test_factorized_cdf_gradients():
    prior, ps = make_prior()
    rng = np.random.default_rng(2)
    x = rng.standard_normal(5) * 3
    assert grad_check(lambda t: T.sum_(factorized_cdf(t, prior, 1)), x) < 1e-4
    for name in ps.names():
        p = ps[name]
        orig = p.data.copy()

        def f(t):
            p.data = t.data
            saved, ps._items[name] = ps._items[name], t
            try:
                return T.sum_(T.log(prior.likelihood(Tensor(x.reshape(1, 1, 1, 5).repeat(2, 1)))))
            finally:
                ps._items[name] = saved

        assert grad_check(f, orig) < 1e-4, name
        p.data = orig


def test_factorized_pmf_normalized_and_positive():
    prior, _ = make_prior(channels=3)
    table = prior.pmf_table(L)
    assert table.shape == (3, 2 * L + 1)
    np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(table > 0)


def test_factorized_pmf_matches_direct_cdf_differences():
    prior, _ = make_prior(channels=2, seed=3)
    z = np.arange(-6, 7, dtype=np.float64)
    code = np.stack([z, z])[None, :, :, None]
    got = factorized_pmf(Tensor(code), prior, L).data[0, :, :, 0]
    for ch in range(2):
        hi = factorized_cdf(Tensor(z + 0.5), prior, ch).data
        lo = factorized_cdf(Tensor(z - 0.5), prior, ch).data
        np.testing.assert_allclose(got[ch], hi - lo, rtol=1e-9, atol=1e-15)


def test_factorized_edge_symbols_absorb_tails():
    prior, _ = make_prior(channels=1)
    code = Tensor(np.array([-L, L], dtype=np.float64).reshape(1, 1, 1, 2))
    got = factorized_pmf(code, prior, L).data.ravel()
    table = prior.pmf_table(L)[0]
    np.testing.assert_allclose(got, [table[0], table[-1]], rtol=1e-9, atol=1e-300)


# -- discretized mixture -----------------------------------------------------

def test_gmm_standard_normal_mass_at_zero():
    mpmath.mp.dps = 30
    ref = float(2 * (1 + mpmath.erf(0.5 / mpmath.sqrt(2))) / 2 - 1)
    got = gmm_pmf(Tensor(np.zeros((1, 1, 1, 1))), gmm_params([1.0], [0.0], [1.0]), L).item()
    assert got == pytest.approx(ref, rel=1e-12)
    assert got == pytest.approx(0.3829249225480262, rel=1e-12)


def test_gmm_symmetric_pair_equals_average():
    m, s = 1.7, 0.8
    pair = gmm_pmf(Tensor(np.zeros((1, 1, 1, 1))), gmm_params([0.5, 0.5], [-m, m], [s, s]), L).item()
    one = gmm_pmf(Tensor(np.zeros((1, 1, 1, 1))), gmm_params([1.0], [m], [s]), L).item()
    other = gmm_pmf(Tensor(np.zeros((1, 1, 1, 1))), gmm_params([1.0], [-m], [s]), L).item()
    assert pair == pytest.approx(0.5 * (one + other), rel=1e-14)
    assert one == pytest.approx(other, rel=1e-14)


def test_gmm_pmf_brute_force_sum():
    rng = np.random.default_rng(4)
    symbols = np.arange(-L, L + 1, dtype=np.float64)
    for _ in range(5):
        w, mu, s = random_gmm(rng)
        wk = np.repeat(w, len(symbols), axis=1)
        mk = np.repeat(mu, len(symbols), axis=1)
        sk = np.repeat(s, len(symbols), axis=1)
        masses = gmm_pmf(Tensor(symbols.reshape(1, -1, 1, 1)), gmm_params(wk, mk, sk), L).data
        assert abs(masses.sum() - 1.0) < 1e-9


def test_gmm_table_matches_elementwise_masses():
    rng = np.random.default_rng(5)
    w, mu, s = random_gmm(rng, E=4)
    table = gmm_pmf_table(w.T, mu.T, s.T, L)
    symbols = np.arange(-L, L + 1, dtype=np.float64)
    for e in range(4):
        rep = [np.repeat(a[:, e: e + 1], len(symbols), axis=1) for a in (w, mu, s)]
        direct = gmm_pmf(Tensor(symbols.reshape(1, -1, 1, 1)), gmm_params(*rep), L).data.ravel()
        np.testing.assert_allclose(table[e], direct, rtol=1e-7, atol=1e-15)


def test_gmm_gradients():
    rng = np.random.default_rng(6)
    K, E = 3, 4
    w, mu, s = random_gmm(rng, K, E)
    mu = mu / 10
    s = np.clip(s, 0.3, 3)
    y = np.round(rng.standard_normal(E) * 2)
    logits = np.log(w)

    def nll(y_t, logit_t, mu_t, s_t):
        wt = T.softmax(T.reshape(logit_t, (1, K, E, 1, 1)), axis=1)
        params = GmmParams(wt, T.reshape(mu_t, (1, K, E, 1, 1)), T.reshape(s_t, (1, K, E, 1, 1)))
        return rate_nll(gmm_likelihood(T.reshape(y_t, (1, E, 1, 1)), params))

    args = [Tensor(y), Tensor(logits), Tensor(mu), Tensor(s)]
    for i, point in enumerate([y + 0.3, logits, mu, s]):
        def f(t, i=i):
            a = list(args)
            a[i] = t
            return nll(*a)
        assert grad_check(f, point) < 1e-4, i


def test_gmm_invariant_to_unrelated_frames():
    """Masses depend only on the parameters passed in (first-order context)."""
    rng = np.random.default_rng(7)
    w, mu, s = random_gmm(rng, E=3)
    y = Tensor(np.array([1.0, -2.0, 0.0]).reshape(1, 3, 1, 1))
    a = gmm_pmf(y, gmm_params(w, mu, s), L).data
    rng.standard_normal(100)
    b = gmm_pmf(y, gmm_params(w, mu, s), L).data
    assert a.tobytes() == b.tobytes()


# -- rate terms ---------------------------------------------------------------

def test_rate_nll_simple_cases():
    assert rate_nll(Tensor(np.ones(10))).item() == 0.0
    assert rate_nll(Tensor(np.full(256, 1 / 256))).item() == pytest.approx(2048.0, rel=1e-15)


def test_rate_nll_matches_arbitrary_precision():
    mpmath.mp.dps = 40
    rng = np.random.default_rng(8)
    p = rng.uniform(1e-6, 1.0, 20)
    ref = -sum(mpmath.log(mpmath.mpf(float(v)), 2) for v in p)
    assert rate_nll(Tensor(p)).item() == pytest.approx(float(ref), rel=1e-9)


def test_rate_nll_floor():
    assert rate_nll(Tensor([0.0])).item() == pytest.approx(24.0)


def test_rate_floor_still_pushes_mass_up():
    # under the floor the value is flat but the gradient keeps pointing towards more mass
    p = Tensor([1e-9, 0.5], requires_grad=True)
    with Tape():
        rate_nll(p).backward()
    assert p.grad[0] < 0
    assert p.grad[1] == pytest.approx(-1 / (0.5 * math.log(2)))


def test_rate_clamp_values_and_gradients():
    for rate, target, out, grad in [(5.0, 3.0, 5.0, 1.0), (2.0, 3.0, 3.0, 0.0), (3.0, 3.0, 3.0, 1.0)]:
        r = Tensor(rate, requires_grad=True)
        with Tape():
            c = rate_clamp(r, target)
            c.backward()
        assert c.item() == out
        assert r.grad == grad


def test_rate_clamp_rejects_negative_target():
    with pytest.raises(DomainError):
        rate_clamp(Tensor(1.0), -0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 4))
def test_gmm_table_normalized_property(seed, K):
    rng = np.random.default_rng(seed)
    w, mu, s = random_gmm(rng, K, E=2)
    table = gmm_pmf_table(w.T, mu.T, s.T, L)
    np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(table >= 0)
    assert math.isclose(table.sum(), 2.0, abs_tol=2e-9)
