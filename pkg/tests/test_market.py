import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlhedge.exceptions import NoSolutionError, ValidationError
from rlhedge.market import (
    IV_LOWER,
    GarchParams,
    GbmParams,
    PathSet,
    bs_greeks,
    bs_price,
    garch_delta,
    garch_simulate_physical,
    garch_simulate_risk_neutral,
    gbm_simulate,
    hn_mc_price,
    hn_price,
    implied_vol,
    read_paths_csv,
)

R_DAY = 0.03 / 365
GBM_PARAMS = GbmParams(mu=0.1 / 252, sigma=0.2 / math.sqrt(252), r=R_DAY)
HN_PARAMS = GarchParams(lambda_rp=0.2981, omega_g=3.4105e-07, alpha_g=9.6154e-06,
                     beta_g=0.8168, gamma_g=0.1497, r=R_DAY)
SIGMA1_SQ = 0.006652 ** 2


def reference_call(s, k, tau, sigma, r):
    """Independent scalar Black-Scholes using math.erf."""
    n = lambda x: 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
    v = sigma * math.sqrt(tau)
    d1 = (math.log(s / k) + (r + 0.5 * sigma * sigma) * tau) / v
    return s * n(d1) - k * math.exp(-r * tau) * n(d1 - v)


class TestGbm:
    def test_zero_noise_is_exact(self):
        p = GbmParams(mu=0.1 / 252, sigma=0.0)
        paths = gbm_simulate(p, 100.0, 252, 3, seed=1)
        np.testing.assert_allclose(paths.prices[:, -1], 100 * math.exp(0.1), rtol=1e-13)

    def test_log_return_mean(self):
        n = 1_000_000
        paths = gbm_simulate(GBM_PARAMS, 100.0, 30, n, seed=7)
        lr = np.log(paths.prices[:, -1] / 100.0)
        target = 30 * (GBM_PARAMS.mu - 0.5 * GBM_PARAMS.sigma ** 2)
        assert abs(lr.mean() - target) < 4 * lr.std() / math.sqrt(n)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValidationError):
            gbm_simulate(GBM_PARAMS, -1.0, 10, 1, seed=0)
        with pytest.raises(ValidationError):
            GbmParams(mu=0.0, sigma=-0.1)

    def test_seed_determinism_and_block_independence(self):
        a = gbm_simulate(GBM_PARAMS, 100.0, 5, 10_000, seed=3)
        b = gbm_simulate(GBM_PARAMS, 100.0, 5, 10_000, seed=3)
        assert np.array_equal(a.prices, b.prices)
        # the first block of a larger run is the same stream
        c = gbm_simulate(GBM_PARAMS, 100.0, 5, 20_000, seed=3)
        assert np.array_equal(a.prices[:8192], c.prices[:8192])

    def test_csv_round_trip(self, tmp_path):
        paths = garch_simulate_physical(HN_PARAMS, 100.0, SIGMA1_SQ, 4, 3, seed=2)
        paths.to_csv(tmp_path / "p.csv")
        back = read_paths_csv(tmp_path / "p.csv")
        assert np.array_equal(back.prices, paths.prices)
        assert np.array_equal(back.variances, paths.variances)


class TestBlackScholes:
    def test_zero_vol_intrinsic(self):
        assert bs_price(110, 100, 10, 0.0, 0.0) == pytest.approx(10.0)
        assert bs_price(90, 100, 10, 0.0, 0.0) == 0.0

    def test_zero_strike(self):
        assert bs_price(100, 0.0, 30, 0.01, R_DAY) == pytest.approx(100.0)

    def test_expiry_is_intrinsic(self):
        assert bs_price(100, 95, 0, 0.01, R_DAY) == 5.0
        assert bs_price(100, 95, 0, 0.01, R_DAY, is_call=False) == 0.0

    def test_negative_tau_rejected(self):
        with pytest.raises(ValidationError):
            bs_price(100, 100, -1, 0.01, 0.0)

    def test_against_reference(self):
        got = bs_price(100, 105, 30, 0.2 / math.sqrt(252), R_DAY)
        want = reference_call(100, 105, 30, 0.2 / math.sqrt(252), R_DAY)
        assert abs(got - want) < 1e-10

    @settings(max_examples=200, deadline=None)
    @given(s=st.floats(10, 500), k=st.floats(10, 500), tau=st.floats(0.5, 400),
           sigma=st.floats(0.001, 0.05), r=st.floats(0, 0.001))
    def test_put_call_parity(self, s, k, tau, sigma, r):
        c = bs_price(s, k, tau, sigma, r)
        p = bs_price(s, k, tau, sigma, r, is_call=False)
        assert abs(c - p - (s - k * math.exp(-r * tau))) < 1e-10 * max(1.0, s)

    @settings(max_examples=200, deadline=None)
    @given(s=st.floats(10, 500), m=st.floats(0.5, 2.0), tau=st.floats(1, 400),
           sigma=st.floats(0.002, 0.05), is_call=st.booleans())
    def test_delta_ranges_and_gamma_parity(self, s, m, tau, sigma, is_call):
        d, g, _, _ = bs_greeks(s, s * m, tau, sigma, R_DAY, is_call)
        if is_call:
            assert 0.0 <= d <= 1.0
        else:
            assert -1.0 <= d <= 0.0
        g_other = bs_greeks(s, s * m, tau, sigma, R_DAY, not is_call)[1]
        assert g == pytest.approx(g_other, rel=1e-12, abs=1e-300)

    @pytest.mark.parametrize("is_call", [True, False])
    def test_greeks_match_finite_differences(self, is_call):
        s, k, tau, sig = 100.0, 105.0, 30.0, 0.2 / math.sqrt(252)
        delta, gamma, vega, theta = bs_greeks(s, k, tau, sig, R_DAY, is_call)
        h = 1e-3 * s
        f = lambda **kw: bs_price(**{**dict(s=s, k=k, tau=tau, sigma=sig, r=R_DAY, is_call=is_call), **kw})
        # truncation error of the 1e-3*s bump is ~2.5e-5 relative at K=105,
        # so the 1e-5 bar is checked with that bump at the money
        atm_delta = bs_greeks(s, s, tau, sig, R_DAY, is_call)[0]
        fd_atm = (bs_price(s + h, s, tau, sig, R_DAY, is_call) - bs_price(s - h, s, tau, sig, R_DAY, is_call)) / (2 * h)
        assert abs(atm_delta - fd_atm) < 1e-5 * abs(atm_delta)
        hs = 1e-4 * s
        fd_delta = (f(s=s + hs) - f(s=s - hs)) / (2 * hs)
        assert abs(delta - fd_delta) < 1e-5 * abs(delta)
        fd_gamma = (f(s=s + h) - 2 * f() + f(s=s - h)) / h ** 2
        assert gamma == pytest.approx(fd_gamma, rel=1e-4)
        hv = 1e-6
        assert vega == pytest.approx((f(sigma=sig + hv) - f(sigma=sig - hv)) / (2 * hv), rel=1e-6)
        ht = 1e-4
        assert theta == pytest.approx(-(f(tau=tau + ht) - f(tau=tau - ht)) / (2 * ht), rel=1e-5)

    def test_greeks_rejected_at_expiry(self):
        with pytest.raises(ValidationError):
            bs_greeks(100, 100, 0, 0.01, 0.0)


class TestImpliedVol:
    def test_round_trip(self):
        sig = 0.2 / math.sqrt(252)
        price = bs_price(100, 105, 30, sig, R_DAY)
        assert abs(implied_vol(price, 100, 105, 30, R_DAY) - sig) < 1e-8

    def test_reprices_to_1e10(self):
        sig = 0.013
        price = bs_price(100, 95, 20, sig, R_DAY, is_call=False)
        iv = implied_vol(price, 100, 95, 20, R_DAY, is_call=False)
        assert abs(bs_price(100, 95, 20, iv, R_DAY, is_call=False) - price) < 1e-10

    def test_intrinsic_returns_floor(self):
        intrinsic = 100 - 80 * math.exp(-R_DAY * 10)
        assert implied_vol(intrinsic, 100, 80, 10, R_DAY) == IV_LOWER

    def test_out_of_bounds(self):
        with pytest.raises(NoSolutionError):
            implied_vol(101.0, 100, 90, 10, R_DAY)
        with pytest.raises(NoSolutionError):
            implied_vol(1.0, 100, 50, 10, R_DAY)

    @settings(max_examples=300, deadline=None)
    @given(s=st.floats(50, 200), m=st.floats(0.8, 1.25), tau=st.integers(2, 360),
           sigma=st.floats(0.004, 0.04), r=st.floats(0, 0.0005), is_call=st.booleans())
    def test_fuzz_round_trip(self, s, m, tau, sigma, r, is_call):
        k = s * m
        price = bs_price(s, k, tau, sigma, r, is_call)
        vega = bs_greeks(s, k, tau, sigma, r, is_call)[2]
        # only identifiable when the price carries time value above rounding
        if vega * 1e-6 < 1e-9 * s:
            return
        assert abs(implied_vol(price, s, k, tau, r, is_call) - sigma) < 1e-6

    def test_vectorised(self):
        sig = np.array([0.01, 0.015, 0.02])
        k = np.array([90.0, 100.0, 110.0])
        prices = bs_price(100.0, k, 30, sig, R_DAY)
        np.testing.assert_allclose(implied_vol(prices, 100.0, k, 30, R_DAY), sig, atol=1e-10)


class TestGarch:
    def test_parameters(self):
        assert HN_PARAMS.gamma_star == pytest.approx(0.9478, abs=1e-12)
        with pytest.raises(ValidationError):
            GarchParams(0.0, 1e-6, 0.1, 0.95, 1.0)

    def test_recursion_collapse(self):
        p = GarchParams(0.1, 2e-5, 0.0, 0.0, 0.3, R_DAY)
        paths = garch_simulate_physical(p, 100.0, 1e-4, 10, 5, seed=0)
        np.testing.assert_array_equal(paths.variances[:, 1:], 2e-5)

    def test_physical_returns_follow_recursion(self):
        paths = garch_simulate_physical(HN_PARAMS, 2585.64, SIGMA1_SQ, 3, 4, seed=5)
        h = paths.variances
        lr = np.diff(np.log(paths.prices), axis=1)
        z = (lr - HN_PARAMS.r - HN_PARAMS.lambda_rp * h[:, :-1]) / np.sqrt(h[:, :-1])
        want = HN_PARAMS.omega_g + HN_PARAMS.beta_g * h[:, :-1] + HN_PARAMS.alpha_g * (z - HN_PARAMS.gamma_g * np.sqrt(h[:, :-1])) ** 2
        np.testing.assert_allclose(h[:, 1:], want, rtol=1e-9)

    def test_unconditional_variance(self):
        p = HN_PARAMS
        paths = garch_simulate_physical(p, 100.0, SIGMA1_SQ, 400, 20_000, seed=11)
        tail = paths.variances[:, 200:]
        # within 2% of (omega + alpha) / (1 - beta - alpha gamma^2)
        assert tail.mean() == pytest.approx(p.unconditional_variance, rel=0.02)

    def test_risk_neutral_martingale(self):
        n = 1_000_000
        paths = garch_simulate_risk_neutral(HN_PARAMS, 100.0, SIGMA1_SQ, 30, n, seed=13)
        disc = math.exp(-HN_PARAMS.r * 30) * paths.prices[:, -1]
        assert abs(disc.mean() - 100.0) < 4 * disc.std() / math.sqrt(n)

    def test_risk_neutral_depends_only_on_gamma_star(self):
        other = GarchParams(0.0, HN_PARAMS.omega_g, HN_PARAMS.alpha_g, HN_PARAMS.beta_g,
                            HN_PARAMS.gamma_star - 0.5, HN_PARAMS.r)
        assert other.gamma_star == pytest.approx(HN_PARAMS.gamma_star)
        a = garch_simulate_risk_neutral(HN_PARAMS, 100.0, SIGMA1_SQ, 20, 50, seed=4)
        b = garch_simulate_risk_neutral(other, 100.0, SIGMA1_SQ, 20, 50, seed=4)
        np.testing.assert_allclose(a.prices, b.prices, rtol=1e-14)


class TestHestonNandi:
    def test_one_period_is_black_scholes(self):
        for k in (2400.0, 2585.64, 2700.0):
            got = hn_price(2585.64, k, 1, SIGMA1_SQ, HN_PARAMS)
            want = bs_price(2585.64, k, 1, math.sqrt(SIGMA1_SQ), HN_PARAMS.r)
            assert abs(got - want) < 1e-8

    def test_deep_itm_forward_bound(self):
        s = 2585.64
        got = hn_price(s, 1e-3, 10, SIGMA1_SQ, HN_PARAMS)
        assert got == pytest.approx(s - 1e-3 * math.exp(-HN_PARAMS.r * 10), abs=1e-8)

    def test_put_call_parity(self):
        s, k, tau = 2585.64, 2500.0, 20
        c = hn_price(s, k, tau, SIGMA1_SQ, HN_PARAMS)
        p = hn_price(s, k, tau, SIGMA1_SQ, HN_PARAMS, is_call=False)
        assert c - p == pytest.approx(s - k * math.exp(-HN_PARAMS.r * tau), abs=1e-8)

    def test_mc_agreement_small(self):
        price = hn_price(100.0, 100.0, 10, SIGMA1_SQ, HN_PARAMS)
        mc, se = hn_mc_price(100.0, 100.0, 10, SIGMA1_SQ, HN_PARAMS, n_paths=200_000, seed=3)
        assert abs(price - mc) < 3 * se

    def test_mc_one_period_matches_bs(self):
        mc, se = hn_mc_price(100.0, 100.0, 1, SIGMA1_SQ, HN_PARAMS, n_paths=200_000, seed=9)
        assert abs(mc - bs_price(100.0, 100.0, 1, math.sqrt(SIGMA1_SQ), HN_PARAMS.r)) < 3 * se

    def test_mc_scaling_and_determinism(self):
        _, se1 = hn_mc_price(100.0, 100.0, 10, SIGMA1_SQ, HN_PARAMS, n_paths=100_000, seed=1)
        _, se2 = hn_mc_price(100.0, 100.0, 10, SIGMA1_SQ, HN_PARAMS, n_paths=200_000, seed=1)
        assert se2 / se1 == pytest.approx(1 / math.sqrt(2), rel=0.2)
        assert hn_mc_price(100.0, 100.0, 10, SIGMA1_SQ, HN_PARAMS, n_paths=1000, seed=1) == \
            hn_mc_price(100.0, 100.0, 10, SIGMA1_SQ, HN_PARAMS, n_paths=1000, seed=1)

    def test_garch_delta(self):
        s = 2585.64
        d1 = garch_delta(s, s, 1, SIGMA1_SQ, HN_PARAMS)
        bs_d = bs_greeks(s, s, 1, math.sqrt(SIGMA1_SQ), HN_PARAMS.r)[0]
        assert abs(d1 - bs_d) < 1e-4
        d = garch_delta(s, s, 45, SIGMA1_SQ, HN_PARAMS)
        assert 0.0 < d < 1.0
        assert garch_delta(s, 0.5 * s, 45, SIGMA1_SQ, HN_PARAMS) > 0.99

    def test_vectorised_strikes(self):
        ks = np.array([2400.0, 2585.64, 2700.0])
        batch = hn_price(2585.64, ks, 30, SIGMA1_SQ, HN_PARAMS)
        single = [hn_price(2585.64, k, 30, SIGMA1_SQ, HN_PARAMS) for k in ks]
        np.testing.assert_allclose(batch, single, rtol=1e-12)
