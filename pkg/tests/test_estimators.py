import math

import numpy as np
import pytest
from sklearn.base import clone

from rlhedge.benchmarks import BSDeltaHedger, LVFHedger, QuoteGroup, SABRHedger, sabr_vol
from rlhedge.chain import bs_episode_batch
from rlhedge.estimators import RLHedger, SmileCalibrator
from rlhedge.exceptions import NotFittedError, ValidationError
from rlhedge.market import GbmParams
from rlhedge.risk import empirical_cvar
from rlhedge.rl import ContractSampler

GBM = GbmParams(0.1 / 252, 0.2 / math.sqrt(252), 0.03 / 365)


def quadratic_group(date=0, expiry=20):
    k = np.array([90.0, 95.0, 100.0, 105.0, 110.0])
    iv = 1e-5 * k ** 2 - 2.2e-3 * k + 0.13
    return QuoteGroup(date, expiry, k, iv, np.ones(5), 100.0)


def sabr_group(date=0, expiry=30):
    k = np.linspace(85, 115, 7)
    iv = np.array([sabr_vol(100.0, x, 30, 0.012, -0.4, 0.05) for x in k])
    return QuoteGroup(date, expiry, k, iv, np.ones(7), 100.0)


class TestSmileCalibrator:
    def test_lvf_predict_recovers_smile(self):
        g = quadratic_group()
        cal = SmileCalibrator(kind="lvf").fit({(0, 20): g})
        assert np.allclose(cal.predict({(0, 20): g})[(0, 20)], g.implied_vols, atol=1e-12)
        assert isinstance(cal.hedger(), LVFHedger)

    def test_sabr_predict_recovers_smile(self):
        g = sabr_group()
        cal = SmileCalibrator().fit({(0, 30): g})
        assert np.allclose(cal.predict({(0, 30): g})[(0, 30)], g.implied_vols, rtol=1e-3)
        assert isinstance(cal.hedger(), SABRHedger)

    def test_small_group_falls_back(self):
        g = quadratic_group()
        small = QuoteGroup(0, 20, g.strikes[:3], g.implied_vols[:3], g.vegas[:3], 100.0)
        assert SmileCalibrator(kind="lvf").fit({(0, 20): small}).predict({(0, 20): small})[(0, 20)] is None

    def test_params_and_clone(self):
        cal = SmileCalibrator(kind="lvf", backbone=False)
        assert cal.get_params() == {"kind": "lvf", "backbone": False}
        assert clone(cal).set_params(kind="sabr").kind == "sabr"

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            SmileCalibrator().hedger()

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            SmileCalibrator(kind="svi").fit({})

    def test_fit_from_episodes(self):
        batch = bs_episode_batch(GBM, 100.0, 100.0, 5, 2, 1)
        cal = SmileCalibrator(kind="lvf").fit([batch.episode(i) for i in range(2)])
        assert all(v is None for v in cal.fits_.values())

    def test_csv_export(self, tmp_path):
        cal = SmileCalibrator(kind="lvf").fit({(0, 20): quadratic_group()})
        cal.to_csv(tmp_path / "c.csv")
        assert tmp_path.joinpath("c.csv").read_text().startswith("date,expiry")


class TestRLHedger:
    def small(self, **kw):
        base = dict(hidden=2, width=8, epochs=2, buffer_size=100, minibatch=64, passes=1, seed=0)
        base.update(kw)
        return RLHedger(**base)

    def test_get_params_round_trip(self):
        est = self.small(lr=1e-3)
        params = est.get_params()
        assert params["lr"] == 1e-3 and params["mode"] == "cs"
        assert clone(est).get_params() == params

    def test_fit_predict_score(self):
        sampler = ContractSampler(GBM, 100.0, 105.0, 10, 10, seed=1)
        est = self.small().fit(sampler)
        test = bs_episode_batch(GBM, 100.0, 105.0, 10, 200, 9)
        pnl = est.predict(test)
        assert pnl.shape == (200,) and np.all(np.isfinite(pnl))
        assert est.score(test) == -empirical_cvar(pnl, 0.975)
        assert len(est.curve_) == 2
        assert np.all(est.var_estimate(test) == est.agent_.var_head.omega)

    def test_fit_from_pool_with_pretraining(self):
        pool = bs_episode_batch(GBM, 100.0, 105.0, 10, 60, 2)
        est = self.small(mode="cu", teacher=BSDeltaHedger(), pretrain_epochs=2).fit(pool)
        assert set(est.pretrain_report_) == {"policy_mse", "var_loss", "value_mse"}
        assert est.agent_.var_head.mode == "network"

    def test_deterministic(self):
        sampler = ContractSampler(GBM, 100.0, 105.0, 10, 10, seed=1)
        a = self.small().fit(sampler).agent_
        b = self.small().fit(sampler).agent_
        assert np.array_equal(a.policy.flat(), b.policy.flat())

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            self.small().predict(bs_episode_batch(GBM, 100.0, 105.0, 10, 2, 1))

    def test_bad_mode(self):
        with pytest.raises(ValidationError):
            self.small(mode="xx").fit(ContractSampler(GBM, 100.0, 105.0, 10, 10))
