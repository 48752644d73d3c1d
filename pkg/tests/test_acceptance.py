"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict with the measured numbers;
the lines are printed in the terminal summary (see conftest.py).
"""
import math

import numpy as np
import pytest
import yaml

from rlhedge import cli
from rlhedge.benchmarks import BSDeltaHedger, run_benchmark
from rlhedge.chain import TradingCalendar, bs_episode_batch, list_contracts
from rlhedge.env import CostSpec, RewardSpec, rollout, rollout_batch
from rlhedge.episode import EpisodeBatch, OptionContract, OptionEpisode
from rlhedge.market import (
    GarchParams,
    GbmParams,
    bs_greeks,
    bs_price,
    gbm_simulate,
    hn_mc_price,
    hn_price,
    implied_vol,
)
from rlhedge.risk import (
    _cvar_rows,
    bootstrap_ci,
    empirical_cvar,
    empirical_var,
    rockafellar_objective,
)
from rlhedge.rl import Agent, ContractSampler, MixtureSampler, PretrainConfig, TrainConfig, gae, pinball_loss
from rlhedge.rl.train import evaluate, pretrain_initializer, train_cs, train_cu

from gradcheck import gradient_check_errors

RESULTS = []

GBM = GbmParams(0.1 / 252, 0.2 / math.sqrt(252), 0.03 / 365)
HN_PARAMS = GarchParams(lambda_rp=0.2981, omega_g=3.4105e-07, alpha_g=9.6154e-06, beta_g=0.8168,
                     gamma_g=0.1497, r=0.03 / 365)
SIGMA1_SQ = 0.006652 ** 2


def verdict(name, ok, detail):
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


@pytest.fixture(scope="module")
def test_paths():
    return bs_episode_batch(GBM, 100.0, 105.0, 30, 100_000, seed=20240)


def _cvar_ci(pnl):
    return bootstrap_ci(pnl, lambda x: empirical_cvar(x, 0.975), B=1000, seed=0,
                        batched=lambda m: _cvar_rows(-m, 0.975))


class TestBaselines:
    @pytest.mark.parametrize("rate,mean_ref,cvar_ref,label", [
        (0.0, 5.9855e-5, 1.1977, "1 BS delta, no cost"),
        (0.001, -0.1725, 1.4873, "2 BS delta, 0.1% cost"),
    ])
    def test_bs_delta_baseline(self, test_paths, rate, mean_ref, cvar_ref, label):
        pnl = run_benchmark(test_paths, BSDeltaHedger(), CostSpec(rate))
        mean, se = pnl.mean(), pnl.std(ddof=1) / math.sqrt(len(pnl))
        cvar = empirical_cvar(pnl, 0.975)
        ok_mean = abs(mean - mean_ref) <= 3 * se
        ok_cvar = abs(cvar / cvar_ref - 1) <= 0.03
        verdict(label, ok_mean and ok_cvar,
                f"mean {mean:.4e} (target {mean_ref:.4e} +/- 3se={3 * se:.2e}), "
                f"0.975-CVaR {cvar:.4f} (target {cvar_ref} +/- 3%)")
        assert ok_mean and ok_cvar


@pytest.mark.slow
class TestCSRL:
    def test_cs_rl_beats_bs_delta(self, test_paths):
        agent = Agent.build("cs", True, seed=0)
        pretrain_initializer(bs_episode_batch(GBM, 100.0, 105.0, 30, 2000, 123), BSDeltaHedger(), agent,
                             PretrainConfig(epochs=30), RewardSpec("asymmetric", 1.0, 0.0, 0.975))
        cfg = TrainConfig(epochs=200, buffer_size=10020, minibatch=2048, lr=5e-4, seed=0)
        train_cs(agent, ContractSampler.for_buffer(GBM, 100.0, 105.0, 30, cfg.buffer_size, seed=0), cfg,
                 RewardSpec("asymmetric", 1.0, 0.0, 0.975))
        rl = evaluate(agent, test_paths)
        bs = run_benchmark(test_paths, BSDeltaHedger(), CostSpec(0.0))
        c_rl, c_bs = empirical_cvar(rl, 0.975), empirical_cvar(bs, 0.975)
        ci_rl, ci_bs = _cvar_ci(rl), _cvar_ci(bs)
        ok = c_rl < c_bs and ci_rl[1] < ci_bs[0]
        verdict("3 CS-RL vs BS delta (0.975-CVaR)", ok,
                f"RL {c_rl:.4f} CI [{ci_rl[0]:.4f}, {ci_rl[1]:.4f}] vs BS {c_bs:.4f} "
                f"CI [{ci_bs[0]:.4f}, {ci_bs[1]:.4f}]")
        assert ok


class TestHestonNandi:
    def test_one_period_matches_bs(self):
        worst = 0.0
        for s, k in [(100.0, 90.0), (100.0, 100.0), (2585.64, 2600.0)]:
            for call in (True, False):
                hn = hn_price(s, k, 1, SIGMA1_SQ, HN_PARAMS, call)
                ref = bs_price(s, k, 1.0, math.sqrt(SIGMA1_SQ), HN_PARAMS.r, call)
                worst = max(worst, abs(hn - ref))
        ok = worst <= 1e-8
        verdict("4a HN tau=1 equals BS", ok, f"max abs diff {worst:.2e} (tol 1e-8)")
        assert ok

    @pytest.mark.slow
    def test_matches_monte_carlo(self):
        s = 2585.64
        price = hn_price(s, s, 45, SIGMA1_SQ, HN_PARAMS)
        mc, se = hn_mc_price(s, s, 45, SIGMA1_SQ, HN_PARAMS, n_paths=1_000_000, seed=7)
        ok = abs(price - mc) <= 3 * se
        verdict("4b HN vs Monte Carlo (1e6 paths)", ok, f"closed form {price:.4f}, MC {mc:.4f} +/- {se:.4f}")
        assert ok


class TestPropertySuites:
    def test_pinball_minimizer(self):
        w = np.random.default_rng(1).standard_normal(1000)
        grid = np.sort(-w)
        best = grid[int(np.argmin([pinball_loss(g, w, 0.975).sum() for g in grid]))]
        ok = best == empirical_var(w, 0.975)
        verdict("5a pinball minimizer = empirical quantile", ok, f"grid argmin {best:.6f}")
        assert ok

    def test_gae_monte_carlo(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 50))
            r, v = rng.standard_normal(n), rng.standard_normal(n)
            mc = np.cumsum(r[::-1])[::-1]
            worst = max(worst, float(np.max(np.abs(gae(r, v, 1.0, 1.0) - (mc - v)))))
        ok = worst <= 1e-12
        verdict("5b GAE(1,1) = MC return - baseline", ok, f"max abs err {worst:.2e} over 1000 episodes")
        assert ok

    def test_gradients(self):
        errs = gradient_check_errors()
        ok = max(errs.values()) < 1e-4
        verdict("5c analytic vs finite-difference gradients", ok,
                ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
        assert ok

    def test_self_financing(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(500):
            n = int(rng.integers(1, 40))
            s = 100 * np.exp(np.cumsum(np.r_[0, rng.normal(0, 0.02, n)]))
            z = np.abs(rng.normal(3, 1, n + 1))
            ep = OptionEpisode(OptionContract("sf", True, 100.0, 0, n), 0, s, z, np.full(n + 1, 0.01),
                               np.zeros(n + 1), np.zeros(n + 1), np.zeros(n + 1), np.zeros(n + 1),
                               np.zeros(n + 1))
            acts = rng.uniform(-1, 1, n)
            tr = rollout(ep, lambda obs, g: np.full(1, acts[obs.t]))
            expected = np.sum(acts * np.diff(s)) - (ep.option_price[-1] - ep.option_price[0])
            worst = max(worst, abs(tr.final_wealth[0] - expected))
        ok = worst <= 1e-10
        verdict("5d self-financing telescoping", ok, f"max abs err {worst:.2e} over 500 random action paths")
        assert ok

    def test_cvar_rockafellar(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(200):
            pnl = rng.standard_normal(int(rng.integers(1, 51)))
            grid = np.sort(-pnl)
            brute = float(np.min(rockafellar_objective(pnl, grid, 0.95)))
            worst = max(worst, abs(brute - empirical_cvar(pnl, 0.95)))
        ok = worst <= 1e-12
        verdict("5e CVaR = Rockafellar-Uryasev minimum", ok, f"max abs err {worst:.2e}")
        assert ok

    def test_parity_and_iv(self):
        rng = np.random.default_rng(5)
        n = 2000
        s, k = rng.uniform(50, 150, n), rng.uniform(50, 150, n)
        tau, sig, r = rng.uniform(1, 300, n), rng.uniform(0.003, 0.03, n), rng.uniform(0, 5e-4, n)
        call = rng.random(n) < 0.5
        parity = np.max(np.abs(bs_price(s, k, tau, sig, r, True) - bs_price(s, k, tau, sig, r, False)
                               - (s - k * np.exp(-r * tau))))
        # anchor round trips at the money
        anchor = max(abs(implied_vol(bs_price(100.0, 100.0, t, v, 1e-4), 100.0, 100.0, t, 1e-4) - v)
                     for t in (5, 30, 120) for v in (0.005, 0.0126, 0.03))
        # fuzz: only draws whose price carries time value above rounding identify sigma
        fuzz = 0.0
        vega = np.empty(n)
        for c in (True, False):
            m = call == c
            vega[m] = bs_greeks(s[m], k[m], tau[m], sig[m], r[m], c)[2]
            keep = m & (vega * 1e-6 >= 1e-9 * s)
            iv = implied_vol(bs_price(s[keep], k[keep], tau[keep], sig[keep], r[keep], c),
                             s[keep], k[keep], tau[keep], r[keep], c)
            fuzz = max(fuzz, float(np.max(np.abs(iv - sig[keep]))))
        used = int(np.sum(vega * 1e-6 >= 1e-9 * s))
        ok = parity <= 1e-10 and anchor <= 1e-8 and fuzz <= 1e-6
        verdict("5f put-call parity and IV round trip", ok,
                f"parity {parity:.1e}, ATM round trip {anchor:.1e}, fuzz {fuzz:.1e} "
                f"on {used}/{n} identifiable draws")
        assert ok


@pytest.mark.slow
class TestCURL:
    def test_two_contract_var_network(self):
        contracts = [(100.0, 10), (105.0, 30)]
        reward = RewardSpec("asymmetric", 1.0, 0.0, 0.975)
        agent = Agent.build("cu", True, var_network=True, seed=0)
        pool = EpisodeBatch.concat([bs_episode_batch(GBM, 100.0, k, T, 1000, 50 + i)
                                    for i, (k, T) in enumerate(contracts)])
        pretrain_initializer(pool, BSDeltaHedger(), agent, PretrainConfig(epochs=30), reward)
        sampler = MixtureSampler([ContractSampler(GBM, 100.0, k, T, 250, seed=10 + i)
                                  for i, (k, T) in enumerate(contracts)])
        cfg = TrainConfig(epochs=100, buffer_size=10000, minibatch=2048, lr=5e-4, var_lr=5e-3, seed=0)
        train_cu(agent, sampler, cfg, reward)
        parts, ok = [], True
        for i, (k, T) in enumerate(contracts):
            b = bs_episode_batch(GBM, 100.0, k, T, 20000, 900 + i)
            tr = rollout_batch(b, agent.stochastic_policy(update_normalizer=False), CostSpec(0.0), reward,
                               np.random.default_rng(5), "cu")
            pred = float(np.mean(agent.var_head(agent.normalize(tr.states[:, 0]))))
            q = empirical_var(tr.final_wealth, 0.975)
            ok &= abs(pred / q - 1) <= 0.10
            parts.append(f"K={k:g},T={T}: net {pred:.4f} vs quantile {q:.4f}")
        verdict("6 CU two-contract VaR network", ok, "; ".join(parts))
        assert ok


class TestDeterminism:
    def test_cli_outputs_bit_identical(self, tmp_path):
        cfg = {"seed": 11, "contract": {"strike": 105, "maturity": 10},
               "network": {"hidden": 2, "width": 8},
               "train": {"epochs": 3, "buffer_size": 300, "minibatch": 128, "passes": 2},
               "evaluate": {"n_paths": 2000, "bootstrap": 100, "strategies": ["rl", "bs-delta"]}}
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump(cfg))
        files = []
        for run_id in "ab":
            out = tmp_path / run_id
            assert cli.run(["train-cs", "--config", str(p), "--out", str(out / "t")]) == 0
            assert cli.run(["evaluate", "--config", str(p), "--out", str(out / "e"),
                            "--checkpoint", str(out / "t" / "agent.json")]) == 0
            files.append({f: (out / f).read_bytes() for f in
                          ("t/agent.json", "t/curve.csv", "t/checkpoint.json", "e/report.csv", "e/pnl.csv")})
        same = [f for f in files[0] if files[0][f] == files[1][f]]
        ok = len(same) == len(files[0])
        verdict("7 determinism (train + evaluate)", ok, f"{len(same)}/{len(files[0])} files identical")
        assert ok


class TestFakeMarket:
    def test_csv_end_to_end_cu(self, tmp_path):
        split = {"d1": "2010-09-01", "d2": "2010-10-15", "d3": "2011-03-31"}
        chain_cfg = {"seed": 5, "chain": {"start_date": "2010-01-04", "n_days": 300, "split": split}}
        (tmp_path / "chain.yaml").write_text(yaml.safe_dump(chain_cfg))
        assert cli.run(["build-chain", "--config", str(tmp_path / "chain.yaml"), "--out", str(tmp_path / "m")]) == 0
        cu_cfg = {"seed": 5, "experiment": "cu", "network": {"hidden": 2, "width": 16},
                  "data": {"option_csv": str(tmp_path / "m" / "options.csv"), "split": split},
                  "train": {"epochs": 3, "buffer_size": 3000, "minibatch": 1024, "passes": 1},
                  "evaluate": {"bootstrap": 100, "strategies": ["rl", "bs-delta", "sabr-delta"]}}
        (tmp_path / "cu.yaml").write_text(yaml.safe_dump(cu_cfg))
        codes = [cli.run(["train-cu", "--config", str(tmp_path / "cu.yaml"), "--out", str(tmp_path / "t")]),
                 cli.run(["evaluate", "--config", str(tmp_path / "cu.yaml"), "--out", str(tmp_path / "e"),
                          "--checkpoint", str(tmp_path / "t" / "agent.json")])]
        ok = codes == [0, 0] and (tmp_path / "e" / "report.csv").is_file()
        verdict("fake-market CSV through CU-RL", ok, f"exit codes {codes}")
        assert ok


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="single simulated path gives far fewer listed contracts than the "
                                       "reported dataset; see README")
def test_dataset_contract_count():
    cal = TradingCalendar(end="2018-01-01")
    path = gbm_simulate(GBM, 1447.16, len(cal) - 1, 1, seed=0)[0]
    n = len(list_contracts(path.prices, cal))
    ok = abs(n / 142987 - 1) <= 0.15
    verdict("chain dataset size (+/-15% of 142987)", ok, f"{n} contracts listed")
    assert ok
