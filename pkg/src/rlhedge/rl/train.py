"""CS-RL / CU-RL training loops (PPO with a learned VaR term) and pre-training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..chain import bs_episode_batch, garch_episode_batch
from ..env import CostSpec, RewardSpec, Trajectories, rollout_batch
from ..episode import EpisodeBatch
from ..exceptions import NumericError, ValidationError
from ..market import GarchParams, GbmParams
from ..risk import empirical_var
from .agent import Agent
from .losses import (
    clip_grad,
    clipped_surrogate,
    clipped_surrogate_grad,
    entropy_loss,
    entropy_loss_grad,
    gae,
    gaussian_logpdf,
    lr_at,
    pinball_grad,
    pinball_loss,
)
from .nets import DenseNet, make_optimizer

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "cumulative_reward", "value_loss", "var_loss")


@dataclass
class TrainConfig:
    epochs: int = 1000
    buffer_size: int = 29988
    minibatch: int = 2048
    passes: int = 5
    lr: float = 5e-4
    lr_terminal: float = 1e-12
    var_lr: Optional[float] = None
    optimizer: str = "adam"
    gamma: float = 1.0
    lambda_gae: float = 0.95
    clip_eps: float = 0.2
    c0: float = 0.0
    c1: float = 0.04
    c2: float = 0.08
    max_grad_norm: float = 0.5
    normalize_advantage: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValidationError("gamma must lie in [0, 1]")
        if not 0 <= self.lambda_gae <= 1:
            raise ValidationError("lambda_gae must lie in [0, 1]")
        if not 0 <= self.clip_eps < 1:
            raise ValidationError("clip epsilon must lie in [0, 1)")
        if not self.max_grad_norm > 0:
            raise ValidationError("max gradient norm must be positive")
        if self.epochs < 1 or self.passes < 1 or self.minibatch < 1 or self.buffer_size < 1:
            raise ValidationError("epochs, passes, minibatch and buffer size must be positive")
        if self.c0 < 0 or self.c1 <= 0 or self.c2 <= 0:
            raise ValidationError("loss weights need c0 >= 0, c1 > 0, c2 > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Losses with analytic gradients
# ---------------------------------------------------------------------------

@dataclass
class Minibatch:
    states: np.ndarray
    raw_actions: np.ndarray
    logp_old: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray

    def __len__(self):
        return len(self.states)

    def take(self, idx) -> "Minibatch":
        return Minibatch(self.states[idx], self.raw_actions[idx], self.logp_old[idx],
                         self.returns[idx], self.advantages[idx])


def combined_loss(agent: Agent, mb: Minibatch, cfg: TrainConfig, update_stats: bool = True):
    """-mean(L^P) + c0 L^E + c1 mean(L^V) on a minibatch.

    Returns (loss, policy gradient incl. log-variance, value gradient, info).
    Networks run in batch-statistics mode.
    """
    n = len(mb)
    if n == 0:
        raise ValidationError("empty minibatch")
    pol = agent.policy
    adv = mb.advantages
    if cfg.normalize_advantage and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    mu, pcache = pol.mean_net.forward(mb.states, train=True, update_stats=update_stats)
    var = pol.variance
    logp = gaussian_logpdf(mb.raw_actions, mu, pol.log_var)
    ratio = np.exp(logp - mb.logp_old)
    surr = clipped_surrogate(ratio, adv, cfg.clip_eps)
    d_logp = -clipped_surrogate_grad(ratio, adv, cfg.clip_eps) * ratio / n
    resid = mb.raw_actions - mu
    g_mean, _ = pol.mean_net.backward(pcache, d_logp * resid / var)
    g_logvar = float(np.sum(d_logp * (-0.5 + 0.5 * resid * resid / var))) + cfg.c0 * entropy_loss_grad(pol.log_var)
    v, vcache = agent.value_net.forward(mb.states, train=True, update_stats=update_stats)
    g_value, _ = agent.value_net.backward(vcache, cfg.c1 * 2.0 * (v - mb.returns) / n)
    vloss = float(np.mean((v - mb.returns) ** 2))
    loss = -float(surr.mean()) + cfg.c0 * entropy_loss(pol.log_var) + cfg.c1 * vloss
    g_policy = np.append(np.concatenate([g.ravel() for g in g_mean]), g_logvar)
    g_val = np.concatenate([g.ravel() for g in g_value])
    info = {"value_loss": vloss, "clip_frac": float(np.mean(np.abs(ratio - 1) > cfg.clip_eps))}
    return loss, g_policy, g_val, info


def var_loss(agent: Agent, s0: np.ndarray, w_T: np.ndarray, alpha: float, c2: float,
             update_stats: bool = True):
    """c2 * mean pinball over the final-P&L buffer and its gradient (scalar or flat ζ)."""
    head = agent.var_head
    if head.net is None:
        om = head.omega
        return c2 * float(np.mean(pinball_loss(om, w_T, alpha))), \
            np.array([c2 * float(np.mean(pinball_grad(om, w_T, alpha)))])
    out, cache = head.net.forward(s0, train=True, update_stats=update_stats)
    grads, _ = head.net.backward(cache, c2 * pinball_grad(out, w_T, alpha) / len(w_T))
    return c2 * float(np.mean(pinball_loss(out, w_T, alpha))), np.concatenate([g.ravel() for g in grads])


# ---------------------------------------------------------------------------
# Samplers: one EpisodeBatch per epoch
# ---------------------------------------------------------------------------

def epoch_seed(seed: int, epoch: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, epoch, stream]).generate_state(1)[0])


@dataclass
class ContractSampler:
    """Fresh simulated paths of one fixed contract every epoch."""

    model: object  # GbmParams or GarchParams
    s0: float
    strike: float
    maturity: int
    n_paths: int
    seed: int = 0
    is_call: bool = True
    sigma1_sq: Optional[float] = None

    def __call__(self, epoch: int, rng=None) -> EpisodeBatch:
        seed = epoch_seed(self.seed, epoch, 1)
        if isinstance(self.model, GarchParams):
            return garch_episode_batch(self.model, self.s0, self.sigma1_sq, self.strike, self.maturity,
                                       self.n_paths, seed, self.is_call)
        return bs_episode_batch(self.model, self.s0, self.strike, self.maturity, self.n_paths, seed, self.is_call)

    @classmethod
    def for_buffer(cls, model, s0, strike, maturity, buffer_size, **kw) -> "ContractSampler":
        return cls(model, s0, strike, maturity, max(1, buffer_size // maturity), **kw)


@dataclass
class MixtureSampler:
    """Concatenation of several per-contract samplers (simulated CU universes)."""

    samplers: Sequence[Callable[[int, np.random.Generator], EpisodeBatch]]

    def __call__(self, epoch: int, rng=None) -> EpisodeBatch:
        return EpisodeBatch.concat([s(epoch, rng) for s in self.samplers])


@dataclass
class PoolSampler:
    """Random episodes from a fixed pool until the tuple budget is reached."""

    pool: EpisodeBatch
    buffer_size: int
    seed: int = 0

    def __call__(self, epoch: int, rng=None) -> EpisodeBatch:
        g = np.random.default_rng([self.seed, epoch, 2])
        order = g.permutation(len(self.pool))
        cum = np.cumsum(self.pool.lengths[order])
        k = int(np.searchsorted(cum, self.buffer_size)) + 1
        return self.pool.subset(np.sort(order[: min(k, len(order))]))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    cumulative_reward: float
    value_loss: float
    var_loss: float
    n_tuples: int
    n_paths: int
    omega_mean: float

    def row(self):
        return [self.epoch, repr(self.cumulative_reward), repr(self.value_loss), repr(self.var_loss)]


@dataclass
class TrainResult:
    agent: Agent
    curve: List[EpochStats] = field(default_factory=list)
    last_final_wealth: Optional[np.ndarray] = None
    optimizer_state: Optional[dict] = None

    def write_curve(self, path) -> None:
        write_curve(path, self.curve)


def write_curve(path, curve: Sequence[EpochStats]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for s in curve:
            w.writerow(s.row())


def _var_targets(tr: Trajectories, reward: RewardSpec) -> np.ndarray:
    return tr.final_wealth / tr.margin if reward.margin_scaled else tr.final_wealth


def _flat_value(agent: Agent) -> np.ndarray:
    return agent.value_net.get_flat()


def _check_finite(name, x, epoch):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {name} at epoch {epoch}")


def train(agent: Agent, sampler: Callable[[int, np.random.Generator], EpisodeBatch], cfg: TrainConfig,
          reward: RewardSpec = RewardSpec(), cost: CostSpec = CostSpec(), start_epoch: int = 0,
          optimizer_state: Optional[dict] = None,
          on_epoch: Optional[Callable[[int, Agent, "TrainResult"], None]] = None) -> TrainResult:
    """Generic PPO loop; the VaR head mode selects scalar (CS) or network (CU) updates."""
    opt_state = optimizer_state or {}
    opt_main = make_optimizer(cfg.optimizer, opt_state.get("main"))
    opt_var = make_optimizer(cfg.optimizer, opt_state.get("var"))
    result = TrainResult(agent)
    n_pol = agent.policy.mean_net.n_params() + 1
    for k in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, k])
        batch = sampler(k, rng)
        recorder: List[np.ndarray] = []
        tr = rollout_batch(batch, agent.stochastic_policy(recorder), cost, reward, rng, agent.state_kind)
        states = np.stack(recorder, axis=1)
        mask = tr.mask
        if not agent.meta.get("calibrated"):
            live = states[mask]
            for net in (agent.policy.mean_net, agent.value_net, agent.var_head.net):
                if net is not None:
                    net.calibrate(live if net is not agent.var_head.net else states[:, 0])
            agent.meta["calibrated"] = True
        s0 = states[:, 0]
        w_var = _var_targets(tr, reward)
        omega = agent.var_head(s0)
        trw = tr.with_terminal_reward(omega, reward)
        values = np.zeros(mask.shape)
        values[mask] = agent.value_net.predict(states[mask])
        adv = gae(trw.rewards, values, cfg.gamma, cfg.lambda_gae, mask)
        ret = adv + values
        buf = Minibatch(states[mask], tr.raw_actions[mask], tr.logp[mask], ret[mask], adv[mask])
        _check_finite("advantages", buf.advantages, k)
        lr = lr_at(k, cfg.lr, cfg.epochs, cfg.lr_terminal)
        var_lr = lr if cfg.var_lr is None else lr_at(k, cfg.var_lr, cfg.epochs, cfg.lr_terminal)
        n_batches = max(1, len(buf) // cfg.minibatch)
        vlosses = []
        for m in range(cfg.passes):
            perm = rng.permutation(len(buf))
            for b in range(n_batches):
                idx = perm[b * cfg.minibatch: (b + 1) * cfg.minibatch] if n_batches > 1 or len(buf) >= cfg.minibatch \
                    else perm
                loss, g_pol, g_val, info = combined_loss(agent, buf.take(idx), cfg)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {k}, pass {m}: {info}")
                (g_pol, g_val), _ = clip_grad([g_pol, g_val], cfg.max_grad_norm)
                params = np.concatenate([agent.policy.flat(), _flat_value(agent)])
                params = opt_main.step(params, np.concatenate([g_pol, g_val]), lr)
                agent.policy.set_flat(params[:n_pol])
                agent.value_net.set_flat(params[n_pol:])
                vlosses.append(info["value_loss"])
            _, g_var = var_loss(agent, s0, w_var, reward.alpha, cfg.c2)
            (g_var,), _ = clip_grad([g_var], cfg.max_grad_norm)
            if agent.var_head.net is None:
                agent.var_head.omega = float(opt_var.step(np.array([agent.var_head.omega]), g_var, var_lr)[0])
            else:
                agent.var_head.net.set_flat(opt_var.step(agent.var_head.net.get_flat(), g_var, var_lr))
        vl, _ = var_loss(agent, s0, w_var, reward.alpha, 1.0, update_stats=False)
        stats = EpochStats(k, float(np.sum(trw.rewards * mask) / len(tr)), float(np.mean(vlosses)), vl,
                           int(mask.sum()), len(tr), float(np.mean(omega)))
        result.curve.append(stats)
        result.last_final_wealth = tr.final_wealth
        result.optimizer_state = {"main": opt_main.state_dict(), "var": opt_var.state_dict()}
        if on_epoch is not None:
            on_epoch(k, agent, result)
    return result


def train_cs(agent: Agent, sampler, cfg: TrainConfig, reward: RewardSpec = RewardSpec(),
             cost: CostSpec = CostSpec(), **kw) -> TrainResult:
    """Contract-specific training: a single learned scalar omega."""
    if agent.var_head.mode != "scalar":
        raise ValidationError("CS training needs a scalar VaR head")
    return train(agent, sampler, cfg, reward, cost, **kw)


def train_cu(agent: Agent, sampler, cfg: TrainConfig, reward: RewardSpec = RewardSpec(),
             cost: CostSpec = CostSpec(), **kw) -> TrainResult:
    """Contract-unified training: omega(s0; zeta) from a VaR network."""
    if agent.var_head.mode != "network":
        raise ValidationError("CU training needs a VaR network")
    return train(agent, sampler, cfg, reward, cost, **kw)


# ---------------------------------------------------------------------------
# Supervised initializer
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 200
    minibatch: int = 512
    lr: float = 1e-3
    seed: int = 0


def fit_network(net: DenseNet, x: np.ndarray, y: np.ndarray, cfg: PretrainConfig, loss: str = "mse",
                alpha: float = 0.975, stream: int = 0) -> float:
    """Adam fit of ``net`` to targets by mean squared error or pinball loss; returns the final loss."""
    rng = np.random.default_rng([cfg.seed, stream])
    opt = make_optimizer("adam")
    n = len(x)
    bs = min(cfg.minibatch, n)
    for ep in range(cfg.epochs):
        perm = rng.permutation(n)
        for b in range(max(1, n // bs)):
            idx = perm[b * bs: (b + 1) * bs]
            out, cache = net.forward(x[idx], train=True)
            if loss == "mse":
                d = 2.0 * (out - y[idx]) / len(idx)
            else:
                d = pinball_grad(out, y[idx], alpha) / len(idx)
            grads, _ = net.backward(cache, d)
            lr = lr_at(ep, cfg.lr, cfg.epochs, cfg.lr * 1e-2)
            net.set_flat(opt.step(net.get_flat(), np.concatenate([g.ravel() for g in grads]), lr))
    pred = net.predict(x)
    return float(np.mean((pred - y) ** 2)) if loss == "mse" else float(np.mean(pinball_loss(pred, y, alpha)))


def suffix_returns(rewards: np.ndarray, mask: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Monte Carlo returns sum_{k >= t} gamma^{k-t} R_{k+1} per live step."""
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        acc = np.where(mask[:, t], rewards[:, t] + gamma * acc, 0.0)
        out[:, t] = acc
    return out


def pretrain_initializer(batch: EpisodeBatch, teacher, agent: Agent, cfg: PretrainConfig = PretrainConfig(),
                         reward: RewardSpec = RewardSpec(), gamma: float = 1.0) -> Dict[str, float]:
    """Fit the agent to a teacher hedger in the zero-cost environment.

    Policy mean: mean squared error to the teacher's actions. VaR head:
    pinball loss on (s0, W_T) (the empirical quantile for a scalar head).
    Value net: Monte Carlo returns of the teacher's rollouts.
    """
    tr = rollout_batch(batch, teacher, CostSpec(0.0), reward, np.random.default_rng(cfg.seed), agent.state_kind)
    mask = tr.mask
    agent.normalizer.update(tr.states[mask])
    x = agent.normalize(tr.states)
    live = x[mask]
    for net in (agent.policy.mean_net, agent.value_net):
        net.calibrate(live)
    report = {"policy_mse": fit_network(agent.policy.mean_net, live, tr.actions[mask], cfg, stream=0)}
    w_var = _var_targets(tr, reward)
    s0 = x[:, 0]
    if agent.var_head.net is None:
        agent.var_head.omega = empirical_var(w_var, reward.alpha)
        report["var_loss"] = float(np.mean(pinball_loss(agent.var_head.omega, w_var, reward.alpha)))
    else:
        agent.var_head.net.calibrate(s0)
        report["var_loss"] = fit_network(agent.var_head.net, s0, w_var, cfg, "pinball", reward.alpha, stream=1)
    trw = tr.with_terminal_reward(agent.var_head(s0), reward)
    targets = suffix_returns(trw.rewards, mask, gamma)
    report["value_mse"] = fit_network(agent.value_net, live, targets[mask], cfg, stream=2)
    agent.meta["calibrated"] = True
    return report


def evaluate(agent: Agent, batch: EpisodeBatch, cost: CostSpec = CostSpec()) -> np.ndarray:
    """Final P&L of the deterministic (mean-action) policy."""
    return rollout_batch(batch, agent.deterministic_policy(), cost, RewardSpec(), None, agent.state_kind).final_wealth
