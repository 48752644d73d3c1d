"""Hedging MDP: self-financing dynamics, transaction costs, rewards, margin."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .episode import EpisodeBatch, OptionEpisode
from .exceptions import OutOfStepsError, ValidationError

ACTION_BOUND = 1.0
CS_FEATURES = ("cash", "position", "price", "vol", "tau")
CU_FEATURES = CS_FEATURES + ("moneyness", "wealth", "delta", "gamma", "vega", "theta", "rate")
REWARD_VARIANTS = ("asymmetric", "zero", "asymmetric-margin", "zero-margin")


@dataclass(frozen=True)
class CostSpec:
    proportional_rate: float = 0.0

    def __post_init__(self):
        if self.proportional_rate < 0:
            raise ValidationError("transaction cost rate must be >= 0")


@dataclass(frozen=True)
class RewardSpec:
    variant: str = "asymmetric"
    lambda1: float = 1.0
    lambda2: float = 0.0
    alpha: float = 0.975

    def __post_init__(self):
        if self.variant not in REWARD_VARIANTS:
            raise ValidationError(f"unknown reward variant {self.variant!r}")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("reward weights must be non-negative")

    @property
    def margin_scaled(self) -> bool:
        return self.variant.endswith("-margin")

    @property
    def zero_intermediate(self) -> bool:
        return self.variant.startswith("zero")


def wealth(cash, position, price, option_price):
    return cash + position * price - option_price


def transaction_cost(price, position, action, rate):
    return rate * np.abs(action - position) * price


def margin_initial(z0, s0, strike, is_call=True):
    """CBOE uncovered-writer initial margin for one unit of underlying."""
    otm = np.where(is_call, np.maximum(strike - s0, 0.0), np.maximum(s0 - strike, 0.0))
    m = np.maximum(z0 + 0.15 * s0 - otm, z0 + 0.10 * s0)
    return m[()] if np.ndim(m) == 0 else m


def intermediate_reward(w_next, spec: RewardSpec, m0=1.0):
    w = np.asarray(w_next, dtype=float)
    if spec.zero_intermediate:
        out = np.zeros_like(w)
    else:
        if spec.margin_scaled:
            w = w / m0
        out = np.where(w < 0, w, 0.0)
    return out[()] if out.ndim == 0 else out


def terminal_reward(w_T, omega, spec: RewardSpec, m0=1.0):
    """-lambda1 * [omega + max(-W - omega, 0) / (1 - alpha)] + lambda2 * W."""
    w = np.asarray(w_T, dtype=float)
    if spec.margin_scaled:
        w = w / m0
    hinge = np.maximum(-w - omega, 0.0) / (1.0 - spec.alpha)
    out = -spec.lambda1 * (omega + hinge) + spec.lambda2 * w
    return out[()] if out.ndim == 0 else out


@dataclass
class HedgeState:
    cash: float
    position: float
    price: float
    vol: float
    tau: float
    moneyness: Optional[float] = None
    wealth: Optional[float] = None
    info: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.tau < 0:
            raise ValidationError("time to maturity must be >= 0")
        if not self.price > 0:
            raise ValidationError("price must be positive")

    def as_vector(self) -> np.ndarray:
        base = [self.cash, self.position, self.price, self.vol, self.tau]
        if self.moneyness is None:
            return np.array(base)
        return np.array(base + [self.moneyness, self.wealth, *np.asarray(self.info)])


@dataclass
class MarketObs:
    price: float
    vol: float
    tau: float
    option_price: Optional[float] = None
    info: Optional[np.ndarray] = None


def _check_action(a):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValidationError("actions must be finite")
    if np.any(np.abs(a) > ACTION_BOUND + 1e-12):
        raise ValidationError("actions must lie in [-1, 1]")
    return a


def step(state: HedgeState, action: float, obs: MarketObs, cost: CostSpec, r: float) -> HedgeState:
    """Advance one day: rebalance to ``action`` shares, accrue interest."""
    if state.tau <= 0:
        raise OutOfStepsError("episode has no steps left")
    a = float(_check_action(action))
    c = transaction_cost(state.price, state.position, a, cost.proportional_rate)
    cash = (state.cash - (a - state.position) * state.price - c) * math.exp(r)
    nxt = HedgeState(cash, a, obs.price, obs.vol, obs.tau)
    if state.moneyness is not None:
        nxt.moneyness = state.moneyness
        nxt.info = obs.info
        nxt.wealth = wealth(cash, a, obs.price, obs.option_price)
    return nxt


# ---------------------------------------------------------------------------
# Batched environment
# ---------------------------------------------------------------------------

@dataclass
class StepObs:
    """What a policy sees at decision time ``t`` for every row of a batch."""

    t: int
    features: np.ndarray
    cash: np.ndarray
    position: np.ndarray
    active: np.ndarray
    batch: EpisodeBatch


Policy = Callable[[StepObs, np.random.Generator], object]


class HedgingEnv:
    """Runs many episodes in lock step; rows past their expiry are frozen."""

    def __init__(self, batch: EpisodeBatch, cost: CostSpec = CostSpec(), reward: RewardSpec = RewardSpec(),
                 state_kind: str = "cs"):
        if state_kind not in ("cs", "cu"):
            raise ValidationError("state_kind must be 'cs' or 'cu'")
        self.batch = batch
        self.cost = cost
        self.reward = reward
        self.state_kind = state_kind
        self.margin = margin_initial(batch.option_price[:, 0], batch.underlying[:, 0], batch.strike, batch.is_call)
        self.reset()

    @property
    def n_features(self) -> int:
        return len(CS_FEATURES if self.state_kind == "cs" else CU_FEATURES)

    def reset(self) -> np.ndarray:
        b = self.batch
        self.t = 0
        self.cash = b.option_price[:, 0].copy()
        self.position = np.zeros(len(b))
        return self.features()

    @property
    def active(self) -> np.ndarray:
        return self.t < self.batch.lengths

    def wealth(self) -> np.ndarray:
        b, t = self.batch, self.t
        return wealth(self.cash, self.position, b.underlying[:, t], b.option_price[:, t])

    def features(self) -> np.ndarray:
        b, t = self.batch, self.t
        cols = [self.cash, self.position, b.underlying[:, t], b.implied_vol[:, t],
                np.maximum(b.lengths - t, 0).astype(float)]
        if self.state_kind == "cu":
            cols += [b.moneyness, self.wealth(), *b.greeks[:, t].T, b.rate[:, t]]
        return np.column_stack(cols)

    def observe(self) -> StepObs:
        return StepObs(self.t, self.features(), self.cash, self.position, self.active, self.batch)

    def step(self, actions):
        """Apply actions on active rows. Returns (features, rewards, done, wealth_next)."""
        b, t = self.batch, self.t
        if t >= b.horizon:
            raise OutOfStepsError("batch has no steps left")
        act = self.active
        a = np.where(act, _check_action(actions), self.position)
        s = b.underlying[:, t]
        c = transaction_cost(s, self.position, a, self.cost.proportional_rate)
        grown = (self.cash - (a - self.position) * s - c) * np.exp(b.rate[:, t])
        self.cash = np.where(act, grown, self.cash)
        self.position = a
        self.t = t + 1
        w_next = self.wealth()
        done = act & (self.t == b.lengths)
        rewards = np.where(act & ~done, intermediate_reward(w_next, self.reward, self.margin), 0.0)
        return self.features(), rewards, done, w_next


@dataclass
class Trajectories:
    """Rollout record for a batch; index t of per-step arrays is decision t.

    ``rewards[:, t]`` holds R_{t+1}; the terminal slot stays zero until the
    trainer fills it with the omega-dependent terminal reward.
    """

    states: np.ndarray
    actions: np.ndarray
    raw_actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    final_wealth: np.ndarray
    lengths: np.ndarray
    initial_state: np.ndarray
    margin: np.ndarray
    terminal_states: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.lengths)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.actions.shape[1])[None, :] < self.lengths[:, None]

    def with_terminal_reward(self, omega, spec: RewardSpec) -> "Trajectories":
        rewards = self.rewards.copy()
        idx = np.arange(len(self))
        rewards[idx, self.lengths - 1] = terminal_reward(self.final_wealth, omega, spec, self.margin)
        return replace(self, rewards=rewards)

    def to_csv(self, path, feature_names=None) -> None:
        names = feature_names or [f"x{i}" for i in range(self.states.shape[2])]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory_id", "step", *names, "action", "reward"])
            for i in range(len(self)):
                for t in range(int(self.lengths[i])):
                    w.writerow([i, t, *map(repr, self.states[i, t].tolist()),
                                repr(float(self.actions[i, t])), repr(float(self.rewards[i, t]))])


def rollout_batch(batch: EpisodeBatch, policy: Policy, cost: CostSpec = CostSpec(),
                  reward: RewardSpec = RewardSpec(), rng: Optional[np.random.Generator] = None,
                  state_kind: str = "cs") -> Trajectories:
    """Roll ``policy`` through every episode of ``batch``.

    ``policy(obs, rng)`` returns actions, or a tuple (actions, raw draws,
    log-densities) for stochastic policies.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    env = HedgingEnv(batch, cost, reward, state_kind)
    n, horizon = len(batch), batch.horizon
    states = np.zeros((n, horizon, env.n_features))
    actions = np.zeros((n, horizon))
    raw = np.zeros((n, horizon))
    logp = np.zeros((n, horizon))
    rewards = np.zeros((n, horizon))
    final_w = np.zeros(n)
    obs = env.observe()
    s0 = obs.features.copy()
    for t in range(horizon):
        out = policy(obs, rng)
        if isinstance(out, tuple):
            a, r_, lp = out
        else:
            a, r_, lp = out, out, np.zeros(n)
        states[:, t] = obs.features
        actions[:, t] = a
        raw[:, t] = r_
        logp[:, t] = lp
        _, rew, done, w_next = env.step(a)
        rewards[:, t] = rew
        final_w = np.where(done, w_next, final_w)
        obs = env.observe()
    return Trajectories(states, actions, raw, logp, rewards, final_w, batch.lengths.copy(), s0,
                        np.asarray(env.margin, dtype=float), terminal_states=obs.features)


def rollout(episode: OptionEpisode, policy: Policy, cost: CostSpec = CostSpec(),
            reward: RewardSpec = RewardSpec(), rng: Optional[np.random.Generator] = None,
            state_kind: str = "cs") -> Trajectories:
    """Single-episode rollout; a batch of one."""
    return rollout_batch(EpisodeBatch.from_episodes([episode]), policy, cost, reward, rng, state_kind)
