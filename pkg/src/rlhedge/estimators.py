"""Estimator-style wrappers (fit / predict / get_params) for hedgers and smile calibrators."""
from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np
from sklearn.base import BaseEstimator

from .benchmarks import (
    LVFHedger,
    QuoteGroup,
    SABRHedger,
    lvf_fit,
    quote_groups,
    sabr_calibrate,
    sabr_vol,
    write_calibrations,
)
from .env import CostSpec, RewardSpec, rollout_batch
from .episode import EpisodeBatch
from .exceptions import NotFittedError, ValidationError
from .risk import empirical_cvar
from .rl.agent import Agent
from .rl.train import PoolSampler, PretrainConfig, TrainConfig, evaluate, pretrain_initializer, train

Groups = Mapping[Tuple[int, int], QuoteGroup]


def _as_groups(X) -> Groups:
    if isinstance(X, Mapping):
        return X
    return quote_groups(X)


class SmileCalibrator(BaseEstimator):
    """Per-(date, expiry) smile fits: quadratic-in-strike ("lvf") or lognormal SABR ("sabr").

    ``fit`` accepts quote groups or option episodes; groups that cannot be
    fitted map to None, which the derived hedger treats as a BS-delta fallback.
    """

    def __init__(self, kind: str = "sabr", backbone: bool = True):
        self.kind = kind
        self.backbone = backbone

    def fit(self, X, y=None) -> "SmileCalibrator":
        if self.kind not in ("lvf", "sabr"):
            raise ValidationError(f"unknown smile model {self.kind!r}")
        fitter = lvf_fit if self.kind == "lvf" else sabr_calibrate
        self.fits_ = {key: fitter(g) for key, g in sorted(_as_groups(X).items())}
        return self

    def _check(self):
        if not hasattr(self, "fits_"):
            raise NotFittedError("calibrator is not fitted")

    def predict(self, X) -> Dict[Tuple[int, int], Optional[np.ndarray]]:
        """Fitted implied vols at each group's strikes (None where the fit fell back)."""
        self._check()
        out = {}
        for key, g in _as_groups(X).items():
            fit = self.fits_.get(key)
            if fit is None:
                out[key] = None
            elif self.kind == "lvf":
                out[key] = np.polyval(fit, g.strikes)
            else:
                out[key] = np.array([sabr_vol(g.forward, k, g.tau, fit.alpha0, fit.rho, fit.nu) for k in g.strikes])
        return out

    def hedger(self):
        self._check()
        return LVFHedger(self.fits_) if self.kind == "lvf" else SABRHedger(self.fits_, self.backbone)

    def to_csv(self, path) -> None:
        self._check()
        write_calibrations(path, self.fits_, self.kind)


class RLHedger(BaseEstimator):
    """PPO hedging agent with a learned VaR term.

    ``mode="cs"`` learns a scalar VaR for one contract; ``mode="cu"`` learns
    a VaR network of the initial state and accepts mixed contracts.
    ``fit`` takes an EpisodeBatch pool or an epoch sampler
    ``sampler(epoch, rng) -> EpisodeBatch``; ``predict`` returns the final
    P&L of the deterministic policy on each episode.
    """

    def __init__(self, mode: str = "cs", is_call: bool = True, hidden: int = 3, width: int = 32,
                 epochs: int = 1000, buffer_size: int = 29988, minibatch: int = 2048, passes: int = 5,
                 lr: float = 5e-4, var_lr: Optional[float] = None, optimizer: str = "adam",
                 gamma: float = 1.0, lambda_gae: float = 0.95, clip_eps: float = 0.2,
                 c0: float = 0.0, c1: float = 0.04, c2: float = 0.08, max_grad_norm: float = 0.5,
                 normalize_advantage: bool = False, reward: str = "asymmetric", lambda1: float = 1.0,
                 lambda2: float = 0.0, alpha: float = 0.975, cost_rate: float = 0.0,
                 teacher=None, pretrain_epochs: int = 0, seed: int = 0):
        self.mode = mode
        self.is_call = is_call
        self.hidden = hidden
        self.width = width
        self.epochs = epochs
        self.buffer_size = buffer_size
        self.minibatch = minibatch
        self.passes = passes
        self.lr = lr
        self.var_lr = var_lr
        self.optimizer = optimizer
        self.gamma = gamma
        self.lambda_gae = lambda_gae
        self.clip_eps = clip_eps
        self.c0 = c0
        self.c1 = c1
        self.c2 = c2
        self.max_grad_norm = max_grad_norm
        self.normalize_advantage = normalize_advantage
        self.reward = reward
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.alpha = alpha
        self.cost_rate = cost_rate
        self.teacher = teacher
        self.pretrain_epochs = pretrain_epochs
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, buffer_size=self.buffer_size, minibatch=self.minibatch,
                           passes=self.passes, lr=self.lr, var_lr=self.var_lr, optimizer=self.optimizer,
                           gamma=self.gamma, lambda_gae=self.lambda_gae, clip_eps=self.clip_eps, c0=self.c0,
                           c1=self.c1, c2=self.c2, max_grad_norm=self.max_grad_norm,
                           normalize_advantage=self.normalize_advantage, seed=self.seed)

    def reward_spec(self) -> RewardSpec:
        return RewardSpec(self.reward, self.lambda1, self.lambda2, self.alpha)

    def fit(self, X: Union[EpisodeBatch, Callable], y=None, agent: Optional[Agent] = None) -> "RLHedger":
        if self.mode not in ("cs", "cu"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        cfg = self.train_config()
        sampler = PoolSampler(X, self.buffer_size, self.seed) if isinstance(X, EpisodeBatch) else X
        if agent is None:
            agent = Agent.build(self.mode, self.is_call, self.hidden, self.width,
                                var_network=self.mode == "cu", seed=self.seed)
            if self.teacher is not None and self.pretrain_epochs > 0:
                pool = X if isinstance(X, EpisodeBatch) else X(0, None)
                self.pretrain_report_ = pretrain_initializer(
                    pool, self.teacher, agent, PretrainConfig(epochs=self.pretrain_epochs, seed=self.seed),
                    self.reward_spec(), self.gamma)
        result = train(agent, sampler, cfg, self.reward_spec(), CostSpec(self.cost_rate))
        self.agent_ = agent
        self.curve_ = result.curve
        return self

    def _check(self):
        if not hasattr(self, "agent_"):
            raise NotFittedError("hedger is not fitted")

    def predict(self, X: EpisodeBatch) -> np.ndarray:
        self._check()
        return evaluate(self.agent_, X, CostSpec(self.cost_rate))

    def var_estimate(self, X: EpisodeBatch) -> np.ndarray:
        """Learned VaR at each episode's initial state (in the reward's P&L units)."""
        self._check()
        tr = rollout_batch(X, self.agent_.deterministic_policy(),
                           CostSpec(self.cost_rate), self.reward_spec(), None, self.agent_.state_kind)
        return self.agent_.var_head(self.agent_.normalize(tr.states[:, 0]))

    def score(self, X: EpisodeBatch, y=None) -> float:
        """Negative alpha-CVaR of the predicted final P&L (higher is better)."""
        return -empirical_cvar(self.predict(X), self.alpha)
