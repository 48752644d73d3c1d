"""Agent bundle: Gaussian policy, value network, VaR head and state normalizer."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..env import ACTION_BOUND, StepObs
from ..exceptions import ValidationError
from .losses import gaussian_logpdf
from .nets import DenseNet, RunningNormalizer

DEFAULT_LOG_VAR = math.log(0.01)


class GaussianPolicy:
    """N(mu(s; phi), exp(log_var)); draws are truncated to [-b, b]."""

    def __init__(self, mean_net: DenseNet, log_var: float = DEFAULT_LOG_VAR, bound: float = ACTION_BOUND):
        if not bound > 0:
            raise ValidationError("action bound must be positive")
        self.mean_net = mean_net
        self.log_var = float(log_var)
        self.bound = float(bound)

    @property
    def variance(self) -> float:
        return math.exp(self.log_var)

    def mean(self, x, train: bool = False) -> np.ndarray:
        return self.mean_net.forward(x, train=train)[0]

    def log_density(self, x, raw_action, train: bool = False) -> np.ndarray:
        """Gaussian log-density at the pre-truncation draw."""
        return gaussian_logpdf(raw_action, self.mean(x, train), self.log_var)

    def sample(self, x, rng: np.random.Generator):
        mu = self.mean(x)
        raw = mu + math.sqrt(self.variance) * rng.standard_normal(len(mu))
        return np.clip(raw, -self.bound, self.bound), raw, gaussian_logpdf(raw, mu, self.log_var)

    def flat(self) -> np.ndarray:
        return np.append(self.mean_net.get_flat(), self.log_var)

    def set_flat(self, v: np.ndarray) -> None:
        self.mean_net.set_flat(v[:-1])
        self.log_var = float(v[-1])


class VarHead:
    """VaR estimate omega: a learned scalar (one contract) or a network of s0."""

    def __init__(self, omega: Optional[float] = 0.0, net: Optional[DenseNet] = None):
        if (net is None) == (omega is None):
            raise ValidationError("exactly one of omega and net must be given")
        self.omega = None if omega is None else float(omega)
        self.net = net

    @property
    def mode(self) -> str:
        return "scalar" if self.net is None else "network"

    def __call__(self, s0_norm) -> np.ndarray:
        s0 = np.atleast_2d(s0_norm)
        if self.net is None:
            return np.full(len(s0), self.omega)
        return self.net.forward(s0, train=False)[0]

    def to_dict(self) -> dict:
        return {"omega": self.omega, "net": None if self.net is None else self.net.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "VarHead":
        if d["net"] is None:
            return cls(omega=d["omega"])
        return cls(omega=None, net=DenseNet.from_dict(d["net"]))


def feature_dim(state_kind: str) -> int:
    from ..env import CS_FEATURES, CU_FEATURES
    return len(CS_FEATURES if state_kind == "cs" else CU_FEATURES)


@dataclass
class Agent:
    policy: GaussianPolicy
    value_net: DenseNet
    var_head: VarHead
    normalizer: RunningNormalizer
    state_kind: str = "cs"
    is_call: bool = True
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, state_kind: str = "cs", is_call: bool = True, hidden: int = 3, width: int = 32,
              var_network: bool = False, seed: int = 0, log_var: float = DEFAULT_LOG_VAR,
              batch_norm: bool = True) -> "Agent":
        """Fresh agent; each network uses its own seeded substream."""
        d = feature_dim(state_kind)
        sizes = [d] + [width] * hidden + [1]
        rngs = [np.random.default_rng([seed, i]) for i in range(3)]
        head = "sigmoid" if is_call else "neg_sigmoid"
        policy = GaussianPolicy(DenseNet(sizes, head, batch_norm, rngs[0]), log_var)
        value = DenseNet(sizes, "linear", batch_norm, rngs[1])
        var_head = VarHead(omega=None, net=DenseNet(sizes, "linear", batch_norm, rngs[2])) if var_network \
            else VarHead(omega=0.0)
        return cls(policy, value, var_head, RunningNormalizer(d), state_kind, is_call)

    # -- acting ------------------------------------------------------------

    def normalize(self, features, update: bool = False) -> np.ndarray:
        return self.normalizer.normalize(features, update=update)

    def stochastic_policy(self, recorder: Optional[List[np.ndarray]] = None, update_normalizer: bool = True):
        """Policy callable for rollouts: samples actions and records normalized states."""

        def act(obs: StepObs, rng: np.random.Generator):
            feats = obs.features
            if update_normalizer and np.any(obs.active):
                self.normalizer.update(feats[obs.active])
            x = self.normalize(feats)
            if recorder is not None:
                recorder.append(x)
            a, raw, logp = self.policy.sample(x, rng)
            a = np.where(obs.active, a, obs.position)
            return a, raw, logp

        return act

    def deterministic_policy(self):
        """Mean action, no normalizer updates; suitable for evaluation."""

        def act(obs: StepObs, rng=None):
            mu = self.policy.mean(self.normalize(obs.features))
            b = self.policy.bound
            return np.where(obs.active, np.clip(mu, -b, b), obs.position)

        return act

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "rlhedge-agent/1",
            "state_kind": self.state_kind,
            "is_call": self.is_call,
            "policy": {"mean_net": self.policy.mean_net.to_dict(), "log_var": self.policy.log_var,
                       "bound": self.policy.bound},
            "value_net": self.value_net.to_dict(),
            "var_head": self.var_head.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Agent":
        if d.get("format") != "rlhedge-agent/1":
            raise ValidationError("not an agent checkpoint")
        p = d["policy"]
        policy = GaussianPolicy(DenseNet.from_dict(p["mean_net"]), p["log_var"], p["bound"])
        return cls(policy, DenseNet.from_dict(d["value_net"]), VarHead.from_dict(d["var_head"]),
                   RunningNormalizer.from_dict(d["normalizer"]), d["state_kind"], bool(d["is_call"]),
                   d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "Agent":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def copy(self) -> "Agent":
        return Agent.from_dict(json.loads(json.dumps(self.to_dict())))
