"""PPO objective pieces extended with the quantile (VaR) term."""
from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np

from ..exceptions import ValidationError

LR_FLOOR = 1e-12
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def clipped_surrogate(ratio, advantage, epsilon: float):
    """min(ratio * A, g(eps, A)), g = (1 + eps) A for A >= 0 else (1 - eps) A."""
    r = np.asarray(ratio, dtype=float)
    a = np.asarray(advantage, dtype=float)
    g = np.where(a >= 0, (1 + epsilon) * a, (1 - epsilon) * a)
    out = np.minimum(r * a, g)
    return out[()] if out.ndim == 0 else out


def clipped_surrogate_grad(ratio, advantage, epsilon: float) -> np.ndarray:
    """d surrogate / d ratio: A where the unclipped branch is the minimum, else 0."""
    r = np.asarray(ratio, dtype=float)
    a = np.asarray(advantage, dtype=float)
    g = np.where(a >= 0, (1 + epsilon) * a, (1 - epsilon) * a)
    return np.where(r * a <= g, a, 0.0)


def gae(rewards, values, gamma: float = 1.0, lambda_gae: float = 0.95, mask=None) -> np.ndarray:
    """Backward recursion for the generalized advantage estimator.

    ``rewards[..., t]`` is R_{t+1} and ``values[..., t]`` is V(s_t) for
    t = 0..T-1; V(s_T) = 0. For padded 2-D input, ``mask`` marks live steps.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ValidationError("rewards and values must have the same shape")
    if r.ndim == 1:
        return gae(r[None], v[None], gamma, lambda_gae)[0]
    live = np.ones(r.shape, bool) if mask is None else np.asarray(mask, bool)
    out = np.zeros_like(r)
    adv = np.zeros(r.shape[0])
    next_v = np.zeros(r.shape[0])
    for t in range(r.shape[1] - 1, -1, -1):
        nxt_live = live[:, t + 1] if t + 1 < r.shape[1] else np.zeros(r.shape[0], bool)
        nv = np.where(nxt_live, next_v, 0.0)
        carry = np.where(nxt_live, adv, 0.0)
        delta = r[:, t] + gamma * nv - v[:, t]
        adv = np.where(live[:, t], delta + gamma * lambda_gae * carry, 0.0)
        out[:, t] = adv
        next_v = v[:, t]
    return out


def rewards_to_go(advantages, values) -> np.ndarray:
    return np.asarray(advantages, dtype=float) + np.asarray(values, dtype=float)


def value_loss(predicted, target):
    d = np.asarray(predicted, dtype=float) - np.asarray(target, dtype=float)
    out = d * d
    return out[()] if out.ndim == 0 else out


def pinball_loss(omega, w_T, alpha: float):
    """alpha |omega + W| if -W >= omega else (1 - alpha) |omega + W|."""
    om = np.asarray(omega, dtype=float)
    loss = -np.asarray(w_T, dtype=float)
    out = np.where(loss >= om, alpha * (loss - om), (1 - alpha) * (om - loss))
    return out[()] if out.ndim == 0 else out


def pinball_grad(omega, w_T, alpha: float):
    """d pinball / d omega (subgradient (1 - alpha) at the kink)."""
    om = np.asarray(omega, dtype=float)
    loss = -np.asarray(w_T, dtype=float)
    out = np.where(loss > om, -alpha, 1 - alpha)
    return out[()] if out.ndim == 0 else out


def entropy_loss(log_var: float) -> float:
    """Negative Gaussian differential entropy, -[1/2 + log(2 pi)/2 + log(std)]."""
    return -(0.5 + _HALF_LOG_2PI + 0.5 * float(log_var))


def entropy_loss_grad(log_var: float) -> float:
    return -0.5


def gaussian_logpdf(x, mean, log_var):
    x = np.asarray(x, dtype=float)
    return -_HALF_LOG_2PI - 0.5 * log_var - 0.5 * (x - mean) ** 2 * math.exp(-log_var)


def clip_grad(grads: Sequence[np.ndarray], max_norm: float) -> Tuple[list, float]:
    """Scale all arrays jointly by min(max_norm / ||g||, 1); returns (grads, norm)."""
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads))
    scale = min(max_norm / norm, 1.0) if norm > 0 else 1.0
    return [g * scale for g in grads], norm


def lr_at(step: int, initial: float, total: int, terminal: float = LR_FLOOR) -> float:
    """Linear decay from ``initial`` at step 0 to ``terminal`` at step ``total - 1``."""
    if total <= 1:
        return float(initial)
    frac = min(max(step / (total - 1), 0.0), 1.0)
    if frac == 1.0:
        return float(terminal)
    return float(initial + (terminal - initial) * frac)
