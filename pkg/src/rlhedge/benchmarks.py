"""Delta-hedging baselines and smile calibrations (LVF, SABR)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from .env import ACTION_BOUND, CostSpec, RewardSpec, StepObs, rollout_batch
from .episode import EpisodeBatch, OptionEpisode
from .market import GarchParams, bs_greeks, garch_delta

MIN_GROUP = 4


# ---------------------------------------------------------------------------
# Point hedge ratios
# ---------------------------------------------------------------------------

def _bound(delta, is_call):
    """Keep a hedge ratio on the side of zero that matches the option type."""
    return np.where(is_call, np.clip(delta, 0.0, ACTION_BOUND), np.clip(delta, -ACTION_BOUND, 0.0))


def bs_delta_hedger(s, k, tau, implied_vol, r, is_call=True):
    """Black-Scholes delta at the quoted implied volatility."""
    return bs_greeks(s, k, tau, implied_vol, r, is_call)[0]


def bs_predvol_delta_hedger(s, k, tau, next_var, r, is_call=True):
    """Black-Scholes delta at the GARCH one-day-ahead volatility."""
    return bs_greeks(s, k, tau, np.sqrt(next_var), r, is_call)[0]


@dataclass(frozen=True)
class QuoteGroup:
    """Quotes sharing one observation date and expiry."""

    date: int
    expiry: int
    strikes: np.ndarray
    implied_vols: np.ndarray
    vegas: np.ndarray
    forward: float

    def __len__(self):
        return len(self.strikes)

    @property
    def tau(self) -> int:
        return self.expiry - self.date


def quote_groups(records: Iterable[OptionEpisode]) -> Dict[Tuple[int, int], QuoteGroup]:
    """Group daily quotes by (date, expiry); duplicate (date, option) rows are ignored."""
    rows: Dict[Tuple[int, int], Dict[float, Tuple[float, float, float]]] = {}
    for e in records:
        for j in range(e.n_steps):
            key = (e.today + j, e.expiry)
            fwd = float(e.underlying[j] * math.exp(e.rate[j] * (e.expiry - e.today - j)))
            rows.setdefault(key, {}).setdefault(e.contract.strike, (e.implied_vol[j], e.vega[j], fwd))
    out = {}
    for key, q in rows.items():
        ks = np.array(sorted(q))
        iv, vega, fwd = (np.array([q[k][i] for k in ks]) for i in range(3))
        out[key] = QuoteGroup(key[0], key[1], ks, iv, vega, float(fwd[0]))
    return out


# ---------------------------------------------------------------------------
# Local volatility function (quadratic smile in strike)
# ---------------------------------------------------------------------------

def lvf_fit(group: QuoteGroup) -> Optional[np.ndarray]:
    """Least-squares (a1, a2, a3) of sigma = a1 K^2 + a2 K + a3; None means fall back to BS."""
    if len(group) < MIN_GROUP:
        return None
    k = group.strikes
    # centre and scale strikes for conditioning, then map the coefficients back
    c, h = k.mean(), max(np.ptp(k), 1e-12)
    x = (k - c) / h
    design = np.column_stack([x * x, x, np.ones_like(x)])
    if np.linalg.matrix_rank(design) < 3:
        return None
    b, *_ = np.linalg.lstsq(design, group.implied_vols, rcond=None)
    a1 = b[0] / h**2
    a2 = b[1] / h - 2 * b[0] * c / h**2
    a3 = b[2] - b[1] * c / h + b[0] * c * c / h**2
    return np.array([a1, a2, a3])


def lvf_delta(s, k, tau, implied_vol, r, fit, is_call=True):
    """BS delta plus vega times the smile slope; BS delta if the sign flips."""
    delta, _, vega, _ = bs_greeks(s, k, tau, implied_vol, r, is_call)
    if fit is None:
        return delta
    adj = delta + vega * (2 * fit[0] * k + fit[1])
    return np.where(np.sign(adj) == np.sign(delta), adj, delta)


# ---------------------------------------------------------------------------
# SABR, beta = 1
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SabrFit:
    alpha0: float
    rho: float
    nu: float

    def __post_init__(self):
        if not (abs(self.rho) < 1 and self.nu >= 0 and self.alpha0 > 0):
            raise ValueError("invalid SABR parameters")


def sabr_vol(f, k, tau, alpha0, rho, nu):
    """Hagan lognormal implied volatility for beta = 1."""
    f, k = np.asarray(f, float), np.asarray(k, float)
    logm = np.log(f / k)
    z = nu / alpha0 * logm
    disc = np.sqrt(1 - 2 * rho * z + z * z)
    small = np.abs(z) < 1e-7
    z_safe = np.where(small, 1.0, z)
    disc = np.where(small, np.sqrt(1 - 2 * rho + 1.0), disc)
    x = np.log((disc + z_safe - rho) / (1 - rho))
    ratio = np.where(small, 1.0 - 0.5 * rho * z, z_safe / np.where(small, 1.0, x))
    corr = 1 + (0.25 * rho * nu * alpha0 + (2 - 3 * rho * rho) * nu * nu / 24) * tau
    out = alpha0 * ratio * corr
    return out[()] if out.ndim == 0 else out


def sabr_calibrate(group: QuoteGroup) -> Optional[SabrFit]:
    """Bounded least squares on implied vols; None means fall back to BS."""
    if len(group) < MIN_GROUP:
        return None
    f, k, tau, iv = group.forward, group.strikes, group.tau, group.implied_vols
    atm = float(np.interp(f, k, iv)) if k[0] <= f <= k[-1] else float(iv[np.argmin(np.abs(k - f))])
    scale = max(atm, 1e-6)

    def resid(p):
        return (sabr_vol(f, k, tau, p[0] * scale, p[1], p[2] * scale) - iv) / scale

    res = least_squares(resid, x0=[1.0, 0.0, 1.0], bounds=([1e-6, -0.999, 0.0], [50.0, 0.999, 200.0]),
                        xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=2000)
    if not res.success or not np.all(np.isfinite(res.x)):
        return None
    return SabrFit(float(res.x[0] * scale), float(res.x[1]), float(res.x[2] * scale))


def sabr_delta(s, k, tau, r, fit: SabrFit, is_call=True, rel_bump=1e-4, backbone=True):
    """delta_BS(sigma_SABR) + vega * d sigma_SABR / dF * dF/dS, forward F = S e^{r tau}."""
    growth = math.exp(r * tau)
    f = s * growth
    sig = sabr_vol(f, k, tau, fit.alpha0, fit.rho, fit.nu)
    delta, _, vega, _ = bs_greeks(s, k, tau, sig, r, is_call)
    if backbone:
        h = rel_bump * f
        up = sabr_vol(f + h, k, tau, fit.alpha0, fit.rho, fit.nu)
        dn = sabr_vol(f - h, k, tau, fit.alpha0, fit.rho, fit.nu)
        delta = delta + vega * (up - dn) / (2 * h) * growth
    return _bound(delta, is_call)


def write_calibrations(path, fits: Mapping[Tuple[int, int], object], kind: str) -> None:
    """CSV of per-group calibrations; ``kind`` is "lvf" or "sabr"."""
    cols = ("a1", "a2", "a3") if kind == "lvf" else ("alpha0", "rho", "nu")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "expiry", *cols, "fallback_flag"])
        for (d, e), fit in sorted(fits.items()):
            if fit is None:
                w.writerow([d, e, "", "", "", 1])
            elif kind == "lvf":
                w.writerow([d, e, *map(repr, map(float, fit)), 0])
            else:
                w.writerow([d, e, repr(fit.alpha0), repr(fit.rho), repr(fit.nu), 0])


# ---------------------------------------------------------------------------
# Batch policies for the hedging environment
# ---------------------------------------------------------------------------

class _BatchHedger:
    """Deterministic policy; rows past their expiry keep their position."""

    name = "hedger"

    def __call__(self, obs: StepObs, rng=None) -> np.ndarray:
        b, t = obs.batch, obs.t
        act = obs.active
        out = obs.position.copy()
        if np.any(act):
            idx = np.flatnonzero(act)
            tau = (b.lengths[idx] - t).astype(float)
            d = self.rows(b, t, idx, tau)
            out[idx] = _bound(d, b.is_call[idx])
        return out

    def rows(self, b: EpisodeBatch, t: int, idx: np.ndarray, tau: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def _by_type(fn, b, idx):
        """Evaluate ``fn(sub_idx, is_call)`` separately for calls and puts."""
        out = np.empty(len(idx))
        for flag in (True, False):
            m = b.is_call[idx] == flag
            if np.any(m):
                out[m] = fn(m, flag)
        return out


class BSDeltaHedger(_BatchHedger):
    name = "BS delta"

    def rows(self, b, t, idx, tau):
        s, k, iv, r = b.underlying[idx, t], b.strike[idx], b.implied_vol[idx, t], b.rate[idx, t]
        return self._by_type(lambda m, c: bs_delta_hedger(s[m], k[m], tau[m], iv[m], r[m], c), b, idx)


class PredVolDeltaHedger(_BatchHedger):
    name = "BS delta (predicted vol)"

    def rows(self, b, t, idx, tau):
        if b.model_var is None:
            raise ValueError("predicted-volatility delta needs model variances")
        s, k, v, r = b.underlying[idx, t], b.strike[idx], b.model_var[idx, t], b.rate[idx, t]
        return self._by_type(lambda m, c: bs_predvol_delta_hedger(s[m], k[m], tau[m], v[m], r[m], c), b, idx)


class GarchDeltaHedger(_BatchHedger):
    name = "GARCH delta"

    def __init__(self, params: GarchParams):
        self.params = params

    def rows(self, b, t, idx, tau):
        if b.model_var is None:
            raise ValueError("GARCH delta needs model variances")
        out = np.empty(len(idx))
        for j, i in enumerate(idx):
            out[j] = garch_delta(b.underlying[i, t], b.strike[i], int(tau[j]), b.model_var[i, t],
                                 self.params, bool(b.is_call[i]))
        return out


class LVFHedger(_BatchHedger):
    name = "LVF delta"

    def __init__(self, fits: Mapping[Tuple[int, int], Optional[np.ndarray]]):
        self.fits = fits

    def rows(self, b, t, idx, tau):
        out = np.empty(len(idx))
        for j, i in enumerate(idx):
            fit = self.fits.get((int(b.start[i]) + t, int(b.expiry[i])))
            out[j] = lvf_delta(b.underlying[i, t], b.strike[i], tau[j], b.implied_vol[i, t],
                               b.rate[i, t], fit, bool(b.is_call[i]))
        return out


class SABRHedger(_BatchHedger):
    name = "SABR delta"

    def __init__(self, fits: Mapping[Tuple[int, int], Optional[SabrFit]], backbone: bool = True):
        self.fits = fits
        self.backbone = backbone

    def rows(self, b, t, idx, tau):
        out = np.empty(len(idx))
        for j, i in enumerate(idx):
            s, k, r, c = b.underlying[i, t], b.strike[i], b.rate[i, t], bool(b.is_call[i])
            fit = self.fits.get((int(b.start[i]) + t, int(b.expiry[i])))
            if fit is None:
                out[j] = bs_delta_hedger(s, k, tau[j], b.implied_vol[i, t], r, c)
            else:
                out[j] = sabr_delta(s, k, tau[j], r, fit, c, backbone=self.backbone)
        return out


def run_benchmark(batch: EpisodeBatch, hedger, cost: CostSpec = CostSpec()) -> np.ndarray:
    """Final P&L per episode under a deterministic hedger."""
    return rollout_batch(batch, hedger, cost, RewardSpec()).final_wealth
