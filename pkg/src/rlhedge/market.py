"""Underlying price simulation and European option pricing.

All quantities use one trading day as the time unit: drifts and rates are
per day, volatilities per square-root day, maturities in days.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.special import ndtr

from .exceptions import NoSolutionError, NumericError, ValidationError

SQRT_2PI = math.sqrt(2.0 * math.pi)
IV_LOWER = 1e-8
IV_UPPER = 10.0 / math.sqrt(252.0)
# paths per RNG substream; results do not depend on how blocks are sharded
PATH_BLOCK = 8192


@dataclass(frozen=True)
class GbmParams:
    mu: float
    sigma: float
    r: float = 0.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValidationError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class GarchParams:
    """Heston-Nandi GARCH(1,1) parameters in daily units.

    ``omega_g`` is the variance intercept, ``alpha_g`` the shock loading,
    ``beta_g`` the persistence, ``gamma_g`` the leverage and ``lambda_rp``
    the risk-premium coefficient.
    """

    lambda_rp: float
    omega_g: float
    alpha_g: float
    beta_g: float
    gamma_g: float
    r: float = 0.0

    def __post_init__(self):
        if not self.omega_g > 0:
            raise ValidationError("omega_g must be > 0")
        if self.alpha_g < 0 or self.beta_g < 0:
            raise ValidationError("alpha_g and beta_g must be non-negative")
        if not self.persistence < 1:
            raise ValidationError(
                f"non-stationary parameters: alpha*gamma^2 + beta = {self.persistence:.6g} >= 1"
            )

    @property
    def persistence(self) -> float:
        return self.alpha_g * self.gamma_g ** 2 + self.beta_g

    @property
    def gamma_star(self) -> float:
        """Leverage under the risk-neutral measure."""
        return self.gamma_g + 0.5 + self.lambda_rp

    @property
    def unconditional_variance(self) -> float:
        return (self.omega_g + self.alpha_g) / (1.0 - self.persistence)


@dataclass
class PricePath:
    prices: np.ndarray
    variances: Optional[np.ndarray] = None

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=float)
        if np.any(self.prices <= 0):
            raise ValidationError("prices must be positive")
        if self.variances is not None:
            self.variances = np.asarray(self.variances, dtype=float)
            if self.variances.shape != self.prices.shape:
                raise ValidationError("prices and variances lengths differ")
            if np.any(self.variances <= 0):
                raise ValidationError("variances must be positive")

    def __len__(self):
        return len(self.prices)


@dataclass
class PathSet:
    """A block of simulated paths stored as ``(n_paths, n_steps + 1)`` arrays.

    ``variances[:, t]`` is the conditional variance of the return from day t
    to day t+1, i.e. the variance already known at day t.
    """

    prices: np.ndarray
    variances: Optional[np.ndarray] = None

    def __len__(self):
        return self.prices.shape[0]

    def __getitem__(self, i: int) -> PricePath:
        var = None if self.variances is None else self.variances[i]
        return PricePath(self.prices[i], var)

    def __iter__(self) -> Iterator[PricePath]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_steps(self) -> int:
        return self.prices.shape[1] - 1

    def to_csv(self, path) -> None:
        write_paths_csv(self, path)


def _normals(seed: int, n_paths: int, n_steps: int) -> np.ndarray:
    """Standard normals of shape (n_paths, n_steps), drawn block by block."""
    out = np.empty((n_paths, n_steps))
    for b, start in enumerate(range(0, n_paths, PATH_BLOCK)):
        stop = min(start + PATH_BLOCK, n_paths)
        rng = np.random.default_rng([seed, b])
        out[start:stop] = rng.standard_normal((stop - start, n_steps))
    return out


def _check_sim_args(s0, n_steps, n_paths):
    if not s0 > 0:
        raise ValidationError(f"s0 must be positive, got {s0}")
    if n_steps < 1 or n_paths < 1:
        raise ValidationError("n_steps and n_paths must be >= 1")


def gbm_simulate(params: GbmParams, s0: float, n_steps: int, n_paths: int, seed: int) -> PathSet:
    """Exact lognormal GBM paths, one step per day."""
    _check_sim_args(s0, n_steps, n_paths)
    z = _normals(seed, n_paths, n_steps)
    log_inc = (params.mu - 0.5 * params.sigma ** 2) + params.sigma * z
    log_path = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(log_inc, axis=1)], axis=1)
    return PathSet(s0 * np.exp(log_path))


def _garch_paths(omega, alpha, beta, gamma, drift_lambda, r, s0, sigma1_sq, n_steps, n_paths, seed):
    _check_sim_args(s0, n_steps, n_paths)
    if not sigma1_sq > 0:
        raise ValidationError("sigma1_sq must be positive")
    z = _normals(seed, n_paths, n_steps)
    logs = np.empty((n_paths, n_steps + 1))
    var = np.empty((n_paths, n_steps + 1))
    logs[:, 0] = math.log(s0)
    var[:, 0] = sigma1_sq
    for t in range(n_steps):
        h = var[:, t]
        sd = np.sqrt(h)
        logs[:, t + 1] = logs[:, t] + r + drift_lambda * h + sd * z[:, t]
        var[:, t + 1] = omega + beta * h + alpha * (z[:, t] - gamma * sd) ** 2
    return PathSet(np.exp(logs), var)


def garch_simulate_physical(params: GarchParams, s0: float, sigma1_sq: float, n_steps: int,
                            n_paths: int, seed: int) -> PathSet:
    return _garch_paths(params.omega_g, params.alpha_g, params.beta_g, params.gamma_g,
                        params.lambda_rp, params.r, s0, sigma1_sq, n_steps, n_paths, seed)


def garch_simulate_risk_neutral(params: GarchParams, s0: float, sigma1_sq: float, n_steps: int,
                                n_paths: int, seed: int) -> PathSet:
    # drift r - h/2 is the lambda = -1/2 case of the physical recursion
    return _garch_paths(params.omega_g, params.alpha_g, params.beta_g, params.gamma_star,
                        -0.5, params.r, s0, sigma1_sq, n_steps, n_paths, seed)


# ---------------------------------------------------------------------------
# Black-Scholes
# ---------------------------------------------------------------------------

def bs_price(s, k, tau, sigma, r, is_call=True):
    """Black-Scholes price with total variance ``sigma**2 * tau``.

    Works elementwise on arrays; ``tau == 0`` or ``sigma == 0`` give the
    discounted forward intrinsic value.
    """
    s, k, tau, sigma, r = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (s, k, tau, sigma, r)))
    if np.any(tau < 0):
        raise ValidationError("tau must be >= 0")
    if np.any(s <= 0) or np.any(sigma < 0):
        raise ValidationError("s must be > 0 and sigma >= 0")
    disc_k = k * np.exp(-r * tau)
    vol = sigma * np.sqrt(tau)
    degenerate = vol <= 0
    safe_vol = np.where(degenerate, 1.0, vol)
    with np.errstate(divide="ignore"):
        d1 = (np.log(s) - np.log(disc_k)) / safe_vol + 0.5 * safe_vol
    d2 = d1 - safe_vol
    call = s * ndtr(d1) - disc_k * ndtr(d2)
    call = np.where(degenerate, np.maximum(s - disc_k, 0.0), call)
    if np.any(tau == 0):
        call = np.where(tau == 0, np.maximum(s - k, 0.0), call)
    out = call if is_call else call - s + disc_k
    return out[()] if out.ndim == 0 else out


def bs_greeks(s, k, tau, sigma, r, is_call=True):
    """Analytic (delta, gamma, vega, theta); vega per unit sigma, theta per day."""
    s, k, tau, sigma, r = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (s, k, tau, sigma, r)))
    if np.any(tau <= 0):
        raise ValidationError("greeks are undefined at expiry (tau must be > 0)")
    if np.any(sigma <= 0):
        raise ValidationError("greeks require sigma > 0")
    sqrt_tau = np.sqrt(tau)
    vol = sigma * sqrt_tau
    disc_k = k * np.exp(-r * tau)
    with np.errstate(divide="ignore"):
        d1 = (np.log(s) - np.log(disc_k)) / vol + 0.5 * vol
    d2 = d1 - vol
    pdf = np.exp(-0.5 * d1 * d1) / SQRT_2PI
    gamma = pdf / (s * vol)
    vega = s * pdf * sqrt_tau
    if is_call:
        delta = ndtr(d1)
        theta = -s * pdf * sigma / (2 * sqrt_tau) - r * disc_k * ndtr(d2)
    else:
        delta = ndtr(d1) - 1.0
        theta = -s * pdf * sigma / (2 * sqrt_tau) + r * disc_k * ndtr(-d2)
    out = (delta, gamma, vega, theta)
    return tuple(x[()] if x.ndim == 0 else x for x in out)


def implied_vol(price, s, k, tau, r, is_call=True, tol=1e-12, max_iter=200, on_error="raise"):
    """Per-sqrt-day implied volatility by bisection on [1e-8, 10/sqrt(252)]
    followed by Newton polishing.

    Scalar inputs return a float; array inputs are solved elementwise.
    Prices outside the no-arbitrage band or the bracket raise
    NoSolutionError, or yield NaN with ``on_error="nan"``.
    """
    if on_error not in ("raise", "nan"):
        raise ValidationError("on_error must be 'raise' or 'nan'")
    price, s, k, tau, r = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (price, s, k, tau, r)))
    if np.any(tau <= 0):
        raise ValidationError("implied_vol requires tau > 0")
    if on_error == "nan":
        out = np.full(price.shape, np.nan)
        ok = _iv_solvable(price, s, k, tau, r, is_call)
        if np.any(ok):
            out[ok] = implied_vol(price[ok], s[ok], k[ok], tau[ok], r[ok], is_call, tol, max_iter)
        return out[()] if out.ndim == 0 else out
    disc_k = k * np.exp(-r * tau)
    if is_call:
        lower, upper = np.maximum(s - disc_k, 0.0), s
    else:
        lower, upper = np.maximum(disc_k - s, 0.0), disc_k
    slack = 1e-12 * np.maximum(1.0, s)
    bad = (price < lower - slack) | (price > upper + slack)
    if np.any(bad):
        i = np.flatnonzero(bad.ravel())[0]
        raise NoSolutionError(
            f"price {price.ravel()[i]:.10g} outside no-arbitrage bounds "
            f"[{lower.ravel()[i]:.10g}, {upper.ravel()[i]:.10g}]"
        )
    lo = np.full(price.shape, IV_LOWER)
    hi = np.full(price.shape, IV_UPPER)
    f_lo = bs_price(s, k, tau, lo, r, is_call) - price
    f_hi = bs_price(s, k, tau, hi, r, is_call) - price
    if np.any(f_hi < -slack):
        raise NoSolutionError("price above the value at the upper volatility bracket")
    floor = f_lo >= -slack
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        above = bs_price(s, k, tau, mid, r, is_call) - price > 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo < 1e-6 * IV_UPPER):
            break
    sig = 0.5 * (lo + hi)
    for _ in range(50):
        diff = bs_price(s, k, tau, sig, r, is_call) - price
        vega = bs_greeks(s, k, tau, sig, r, is_call)[2]
        step = np.where(vega > 1e-300, diff / np.where(vega > 1e-300, vega, 1.0), 0.0)
        new = np.clip(sig - step, lo, hi)
        done = np.abs(new - sig) <= tol * np.maximum(sig, 1e-12)
        sig = new
        if np.all(done | floor):
            break
    # low bracket: the price is numerically intrinsic
    sig = np.where(floor, IV_LOWER, sig)
    return sig[()] if sig.ndim == 0 else sig


def _iv_solvable(price, s, k, tau, r, is_call):
    disc_k = k * np.exp(-r * tau)
    if is_call:
        lower, upper = np.maximum(s - disc_k, 0.0), s
    else:
        lower, upper = np.maximum(disc_k - s, 0.0), disc_k
    slack = 1e-12 * np.maximum(1.0, s)
    top = bs_price(s, k, tau, IV_UPPER, r, is_call)
    return (price >= lower - slack) & (price <= upper + slack) & (price <= top + slack)


# ---------------------------------------------------------------------------
# Heston-Nandi closed form
# ---------------------------------------------------------------------------

def _hn_coefficients(z: np.ndarray, tau: int, params: GarchParams):
    """Risk-neutral log-MGF coefficients: E[(S_T/S_t)^z] = exp(A + B * h_{t+1})."""
    om, al, be, gs, r = params.omega_g, params.alpha_g, params.beta_g, params.gamma_star, params.r
    a = np.zeros_like(z)
    b = np.zeros_like(z)
    for _ in range(tau):
        denom = 1.0 - 2.0 * al * b
        a = a + z * r + b * om - 0.5 * np.log(denom)
        b = z * (gs - 0.5) - 0.5 * gs * gs + be * b + 0.5 * (z - gs) ** 2 / denom
    return a, b


def _hn_call_integral(s, k, tau, next_var, params, du, u_max):
    u = np.arange(0.0, u_max + 0.5 * du, du)
    a, b = _hn_coefficients(0.5 + 1j * u, tau, params)
    cf = np.exp(a + b * next_var)
    integrand = np.real(np.exp(1j * np.multiply.outer(np.log(s / k), u)) * cf) / (u * u + 0.25)
    weights = np.full(u.shape, du)
    weights[0] *= 0.5
    return integrand @ weights, np.abs(cf[-1]) / (u_max ** 2 + 0.25)


def hn_price(s, k, tau: int, next_var: float, params: GarchParams, is_call=True,
             rtol: float = 1e-14, max_points: int = 2 ** 22):
    """European option price under the Heston-Nandi GARCH model.

    Uses the contour-shifted single-integral representation
    ``C = S - sqrt(S K) e^{-r tau} / pi * int_0^inf Re[e^{iu ln(S/K)} M(1/2 + iu)] / (u^2 + 1/4) du``
    with M the risk-neutral moment-generating function of ln(S_T/S_t).
    The integrand is even and analytic in a strip, so the trapezoidal rule
    converges geometrically; the step is halved and the truncation point
    doubled until successive estimates agree.
    """
    tau = int(tau)
    if tau < 1:
        raise ValidationError("hn_price requires tau >= 1")
    if not next_var > 0:
        raise ValidationError("next_var must be positive")
    s_arr, k_arr = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(k, dtype=float))
    if np.any(s_arr <= 0) or np.any(k_arr <= 0):
        raise ValidationError("s and k must be positive")
    flat_s, flat_k = s_arr.ravel(), k_arr.ravel()

    # truncation from the Gaussian-like envelope of the integrand
    total_var = max(next_var * tau, params.omega_g * tau)
    u_max = max(50.0, math.sqrt(2.0 * 40.0 / total_var))
    du = 0.05
    scale = np.sqrt(flat_s * flat_k)
    prev = None
    while True:
        n_points = u_max / du
        if n_points > max_points:
            raise NumericError("Heston-Nandi integration did not converge (grid exhausted)")
        integral, tail = _hn_call_integral(flat_s, flat_k, tau, next_var, params, du, u_max)
        if tail * np.max(scale) > rtol * np.max(flat_s):
            u_max *= 2.0
            continue
        if prev is not None and np.all(np.abs(integral - prev) * scale <= rtol * np.maximum(flat_s, 1.0) + 1e-13):
            break
        prev = integral
        du *= 0.5
    disc = math.exp(-params.r * tau)
    call = flat_s - scale * disc / math.pi * integral
    call = np.maximum(call, np.maximum(flat_s - flat_k * disc, 0.0))
    out = call if is_call else call - flat_s + flat_k * disc
    out = out.reshape(s_arr.shape)
    return out[()] if out.ndim == 0 else out


def hn_mc_price(s, k, tau: int, next_var: float, params: GarchParams, is_call=True,
                n_paths: int = 100_000, seed: int = 0):
    """Monte Carlo price and standard error under risk-neutral GARCH paths."""
    paths = garch_simulate_risk_neutral(params, s, next_var, int(tau), n_paths, seed)
    terminal = paths.prices[:, -1]
    payoff = np.maximum(terminal - k, 0.0) if is_call else np.maximum(k - terminal, 0.0)
    disc = math.exp(-params.r * tau) * payoff
    return float(disc.mean()), float(disc.std(ddof=1) / math.sqrt(n_paths))


def garch_delta(s, k, tau: int, next_var: float, params: GarchParams, is_call=True, rel_bump=1e-4):
    """Central finite difference of ``hn_price`` in s, next-day variance held fixed."""
    s = np.asarray(s, dtype=float)
    h = rel_bump * s
    up = hn_price(s + h, k, tau, next_var, params, is_call)
    dn = hn_price(s - h, k, tau, next_var, params, is_call)
    return (up - dn) / (2.0 * h)


def write_paths_csv(paths: PathSet, path) -> None:
    path = Path(path)
    n, m = paths.prices.shape
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "step", "price", "variance"])
        for i in range(n):
            for t in range(m):
                var = "" if paths.variances is None else repr(float(paths.variances[i, t]))
                w.writerow([i, t, repr(float(paths.prices[i, t])), var])


def read_paths_csv(path) -> PathSet:
    rows = list(csv.DictReader(Path(path).open()))
    if not rows:
        return PathSet(np.empty((0, 0)))
    n = max(int(r["path_id"]) for r in rows) + 1
    m = max(int(r["step"]) for r in rows) + 1
    prices = np.empty((n, m))
    has_var = rows[0]["variance"] != ""
    var = np.empty((n, m)) if has_var else None
    for r in rows:
        i, t = int(r["path_id"]), int(r["step"])
        prices[i, t] = float(r["price"])
        if has_var:
            var[i, t] = float(r["variance"])
    return PathSet(prices, var)
