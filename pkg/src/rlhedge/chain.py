"""Synthetic option chains, hedging-episode extraction and dataset splits."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pandas.tseries.holiday import USFederalHolidayCalendar
from pandas.tseries.offsets import CustomBusinessDay

from .episode import EpisodeBatch, OptionContract, OptionEpisode
from .exceptions import HedgeError, SchemaError, ValidationError
from .market import (
    GarchParams,
    GbmParams,
    PathSet,
    PricePath,
    bs_greeks,
    bs_price,
    garch_simulate_physical,
    gbm_simulate,
    hn_price,
    implied_vol,
)

log = logging.getLogger(__name__)

# band -> (half-width as a fraction of the reference price, strike interval,
#          expiry window in calendar days (exclusive low, inclusive high))
BANDS: Dict[str, Tuple[float, float, Tuple[int, int]]] = {
    "near": (0.10, 5.0, (6, 61)),
    "mid": (0.20, 10.0, (61, 183)),
    "far": (0.50, 25.0, (183, 365)),
}


def list_strikes(ref_price: float, band: str) -> np.ndarray:
    """Strike grid of one listing band: multiples of the band interval
    within ``ref * (1 +/- half_width)``, clipped below at one interval."""
    if not ref_price > 0:
        raise ValidationError("reference price must be positive")
    half, step, _ = BANDS[band]
    lo = max(math.ceil(ref_price * (1 - half) / step - 1e-9), 1)
    hi = max(math.floor(ref_price * (1 + half) / step + 1e-9), lo)
    return np.arange(lo, hi + 1) * step


class TradingCalendar:
    """Weekday calendar without US federal holidays (about 252 days a year)."""

    def __init__(self, start="2008-01-02", n_days: Optional[int] = None, end: Optional[str] = None):
        freq = CustomBusinessDay(calendar=USFederalHolidayCalendar())
        if end is not None:
            idx = pd.date_range(start, end, freq=freq)
        else:
            idx = pd.date_range(start, periods=n_days, freq=freq)
        self.dates = idx.values.astype("datetime64[D]")

    def __len__(self):
        return len(self.dates)

    def index_of(self, date) -> int:
        """Index of the first trading day on or after ``date``."""
        return int(np.searchsorted(self.dates, np.datetime64(date, "D")))

    def third_fridays(self) -> np.ndarray:
        """Trading-day indices that fall on the third Friday of a month."""
        d = pd.DatetimeIndex(self.dates)
        mask = (d.dayofweek == 4) & (d.day >= 15) & (d.day <= 21)
        return np.flatnonzero(mask)

    def calendar_days(self, i: int, j) -> np.ndarray:
        return (self.dates[j] - self.dates[i]).astype(int)


# ---------------------------------------------------------------------------
# Pricers used to fill chains
# ---------------------------------------------------------------------------

Quote = Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True)
class BSPricer:
    """Black-Scholes with a known constant volatility."""

    sigma: float
    r: float

    def quote(self, s, k, tau, var=None, is_call=True) -> Quote:
        s, tau = np.asarray(s, float), np.asarray(tau, float)
        price = bs_price(s, k, tau, self.sigma, self.r, is_call)
        live = tau > 0
        g = np.zeros((4, len(s)))
        if np.any(live):
            g[:, live] = bs_greeks(s[live], k, tau[live], self.sigma, self.r, is_call)
        g[0, ~live] = _expiry_delta(s[~live], k, is_call)
        return price, np.full(len(s), self.sigma), g[0], g[1], g[2], g[3]


@dataclass(frozen=True)
class HNPricer:
    """Heston-Nandi prices; implied volatility and Greeks from Black-Scholes."""

    params: GarchParams
    rtol: float = 1e-10

    def quote(self, s, k, tau, var=None, is_call=True) -> Quote:
        s, tau, var = (np.asarray(x, float) for x in (s, tau, var))
        n = len(s)
        price = np.empty(n)
        iv = np.full(n, np.nan)
        g = np.zeros((4, n))
        r = self.params.r
        for i in range(n):
            if tau[i] <= 0:
                price[i] = max(s[i] - k, 0.0) if is_call else max(k - s[i], 0.0)
                continue
            price[i] = hn_price(s[i], k, int(tau[i]), var[i], self.params, is_call, rtol=self.rtol)
        live = tau > 0
        if np.any(live):
            iv[live] = implied_vol(price[live], s[live], k, tau[live], r, is_call, on_error="nan")
            ok = live & np.isfinite(iv) & (iv > 0)
            g[:, ok] = bs_greeks(s[ok], k, tau[ok], iv[ok], r, is_call)
        iv[~live] = iv[live][-1] if np.any(live) else np.nan
        g[0, ~live] = _expiry_delta(s[~live], k, is_call)
        return price, iv, g[0], g[1], g[2], g[3]


def _expiry_delta(s, k, is_call):
    itm = (s > k) if is_call else (s < k)
    return np.where(itm, 1.0 if is_call else -1.0, 0.0)


# ---------------------------------------------------------------------------
# Chain construction
# ---------------------------------------------------------------------------

def list_contracts(prices: np.ndarray, calendar: TradingCalendar, is_call: bool = True) -> List[OptionContract]:
    """Apply the three-band listing rule along one price path.

    Each band keeps its current strike group. A new group is centred on the
    previous close whenever that reference leaves the group's range; an
    expiry entering the band's window is listed with the current group.
    (strike, expiry) pairs are never listed twice.
    """
    n_days = min(len(prices), len(calendar))
    fridays = calendar.third_fridays()
    fridays = fridays[fridays < n_days]
    seen: Dict[Tuple[float, int], OptionContract] = {}
    group: Dict[str, Tuple[float, float, np.ndarray]] = {}
    listed_expiries: Dict[str, set] = {b: set() for b in BANDS}
    cp = "C" if is_call else "P"
    for d in range(n_days - 1):
        ref = float(prices[d - 1] if d > 0 else prices[0])
        future = fridays[fridays > d]
        if len(future) == 0:
            break
        dte = calendar.calendar_days(d, future)
        for band, (half, _, (lo_days, hi_days)) in BANDS.items():
            window = future[(dte > lo_days) & (dte <= hi_days)]
            if len(window) == 0:
                continue
            cur = group.get(band)
            if cur is None or not (cur[0] <= ref <= cur[1]):
                cur = (ref * (1 - half), ref * (1 + half), list_strikes(ref, band))
                group[band] = cur
                targets = window
            else:
                targets = [e for e in window if e not in listed_expiries[band]]
            for e in targets:
                listed_expiries[band].add(int(e))
                for k in cur[2]:
                    key = (float(k), int(e))
                    if key not in seen:
                        seen[key] = OptionContract(f"{cp}{int(e):05d}K{k:g}", is_call, float(k), d, int(e))
    return sorted(seen.values(), key=lambda c: (c.list_date, c.expiry_date, c.strike))


def build_chain(path: PricePath, calendar: TradingCalendar, pricer, is_call: bool = True,
                rate: float = 0.0, contracts: Optional[Sequence[OptionContract]] = None) -> List[OptionEpisode]:
    """List contracts along ``path`` and price each one from listing to expiry.

    ``pricer.quote(s, k, tau, var, is_call)`` returns price, implied vol and
    the four Greeks along the contract's life; tau is in trading days.
    Contracts whose pricing fails are dropped with a logged diagnostic.
    """
    prices = np.asarray(path.prices)
    if contracts is None:
        contracts = list_contracts(prices, calendar, is_call)
    episodes = []
    for c in contracts:
        days = np.arange(c.list_date, c.expiry_date + 1)
        s = prices[days]
        tau = (c.expiry_date - days).astype(float)
        var = None if path.variances is None else np.asarray(path.variances)[days]
        try:
            z, iv, d, g, v, th = pricer.quote(s, c.strike, tau, var, c.is_call)
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(iv))):
                raise HedgeError("non-finite quote")
        except HedgeError as exc:
            log.warning("dropping %s: pricing failed (%s)", c.option_id, exc)
            continue
        episodes.append(OptionEpisode(
            c, c.list_date, s, np.maximum(z, 0.0), iv, d, g, v, th, np.full(len(days), rate),
            model_var=var, dates=calendar.dates[days],
        ))
    return episodes


def extract_subpaths(record: OptionEpisode) -> List[OptionEpisode]:
    """One episode per observation day strictly before expiry."""
    out = []
    dates = record.dates
    for j in range(record.n_steps):
        sl = slice(j, None)
        out.append(OptionEpisode(
            record.contract, record.today + j, record.underlying[sl], record.option_price[sl],
            record.implied_vol[sl], record.delta[sl], record.gamma[sl], record.vega[sl],
            record.theta[sl], record.rate[sl],
            None if record.model_var is None else record.model_var[sl],
            None if dates is None else dates[sl],
        ))
    return out


@dataclass
class DatasetSplit:
    train: List[OptionEpisode]
    validation: List[OptionEpisode]
    test: List[OptionEpisode]
    dropped: int = 0

    def counts(self) -> Dict[str, int]:
        return {"train": len(self.train), "validation": len(self.validation),
                "test": len(self.test), "dropped": self.dropped}


def split_dataset(episodes: Iterable[OptionEpisode], split_date_1: int, split_date_2: int,
                  split_date_3: int) -> DatasetSplit:
    """Chronological split; episodes that straddle a boundary are dropped."""
    if not split_date_1 <= split_date_2 <= split_date_3:
        raise ValidationError("split dates must be ordered")
    out = DatasetSplit([], [], [])
    for e in episodes:
        if e.expiry < split_date_1:
            out.train.append(e)
        elif e.today >= split_date_1 and e.expiry < split_date_2:
            out.validation.append(e)
        elif e.today >= split_date_2 and e.expiry < split_date_3:
            out.test.append(e)
        else:
            out.dropped += 1
    return out


# ---------------------------------------------------------------------------
# External option data
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("date", "expiry", "option_id", "cp_flag", "strike", "best_bid", "best_ask",
               "underlying_close", "implied_vol", "delta", "gamma", "vega", "theta", "rate")
_NUMERIC = ("strike", "best_bid", "best_ask", "underlying_close", "implied_vol",
            "delta", "gamma", "vega", "theta", "rate")


def load_option_csv(path) -> List[OptionEpisode]:
    """Read option quotes and extract every per-'today' hedging episode.

    Dates are mapped to indices into the sorted set of dates in the file.
    Options whose expiry date has no row cannot be settled and are skipped.
    """
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SchemaError("missing required column", row=1, column=missing[0])
        rows = list(reader)
    if not rows:
        return []
    by_option: Dict[str, list] = {}
    for lineno, row in enumerate(rows, start=2):
        rec = {"line": lineno, "option_id": row["option_id"]}
        for col in ("date", "expiry"):
            try:
                rec[col] = np.datetime64(row[col], "D")
            except ValueError:
                raise SchemaError("invalid ISO-8601 date", row=lineno, column=col) from None
        for col in _NUMERIC:
            try:
                rec[col] = float(row[col])
            except (TypeError, ValueError):
                raise SchemaError("invalid number", row=lineno, column=col) from None
        if row["cp_flag"] not in ("C", "P"):
            raise SchemaError("cp_flag must be C or P", row=lineno, column="cp_flag")
        rec["is_call"] = row["cp_flag"] == "C"
        for col in ("best_bid", "best_ask", "underlying_close", "strike"):
            if rec[col] < 0:
                raise SchemaError("negative price", row=lineno, column=col)
        if rec["best_bid"] > rec["best_ask"]:
            raise SchemaError("best_bid exceeds best_ask", row=lineno, column="best_bid")
        prev = by_option.setdefault(rec["option_id"], [])
        if prev and rec["date"] <= prev[-1]["date"]:
            raise SchemaError("dates within an option must increase", row=lineno, column="date")
        prev.append(rec)

    all_dates = np.unique(np.array([r["date"] for rs in by_option.values() for r in rs]
                                   + [rs[0]["expiry"] for rs in by_option.values()]))
    index = {d: i for i, d in enumerate(all_dates)}
    episodes = []
    for oid in sorted(by_option):
        rs = by_option[oid]
        if rs[-1]["date"] != rs[0]["expiry"]:
            log.warning("skipping %s: no quote on the expiry date", oid)
            continue
        if len(rs) < 2:
            continue
        col = lambda name: np.array([r[name] for r in rs])
        contract = OptionContract(oid, rs[0]["is_call"], rs[0]["strike"],
                                  index[rs[0]["date"]], index[rs[0]["expiry"]])
        record = OptionEpisode(
            contract, contract.list_date, col("underlying_close"),
            0.5 * (col("best_bid") + col("best_ask")), col("implied_vol"),
            col("delta"), col("gamma"), col("vega"), col("theta"), col("rate"),
            dates=col("date"),
        )
        episodes.extend(extract_subpaths(record))
    return episodes


def write_option_csv(path, quotes: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for q in quotes:
            w.writerow(q)


# ---------------------------------------------------------------------------
# Fixed-contract batches for contract-specific training
# ---------------------------------------------------------------------------

def bs_episode_batch(params: GbmParams, s0: float, strike: float, maturity: int, n_paths: int,
                     seed: int, is_call: bool = True) -> EpisodeBatch:
    """GBM paths of one contract with Black-Scholes prices at the true volatility."""
    paths = gbm_simulate(params, s0, maturity, n_paths, seed)
    return _batch_from_prices(paths.prices, BSPricer(params.sigma, params.r), strike, maturity,
                              params.r, is_call)


def garch_episode_batch(params: GarchParams, s0: float, sigma1_sq: float, strike: float, maturity: int,
                        n_paths: int, seed: int, is_call: bool = True, rtol: float = 1e-10) -> EpisodeBatch:
    """Physical GARCH paths of one contract priced by Heston-Nandi."""
    paths = garch_simulate_physical(params, s0, sigma1_sq, maturity, n_paths, seed)
    return _batch_from_prices(paths.prices, HNPricer(params, rtol), strike, maturity, params.r, is_call,
                              variances=paths.variances)


def _batch_from_prices(prices, pricer, strike, maturity, rate, is_call, variances=None) -> EpisodeBatch:
    n, width = prices.shape
    tau = np.broadcast_to(maturity - np.arange(width, dtype=float), (n, width))
    var = None if variances is None else variances.ravel()
    z, iv, d, g, v, th = pricer.quote(prices.ravel(), strike, tau.ravel(), var, is_call)
    shape = (n, width)
    greeks = np.stack([x.reshape(shape) for x in (d, g, v, th)], axis=-1)
    z = z.reshape(shape).copy()
    payoff = np.maximum(prices[:, -1] - strike, 0.0) if is_call else np.maximum(strike - prices[:, -1], 0.0)
    z[:, -1] = payoff
    return EpisodeBatch(
        underlying=prices, option_price=z, implied_vol=iv.reshape(shape), greeks=greeks,
        rate=np.full(shape, rate), lengths=np.full(n, maturity), strike=np.full(n, float(strike)),
        is_call=np.full(n, is_call), model_var=variances,
    )
