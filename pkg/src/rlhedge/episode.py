"""Option contracts, single hedging episodes, and padded episode batches."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import ValidationError

GREEK_NAMES = ("delta", "gamma", "vega", "theta")


@dataclass(frozen=True)
class OptionContract:
    option_id: str
    is_call: bool
    strike: float
    list_date: int
    expiry_date: int

    def __post_init__(self):
        if not self.expiry_date > self.list_date:
            raise ValidationError(f"{self.option_id}: expiry must follow listing")
        if not self.strike > 0:
            raise ValidationError(f"{self.option_id}: strike must be positive")

    def payoff(self, s):
        s = np.asarray(s, dtype=float)
        return np.maximum(s - self.strike, 0.0) if self.is_call else np.maximum(self.strike - s, 0.0)


@dataclass
class OptionEpisode:
    """Daily records of one option from ``today`` to expiry, inclusive.

    Arrays have length T+1 where T is the number of hedging decisions.
    The option price on the expiry row is the exercise payoff.
    ``model_var`` optionally carries the model's next-day variance
    (GARCH data), used by the predicted-volatility benchmark.
    """

    contract: OptionContract
    today: int
    underlying: np.ndarray
    option_price: np.ndarray
    implied_vol: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    vega: np.ndarray
    theta: np.ndarray
    rate: np.ndarray
    model_var: Optional[np.ndarray] = None
    dates: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("underlying", "option_price", "implied_vol", *GREEK_NAMES, "rate"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.underlying)
        if n < 2:
            raise ValidationError("an episode needs at least one hedging step")
        for name in ("option_price", "implied_vol", *GREEK_NAMES, "rate"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"episode column {name} has the wrong length")
        if np.any(self.option_price < 0):
            raise ValidationError("option prices must be non-negative")
        # settlement at the exercise value
        self.option_price = self.option_price.copy()
        self.option_price[-1] = float(self.contract.payoff(self.underlying[-1]))

    @property
    def n_steps(self) -> int:
        return len(self.underlying) - 1

    @property
    def payoff(self) -> float:
        return float(self.option_price[-1])

    @property
    def expiry(self) -> int:
        return self.contract.expiry_date

    @property
    def moneyness(self) -> float:
        return self.contract.strike / float(self.underlying[0])


@dataclass
class EpisodeBatch:
    """Episodes padded to a common horizon, shape ``(n, T_max + 1)``.

    Rows past an episode's expiry repeat the expiry values and are masked
    out through ``lengths``.
    """

    underlying: np.ndarray
    option_price: np.ndarray
    implied_vol: np.ndarray
    greeks: np.ndarray  # (n, T_max + 1, 4)
    rate: np.ndarray
    lengths: np.ndarray
    strike: np.ndarray
    is_call: np.ndarray
    model_var: Optional[np.ndarray] = None
    start: Optional[np.ndarray] = None  # date index of column 0

    def __post_init__(self):
        if self.start is None:
            self.start = np.zeros(len(self.lengths), dtype=int)

    @property
    def expiry(self) -> np.ndarray:
        return self.start + self.lengths

    def __len__(self):
        return self.underlying.shape[0]

    @property
    def horizon(self) -> int:
        return self.underlying.shape[1] - 1

    @property
    def payoff(self) -> np.ndarray:
        idx = np.arange(len(self))
        return self.option_price[idx, self.lengths]

    @property
    def moneyness(self) -> np.ndarray:
        return self.strike / self.underlying[:, 0]

    def subset(self, idx) -> "EpisodeBatch":
        idx = np.asarray(idx)
        t_max = int(self.lengths[idx].max())
        cut = lambda a: None if a is None else a[idx, : t_max + 1]
        return EpisodeBatch(
            cut(self.underlying), cut(self.option_price), cut(self.implied_vol),
            self.greeks[idx, : t_max + 1], cut(self.rate), self.lengths[idx],
            self.strike[idx], self.is_call[idx], cut(self.model_var), self.start[idx],
        )

    @classmethod
    def from_episodes(cls, episodes: Sequence[OptionEpisode]) -> "EpisodeBatch":
        if not episodes:
            raise ValidationError("cannot batch an empty episode list")
        lengths = np.array([e.n_steps for e in episodes])
        width = int(lengths.max()) + 1

        def pad(arrs):
            out = np.empty((len(arrs), width))
            for i, a in enumerate(arrs):
                out[i, : len(a)] = a
                out[i, len(a):] = a[-1]
            return out

        greeks = np.stack([pad([getattr(e, g) for e in episodes]) for g in GREEK_NAMES], axis=-1)
        has_var = all(e.model_var is not None for e in episodes)
        return cls(
            underlying=pad([e.underlying for e in episodes]),
            option_price=pad([e.option_price for e in episodes]),
            implied_vol=pad([e.implied_vol for e in episodes]),
            greeks=greeks,
            rate=pad([e.rate for e in episodes]),
            lengths=lengths,
            strike=np.array([e.contract.strike for e in episodes]),
            is_call=np.array([e.contract.is_call for e in episodes]),
            model_var=pad([e.model_var for e in episodes]) if has_var else None,
            start=np.array([e.today for e in episodes]),
        )

    @classmethod
    def concat(cls, batches: Sequence["EpisodeBatch"]) -> "EpisodeBatch":
        """Stack batches row-wise, padding to the longest horizon."""
        if not batches:
            raise ValidationError("cannot concatenate an empty batch list")
        width = max(b.horizon for b in batches) + 1

        def pad(arrs):
            if any(a is None for a in arrs):
                return None
            out = []
            for a in arrs:
                extra = width - a.shape[1]
                out.append(np.concatenate([a, np.repeat(a[:, -1:], extra, axis=1)], axis=1) if extra else a)
            return np.concatenate(out)

        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])
        return cls(
            pad([b.underlying for b in batches]), pad([b.option_price for b in batches]),
            pad([b.implied_vol for b in batches]), pad([b.greeks for b in batches]),
            pad([b.rate for b in batches]), cat("lengths"), cat("strike"), cat("is_call"),
            pad([b.model_var for b in batches]), cat("start"),
        )

    def episode(self, i: int, option_id: str = "") -> OptionEpisode:
        T = int(self.lengths[i])
        sl = slice(0, T + 1)
        t0 = int(self.start[i])
        contract = OptionContract(option_id or f"batch-{i}", bool(self.is_call[i]),
                                  float(self.strike[i]), t0, t0 + T)
        g = self.greeks[i, sl]
        return OptionEpisode(
            contract, t0, self.underlying[i, sl], self.option_price[i, sl],
            self.implied_vol[i, sl], g[:, 0], g[:, 1], g[:, 2], g[:, 3], self.rate[i, sl],
            None if self.model_var is None else self.model_var[i, sl],
        )
