"""Tail-risk statistics of final P&L samples, bootstrap CIs and paired tests."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .exceptions import NumericError, ValidationError

LEVELS = (0.95, 0.975)
REPORT_ROWS = ("Mean", "Std Err", "P-Value", "0.95-VaR", "0.95-VaR CI", "0.975-VaR", "0.975-VaR CI",
               "0.975-MS", "0.975-MS CI", "0.95-CVaR", "0.95-CVaR CI", "0.975-CVaR", "0.975-CVaR CI")


def _losses(pnl) -> np.ndarray:
    x = np.asarray(pnl, dtype=float).ravel()
    if x.size == 0:
        raise ValidationError("empty P&L sample")
    return -x


def _rank(alpha: float, n: int) -> int:
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    # ceil with a guard against round-off in alpha * n
    return min(max(math.ceil(alpha * n - 1e-9), 1), n)


def empirical_var(pnl, alpha: float) -> float:
    """VaR of the loss -pnl: the ceil(alpha * N)-th smallest loss."""
    loss = _losses(pnl)
    k = _rank(alpha, loss.size)
    return float(np.partition(loss, k - 1)[k - 1])


def empirical_cvar(pnl, alpha: float) -> float:
    """Sample Rockafellar-Uryasev value at x* = empirical VaR."""
    loss = _losses(pnl)
    x = empirical_var(pnl, alpha)
    return float(x + np.maximum(loss - x, 0.0).sum() / ((1.0 - alpha) * loss.size))


def median_shortfall(pnl, alpha: float) -> float:
    """Median of the tail beyond VaR_alpha, i.e. VaR at (1 + alpha) / 2."""
    return empirical_var(pnl, 0.5 * (1.0 + alpha))


def rockafellar_objective(pnl, omega, alpha: float) -> np.ndarray:
    """omega + E[max(L - omega, 0)] / (1 - alpha), vectorized over omega."""
    loss = _losses(pnl)
    om = np.asarray(omega, dtype=float)
    hinge = np.maximum(loss[None, :] - om.reshape(-1, 1), 0.0).mean(axis=1)
    out = om.ravel() + hinge / (1.0 - alpha)
    return out.reshape(om.shape)[()] if om.ndim == 0 else out.reshape(om.shape)


# batched statistics over resample matrices of shape (B, N)

def _var_rows(loss: np.ndarray, alpha: float) -> np.ndarray:
    k = _rank(alpha, loss.shape[1])
    return np.partition(loss, k - 1, axis=1)[:, k - 1]


def _cvar_rows(loss: np.ndarray, alpha: float) -> np.ndarray:
    x = _var_rows(loss, alpha)
    return x + np.maximum(loss - x[:, None], 0.0).sum(axis=1) / ((1.0 - alpha) * loss.shape[1])


def bootstrap_ci(pnl, statistic: Callable[[np.ndarray], float], level: float = 0.95, B: int = 1000,
                 seed: int = 0, batched: Optional[Callable[[np.ndarray], np.ndarray]] = None
                 ) -> Tuple[float, float]:
    """Percentile bootstrap interval, widened if needed to contain the point estimate.

    ``batched`` optionally evaluates the statistic row-wise on a (b, N)
    matrix of P&L resamples, which is much faster for large samples.
    """
    x = np.asarray(pnl, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ValidationError("empty P&L sample")
    rng = np.random.default_rng(seed)
    chunk = max(1, min(B, 2_000_000 // n))
    reps = []
    done = 0
    while done < B:
        b = min(chunk, B - done)
        sample = x[rng.integers(0, n, size=(b, n))]
        if batched is not None:
            reps.append(np.asarray(batched(sample), dtype=float))
        else:
            reps.append(np.array([statistic(row) for row in sample]))
        done += b
    reps = np.concatenate(reps)
    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(reps, [tail, 1.0 - tail])
    point = statistic(x)
    return float(min(lo, point)), float(max(hi, point))


def paired_t_test(pnl_a, pnl_b) -> float:
    """One-sided p-value for mean(pnl_a - pnl_b) > 0."""
    a = np.asarray(pnl_a, dtype=float).ravel()
    b = np.asarray(pnl_b, dtype=float).ravel()
    if a.size != b.size or a.size < 2:
        raise ValidationError("paired samples need equal lengths >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if not sd > 0:
        raise NumericError("paired differences have zero variance")
    t = d.mean() / (sd / math.sqrt(d.size))
    return float(stats.t.sf(t, d.size - 1))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class StrategyStats:
    mean: float
    std_err: float
    var: Dict[float, float]
    cvar: Dict[float, float]
    ms: Dict[float, float]
    var_ci: Dict[float, Tuple[float, float]]
    cvar_ci: Dict[float, Tuple[float, float]]
    ms_ci: Dict[float, Tuple[float, float]]
    p_value: Optional[float] = None


def describe(pnl, levels: Sequence[float] = LEVELS, B: int = 1000, seed: int = 0) -> StrategyStats:
    x = np.asarray(pnl, dtype=float).ravel()
    st = StrategyStats(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0,
                       {}, {}, {}, {}, {}, {})
    for a in levels:
        ms_level = 0.5 * (1 + a)
        st.var[a] = empirical_var(x, a)
        st.cvar[a] = empirical_cvar(x, a)
        st.ms[a] = median_shortfall(x, a)
        st.var_ci[a] = bootstrap_ci(x, lambda s, a=a: empirical_var(s, a), B=B, seed=seed,
                                    batched=lambda m, a=a: _var_rows(-m, a))
        st.cvar_ci[a] = bootstrap_ci(x, lambda s, a=a: empirical_cvar(s, a), B=B, seed=seed,
                                     batched=lambda m, a=a: _cvar_rows(-m, a))
        st.ms_ci[a] = bootstrap_ci(x, lambda s, m=ms_level: empirical_var(s, m), B=B, seed=seed,
                                   batched=lambda m_, m=ms_level: _var_rows(-m_, m))
    return st


@dataclass
class RiskReport:
    strategies: Dict[str, StrategyStats]
    reference: Optional[str] = None
    levels: Tuple[float, ...] = LEVELS

    def rows(self) -> Dict[str, Dict[str, str]]:
        out: Dict[str, Dict[str, str]] = {}
        for name, st in self.strategies.items():
            col = {"Mean": _fmt(st.mean), "Std Err": _fmt(st.std_err),
                   "P-Value": "" if st.p_value is None else _fmt(st.p_value)}
            for a in self.levels:
                col[f"{a:g}-VaR"] = _fmt(st.var[a])
                col[f"{a:g}-VaR CI"] = _fmt_ci(st.var_ci[a])
                col[f"{a:g}-MS"] = _fmt(st.ms[a])
                col[f"{a:g}-MS CI"] = _fmt_ci(st.ms_ci[a])
                col[f"{a:g}-CVaR"] = _fmt(st.cvar[a])
                col[f"{a:g}-CVaR CI"] = _fmt_ci(st.cvar_ci[a])
            out[name] = col
        return out

    def row_names(self) -> Tuple[str, ...]:
        return tuple(r for r in REPORT_ROWS if all(r in c for c in self.rows().values()))

    def to_csv(self, path=None) -> str:
        rows, names = self.rows(), list(self.strategies)
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric", *names])
        for r in self.row_names():
            w.writerow([r, *(rows[n][r] for n in names)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_text(self) -> str:
        rows, names = self.rows(), list(self.strategies)
        table = [["", *names]] + [[r, *(rows[n][r] for n in names)] for r in self.row_names()]
        widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
        lines = []
        for row in table:
            cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            lines.append("  ".join(cells))
        return "\n".join(lines)


def _fmt(x: float) -> str:
    return f"{x:.4E}" if x != 0 and (abs(x) < 1e-3 or abs(x) >= 1e5) else f"{x:.4f}"


def _fmt_ci(ci) -> str:
    return f"[{_fmt(ci[0])}, {_fmt(ci[1])}]"


def build_report(pnls: Mapping[str, np.ndarray], reference: Optional[str] = None,
                 levels: Sequence[float] = LEVELS, B: int = 1000, seed: int = 0) -> RiskReport:
    """Statistics per strategy; p-values test each strategy's mean P&L
    against ``reference``."""
    if reference is not None and reference not in pnls:
        raise ValidationError(f"unknown reference strategy {reference!r}")
    out = {}
    for name, pnl in pnls.items():
        st = describe(pnl, levels, B, seed)
        if reference is not None and name != reference and len(pnls) > 1:
            try:
                st.p_value = paired_t_test(pnl, pnls[reference])
            except NumericError:
                st.p_value = None
        out[name] = st
    return RiskReport(out, reference, tuple(levels))
