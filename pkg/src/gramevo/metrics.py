"""Tie-corrected rank correlation metrics.

kendall_tau implements tau-b, spearman_rho is the Pearson correlation of
average fractional ranks.  Inputs that are entirely tied make either
coefficient undefined; that is reported as an explicit DegenerateDataError
(or a flagged report), never as a silent NaN.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError

_BLOCK = 256  # row-block size for the pairwise scan, bounds memory at n~1e4


def _check_inputs(x, y) -> tuple[np.ndarray, np.ndarray]:
    xv = np.asarray(x, dtype=float)
    yv = np.asarray(y, dtype=float)
    if xv.ndim != 1 or yv.ndim != 1:
        raise ValueError("inputs must be one-dimensional")
    if len(xv) != len(yv):
        raise ValueError(f"length mismatch: {len(xv)} vs {len(yv)}")
    if len(xv) < 2:
        raise ValueError("need at least 2 observations")
    if not (np.isfinite(xv).all() and np.isfinite(yv).all()):
        raise ValueError("inputs must be finite")
    return xv, yv


def kendall_tau(x, y) -> float:
    """Tau-b over all pairs: (C - D) / sqrt((C + D + Tx) (C + D + Ty))."""
    xv, yv = _check_inputs(x, y)
    if np.all(xv == xv[0]) or np.all(yv == yv[0]):
        raise DegenerateDataError("kendall tau is undefined when one input is all ties")
    n = len(xv)
    concordant = 0
    discordant = 0
    ties_x = 0
    ties_y = 0
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        dx = np.sign(xv[start:stop, None] - xv[None, :])
        dy = np.sign(yv[start:stop, None] - yv[None, :])
        # Keep only pairs (i, j) with i < j.
        cols = np.arange(n)[None, :]
        rows = np.arange(start, stop)[:, None]
        upper = cols > rows
        prod = dx * dy
        concordant += int(np.count_nonzero((prod > 0) & upper))
        discordant += int(np.count_nonzero((prod < 0) & upper))
        ties_x += int(np.count_nonzero((dx == 0) & (dy != 0) & upper))
        ties_y += int(np.count_nonzero((dy == 0) & (dx != 0) & upper))
    denom = math.sqrt(
        (concordant + discordant + ties_x) * (concordant + discordant + ties_y)
    )
    if denom == 0:
        raise DegenerateDataError("kendall tau denominator is zero")
    return (concordant - discordant) / denom


def average_ranks(values) -> np.ndarray:
    """Fractional ranks starting at 1, ties get the mean of their positions."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=float)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Pearson correlation of average fractional ranks."""
    xv, yv = _check_inputs(x, y)
    rx = average_ranks(xv)
    ry = average_ranks(yv)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    denom = math.sqrt(float(sx @ sx) * float(sy @ sy))
    if denom == 0:
        raise DegenerateDataError("spearman rho is undefined when one input is all ties")
    return float(sx @ sy) / denom


@dataclass(frozen=True)
class CorrelationReport:
    spearman: float | None
    kendall: float | None
    n: int
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "spearman": self.spearman,
                "kendall": self.kendall,
                "n": self.n,
                "degenerate": self.degenerate,
            }
        )


def correlation_report(x, y) -> CorrelationReport:
    xv, yv = _check_inputs(x, y)
    try:
        rho = spearman_rho(xv, yv)
        tau = kendall_tau(xv, yv)
    except DegenerateDataError:
        return CorrelationReport(spearman=None, kendall=None, n=len(xv), degenerate=True)
    return CorrelationReport(spearman=rho, kendall=tau, n=len(xv))
