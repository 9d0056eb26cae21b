"""Minimum-power water-filling under an average-rate constraint.

Solves ``min sum(p)`` subject to ``mean(log2(1 + g*p)) >= r_bar`` and
``p >= 0``. The optimum has the form ``p = max(0, mu - 1/g)``; the water
level ``mu`` is located by bisection because the achieved rate is continuous
and strictly increasing in ``mu`` once at least one channel is active.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capacity import RateTargets
from .domain import ChannelState, Mode, ResourceGrid

__all__ = [
    "WaterfillProblem",
    "WaterfillSolution",
    "InfeasibleError",
    "WaterfillError",
    "solve_waterfill",
    "effective_sic_gains",
    "solve_embb",
    "solve_sic",
]

MAX_ITER = 200
DEFAULT_TOL = 1e-10


class InfeasibleError(ValueError):
    """No allocation can meet the rate target (every gain is zero)."""


class WaterfillError(RuntimeError):
    """Bisection did not converge; carries the final water-level bracket."""

    def __init__(self, message: str, bracket: tuple[float, float]):
        super().__init__(f"{message} (mu bracket [{bracket[0]!r}, {bracket[1]!r}])")
        self.bracket = bracket


@dataclass(frozen=True)
class WaterfillProblem:
    gains: np.ndarray
    r_bar: float

    def __post_init__(self):
        g = np.array(self.gains, dtype=float).reshape(-1)
        if g.size < 1:
            raise ValueError("need at least one channel")
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ValueError("gains must be finite and nonnegative")
        if not self.r_bar > 0:
            raise ValueError(f"r_bar must be positive, got {self.r_bar}")
        g.setflags(write=False)
        object.__setattr__(self, "gains", g)

    @property
    def K(self) -> int:
        return self.gains.size


@dataclass(frozen=True)
class WaterfillSolution:
    powers: np.ndarray
    water_level: float
    active_set: tuple[int, ...]
    iterations: int

    @property
    def total(self) -> float:
        return float(self.powers.sum())


def _avg_rate(mu: float, inv: np.ndarray, K: int) -> float:
    # inv holds 1/g of the positive-gain channels only
    return float(np.sum(np.log2(np.maximum(mu / inv, 1.0)))) / K


def _bisect(inv: np.ndarray, K: int, r_bar: float, tol: float) -> tuple[float, int]:
    lo_target = r_bar * (1.0 + tol / 4.0)
    hi_target = r_bar * (1.0 + tol)
    lo = float(inv.min())
    # every channel active and each carrying at least the required average
    hi = float(inv.max()) * 2.0 ** (K * lo_target / inv.size) * 2.0
    for it in range(1, MAX_ITER + 1):
        rate_hi = _avg_rate(hi, inv, K)
        if lo_target <= rate_hi <= hi_target:
            return hi, it
        mid = 0.5 * (lo + hi) if hi < 4.0 * lo else float(np.sqrt(lo * hi))
        if not lo < mid < hi:
            break
        if _avg_rate(mid, inv, K) < lo_target:
            lo = mid
        else:
            hi = mid
    raise WaterfillError("water-level bisection did not converge", (lo, hi))


def solve_waterfill(problem: WaterfillProblem, tol: float = DEFAULT_TOL) -> WaterfillSolution:
    """Minimum total power meeting the average-rate target.

    Parameters
    ----------
    problem : WaterfillProblem
        Effective gains and per-channel average rate target.
    tol : float
        Relative tolerance on the achieved rate, in ``(0, 1e-6]``. The
        returned powers achieve a rate in ``[r_bar, r_bar * (1 + tol)]``.

    Returns
    -------
    WaterfillSolution
        Channels sitting exactly at the activity boundary carry zero power.
    """
    if not 0 < tol <= 1e-6:
        raise ValueError(f"tol must lie in (0, 1e-6], got {tol}")
    g = problem.gains
    K = problem.K
    usable = np.flatnonzero(g > 0)
    if usable.size == 0:
        raise InfeasibleError("all gains are zero; no power meets the rate target")

    inv = 1.0 / g[usable]
    mu, iters = _bisect(inv, K, problem.r_bar, tol)

    # boundary channels: force exactly zero and re-level the rest
    marginal = (mu - inv) <= tol * mu
    if np.any(marginal & (mu > inv)):
        keep = ~marginal
        usable, inv = usable[keep], inv[keep]
        mu, extra = _bisect(inv, K, problem.r_bar, tol)
        iters += extra

    p_usable = np.where(mu > inv, mu - inv, 0.0)
    powers = np.zeros(K)
    powers[usable] = p_usable
    powers.setflags(write=False)
    active = tuple(int(k) for k in np.flatnonzero(powers > 0))
    return WaterfillSolution(powers=powers, water_level=mu, active_set=active, iterations=iters)


def effective_sic_gains(gamma_e, P_e) -> np.ndarray:
    """Gains seen by the URLLC stream at the eMBB receiver, eMBB power as noise."""
    gamma_e = np.asarray(gamma_e, dtype=float)
    P_e = np.asarray(P_e, dtype=float)
    if gamma_e.shape != P_e.shape:
        raise ValueError(f"shape mismatch: gamma_e {gamma_e.shape} vs P_e {P_e.shape}")
    return gamma_e / (1.0 + gamma_e * P_e)


def solve_embb(
    channel: ChannelState, grid: ResourceGrid, targets: RateTargets, tol: float = DEFAULT_TOL
) -> np.ndarray:
    """Per-FR eMBB power (length ``F``) with zero outage and minimum sum."""
    idx = list(grid.fr_e)
    sol = solve_waterfill(WaterfillProblem(channel.gamma_e[idx], targets.r_bar_e), tol)
    P_e = np.zeros(grid.F)
    P_e[idx] = sol.powers
    return P_e


def solve_sic(
    channel: ChannelState,
    grid: ResourceGrid,
    targets: RateTargets,
    P_e,
    tol: float = DEFAULT_TOL,
) -> np.ndarray:
    """Minimum URLLC power that lets the eMBB receiver cancel the URLLC stream.

    OMA grids have no SIC stage, so the floor is identically zero there.
    """
    if grid.mode == Mode.OMA:
        return np.zeros(grid.F)
    idx = list(grid.fr_u)
    gains = effective_sic_gains(channel.gamma_e[idx], np.asarray(P_e, dtype=float)[idx])
    sol = solve_waterfill(WaterfillProblem(gains, targets.r_bar_u), tol)
    P_sic = np.zeros(grid.F)
    P_sic[idx] = sol.powers
    return P_sic
