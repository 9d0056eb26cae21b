"""Mutual information of the three decoded streams and the outage predicates
built on them. Rates are in bit/s/Hz summed over the resources of a stream."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import PowerAllocation, ResourceGrid, ServiceRequirements

__all__ = [
    "RateTargets",
    "info_urllc",
    "info_sic",
    "info_embb",
    "embb_outage",
    "sic_outage",
    "latency_outage_bound",
]

LN2 = np.log(2.0)


@dataclass(frozen=True)
class RateTargets:
    r_e: float
    r_u: float
    r_bar_e: float
    r_bar_u: float

    @classmethod
    def from_grid(cls, grid: ResourceGrid, req: ServiceRequirements) -> "RateTargets":
        return cls(
            r_e=req.r_e,
            r_u=req.r_u,
            r_bar_e=req.r_e / (grid.M_e * grid.F_e),
            r_bar_u=req.r_u / (grid.M_u * grid.F_u),
        )


def _check(gamma, alloc: PowerAllocation) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (alloc.F,):
        raise ValueError(f"gain vector has shape {gamma.shape}, allocation has F={alloc.F}")
    return gamma


def _sinr_bits(gamma, signal, interference) -> float:
    return float(np.sum(np.log1p(gamma * signal / (1.0 + gamma * interference))) / LN2)


def info_urllc(gamma_u, alloc: PowerAllocation, grid: ResourceGrid) -> float:
    """URLLC stream decoded at the URLLC receiver, eMBB treated as noise."""
    g = _check(gamma_u, alloc)
    idx = list(grid.fr_u)
    return grid.M_u * _sinr_bits(g[idx], alloc.P_u[idx], alloc.P_e[idx])


def info_sic(gamma_e, alloc: PowerAllocation, grid: ResourceGrid) -> float:
    """URLLC stream decoded at the eMBB receiver (first SIC stage)."""
    g = _check(gamma_e, alloc)
    idx = list(grid.fr_u)
    return grid.M_u * _sinr_bits(g[idx], alloc.P_u[idx], alloc.P_e[idx])


def info_embb(gamma_e, alloc: PowerAllocation, grid: ResourceGrid) -> float:
    """eMBB stream after the URLLC stream has been cancelled."""
    g = _check(gamma_e, alloc)
    idx = list(grid.fr_e)
    return grid.M_e * float(np.sum(np.log1p(g[idx] * alloc.P_e[idx])) / LN2)


def embb_outage(gamma_e, alloc: PowerAllocation, grid: ResourceGrid, targets: RateTargets) -> int:
    return int(info_embb(gamma_e, alloc, grid) < targets.r_e)


def sic_outage(gamma_e, alloc: PowerAllocation, grid: ResourceGrid, targets: RateTargets) -> int:
    return int(info_sic(gamma_e, alloc, grid) < targets.r_u)


def latency_outage_bound(grid: ResourceGrid, req: ServiceRequirements) -> tuple[float, bool]:
    """Union bound on the latency-violation probability.

    Returns ``(bound, feasible)``. When the URLLC mini-slots fit in the budget
    the second term of the bound vanishes and the bound is ``eps_u``;
    otherwise the packet can never meet its deadline and the bound is 1.
    """
    if grid.M_u <= req.l_max - req.delta_u:
        return req.eps_u, True
    return 1.0, False
