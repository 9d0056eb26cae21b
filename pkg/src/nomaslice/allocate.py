"""End-to-end power allocation: the worst-interference (N-fea) and per-FR
(N-heu) NOMA algorithms, the OMA baselines, and an independent Monte Carlo
check of the URLLC reliability actually achieved."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .capacity import RateTargets
from .domain import ChannelState, Mode, PowerAllocation, ResourceGrid, ServiceRequirements, validate
from .outage import (
    DEFAULT_CHUNK,
    MCResult,
    OutageTable,
    TableLookupError,
    lookup_cell,
    normalize,
    outage_events,
)
from .rng import chunk_exponentials
from .waterfill import solve_embb, solve_sic

__all__ = [
    "AllocationResult",
    "AllocationError",
    "AllocationInfeasible",
    "TableMismatch",
    "OMA_POLICIES",
    "allocate_nfea",
    "allocate_nheu",
    "allocate_oma",
    "oma_partition",
    "verify_outage",
    "verify_outage_samples",
]

OMA_POLICIES = ("worst-for-embb", "random", "first-k")
VERIFY_STREAM = "verify"


class AllocationError(ValueError):
    """Inputs that cannot be allocated (bad grid, wrong table)."""


class TableMismatch(AllocationError):
    pass


class AllocationInfeasible(AllocationError):
    """The table has no power meeting the reliability target at some FR."""

    def __init__(self, message: str, fr: int):
        super().__init__(f"FR {fr}: {message}")
        self.fr = fr


@dataclass(frozen=True)
class AllocationResult:
    scheme: str
    grid: ResourceGrid
    targets: RateTargets
    alloc: PowerAllocation
    p_u_sic: np.ndarray
    p_u_premax: np.ndarray
    p_e_tot: float
    p_u_tot: float
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def p_tot(self) -> float:
        return self.p_e_tot + self.p_u_tot


def _check_table(table: OutageTable, grid: ResourceGrid, targets: RateTargets) -> None:
    if table.F_u != grid.F_u or not math.isclose(table.r_bar_u, targets.r_bar_u, rel_tol=1e-12):
        raise TableMismatch(
            f"table is for F_u={table.F_u}, r_bar_u={table.r_bar_u:g}; "
            f"allocation needs F_u={grid.F_u}, r_bar_u={targets.r_bar_u:g}"
        )


def _prepare(channel, grid, req, table, mode: Mode) -> RateTargets:
    problems = validate(grid, req)
    if grid.mode != mode:
        raise AllocationError(f"{mode.value} allocation on a {grid.mode.value} grid")
    if problems:
        raise AllocationError("; ".join(v.message for v in problems))
    if channel.gamma_e.size != grid.F:
        raise AllocationError(f"channel has {channel.gamma_e.size} FRs, grid has F={grid.F}")
    targets = RateTargets.from_grid(grid, req)
    _check_table(table, grid, targets)
    return targets


def _lookup(table, P_e_f: float, rho_u: float, eps_u: float, fr: int) -> tuple[float, tuple[int, int]]:
    try:
        a, b = lookup_cell(table, normalize(rho_u * P_e_f), eps_u)
    except TableLookupError as exc:
        raise AllocationInfeasible(str(exc), fr) from exc
    return float(table.s[a] / rho_u), (a, b)


def _result(scheme, grid, targets, P_e, P_u_star, P_sic, P_premax, diagnostics) -> AllocationResult:
    alloc = PowerAllocation(P_e, P_u_star)
    return AllocationResult(
        scheme=scheme,
        grid=grid,
        targets=targets,
        alloc=alloc,
        p_u_sic=P_sic,
        p_u_premax=P_premax,
        p_e_tot=grid.M_e * float(alloc.P_e.sum()),
        p_u_tot=grid.M_u * float(alloc.P_u.sum()),
        diagnostics=diagnostics,
    )


def _noma_common(channel, grid, req, table):
    targets = _prepare(channel, grid, req, table, Mode.NOMA)
    P_e = solve_embb(channel, grid, targets)
    P_sic = solve_sic(channel, grid, targets, P_e)
    return targets, P_e, P_sic


def allocate_nfea(
    channel: ChannelState, grid: ResourceGrid, req: ServiceRequirements, table: OutageTable
) -> AllocationResult:
    """Feasible NOMA allocation: size the URLLC power for the worst interference.

    Every URLLC FR gets the tabulated power for the largest eMBB power on
    the grid, raised where needed to the SIC floor.
    """
    targets, P_e, P_sic = _noma_common(channel, grid, req, table)
    fr = np.array(grid.fr_u)
    # np.argmax returns the lowest index among ties
    f_star = int(fr[np.argmax(P_e[fr])])
    P_u, cell = _lookup(table, P_e[f_star], channel.rho_u, req.eps_u, f_star)
    P_premax = np.zeros(grid.F)
    P_premax[fr] = P_u
    P_star = np.zeros(grid.F)
    P_star[fr] = np.maximum(P_u, P_sic[fr])
    diag = {"f_star": f_star, "cells": {f_star: cell}}
    return _result("N-fea", grid, targets, P_e, P_star, P_sic, P_premax, diag)


def allocate_nheu(
    channel: ChannelState, grid: ResourceGrid, req: ServiceRequirements, table: OutageTable
) -> AllocationResult:
    """Heuristic NOMA allocation: one table lookup per FR at that FR's own
    interference. Cheaper than N-fea but without a reliability guarantee."""
    targets, P_e, P_sic = _noma_common(channel, grid, req, table)
    P_premax = np.zeros(grid.F)
    cells = {}
    for f in grid.fr_u:
        P_premax[f], cells[f] = _lookup(table, P_e[f], channel.rho_u, req.eps_u, f)
    P_star = np.maximum(P_premax, P_sic)
    diag = {"cells": cells}
    return _result("N-heu", grid, targets, P_e, P_star, P_sic, P_premax, diag)


def oma_partition(
    gamma_e, F_u: int, policy: str = "worst-for-embb", rng: np.random.Generator | None = None
) -> tuple[int, ...]:
    """FR indices reserved for URLLC."""
    gamma_e = np.asarray(gamma_e, dtype=float)
    F = gamma_e.size
    if policy == "worst-for-embb":
        # stable sort: equal gains resolved by lower index
        return tuple(sorted(int(f) for f in np.argsort(gamma_e, kind="stable")[:F_u]))
    if policy == "first-k":
        return tuple(range(F_u))
    if policy == "random":
        if rng is None:
            raise ValueError("random partition needs a generator")
        return tuple(sorted(int(f) for f in rng.choice(F, size=F_u, replace=False)))
    raise ValueError(f"unknown OMA partition policy {policy!r}; choose from {OMA_POLICIES}")


def allocate_oma(
    channel: ChannelState,
    grid: ResourceGrid,
    req: ServiceRequirements,
    table: OutageTable,
    urllc_share: float,
    policy: str = "worst-for-embb",
    rng: np.random.Generator | None = None,
) -> AllocationResult:
    """Orthogonal baseline reserving ``urllc_share`` of the FRs for URLLC.

    Only ``F`` and ``M`` of ``grid`` are used; the split itself is chosen
    here by ``policy``. URLLC sees no interference and has no SIC floor, so
    the two NOMA algorithms collapse into one lookup at zero interference.
    """
    F_u_real = urllc_share * grid.F
    F_u = int(round(F_u_real))
    if not math.isclose(F_u, F_u_real, abs_tol=1e-9):
        raise AllocationError(f"urllc_share={urllc_share} does not give an integral FR count for F={grid.F}")
    if F_u < 1 or F_u >= grid.F:
        raise AllocationError(f"urllc_share={urllc_share} leaves F_u={F_u}, F_e={grid.F - F_u}")
    oma = ResourceGrid.oma(grid.F, oma_partition(channel.gamma_e, F_u, policy, rng), M=grid.M)
    targets = _prepare(channel, oma, req, table, Mode.OMA)
    P_e = solve_embb(channel, oma, targets)
    P_sic = np.zeros(grid.F)
    P_u, cell = _lookup(table, 0.0, channel.rho_u, req.eps_u, oma.fr_u[0])
    fr = list(oma.fr_u)
    P_star = np.zeros(grid.F)
    P_star[fr] = P_u
    name = f"OMA-{round(100 * urllc_share)}"
    diag = {"cells": {f: cell for f in fr}, "policy": policy}
    return _result(name, oma, targets, P_e, P_star, P_sic, P_star.copy(), diag)


def verify_outage_samples(result: AllocationResult, rho_u: float, X: np.ndarray) -> int:
    """Outage events of ``result`` over pre-drawn unit exponentials ``X``
    (shape ``(n, F)``, one column per FR of the full grid)."""
    fr = list(result.grid.fr_u)
    s = np.array([normalize(rho_u * p) for p in result.alloc.P_u[fr]])
    i = np.array([normalize(rho_u * p) for p in result.alloc.P_e[fr]])
    return int(np.count_nonzero(outage_events(X[:, fr], s, i, result.targets.r_bar_u)))


def verify_outage(
    result: AllocationResult,
    channel: ChannelState,
    grid: ResourceGrid | None = None,
    req: ServiceRequirements | None = None,
    n: int = 100_000,
    seed: int = 0,
    chunk: int = DEFAULT_CHUNK,
) -> MCResult:
    """Monte Carlo URLLC outage of an allocation, using its actual per-FR powers.

    Independent of the table: fresh draws on a separate stream, and the
    real interference on each FR rather than the table's uniform assumption.
    ``grid`` defaults to the grid the allocation was made on.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    grid = result.grid if grid is None else grid
    if grid != result.grid:
        raise AllocationError("verification grid differs from the allocation grid")
    events = 0
    for k in range(-(-n // chunk)):
        take = min(chunk, n - k * chunk)
        X = chunk_exponentials(seed, (VERIFY_STREAM,), k, (chunk, grid.F))[:take]
        events += verify_outage_samples(result, channel.rho_u, X)
    return MCResult.from_counts(events, n)
