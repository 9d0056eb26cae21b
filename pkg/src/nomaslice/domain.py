"""Core value types, unit conversions and grid validation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Mode",
    "ResourceGrid",
    "ChannelState",
    "ServiceRequirements",
    "PowerAllocation",
    "Violation",
    "dbm_to_mw",
    "mw_to_dbm",
    "validate",
]


class Mode(str, enum.Enum):
    NOMA = "NOMA"
    OMA = "OMA"


def _frozen_array(values, length: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    if length is not None and arr.size != length:
        raise ValueError(f"{name} has length {arr.size}, expected {length}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ResourceGrid:
    """Time-frequency resources of both users.

    Frequency resources are identified by index in ``range(F)``; the time
    dimension is carried only as the mini-slot counts ``M_e`` and ``M_u``.
    """

    F: int
    M: int
    fr_e: tuple[int, ...]
    fr_u: tuple[int, ...]
    M_e: int
    M_u: int
    mode: Mode

    @property
    def F_e(self) -> int:
        return len(self.fr_e)

    @property
    def F_u(self) -> int:
        return len(self.fr_u)

    @classmethod
    def noma(cls, F: int, M: int = 1, M_u: int | None = None) -> "ResourceGrid":
        """Fully shared grid: both users see every FR and the same mini-slots."""
        frs = tuple(range(F))
        m = M if M_u is None else M_u
        return cls(F=F, M=M, fr_e=frs, fr_u=frs, M_e=m, M_u=m, mode=Mode.NOMA)

    @classmethod
    def oma(cls, F: int, fr_u: Sequence[int], M: int = 1) -> "ResourceGrid":
        """Orthogonal split: ``fr_u`` goes to URLLC, the remaining FRs to eMBB."""
        urllc = tuple(sorted(int(f) for f in fr_u))
        embb = tuple(f for f in range(F) if f not in set(urllc))
        return cls(F=F, M=M, fr_e=embb, fr_u=urllc, M_e=M, M_u=M, mode=Mode.OMA)


@dataclass(frozen=True)
class ChannelState:
    """Known eMBB gains per FR and the mean URLLC gain (statistical CSI)."""

    gamma_e: np.ndarray
    rho_u: float

    def __post_init__(self):
        object.__setattr__(self, "gamma_e", _frozen_array(self.gamma_e, name="gamma_e"))
        if np.any(self.gamma_e < 0) or not np.all(np.isfinite(self.gamma_e)):
            raise ValueError("gamma_e entries must be finite and >= 0")
        if not self.rho_u > 0:
            raise ValueError(f"rho_u must be positive, got {self.rho_u}")


@dataclass(frozen=True)
class ServiceRequirements:
    r_e: float
    r_u: float
    eps_u: float
    l_max: int = 1
    delta_u: int = 0

    def __post_init__(self):
        if not (self.r_e > 0 and self.r_u > 0):
            raise ValueError("rate targets must be positive")
        if not 0 < self.eps_u < 1:
            raise ValueError(f"eps_u must lie in (0, 1), got {self.eps_u}")
        if self.l_max < 1 or self.delta_u < 0:
            raise ValueError("need l_max >= 1 and delta_u >= 0")


@dataclass(frozen=True)
class PowerAllocation:
    """Per-FR power coefficients in mW, full grid length, zeros where unused."""

    P_e: np.ndarray
    P_u: np.ndarray

    def __post_init__(self):
        P_e = _frozen_array(self.P_e, name="P_e")
        P_u = _frozen_array(self.P_u, length=P_e.size, name="P_u")
        if np.any(P_e < 0) or np.any(P_u < 0):
            raise ValueError("power coefficients must be nonnegative")
        object.__setattr__(self, "P_e", P_e)
        object.__setattr__(self, "P_u", P_u)

    @property
    def F(self) -> int:
        return self.P_e.size

    def is_orthogonal(self) -> bool:
        return bool(np.all(self.P_e * self.P_u == 0))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str = field(compare=False)


def dbm_to_mw(x: float) -> float:
    return 10.0 ** (x / 10.0)


def mw_to_dbm(x: float) -> float:
    if not x > 0:
        raise ValueError(f"power must be positive to express in dBm, got {x}")
    return 10.0 * math.log10(x)


def validate(grid: ResourceGrid, req: ServiceRequirements | None = None) -> list[Violation]:
    """Return every violated grid invariant; an empty list means the grid is usable."""
    out: list[Violation] = []
    if grid.F < 1:
        out.append(Violation("F", f"F={grid.F} must be >= 1"))
    if grid.M < 1:
        out.append(Violation("M", f"M={grid.M} must be >= 1"))
    for name, frs, m in (("e", grid.fr_e, grid.M_e), ("u", grid.fr_u, grid.M_u)):
        if not 1 <= len(frs) <= max(grid.F, 0):
            out.append(Violation(f"F_{name}", f"F_{name}={len(frs)} outside [1, F={grid.F}]"))
        if not 1 <= m <= max(grid.M, 0):
            out.append(Violation(f"M_{name}", f"M_{name}={m} outside [1, M={grid.M}]"))
        if any(not 0 <= f < grid.F for f in frs):
            out.append(Violation(f"fr_{name}", f"FR index out of range in fr_{name}={frs}"))
        if len(set(frs)) != len(frs):
            out.append(Violation(f"fr_{name}", f"duplicate FR index in fr_{name}={frs}"))
    if grid.mode == Mode.NOMA:
        if grid.F_u != grid.F_e or grid.M_u != grid.M_e or set(grid.fr_u) != set(grid.fr_e):
            out.append(Violation("sharing", "NOMA requires URLLC and eMBB to share the same resources"))
    else:
        if set(grid.fr_u) & set(grid.fr_e):
            out.append(Violation("orthogonality", "OMA FR sets overlap"))
        if grid.F_u + grid.F_e > grid.F:
            out.append(Violation("orthogonality", f"F_u + F_e = {grid.F_u + grid.F_e} exceeds F={grid.F}"))
    if req is not None and grid.M_u > req.l_max - req.delta_u:
        out.append(
            Violation(
                "latency",
                f"M_u={grid.M_u} exceeds l_max - delta_u = {req.l_max - req.delta_u}",
            )
        )
    return out
