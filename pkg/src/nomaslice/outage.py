"""URLLC outage probability: single-FR closed form, Monte Carlo estimation,
and the tabulated estimate used by the allocation algorithms.

With ``gamma_u = rho_u * X`` and ``X ~ Exp(1)`` the outage depends on the
powers only through the normalized pair ``s = rho_u * P_u`` (signal) and
``i = rho_u * P_e`` (interference), so the table is indexed by ``(s, i)``
rather than by the physical powers and the mean gain.

Table cells share their random numbers: chunk ``k`` of the ``"outage"``
stream is the same block of draws for every cell. A cell estimated from
``n`` samples therefore holds exactly what :func:`mc_outage` returns for that
point with the same ``n``, seed and chunk size. Sharing draws also makes the
raw counts monotone in ``s`` and lets a whole row be counted in one pass.
Each sample has a threshold grid index below which it is in outage, and
that index is found by binary search.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .rng import chunk_exponentials

__all__ = [
    "OutagePoint",
    "MCResult",
    "GridSpec",
    "OutageTable",
    "TableFormatError",
    "TableLookupError",
    "InterferenceOutOfRange",
    "LookupInfeasible",
    "outage_closed_form_1fr",
    "clopper_pearson",
    "normalize",
    "outage_events",
    "mc_outage",
    "mc_outage_powers",
    "build_table",
    "min_power_lookup",
    "lookup_cell",
]

LOGGER = logging.getLogger(__name__)

LN2 = math.log(2.0)
DEFAULT_CHUNK = 100_000
DEFAULT_SCHEDULE = (100_000, 1_000_000, 10_000_000)
STREAM = "outage"
MAGIC = b"NSOTAB\x00\x01"
FORMAT_NAME = "nomaslice-outage-table"
FORMAT_VERSION = 1
BLOCKS = ("estimate", "upper95", "samples")


class TableFormatError(ValueError):
    """Corrupt, truncated or incompatible table file."""


class TableLookupError(ValueError):
    """Base class for failed power lookups."""


class InterferenceOutOfRange(TableLookupError):
    pass


class LookupInfeasible(TableLookupError):
    pass


def normalize(x: float) -> float:
    """Canonical float for a normalized power.

    ``rho * P`` and ``(a * rho) * (P / a)`` can differ in the last bit;
    rounding to 12 significant digits maps both to the same value, far below
    any resolution Monte Carlo can see.
    """
    return float(f"{float(x):.12g}")


@dataclass(frozen=True)
class OutagePoint:
    s: float
    i: float
    F_u: int
    r_bar_u: float

    def __post_init__(self):
        if self.s < 0 or self.i < 0:
            raise ValueError("normalized powers must be nonnegative")
        if self.F_u < 1 or not self.r_bar_u > 0:
            raise ValueError("need F_u >= 1 and r_bar_u > 0")

    @classmethod
    def from_powers(cls, rho_u: float, P_u: float, P_e: float, F_u: int, r_bar_u: float) -> "OutagePoint":
        return cls(normalize(rho_u * P_u), normalize(rho_u * P_e), F_u, r_bar_u)


@dataclass(frozen=True)
class MCResult:
    events: int
    n: int
    estimate: float
    upper95: float
    lower95: float

    @classmethod
    def from_counts(cls, events: int, n: int) -> "MCResult":
        lo, hi = clopper_pearson(events, n)
        return cls(int(events), int(n), events / n, float(hi), float(lo))

    def sigma(self, p: float | None = None) -> float:
        p = self.estimate if p is None else p
        return math.sqrt(max(p * (1.0 - p), 0.0) / self.n)


def clopper_pearson(k, n, conf: float = 0.95):
    """One-sided exact binomial bounds ``(lower, upper)`` at level ``conf``.

    Vectorized over ``k`` and ``n``.
    """
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    alpha = 1.0 - conf
    with np.errstate(invalid="ignore", divide="ignore"):
        upper = np.where(k >= n, 1.0, stats.beta.ppf(conf, k + 1, np.maximum(n - k, 1e-300)))
        lower = np.where(k <= 0, 0.0, stats.beta.ppf(alpha, np.maximum(k, 1e-300), n - k + 1))
    if upper.ndim == 0:
        return float(lower), float(upper)
    return lower, upper


def outage_closed_form_1fr(s: float, i: float, r_bar_u: float) -> float:
    """Exact outage on one Rayleigh FR at normalized signal ``s`` and interference ``i``."""
    c = 2.0**r_bar_u - 1.0
    if s <= c * i:
        return 1.0
    return -math.expm1(-c / (s - c * i))


def _threshold(F_u: int, r_bar_u: float) -> float:
    return F_u * r_bar_u * LN2


def outage_events(X: np.ndarray, s, i, r_bar_u: float) -> np.ndarray:
    """Boolean outage indicator per row of ``X`` (shape ``(n, F_u)``).

    ``s`` and ``i`` are scalars or per-column vectors.
    """
    y = X / (1.0 + i * X)
    return np.log1p(s * y).sum(axis=1) <= _threshold(X.shape[1], r_bar_u)


def _chunks_for(n: int, chunk: int) -> int:
    return -(-n // chunk)


def _mc_chunk(args) -> int:
    seed, labels, k, chunk, take, F, s, i, r_bar = args
    X = chunk_exponentials(seed, labels, k, (chunk, F))[:take]
    return int(np.count_nonzero(outage_events(X, s, i, r_bar)))


def _run_counts(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def mc_outage(
    point: OutagePoint,
    n: int,
    seed: int = 0,
    chunk: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> MCResult:
    """Monte Carlo outage estimate at a normalized operating point.

    Draws ``n`` rows of ``F_u`` i.i.d. unit exponentials, processed in chunks
    of ``chunk`` rows. The result depends only on ``(seed, chunk, n)``, never
    on ``workers``.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    tasks = []
    for k in range(_chunks_for(n, chunk)):
        take = min(chunk, n - k * chunk)
        tasks.append((seed, (STREAM,), k, chunk, take, point.F_u, point.s, point.i, point.r_bar_u))
    events = sum(_run_counts(_mc_chunk, tasks, workers))
    return MCResult.from_counts(events, n)


def mc_outage_powers(
    rho_u: float,
    P_u: float,
    P_e: float,
    F_u: int,
    r_bar_u: float,
    n: int,
    seed: int = 0,
    chunk: int = DEFAULT_CHUNK,
) -> MCResult:
    """Same as :func:`mc_outage` but from physical powers and mean gain."""
    return mc_outage(OutagePoint.from_powers(rho_u, P_u, P_e, F_u, r_bar_u), n, seed, chunk)


# ---------------------------------------------------------------------------
# table grid


def _db_axis(start: float, stop: float, step: float, name: str) -> list[str]:
    if not step > 0:
        raise ValueError(f"{name}: step must be positive, got {step}")
    count = math.floor((stop - start) / step + 1e-9) + 1
    if count < 1:
        raise ValueError(f"{name}: empty range [{start}, {stop}]")
    return [f"{start + k * step:.4f}" for k in range(count)]


@dataclass(frozen=True)
class GridSpec:
    """dB-spaced axes of the outage table; the interference axis can start
    with an exact-zero row."""

    s_start_db: float = -20.0
    s_stop_db: float = 70.0
    s_step_db: float = 0.25
    i_start_db: float = -20.0
    i_stop_db: float = 60.0
    i_step_db: float = 1.0
    zero_row: bool = True

    def s_db(self) -> list[str]:
        return _db_axis(self.s_start_db, self.s_stop_db, self.s_step_db, "s grid")

    def i_db(self) -> list[str]:
        axis = _db_axis(self.i_start_db, self.i_stop_db, self.i_step_db, "i grid")
        return (["-inf"] if self.zero_row else []) + axis


def _db_to_lin(texts: Sequence[str]) -> np.ndarray:
    return np.array([0.0 if t == "-inf" else 10.0 ** (float(t) / 10.0) for t in texts])


# ---------------------------------------------------------------------------
# table container


class OutageTable:
    """Monte Carlo outage estimates on a normalized ``(s, i)`` grid.

    Arrays have shape ``(n_s, n_i)``. ``estimate`` and ``upper95`` are
    nonincreasing along ``s`` and nondecreasing along ``i``.
    """

    def __init__(self, meta: dict, estimate: np.ndarray, upper95: np.ndarray, samples: np.ndarray):
        self.meta = meta
        self.s_db = tuple(meta["s_grid_db"])
        self.i_db = tuple(meta["i_grid_db"])
        self.s = _db_to_lin(self.s_db)
        self.i = _db_to_lin(self.i_db)
        # queries are normalized, so compare them against normalized axes
        self.s_key = np.array([normalize(x) for x in self.s])
        self.i_key = np.array([normalize(x) for x in self.i])
        shape = (len(self.s_db), len(self.i_db))
        for name, arr in (("estimate", estimate), ("upper95", upper95), ("samples", samples)):
            if arr.shape != shape:
                raise TableFormatError(f"{name} block has shape {arr.shape}, expected {shape}")
        self.estimate = estimate
        self.upper95 = upper95
        self.samples = samples

    @property
    def F_u(self) -> int:
        return int(self.meta["F_u"])

    @property
    def r_bar_u(self) -> float:
        return float(self.meta["r_bar_u"])

    @property
    def eps_target(self) -> float:
        return float(self.meta["eps_target"])

    def header_bytes(self) -> bytes:
        return json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def to_bytes(self) -> bytes:
        header = self.header_bytes()
        parts = [MAGIC, struct.pack("<Q", len(header)), header]
        for arr in (self.estimate, self.upper95, self.samples):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    def save(self, path: str | Path) -> str:
        """Write the table and return its sha256 digest."""
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "OutageTable":
        if len(data) < 16 or data[:8] != MAGIC:
            raise TableFormatError("not an outage table (bad magic)")
        (hlen,) = struct.unpack("<Q", data[8:16])
        if 16 + hlen > len(data):
            raise TableFormatError("truncated header")
        try:
            meta = json.loads(data[16 : 16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TableFormatError(f"unreadable header: {exc}") from exc
        if meta.get("format") != FORMAT_NAME or meta.get("version") != FORMAT_VERSION:
            raise TableFormatError(f"unsupported format {meta.get('format')!r} v{meta.get('version')!r}")
        n_s, n_i = len(meta["s_grid_db"]), len(meta["i_grid_db"])
        block = 8 * n_s * n_i
        expected = 16 + hlen + block * len(BLOCKS)
        if len(data) != expected:
            raise TableFormatError(f"file has {len(data)} bytes, expected {expected} (truncated or padded)")
        arrays = []
        off = 16 + hlen
        for _ in BLOCKS:
            arrays.append(np.frombuffer(data, dtype="<f8", count=n_s * n_i, offset=off).reshape(n_s, n_i).copy())
            off += block
        return cls(meta, *arrays)

    @classmethod
    def load(cls, path: str | Path) -> "OutageTable":
        return cls.from_bytes(Path(path).read_bytes())

    def to_csv(self, path: str | Path) -> None:
        lines = [f"# {k}: {json.dumps(self.meta[k], sort_keys=True)}" for k in sorted(self.meta)
                 if k not in ("s_grid_db", "i_grid_db")]
        lines.append("s_db,i_db,s,i,estimate,upper95,samples")
        for a, sd in enumerate(self.s_db):
            for b, idb in enumerate(self.i_db):
                values = (self.s[a], self.i[b], self.estimate[a, b], self.upper95[a, b])
                lines.append(f"{sd},{idb}," + ",".join(repr(float(v)) for v in values) + f",{int(self.samples[a, b])}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def outage(self, P_u: float, P_e: float, rho_u: float) -> float:
        """Tabulated outage at uniform powers, rounded to the pessimistic cell
        (signal down, interference up)."""
        s, i = normalize(rho_u * P_u), normalize(rho_u * P_e)
        a = int(np.searchsorted(self.s_key, s, side="right")) - 1
        b = int(np.searchsorted(self.i_key, i, side="left"))
        if b >= self.i.size:
            raise InterferenceOutOfRange(f"interference {i:g} beyond table range {self.i[-1]:g}")
        if a < 0:
            return 1.0
        return float(self.estimate[a, b])


# ---------------------------------------------------------------------------
# table build


def _row_thresholds(X: np.ndarray, s: np.ndarray, i: float, thr: float, lo_idx: int, hi_idx: int) -> np.ndarray:
    """Per sample, the first grid index in ``[lo_idx, hi_idx)`` without outage
    (``hi_idx`` when every index in the range is in outage)."""
    y = X / (1.0 + i * X)
    out = np.full(y.shape[0], lo_idx, dtype=np.int64)
    # a sample not in outage at the range start contributes nothing inside the range
    live = np.flatnonzero(np.log1p(s[lo_idx] * y).sum(axis=1) <= thr)
    if live.size == 0:
        return out
    yl = y[live]
    lo = np.full(live.size, lo_idx + 1, dtype=np.int64)
    hi = np.full(live.size, hi_idx, dtype=np.int64)
    while True:
        act = np.flatnonzero(lo < hi)
        if act.size == 0:
            break
        mid = (lo[act] + hi[act]) // 2
        ev = np.log1p(s[mid][:, None] * yl[act]).sum(axis=1) <= thr
        lo[act[ev]] = mid[ev] + 1
        hi[act[~ev]] = mid[~ev]
    out[live] = lo
    return out


def _table_chunk(args) -> np.ndarray:
    seed, k, chunk, F_u, r_bar, s, i_axis, ranges = args
    X = chunk_exponentials(seed, (STREAM,), k, (chunk, F_u))
    thr = _threshold(F_u, r_bar)
    counts = np.zeros((len(i_axis), s.size), dtype=np.int64)
    for row, (a, b) in ranges.items():
        kidx = _row_thresholds(X, s, i_axis[row], thr, a, b)
        hist = np.bincount(kidx - a, minlength=b - a + 1)
        # cell j is in outage for samples whose threshold index exceeds j
        counts[row, a:b] = hist[::-1].cumsum()[::-1][1:]
    return counts


def _majorant(values: np.ndarray) -> np.ndarray:
    """Smallest array >= values that is nonincreasing in s and nondecreasing in i."""
    out = np.maximum.accumulate(values[::-1, :], axis=0)[::-1, :]
    return np.maximum.accumulate(out, axis=1)


def build_table(
    F_u: int,
    r_bar_u: float,
    eps_target: float,
    grid: GridSpec = GridSpec(),
    seed: int = 0,
    chunk: int = DEFAULT_CHUNK,
    schedule: Sequence[int] = DEFAULT_SCHEDULE,
    workers: int = 1,
    progress: Callable[[str], None] | None = None,
) -> OutageTable:
    """Tabulate the outage over ``grid`` with sample-size escalation.

    Every cell first gets ``schedule[0]`` samples. A cell moves to the next
    sample size only while its 95% bounds still straddle ``eps_target``.
    Rows whose crossing lies outside the ``s`` axis are listed in
    ``meta["unbracketed"]``; the build itself still succeeds.
    """
    if F_u < 1 or not r_bar_u > 0 or not 0 < eps_target < 1:
        raise ValueError("need F_u >= 1, r_bar_u > 0 and 0 < eps_target < 1")
    schedule = [int(n) for n in schedule]
    if not schedule or any(n % chunk for n in schedule) or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"schedule {schedule} must be increasing multiples of chunk={chunk}")
    s_db, i_db = grid.s_db(), grid.i_db()
    s, i_axis = _db_to_lin(s_db), _db_to_lin(i_db)
    n_s, n_i = s.size, i_axis.size

    counts = np.zeros((n_i, n_s), dtype=np.int64)
    nsamp = np.zeros((n_i, n_s), dtype=np.int64)
    ranges = {row: (0, n_s) for row in range(n_i)}
    done = 0
    for stage, n_target in enumerate(schedule):
        if not ranges:
            break
        first, last = done // chunk, n_target // chunk
        tasks = [(seed, k, chunk, F_u, r_bar_u, s, i_axis, ranges) for k in range(first, last)]
        for part in _run_counts(_table_chunk, tasks, workers):
            counts += part
        for row, (a, b) in ranges.items():
            nsamp[row, a:b] = n_target
        cells = sum(b - a for a, b in ranges.values())
        if progress:
            progress(f"stage {stage}: {cells} cells at n={n_target}")
        done = n_target
        next_ranges = {}
        for row, (a, b) in ranges.items():
            lo, hi = clopper_pearson(counts[row, a:b], nsamp[row, a:b])
            straddle = np.flatnonzero((lo <= eps_target) & (hi > eps_target))
            if straddle.size:
                next_ranges[row] = (a + int(straddle[0]), a + int(straddle[-1]) + 1)
        ranges = next_ranges

    lower, upper = clopper_pearson(counts, nsamp)
    est = counts / nsamp
    estimate = _majorant(est.T)
    upper95 = _majorant(np.asarray(upper).T)

    escalation = {str(n): int(np.count_nonzero(nsamp == n)) for n in schedule}
    unbracketed = {
        "no_feasible_s": [i_db[b] for b in range(n_i) if upper95[-1, b] > eps_target],
        "below_grid": [i_db[b] for b in range(n_i) if upper95[0, b] <= eps_target],
    }
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "F_u": int(F_u),
        "r_bar_u": float(r_bar_u),
        "eps_target": float(eps_target),
        "seed": int(seed),
        "chunk": int(chunk),
        "schedule": schedule,
        "rng": "philox-counter-chunks/exp",
        "grid": asdict(grid),
        "s_grid_db": s_db,
        "i_grid_db": i_db,
        "escalation": escalation,
        "unbracketed": unbracketed,
        "clamp": "monotone-majorant",
    }
    return OutageTable(meta, estimate, upper95, nsamp.T.astype(float))


# ---------------------------------------------------------------------------
# lookup


def lookup_cell(table: OutageTable, i: float, eps_u: float) -> tuple[int, int]:
    """Grid cell ``(s index, i index)`` used for a minimum-power lookup.

    The interference is rounded up to the next grid line and the signal is
    the first grid value whose upper 95% bound meets ``eps_u``.
    """
    if eps_u < table.eps_target * (1 - 1e-12):
        raise ValueError(f"eps_u={eps_u} is tighter than the table target {table.eps_target}")
    b = int(np.searchsorted(table.i_key, normalize(i), side="left"))
    if b >= table.i.size:
        raise InterferenceOutOfRange(
            f"normalized interference {i:g} ({10 * math.log10(i):.2f} dB) beyond table edge {table.i_db[-1]} dB"
        )
    ok = np.flatnonzero(table.upper95[:, b] <= eps_u)
    if ok.size == 0:
        raise LookupInfeasible(
            f"no tabulated signal power reaches outage {eps_u:g} at interference {table.i_db[b]} dB"
        )
    return int(ok[0]), b


def min_power_lookup(table: OutageTable, P_e_interference: float, rho_u: float, eps_u: float) -> float:
    """Smallest tabulated URLLC power (mW) meeting ``eps_u`` under uniform
    interference ``P_e_interference`` (mW) on every FR."""
    if not rho_u > 0:
        raise ValueError("rho_u must be positive")
    a, _ = lookup_cell(table, normalize(rho_u * P_e_interference), eps_u)
    return float(table.s[a] / rho_u)
