"""Cell geometry, path loss and the distance-sweep campaign.

The eMBB user is dropped uniformly over the cell and sees i.i.d. Rayleigh
fading on every FR; the URLLC user sits at a fixed distance and is known to
the transmitter only through its mean gain. Every scheme and every URLLC
distance reuses the same eMBB drops and the same verification draws.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .allocate import (
    allocate_nfea,
    allocate_nheu,
    allocate_oma,
    verify_outage_samples,
)
from .domain import ChannelState, ResourceGrid, ServiceRequirements, dbm_to_mw, mw_to_dbm
from .outage import DEFAULT_CHUNK, GridSpec, OutageTable, clopper_pearson
from .rng import chunk_exponentials, substream

__all__ = [
    "ScenarioConfig",
    "EmbbDraw",
    "SweepRecord",
    "SweepResult",
    "PROFILES",
    "PAPER_D_U",
    "profile_config",
    "path_gain",
    "sample_embb_channel",
    "required_tables",
    "table_build_params",
    "table_filename",
    "run_sweep",
    "aggregate",
    "write_sweep_csv",
    "read_sweep_csv",
]

# URLLC distances of the published sweep: one dB of path loss apart.
PAPER_D_U = tuple(round(18.4940260331029 * 10 ** (k / 40), 4) for k in range(25))[::-1]

# Free-space loss over the 1 m reference distance at 2 GHz.
REF_LOSS_2GHZ_DB = round(20 * math.log10(4 * math.pi * 2e9 / 299_792_458.0), 2)


@dataclass(frozen=True)
class ScenarioConfig:
    cell_radius: float = 100.0
    pl_exponent: float = 4.0
    antenna_gain_sum: float = 17.15
    ref_loss_db: float = 0.0
    noise_dbm: float = -92.0
    min_distance: float = 1.0
    F: int = 12
    M: int = 1
    r_e: float = 6.0
    r_u: float = 1.0
    eps_u: float = 1e-5
    l_max: int = 1
    delta_u: int = 0
    d_u: tuple[float, ...] = PAPER_D_U
    placements: int = 1000
    seed: int = 0
    oma_shares: tuple[float, ...] = (0.25, 0.5)
    oma_policy: str = "worst-for-embb"
    averaging: str = "linear"
    verify_samples: int = 100_000
    chunk: int = DEFAULT_CHUNK
    table_schedule: tuple[int, ...] = (100_000, 1_000_000, 10_000_000)
    s_start_db: float = -20.0
    s_stop_db: float = 70.0
    s_step_db: float = 0.25
    i_start_db: float = -20.0
    i_stop_db: float = 60.0
    i_step_db: float = 1.0

    def __post_init__(self):
        if not self.cell_radius > 0 or not self.pl_exponent > 0:
            raise ValueError("cell_radius and pl_exponent must be positive")
        if any(not 0 < d <= self.cell_radius for d in self.d_u):
            raise ValueError(f"every d_u must lie in (0, cell_radius={self.cell_radius}]")
        if self.placements < 1 or self.verify_samples < 1:
            raise ValueError("placements and verify_samples must be >= 1")
        if self.averaging not in ("linear", "db"):
            raise ValueError(f"averaging must be 'linear' or 'db', got {self.averaging!r}")

    @property
    def requirements(self) -> ServiceRequirements:
        return ServiceRequirements(self.r_e, self.r_u, self.eps_u, self.l_max, self.delta_u)

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(
            self.s_start_db, self.s_stop_db, self.s_step_db, self.i_start_db, self.i_stop_db, self.i_step_db
        )

    def scheme_names(self) -> list[str]:
        return ["N-fea", "N-heu"] + [f"OMA-{round(100 * x)}" for x in self.oma_shares]

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], base: "ScenarioConfig | None" = None) -> "ScenarioConfig":
        """Build from string or typed values keyed by field name; unknown keys are an error."""
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        updates = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            updates[key] = _coerce(types[key], raw)
        return replace(base, **updates)

    def as_flat(self) -> dict[str, str]:
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                out[key] = ",".join(_text(v) for v in value)
            else:
                out[key] = _text(value)
        return out


def _text(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _coerce(type_name, raw):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    t = str(type_name)
    if t.startswith("tuple[int"):
        return tuple(int(float(x)) for x in raw.split(",") if x.strip())
    if t.startswith("tuple"):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if t == "int":
        return int(float(raw))
    if t == "float":
        return float(raw)
    return raw.strip()


_PAPER = dict(
    ref_loss_db=REF_LOSS_2GHZ_DB,
    eps_u=1e-5,
    placements=1000,
    d_u=PAPER_D_U,
    oma_policy="first-k",
    averaging="db",
    verify_samples=100_000,
    table_schedule=(100_000, 1_000_000, 10_000_000),
)

PROFILES: dict[str, dict] = {
    "default": {},
    "paper": _PAPER,
    "desk": dict(
        _PAPER,
        eps_u=1e-3,
        placements=200,
        d_u=tuple(PAPER_D_U[k] for k in (0, 3, 5, 8, 11, 13, 16, 19, 21, 24)),
        verify_samples=20_000,
        table_schedule=(100_000, 1_000_000),
    ),
}


def profile_config(name: str, **overrides) -> ScenarioConfig:
    if name not in PROFILES:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return ScenarioConfig.from_mapping({**PROFILES[name], **overrides})


def path_gain(d: float, cfg: ScenarioConfig) -> float:
    """Mean normalized gain (path gain over noise power) at distance ``d`` m."""
    if not d > 0:
        raise ValueError(f"distance must be positive, got {d}")
    gain_db = cfg.antenna_gain_sum - cfg.ref_loss_db - 10.0 * cfg.pl_exponent * math.log10(d)
    return 10.0 ** ((gain_db - cfg.noise_dbm) / 10.0)


@dataclass(frozen=True)
class EmbbDraw:
    radius: float
    angle: float
    rho_e: float
    gamma_e: np.ndarray

    def channel(self, rho_u: float) -> ChannelState:
        return ChannelState(self.gamma_e, rho_u)


def sample_embb_channel(cfg: ScenarioConfig, rng: np.random.Generator) -> EmbbDraw:
    """Uniform drop over the cell disk followed by per-FR Rayleigh fading."""
    radius = cfg.cell_radius * math.sqrt(rng.random())
    angle = 2.0 * math.pi * rng.random()
    distance = max(radius, cfg.min_distance)
    rho_e = path_gain(distance, cfg)
    gamma_e = rho_e * rng.standard_exponential(cfg.F)
    return EmbbDraw(radius, angle, rho_e, gamma_e)


def required_tables(cfg: ScenarioConfig) -> list[tuple[int, float]]:
    """``(F_u, r_bar_u)`` pairs the sweep needs, NOMA first."""
    out = [(cfg.F, cfg.r_u / (cfg.M * cfg.F))]
    for share in cfg.oma_shares:
        F_u = int(round(share * cfg.F))
        out.append((F_u, cfg.r_u / (cfg.M * F_u)))
    return out


def table_build_params(cfg: ScenarioConfig, F_u: int, r_bar_u: float) -> dict:
    """Everything that determines the content of one outage table."""
    return {
        "F_u": int(F_u),
        "r_bar_u": float(r_bar_u),
        "eps_target": float(cfg.eps_u),
        "grid": asdict(cfg.grid_spec),
        "seed": int(cfg.seed),
        "chunk": int(cfg.chunk),
        "schedule": [int(n) for n in cfg.table_schedule],
    }


def table_filename(cfg: ScenarioConfig, F_u: int, r_bar_u: float) -> str:
    params = table_build_params(cfg, F_u, r_bar_u)
    digest = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:10]
    return f"outage_F{F_u}_eps{cfg.eps_u:g}_seed{cfg.seed}_{digest}.nst"


@dataclass(frozen=True)
class SweepRecord:
    d_u_m: float
    scheme: str
    p_tot_dbm: float
    p_e_dbm: float
    p_u_dbm: float
    outage_est: float
    outage_upper95: float
    n_placements: int
    seed: int


@dataclass(frozen=True)
class SweepResult:
    records: list[SweepRecord]
    table1: dict[str, float]
    n_sic_by_du: dict[float, float]
    # per-placement arrays; lets callers re-aggregate under another convention
    raw: dict = field(default_factory=dict, compare=False, repr=False)


# ---------------------------------------------------------------------------
# per-placement work

_TABLES: dict[int, OutageTable] = {}


def _init_worker(tables: dict[int, OutageTable]) -> None:
    global _TABLES
    _TABLES = tables


def _verify_draws(cfg: ScenarioConfig, p: int) -> np.ndarray:
    n, chunk = cfg.verify_samples, cfg.chunk
    parts = []
    for k in range(-(-n // chunk)):
        take = min(chunk, n - k * chunk)
        parts.append(chunk_exponentials(cfg.seed, ("verify", p), k, (chunk, cfg.F))[:take])
    return np.concatenate(parts, axis=0)


def _placement(args) -> dict[str, np.ndarray]:
    cfg, p = args
    tables = _TABLES
    req = cfg.requirements
    draw = sample_embb_channel(cfg, substream(cfg.seed, "placement", p))
    noma_grid = ResourceGrid.noma(cfg.F, cfg.M)
    X = _verify_draws(cfg, p)
    schemes = cfg.scheme_names()
    n_k, n_s = len(cfg.d_u), len(schemes)
    p_e = np.zeros((n_k, n_s))
    p_sic = np.zeros(n_k)
    p_u = np.zeros((n_k, n_s))
    premax = np.zeros((n_k, 2))
    events = np.zeros((n_k, n_s), dtype=np.int64)
    ntab = np.zeros(n_k)
    for k, d in enumerate(cfg.d_u):
        rho_u = path_gain(d, cfg)
        ch = draw.channel(rho_u)
        results = [
            allocate_nfea(ch, noma_grid, req, tables[cfg.F]),
            allocate_nheu(ch, noma_grid, req, tables[cfg.F]),
        ]
        for j, share in enumerate(cfg.oma_shares):
            F_u = int(round(share * cfg.F))
            part_rng = substream(cfg.seed, "partition", p, j) if cfg.oma_policy == "random" else None
            results.append(allocate_oma(ch, noma_grid, req, tables[F_u], share, cfg.oma_policy, part_rng))
        for j, res in enumerate(results):
            p_e[k, j] = res.p_e_tot
            p_u[k, j] = res.p_u_tot
            events[k, j] = verify_outage_samples(res, rho_u, X)
        premax[k, 0] = results[0].grid.M_u * results[0].p_u_premax.sum()
        premax[k, 1] = results[1].grid.M_u * results[1].p_u_premax.sum()
        a, b = results[0].diagnostics["cells"][results[0].diagnostics["f_star"]]
        ntab[k] = tables[cfg.F].estimate[a, b]
        p_sic[k] = noma_grid.M_u * float(results[0].p_u_sic.sum())
    return {"p_e": p_e, "p_u": p_u, "premax": premax, "events": events, "ntab": ntab, "p_sic": p_sic}


def _mean_dbm(values: np.ndarray, averaging: str) -> float:
    values = np.asarray(values, dtype=float)
    if averaging == "linear":
        return mw_to_dbm(float(values.mean()))
    return float(np.mean(10.0 * np.log10(values)))


def run_sweep(cfg: ScenarioConfig, tables: Mapping[int, OutageTable], workers: int = 1) -> SweepResult:
    """Run every scheme for every URLLC distance over ``cfg.placements`` drops.

    ``tables`` maps ``F_u`` to the outage table for that URLLC allocation
    size. Results are identical for any ``workers``.
    """
    for F_u, r_bar in required_tables(cfg):
        if F_u not in tables:
            raise KeyError(f"missing outage table for F_u={F_u}")
        t = tables[F_u]
        if not math.isclose(t.r_bar_u, r_bar, rel_tol=1e-12):
            raise ValueError(f"table for F_u={F_u} has r_bar_u={t.r_bar_u}, need {r_bar}")
    tasks = [(cfg, p) for p in range(cfg.placements)]
    tables = dict(tables)
    if workers <= 1:
        _init_worker(tables)
        parts = [_placement(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(tables,)) as pool:
            parts = list(pool.map(_placement, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    stack = {key: np.stack([part[key] for part in parts]) for key in parts[0]}
    return aggregate(cfg, stack)


def aggregate(cfg: ScenarioConfig, stack: dict[str, np.ndarray]) -> SweepResult:
    """Placement means per distance and scheme under ``cfg.averaging``."""
    schemes = cfg.scheme_names()
    n_p = cfg.placements
    total_n = n_p * cfg.verify_samples
    avg = cfg.averaging
    nan = float("nan")
    records: list[SweepRecord] = []
    # eMBB-side quantities do not depend on d_u; tests assert this exactly
    p_e_all = stack["p_e"][:, 0, :]
    n_sic = _mean_dbm(stack["p_sic"][:, 0], avg)
    for k, d in enumerate(cfg.d_u):
        for j, name in enumerate(schemes):
            pe = p_e_all[:, j]
            pu = stack["p_u"][:, k, j]
            ev = int(stack["events"][:, k, j].sum())
            _, hi = clopper_pearson(ev, total_n)
            pe_mean, pu_mean = _mean_dbm(pe, avg), _mean_dbm(pu, avg)
            # total is the sum of the reported means so the columns stay
            # additive under dB averaging; equals the mean total when linear
            p_tot = mw_to_dbm(dbm_to_mw(pe_mean) + dbm_to_mw(pu_mean))
            records.append(
                SweepRecord(d, name, p_tot, pe_mean, pu_mean, ev / total_n, float(hi), n_p, cfg.seed)
            )
        noma_pe = _mean_dbm(p_e_all[:, 0], avg)
        records.append(SweepRecord(d, "N-SIC", nan, noma_pe, n_sic, nan, nan, n_p, cfg.seed))
        for j, name in enumerate(("N-fea-premax", "N-heu-premax")):
            pu = stack["premax"][:, k, j]
            records.append(SweepRecord(d, name, nan, noma_pe, _mean_dbm(pu, avg), nan, nan, n_p, cfg.seed))
        records.append(
            SweepRecord(d, "N-tab", nan, nan, nan, float(stack["ntab"][:, k].mean()), nan, n_p, cfg.seed)
        )
    table1 = {"NOMA": _mean_dbm(p_e_all[:, 0], avg)}
    for j, name in enumerate(schemes[2:], start=2):
        table1[name] = _mean_dbm(p_e_all[:, j], avg)
    for name, value in table1.items():
        records.append(SweepRecord(float("nan"), f"TableI:{name}", nan, value, nan, nan, nan, n_p, cfg.seed))
    return SweepResult(records, table1, {d: n_sic for d in cfg.d_u}, stack)


# ---------------------------------------------------------------------------
# CSV

CSV_COLUMNS = (
    "d_u_m", "scheme", "p_tot_dbm", "p_e_dbm", "p_u_dbm",
    "outage_est", "outage_upper95", "n_placements", "seed",
)


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(float(v))
    return str(v)


def write_sweep_csv(path: str | Path, result: SweepResult, cfg: ScenarioConfig, extra: Mapping[str, str] = ()) -> None:
    lines = [f"# {k} = {v}" for k, v in cfg.as_flat().items()]
    lines += [f"# {k} = {v}" for k, v in dict(extra).items()]
    lines.append(",".join(CSV_COLUMNS))
    for r in result.records:
        lines.append(",".join(_fmt(getattr(r, c)) for c in CSV_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sweep_csv(path: str | Path) -> tuple[dict[str, str], list[SweepRecord]]:
    meta: dict[str, str] = {}
    records: list[SweepRecord] = []
    header = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = value.strip()
            continue
        cells = line.split(",")
        if header is None:
            header = cells
            continue
        row = dict(zip(header, cells))
        records.append(
            SweepRecord(
                float(row["d_u_m"]), row["scheme"], float(row["p_tot_dbm"]), float(row["p_e_dbm"]),
                float(row["p_u_dbm"]), float(row["outage_est"]), float(row["outage_upper95"]),
                int(row["n_placements"]), int(row["seed"]),
            )
        )
    return meta, records
