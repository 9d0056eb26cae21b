"""Command-line interface.

Subcommands: ``build-table``, ``allocate``, ``simulate`` and ``verify``.
Configuration is layered: built-in defaults, then a named profile, then a
flat ``key = value`` file, then flags. Every output file gets a JSON manifest
next to it recording the command, the resolved config, table digests and the
run time; the data files themselves never contain the run time, so reruns
are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .allocate import (
    AllocationError,
    AllocationInfeasible,
    allocate_nfea,
    allocate_nheu,
    allocate_oma,
    verify_outage,
)
from .capacity import embb_outage, sic_outage
from .domain import ChannelState, Mode, ResourceGrid, ServiceRequirements, mw_to_dbm
from .outage import (
    OutageTable,
    TableFormatError,
    build_table,
    outage_closed_form_1fr,
)
from .scenario import (
    PROFILES,
    ScenarioConfig,
    profile_config,
    required_tables,
    run_sweep,
    table_build_params,
    table_filename,
    write_sweep_csv,
)
from .waterfill import InfeasibleError

LOGGER = logging.getLogger("nomaslice")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4

TABLE_DIR_ENV = "NOMASLICE_TABLE_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    tables: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: int = 0
    version: str = __version__
    duration_s: float = 0.0

    def write(self, path: Path) -> None:
        data = {
            "command": self.command,
            "config": self.config,
            "tables": self.tables,
            "outputs": self.outputs,
            "seed": self.seed,
            "version": self.version,
            "duration_s": round(self.duration_s, 3),
        }
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_kv_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# config resolution

# flag dest -> ScenarioConfig field
_OVERRIDES = {
    "seed": "seed",
    "placements": "placements",
    "eps": "eps_u",
    "chunk": "chunk",
    "schedule": "table_schedule",
    "s_start_db": "s_start_db",
    "s_stop_db": "s_stop_db",
    "s_step_db": "s_step_db",
    "i_start_db": "i_start_db",
    "i_stop_db": "i_stop_db",
    "i_step_db": "i_step_db",
    "averaging": "averaging",
    "oma_policy": "oma_policy",
    "verify_samples": "verify_samples",
}


def resolve_config(args) -> ScenarioConfig:
    try:
        cfg = profile_config(args.profile)
        if getattr(args, "config", None):
            cfg = ScenarioConfig.from_mapping(read_kv_file(args.config), base=cfg)
        flags = {}
        for dest, key in _OVERRIDES.items():
            value = getattr(args, dest, None)
            if value is not None:
                flags[key] = value
        for item in getattr(args, "set", None) or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            flags[key.strip()] = value.strip()
        return ScenarioConfig.from_mapping(flags, base=cfg)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc).strip("'\"")) from exc


def _grid_spec(cfg: ScenarioConfig):
    spec = cfg.grid_spec
    try:
        spec.s_db()
    except ValueError as exc:
        raise ConfigError(f"{exc} (check --s-start-db/--s-stop-db/--s-step-db)") from exc
    try:
        spec.i_db()
    except ValueError as exc:
        raise ConfigError(f"{exc} (check --i-start-db/--i-stop-db/--i-step-db)") from exc
    return spec


def _table_dir(args) -> Path:
    if args.tables_dir:
        return Path(args.tables_dir)
    return Path(os.environ.get(TABLE_DIR_ENV, "tables"))


# ---------------------------------------------------------------------------
# build-table


def _build_one(cfg, F_u, r_bar, out: Path, workers: int, csv: Path | None = None) -> str:
    t0 = time.monotonic()
    params = table_build_params(cfg, F_u, r_bar)
    params["grid"] = _grid_spec(cfg)
    table = build_table(**params, workers=workers, progress=LOGGER.info)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = table.save(out)
    if csv:
        table.to_csv(csv)
    n_s, n_i = table.estimate.shape
    print(f"table {out}: F_u={F_u} r_bar_u={r_bar:.6g} eps={cfg.eps_u:g} cells={n_s * n_i} ({n_s} x {n_i})")
    print(f"  escalation: {table.meta['escalation']}")
    unb = table.meta["unbracketed"]
    if unb["no_feasible_s"] or unb["below_grid"]:
        print(f"  unbracketed rows: {unb}")
    print(f"  sha256 {digest}  duration {time.monotonic() - t0:.1f} s")
    manifest = RunManifest(
        "build-table", cfg.as_flat() | {"F_u": str(F_u), "r_bar_u": repr(r_bar)},
        outputs={out.name: digest}, seed=cfg.seed, duration_s=time.monotonic() - t0,
    )
    manifest.write(out.with_name(out.name + ".manifest.json"))
    return digest


def cmd_build_table(args) -> int:
    cfg = resolve_config(args)
    if args.F_u is not None:
        F_u = args.F_u
        r_bar = args.r_bar_u if args.r_bar_u is not None else cfg.r_u / (cfg.M * F_u)
        if F_u < 1 or not r_bar > 0:
            raise ConfigError("--F-u must be >= 1 and --r-bar-u positive")
        out = Path(args.out) if args.out else _table_dir(args) / table_filename(cfg, F_u, r_bar)
        _build_one(cfg, F_u, r_bar, out, args.workers, Path(args.csv) if args.csv else None)
        return EXIT_OK
    if args.out or args.csv:
        raise ConfigError("--out/--csv need --F-u; without it every table of the profile is built")
    for F_u, r_bar in required_tables(cfg):
        _build_one(cfg, F_u, r_bar, _table_dir(args) / table_filename(cfg, F_u, r_bar), args.workers)
    return EXIT_OK


# ---------------------------------------------------------------------------
# allocate


def _floats(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.replace(",", " ").split()])


def _dbm(x: float) -> str:
    return f"{mw_to_dbm(x):8.3f}" if x > 0 else "    -inf"


def cmd_allocate(args) -> int:
    spec = read_kv_file(args.channel)
    try:
        if "gamma_e" in spec:
            gamma_e = _floats(spec["gamma_e"])
        elif "gamma_e_db" in spec:
            gamma_e = 10.0 ** (_floats(spec["gamma_e_db"]) / 10.0)
        else:
            raise ConfigError(f"{args.channel}: needs gamma_e or gamma_e_db")
        if "rho_u" in spec:
            rho_u = float(spec["rho_u"])
        elif "rho_u_db" in spec:
            rho_u = 10.0 ** (float(spec["rho_u_db"]) / 10.0)
        else:
            raise ConfigError(f"{args.channel}: needs rho_u or rho_u_db")
        channel = ChannelState(gamma_e, rho_u)
        req = ServiceRequirements(args.r_e, args.r_u, args.eps_u, args.l_max, args.delta_u)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    table = OutageTable.load(args.table)
    grid = ResourceGrid.noma(gamma_e.size, args.M)
    if args.scheme == "n-fea":
        res = allocate_nfea(channel, grid, req, table)
    elif args.scheme == "n-heu":
        res = allocate_nheu(channel, grid, req, table)
    else:
        rng = np.random.default_rng(args.seed) if args.oma_policy == "random" else None
        res = allocate_oma(channel, grid, req, table, args.urllc_share, args.oma_policy, rng)
    g = res.grid
    print(f"scheme {res.scheme}: F={g.F} M={g.M} F_e={g.F_e} F_u={g.F_u} mode={g.mode.value}")
    if "f_star" in res.diagnostics:
        print(f"f* = {res.diagnostics['f_star']}")
    print("  f     P_e dBm  P_u_sic dBm  P_u* dBm")
    for f in range(g.F):
        print(f"{f:3d} {_dbm(res.alloc.P_e[f])}     {_dbm(res.p_u_sic[f])} {_dbm(res.alloc.P_u[f])}")
    print(f"total eMBB {_dbm(res.p_e_tot)} dBm, URLLC {_dbm(res.p_u_tot)} dBm, sum {_dbm(res.p_tot)} dBm")
    e_out = embb_outage(channel.gamma_e, res.alloc, g, res.targets)
    s_out = sic_outage(channel.gamma_e, res.alloc, g, res.targets) if g.mode == Mode.NOMA else 0
    print(f"eMBB outage {e_out}, SIC outage {s_out}")
    check = verify_outage(res, channel, n=args.verify_samples, seed=args.seed)
    status = "ok" if check.upper95 <= req.eps_u else "ABOVE TARGET"
    print(
        f"verified URLLC outage {check.estimate:.3e} (95% upper {check.upper95:.3e}, n={check.n}) "
        f"target {req.eps_u:g}: {status}"
    )
    if args.csv:
        lines = ["f,P_e_mw,P_u_sic_mw,P_u_mw"]
        for f in range(g.F):
            lines.append(f"{f},{float(res.alloc.P_e[f])!r},{float(res.p_u_sic[f])!r},{float(res.alloc.P_u[f])!r}")
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def load_tables(cfg: ScenarioConfig, directory: Path, build_missing: bool, workers: int = 1):
    tables, digests = {}, {}
    for F_u, r_bar in required_tables(cfg):
        path = directory / table_filename(cfg, F_u, r_bar)
        if not path.exists():
            if not build_missing:
                raise FileNotFoundError(f"missing table {path} (run build-table or pass --build-missing)")
            _build_one(cfg, F_u, r_bar, path, workers)
        tables[F_u] = OutageTable.load(path)
        digests[path.name] = _sha256(path)
    return tables, digests


def cmd_simulate(args) -> int:
    t0 = time.monotonic()
    cfg = resolve_config(args)
    _grid_spec(cfg)
    tables, digests = load_tables(cfg, _table_dir(args), args.build_missing, args.workers)
    result = run_sweep(cfg, tables, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out, result, cfg, {"version": __version__, **{f"table {k}": v for k, v in digests.items()}})
    print(f"wrote {out}: {len(result.records)} rows, {cfg.placements} placements, {len(cfg.d_u)} distances")
    for name, value in result.table1.items():
        print(f"  mean eMBB power {name}: {value:.2f} dBm ({cfg.averaging} averaging)")
    manifest = RunManifest(
        "simulate", cfg.as_flat(), tables=digests, outputs={out.name: _sha256(out)},
        seed=cfg.seed, duration_s=time.monotonic() - t0,
    )
    manifest.write(Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def verify_table(table: OutageTable, raw: bytes | None = None, z_max: float = 5.0) -> list[str]:
    """Problems found in ``table``; an empty list means it passed."""
    problems = []
    if raw is not None and table.to_bytes() != raw:
        problems.append("header round-trip changed the file bytes")
    for name in ("estimate", "upper95"):
        arr = getattr(table, name)
        bad_s = np.argwhere(np.diff(arr, axis=0) > 0)
        if bad_s.size:
            a, b = bad_s[0]
            problems.append(
                f"{name} increases with s at cell (s={table.s_db[a + 1]} dB, i={table.i_db[b]} dB)"
            )
        bad_i = np.argwhere(np.diff(arr, axis=1) < 0)
        if bad_i.size:
            a, b = bad_i[0]
            problems.append(
                f"{name} decreases with i at cell (s={table.s_db[a]} dB, i={table.i_db[b + 1]} dB)"
            )
    if np.any(table.upper95 < table.estimate):
        a, b = np.argwhere(table.upper95 < table.estimate)[0]
        problems.append(f"upper95 below estimate at cell (s={table.s_db[a]} dB, i={table.i_db[b]} dB)")
    if table.F_u == 1:
        worst = (0.0, None)
        for a, s in enumerate(table.s):
            for b, i in enumerate(table.i):
                p = outage_closed_form_1fr(s, i, table.r_bar_u)
                n = table.samples[a, b]
                sigma = math.sqrt(max(p * (1 - p), 1.0 / n) / n)
                z = abs(table.estimate[a, b] - p) / sigma
                if z > worst[0]:
                    worst = (z, (a, b))
        if worst[0] > z_max:
            a, b = worst[1]
            problems.append(
                f"closed-form disagreement {worst[0]:.1f} sigma at cell (s={table.s_db[a]} dB, i={table.i_db[b]} dB)"
            )
    return problems


def cmd_verify(args) -> int:
    raw = Path(args.table).read_bytes()
    table = OutageTable.from_bytes(raw)
    problems = verify_table(table, raw)
    print(f"table {args.table}: F_u={table.F_u} r_bar_u={table.r_bar_u:.6g} eps={table.eps_target:g}")
    if table.F_u == 1:
        print("  closed-form comparison: included")
    for p in problems:
        print(f"  FAIL {p}")
    print("PASS" if not problems else "FAIL")
    return EXIT_OK if not problems else EXIT_VERIFY_FAILED


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser, table_flags: bool = True) -> None:
    p.add_argument("--profile", default="default", choices=sorted(PROFILES), help="base parameter set")
    p.add_argument("--config", help="flat key = value file overriding the profile")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=float, help="reliability target eps_u")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tables-dir", help=f"table directory (default ${TABLE_DIR_ENV} or ./tables)")
    if table_flags:
        p.add_argument("--chunk", type=int)
        p.add_argument("--schedule", help="comma-separated sample sizes, e.g. 100000,1000000")
        for name in ("s-start-db", "s-stop-db", "s-step-db", "i-start-db", "i-stop-db", "i-step-db"):
            p.add_argument(f"--{name}", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nomaslice", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-table", help="tabulate URLLC outage on a normalized grid")
    _add_config_flags(p)
    p.add_argument("--F-u", dest="F_u", type=int, help="FR count; omit to build every table the profile needs")
    p.add_argument("--r-bar-u", dest="r_bar_u", type=float, help="per-FR rate target (default r_u/(M F_u))")
    p.add_argument("--out", help="output table path")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_build_table)

    p = sub.add_parser("allocate", help="allocate power for one channel realization")
    p.add_argument("--channel", required=True, help="key = value file with gamma_e and rho_u (linear or _db)")
    p.add_argument("--table", required=True)
    p.add_argument("--scheme", choices=("n-fea", "n-heu", "oma"), default="n-fea")
    p.add_argument("--urllc-share", type=float, default=0.25)
    p.add_argument("--oma-policy", default="worst-for-embb", choices=("worst-for-embb", "first-k", "random"))
    p.add_argument("--M", type=int, default=1)
    p.add_argument("--r-e", type=float, default=6.0)
    p.add_argument("--r-u", type=float, default=1.0)
    p.add_argument("--eps-u", type=float, default=1e-5)
    p.add_argument("--l-max", type=int, default=1)
    p.add_argument("--delta-u", type=int, default=0)
    p.add_argument("--verify-samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="write per-FR powers in mW")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("simulate", help="run the distance sweep and write the results CSV")
    _add_config_flags(p)
    p.add_argument("--placements", type=int)
    p.add_argument("--verify-samples", type=int)
    p.add_argument("--averaging", choices=("linear", "db"))
    p.add_argument("--oma-policy", choices=("worst-for-embb", "first-k", "random"))
    p.add_argument("--build-missing", action="store_true", help="build absent tables instead of failing")
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--manifest", help="manifest path (default <out>.manifest.json)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="check a table file")
    p.add_argument("table")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AllocationInfeasible, InfeasibleError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except AllocationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TableFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
