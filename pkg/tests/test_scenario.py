import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from nomaslice.outage import build_table
from nomaslice.scenario import (
    PAPER_D_U,
    ScenarioConfig,
    aggregate,
    path_gain,
    profile_config,
    read_sweep_csv,
    required_tables,
    run_sweep,
    sample_embb_channel,
    write_sweep_csv,
)

from conftest import COARSE


def db(x):
    return 10 * math.log10(x)


def test_path_gain_examples():
    cfg = ScenarioConfig()
    assert db(path_gain(100.0, cfg)) == pytest.approx(29.15, abs=1e-9)
    assert db(path_gain(10.0, cfg)) == pytest.approx(69.15, abs=1e-9)
    assert db(path_gain(20.0, cfg)) - db(path_gain(40.0, cfg)) == pytest.approx(40 * math.log10(2), abs=1e-9)
    with pytest.raises(ValueError):
        path_gain(0.0, cfg)


def test_reference_loss_shifts_gain():
    base, lossy = ScenarioConfig(), ScenarioConfig(ref_loss_db=38.47)
    assert db(path_gain(50.0, base)) - db(path_gain(50.0, lossy)) == pytest.approx(38.47)


def test_paper_distances_are_one_db_of_path_loss_apart():
    assert len(PAPER_D_U) == 25
    assert PAPER_D_U[0] == pytest.approx(73.626, abs=1e-3)
    assert PAPER_D_U[-1] == pytest.approx(18.494, abs=1e-3)
    assert any(abs(d - 46.45) < 0.01 for d in PAPER_D_U)
    steps = np.diff(40 * np.log10(PAPER_D_U))
    assert np.allclose(steps, -1.0, atol=1e-3)


def test_drop_radius_is_uniform_over_the_disk():
    cfg = ScenarioConfig()
    rng = np.random.default_rng(7)
    draws = [sample_embb_channel(cfg, rng) for _ in range(100_000)]
    r = np.array([d.radius for d in draws])
    assert stats.kstest((r / cfg.cell_radius) ** 2, "uniform").pvalue > 0.01
    fading = np.concatenate([d.gamma_e / d.rho_e for d in draws])
    assert abs(fading.mean() - 1.0) <= 3 / math.sqrt(fading.size)
    assert np.all(fading > 0)


def test_min_distance_clamp():
    cfg = ScenarioConfig(cell_radius=1e-3, d_u=(1e-3,))
    draw = sample_embb_channel(cfg, np.random.default_rng(0))
    assert draw.rho_e == path_gain(1.0, cfg)


@pytest.mark.parametrize(
    "kwargs",
    [dict(cell_radius=0), dict(pl_exponent=-1), dict(d_u=(150.0,)), dict(d_u=(0.0,)), dict(placements=0),
     dict(averaging="median")],
)
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        ScenarioConfig(**kwargs)


def test_config_from_mapping():
    cfg = ScenarioConfig.from_mapping({"placements": "12", "d_u": "30, 20", "table_schedule": "100000,1e6"})
    assert cfg.placements == 12 and cfg.d_u == (30.0, 20.0) and cfg.table_schedule == (100_000, 1_000_000)
    with pytest.raises(KeyError):
        ScenarioConfig.from_mapping({"placement": "3"})
    assert ScenarioConfig.from_mapping(cfg.as_flat()) == cfg


def test_profiles():
    desk, paper = profile_config("desk"), profile_config("paper")
    assert desk.eps_u == 1e-3 and desk.placements == 200 and len(desk.d_u) == 10
    assert paper.eps_u == 1e-5 and paper.placements >= 1000 and paper.d_u == PAPER_D_U
    with pytest.raises(KeyError):
        profile_config("nope")


def test_required_tables():
    assert required_tables(ScenarioConfig()) == [(12, 1 / 12), (3, 1 / 3), (6, 1 / 6)]


# ---------------------------------------------------------------------------
# sweep


@pytest.fixture(scope="module")
def small_cfg():
    return ScenarioConfig(
        ref_loss_db=38.47, eps_u=1e-2, d_u=(60.0, 35.0, 20.0), placements=6, verify_samples=3000,
        table_schedule=(100_000,), s_start_db=COARSE.s_start_db, s_stop_db=COARSE.s_stop_db,
        s_step_db=COARSE.s_step_db, i_start_db=COARSE.i_start_db, i_stop_db=COARSE.i_stop_db,
        i_step_db=COARSE.i_step_db,
    )


@pytest.fixture(scope="module")
def sweep_tables(small_cfg):
    return {
        F_u: build_table(F_u, r, small_cfg.eps_u, small_cfg.grid_spec, schedule=small_cfg.table_schedule)
        for F_u, r in required_tables(small_cfg)
    }


@pytest.fixture(scope="module")
def sweep(small_cfg, sweep_tables):
    return run_sweep(small_cfg, sweep_tables)


def records_by(result, d, scheme):
    (rec,) = [r for r in result.records if r.d_u_m == d and r.scheme == scheme]
    return rec


def test_sweep_layout(small_cfg, sweep):
    main = [r for r in sweep.records if r.scheme in small_cfg.scheme_names()]
    assert len(main) == len(small_cfg.d_u) * 4
    assert {r.scheme for r in sweep.records if math.isnan(r.d_u_m)} == {
        "TableI:NOMA", "TableI:OMA-25", "TableI:OMA-50"
    }
    assert set(sweep.table1) == {"NOMA", "OMA-25", "OMA-50"}


def test_embb_side_is_invariant_to_distance(sweep):
    raw = sweep.raw
    assert np.array_equal(raw["p_e"], np.repeat(raw["p_e"][:, :1, :], raw["p_e"].shape[1], axis=1))
    assert np.array_equal(raw["p_sic"], np.repeat(raw["p_sic"][:, :1], raw["p_sic"].shape[1], axis=1))
    assert len(set(sweep.n_sic_by_du.values())) == 1


def test_heuristic_never_costs_more(small_cfg, sweep):
    assert np.all(sweep.raw["p_u"][:, :, 1] <= sweep.raw["p_u"][:, :, 0])
    for d in small_cfg.d_u:
        assert records_by(sweep, d, "N-heu").p_tot_dbm <= records_by(sweep, d, "N-fea").p_tot_dbm


def test_closer_urllc_user_needs_less_power(small_cfg, sweep):
    for scheme in ("N-fea", "OMA-25", "OMA-50"):
        p = [records_by(sweep, d, scheme).p_u_dbm for d in small_cfg.d_u]
        assert p == sorted(p, reverse=True)


def test_sweep_is_reproducible_for_any_worker_count(small_cfg, sweep_tables, sweep):
    again = run_sweep(small_cfg, sweep_tables, workers=2)
    assert again.records == sweep.records or _same_with_nan(again.records, sweep.records)


def _same_with_nan(a, b):
    import dataclasses

    def key(rec):
        return tuple("nan" if isinstance(v, float) and math.isnan(v) else v for v in dataclasses.astuple(rec))

    return [key(r) for r in a] == [key(r) for r in b]


def test_averaging_conventions(small_cfg, sweep):
    lin = aggregate(replace(small_cfg, averaging="linear"), sweep.raw)
    dbm = aggregate(replace(small_cfg, averaging="db"), sweep.raw)
    # mean of logs never exceeds log of mean
    for name in lin.table1:
        assert dbm.table1[name] <= lin.table1[name] + 1e-12
    p = sweep.raw["p_e"][:, 0, 0]
    assert lin.table1["NOMA"] == pytest.approx(10 * math.log10(p.mean()))


def test_missing_table(small_cfg, sweep_tables):
    tables = dict(sweep_tables)
    del tables[3]
    with pytest.raises(KeyError):
        run_sweep(small_cfg, tables)


def test_csv_round_trip(tmp_path, small_cfg, sweep):
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, sweep, small_cfg, {"note": "x"})
    meta, records = read_sweep_csv(path)
    assert meta["placements"] == "6" and meta["note"] == "x"
    assert ScenarioConfig.from_mapping({k: v for k, v in meta.items() if k != "note"}) == small_cfg
    assert _same_with_nan(records, sweep.records)
    header = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")][0]
    assert header == "d_u_m,scheme,p_tot_dbm,p_e_dbm,p_u_dbm,outage_est,outage_upper95,n_placements,seed"


def test_total_is_sum_of_reported_means(small_cfg, sweep):
    for avg in ("linear", "db"):
        res = aggregate(replace(small_cfg, averaging=avg), sweep.raw)
        for r in res.records:
            if r.scheme in small_cfg.scheme_names():
                assert 10 ** (r.p_tot_dbm / 10) == pytest.approx(10 ** (r.p_e_dbm / 10) + 10 ** (r.p_u_dbm / 10), rel=1e-12)
    lin = aggregate(replace(small_cfg, averaging="linear"), sweep.raw)
    raw = sweep.raw
    total = raw["p_e"][:, 0, 0] + raw["p_u"][:, 0, 0]
    assert records_by(lin, small_cfg.d_u[0], "N-fea").p_tot_dbm == pytest.approx(10 * math.log10(total.mean()), abs=1e-12)
