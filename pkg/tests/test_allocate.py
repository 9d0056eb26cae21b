import dataclasses
import math

import numpy as np
import pytest

from nomaslice.allocate import (
    AllocationError,
    AllocationInfeasible,
    TableMismatch,
    allocate_nfea,
    allocate_nheu,
    allocate_oma,
    oma_partition,
    verify_outage,
)
from nomaslice.capacity import embb_outage, sic_outage
from nomaslice.domain import ChannelState, PowerAllocation, ResourceGrid, ServiceRequirements
from nomaslice.outage import build_table, min_power_lookup

from conftest import COARSE

EPS = 1e-2
REQ = ServiceRequirements(r_e=2.0, r_u=1.0, eps_u=EPS)
GRID = ResourceGrid.noma(4)


def random_channel(rng, rho_e=1e3, rho_u=1e3):
    return ChannelState(rho_e * rng.exponential(size=4), rho_u)


def test_equal_interference_gives_uniform_power(small_tables):
    ch = ChannelState(np.full(4, 50.0), 2e2)
    fea = allocate_nfea(ch, GRID, REQ, small_tables[4])
    heu = allocate_nheu(ch, GRID, REQ, small_tables[4])
    lookup = min_power_lookup(small_tables[4], fea.alloc.P_e[0], ch.rho_u, EPS)
    assert np.all(fea.p_u_sic <= lookup)
    assert fea.alloc.P_u == pytest.approx(np.full(4, lookup), rel=1e-12)
    assert np.array_equal(fea.alloc.P_u, heu.alloc.P_u)
    assert fea.diagnostics["f_star"] == 0


def test_oma_single_fr_matches_analytic_inversion(small_tables):
    rho_u = 1e4
    res = allocate_oma(ChannelState([1.0, 2.0, 3.0, 4.0], rho_u), GRID, REQ, small_tables[1], 0.25)
    s_star = 1.0 / -math.log1p(-EPS)  # c = 1 at r_bar_u = 1
    (f,) = res.grid.fr_u
    s = res.alloc.P_u[f] * rho_u
    assert s >= s_star * (1 - 1e-9)
    assert 10 * math.log10(s / s_star) <= 1.0


def test_nfea_picks_the_worst_fr_with_lowest_index_tie_break(small_tables):
    # water-filling gives the strongest FRs the most eMBB power
    ch = ChannelState([1.0, 5.0, 5.0, 1.0], 1e3)
    res = allocate_nfea(ch, GRID, REQ, small_tables[4])
    assert res.alloc.P_e[1] == res.alloc.P_e[2] > res.alloc.P_e[0]
    assert res.diagnostics["f_star"] == 1


def test_invariants_on_random_instances(rng, small_tables):
    for _ in range(100):
        ch = random_channel(rng, rho_u=10 ** rng.uniform(2, 4))
        fea = allocate_nfea(ch, GRID, REQ, small_tables[4])
        heu = allocate_nheu(ch, GRID, REQ, small_tables[4])
        assert heu.p_u_tot <= fea.p_u_tot
        assert heu.p_tot <= fea.p_tot
        assert np.array_equal(fea.alloc.P_e, heu.alloc.P_e)
        for res in (fea, heu):
            assert res.p_tot == res.p_e_tot + res.p_u_tot
            assert np.all(res.alloc.P_u >= res.p_u_sic)
            assert embb_outage(ch.gamma_e, res.alloc, GRID, res.targets) == 0
            assert sic_outage(ch.gamma_e, res.alloc, GRID, res.targets) == 0


def test_oma_shares_and_orthogonality(rng, small_tables):
    ch = random_channel(rng)
    for share, F_u in ((0.25, 1), (0.5, 2)):
        res = allocate_oma(ch, GRID, REQ, small_tables[F_u], share)
        assert res.grid.F_u == F_u and res.grid.F_e == 4 - F_u
        assert res.alloc.is_orthogonal()
        assert not res.p_u_sic.any()
        assert res.scheme == f"OMA-{round(share * 100)}"


def test_oma_twelve_fr_split():
    table = build_table(3, 1 / 3, 1e-2, COARSE, schedule=(100_000,))
    ch = ChannelState(np.arange(1.0, 13.0) * 100, 1e3)
    res = allocate_oma(ch, ResourceGrid.noma(12), ServiceRequirements(6, 1, 1e-2), table, 0.25)
    assert (res.grid.F_u, res.grid.F_e) == (3, 9)
    assert res.grid.fr_u == (0, 1, 2)


def test_smaller_urllc_share_costs_less_embb_power(rng, small_tables):
    for policy in ("worst-for-embb", "first-k"):
        for _ in range(30):
            ch = random_channel(rng)
            quarter = allocate_oma(ch, GRID, REQ, small_tables[1], 0.25, policy)
            half = allocate_oma(ch, GRID, REQ, small_tables[2], 0.5, policy)
            # equal when the extra eMBB FR stays inactive
            assert quarter.p_e_tot <= half.p_e_tot * (1 + 1e-9)


def test_partition_policies(rng):
    gains = [3.0, 1.0, 2.0, 1.0]
    assert oma_partition(gains, 2) == (1, 3)
    assert oma_partition(gains, 1) == (1,)
    assert oma_partition(gains, 3, "first-k") == (0, 1, 2)
    pick = oma_partition(gains, 2, "random", rng)
    assert len(set(pick)) == 2
    with pytest.raises(ValueError):
        oma_partition(gains, 2, "random")
    with pytest.raises(ValueError):
        oma_partition(gains, 2, "best")


def test_input_errors(rng, small_tables):
    ch = random_channel(rng)
    with pytest.raises(AllocationError):
        allocate_oma(ch, GRID, REQ, small_tables[1], 0.3)
    with pytest.raises(AllocationError):
        allocate_oma(ch, GRID, REQ, small_tables[4], 1.0)
    with pytest.raises(TableMismatch):
        allocate_nfea(ch, GRID, REQ, small_tables[2])
    with pytest.raises(AllocationError):
        allocate_nfea(ch, ResourceGrid.oma(4, [0]), REQ, small_tables[1])
    with pytest.raises(AllocationError):
        allocate_nfea(ChannelState(np.ones(3), 1.0), GRID, REQ, small_tables[4])


def test_infeasible_lookup_names_the_fr(small_tables):
    # all eMBB power on FR 2, far above the table's last interference row
    ch = ChannelState([1e-3, 1e-3, 1e3, 1e-3], 1e9)
    with pytest.raises(AllocationInfeasible) as info:
        allocate_nfea(ch, GRID, REQ, small_tables[4])
    assert info.value.fr == 2


def test_verify_zero_power_is_certain_outage(rng, small_tables):
    ch = random_channel(rng)
    res = allocate_nfea(ch, GRID, REQ, small_tables[4])
    silent = dataclasses.replace(res, alloc=PowerAllocation(res.alloc.P_e, np.zeros(4)))
    assert verify_outage(silent, ch, n=1000).estimate == 1.0


def test_verify_at_the_table_operating_point(small_tables):
    # uniform interference: the allocation sits exactly on a table cell
    ch = ChannelState(np.full(4, 20.0), 5e3)
    res = allocate_nfea(ch, GRID, REQ, small_tables[4])
    check = verify_outage(res, ch, n=200_000, seed=8)
    assert check.lower95 <= EPS


def test_verify_rejects_foreign_grid(rng, small_tables):
    ch = random_channel(rng)
    res = allocate_nfea(ch, GRID, REQ, small_tables[4])
    with pytest.raises(AllocationError):
        verify_outage(res, ch, grid=ResourceGrid.noma(4, M=2))


def test_allocation_is_deterministic(rng, small_tables):
    ch = random_channel(rng)
    a = allocate_nheu(ch, GRID, REQ, small_tables[4])
    b = allocate_nheu(ch, GRID, REQ, small_tables[4])
    assert np.array_equal(a.alloc.P_e, b.alloc.P_e)
    assert np.array_equal(a.alloc.P_u, b.alloc.P_u)
    assert (a.p_e_tot, a.p_u_tot, a.diagnostics) == (b.p_e_tot, b.p_u_tot, b.diagnostics)
    assert verify_outage(a, ch, n=50_000, seed=1) == verify_outage(b, ch, n=50_000, seed=1)
