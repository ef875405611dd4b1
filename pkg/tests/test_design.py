import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radioloc.design import (PowerAllocation, PriorRegion, delay_peb, first_sidelobe_db, group_shapes,
                             main_lobe_width, optimize_allocation, range_profile, rms_bandwidth,
                             sidelobe_check, write_allocation_csv, write_profiles_csv)
from radioloc.errors import InfeasibleDesignError, ValidationError
from radioloc.scenario import SPEED_OF_LIGHT, SpectralGrid

GRID = SpectralGrid(28e9, 132e6 / 64, 64)
C = SPEED_OF_LIGHT


def dirichlet_db(n, x):
    """|sum_n e^{j 2 pi n x}|^2 / N^2 in dB, x = delta_f * offset."""
    x = np.asarray(x, float)
    num = np.sin(np.pi * n * x)
    den = n * np.sin(np.pi * x)
    r = np.where(np.abs(den) < 1e-15, 1.0, num / np.where(den == 0, 1, den))
    return 10 * np.log10(np.maximum(r**2, 1e-300))


def test_allocation_invariants():
    with pytest.raises(ValidationError):
        PowerAllocation(np.array([0.5, -0.1]), 1.0)
    with pytest.raises(ValidationError):
        PowerAllocation(np.array([0.6, 0.6]), 1.0)
    with pytest.raises(ValidationError):
        PowerAllocation.from_groups(GRID, [0.5, 0.6, 0.0])
    p = PowerAllocation.from_groups(GRID, [0.2, 0.3, 0.5])
    assert p.total == pytest.approx(1.0)
    np.testing.assert_allclose(p.powers, p.powers[::-1])


def test_group_shapes_are_unit_sum():
    g = group_shapes(64)
    np.testing.assert_allclose(g.sum(axis=1), 1.0)
    assert np.count_nonzero(g[1]) == 16
    assert np.count_nonzero(g[2]) == 2


def test_prior_region():
    pr = PriorRegion.around_distance(10.0, 0.8)
    lo, hi = pr.offset_intervals()[0]
    assert hi == pytest.approx(1.6 / C) and lo == pytest.approx(-1.6 / C)
    with pytest.raises(ValidationError):
        PriorRegion(((2.0, 1.0),))
    with pytest.raises(ValidationError):
        PriorRegion(())


def test_uniform_rms_bandwidth_is_discrete_uniform_spread():
    n = GRID.n_subcarriers
    assert rms_bandwidth(PowerAllocation.uniform(GRID), GRID) == pytest.approx(
        GRID.delta_f * math.sqrt((n**2 - 1) / 12))


def test_delay_peb_closed_form_and_edge_ratio():
    snr = 3.0
    uni = PowerAllocation.uniform(GRID)
    b = rms_bandwidth(uni, GRID)
    assert delay_peb(uni, GRID, snr) == pytest.approx(C / math.sqrt(8 * math.pi**2 * snr * b**2))
    edge = PowerAllocation.edge_pair(GRID)
    # outermost pair: spread is exactly half the span of indices
    assert rms_bandwidth(edge, GRID) == pytest.approx(GRID.delta_f * 63 / 2)
    single = PowerAllocation(np.eye(64)[5], 1.0)
    assert delay_peb(single, GRID, snr) == math.inf


def test_uniform_profile_is_dirichlet_kernel():
    prof = range_profile(PowerAllocation.uniform(GRID), GRID, 10 / C)
    x = (prof.distance - 10.0) / C * GRID.delta_f
    ok = prof.db > -60
    np.testing.assert_allclose(prof.db[ok], dirichlet_db(64, x)[ok], atol=1e-6)
    assert prof.db.max() == 0.0


def test_uniform_width_and_first_sidelobe_oracles():
    prof = range_profile(PowerAllocation.uniform(GRID), GRID, 10 / C)
    assert main_lobe_width(prof) == pytest.approx(2 * C / GRID.bandwidth, rel=1e-6)
    x = np.linspace(1.0 / 64, 2.0 / 64, 200001)
    assert first_sidelobe_db(prof) == pytest.approx(dirichlet_db(64, x).max(), abs=1e-3)


def test_sidelobe_check_on_uniform():
    uni = PowerAllocation.uniform(GRID)
    pr = PriorRegion.around_distance(10.0, 5.0)
    r = sidelobe_check(uni, GRID, pr, 13.0)
    assert r.worst_db == pytest.approx(-13.26, abs=0.02)
    assert r.feasible
    assert not sidelobe_check(uni, GRID, pr, 14.0).feasible
    # a prior narrower than the main lobe sees no sidelobe at all
    assert sidelobe_check(uni, GRID, PriorRegion.around_distance(10.0, 0.5), 30.0).worst_db == -math.inf


def _brute_force(grid, prior, margin, steps=20):
    best = math.inf
    for i in range(steps + 1):
        for j in range(steps + 1 - i):
            w = np.array([i, j, steps - i - j]) / steps
            p = PowerAllocation.from_groups(grid, w)
            if sidelobe_check(p, grid, prior, margin).feasible:
                best = min(best, delay_peb(p, grid, 1.0))
    return best


@pytest.mark.parametrize("margin", [0.0, 3.0, 10.0])
def test_optimizer_matches_brute_force(margin):
    pr = PriorRegion.full_range(GRID)
    p = optimize_allocation(GRID, 1.0, pr, margin)
    assert sidelobe_check(p, GRID, pr, margin).feasible
    assert delay_peb(p, GRID, 1.0) <= _brute_force(GRID, pr, margin) * (1 + 1e-9)


def test_narrow_prior_allows_edge_pair():
    p = optimize_allocation(GRID, 1.0, PriorRegion.around_distance(10.0, 0.8), 3.0)
    np.testing.assert_allclose(p.powers, PowerAllocation.edge_pair(GRID).powers, atol=1e-9)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.0, 12.0), st.floats(0.0, 12.0))
def test_peb_monotone_in_margin(m1, m2):
    lo, hi = sorted((m1, m2))
    pr = PriorRegion.full_range(GRID)
    a = delay_peb(optimize_allocation(GRID, 1.0, pr, lo), GRID, 1.0)
    b = delay_peb(optimize_allocation(GRID, 1.0, pr, hi), GRID, 1.0)
    assert a <= b * (1 + 1e-9)


def test_infeasible_design_reports_binding_offset():
    with pytest.raises(InfeasibleDesignError) as exc:
        optimize_allocation(GRID, 1.0, PriorRegion.full_range(GRID), 20.0)
    assert math.isfinite(exc.value.binding_offset)
    assert exc.value.worst_sidelobe_db > -20.0


def test_csv_writers():
    uni = PowerAllocation.uniform(GRID)
    buf = io.StringIO(newline="")
    write_allocation_csv(buf, GRID, {"uniform": uni})
    lines = buf.getvalue().split("\n")
    assert lines[0] == "subcarrier,frequency_offset_hz,uniform_w"
    assert lines[1].startswith("-32,")
    prof = range_profile(uni, GRID, 10 / C, span=4.0)
    buf = io.StringIO(newline="")
    write_profiles_csv(buf, {"a": prof, "b": prof})
    assert buf.getvalue().startswith("distance_m,a_db,b_db\n")
    assert "\r" not in buf.getvalue()
