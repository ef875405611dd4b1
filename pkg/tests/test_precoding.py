import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radioloc.precoding import (beam_gain, beam_peak, make_precoder, response_map, squint_angle,
                                write_map_csv)
from radioloc.scenario import ModelFlags, SpectralGrid, ula

GRID = SpectralGrid(28e9, 400e6 / 64, 64)
ARR = ula(32, GRID.wavelength / 2)


def test_precoders_are_unit_norm():
    for kind in ("phase", "time_delay"):
        p = make_precoder(ARR, kind, (0.3, 0.0), GRID)
        np.testing.assert_allclose(np.linalg.norm(p.coefficients, axis=1), 1.0)
    p = make_precoder(ARR, "near_field_focus", (0.3, 0.0), GRID, focus_distance=2.0)
    np.testing.assert_allclose(np.linalg.norm(p.coefficients, axis=1), 1.0)


def test_full_array_gain_on_target_at_carrier():
    p = make_precoder(ARR, "phase", (0.4, 0.0), GRID)
    assert beam_gain(ARR, p, GRID, 0.4, 0) == pytest.approx(32.0)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 1.0))
def test_phase_beam_squints_as_analytic_ula(target):
    p = make_precoder(ARR, "phase", (target, 0.0), GRID)
    for n in (-32, 31):
        f = GRID.f_c + n * GRID.delta_f
        assert beam_peak(ARR, p, GRID, n) == pytest.approx(squint_angle(target, GRID.f_c, f), abs=1e-7)


def test_time_delay_beam_is_flat_across_band():
    p = make_precoder(ARR, "time_delay", (math.pi / 4, 0.0), GRID)
    g = [beam_gain(ARR, p, GRID, math.pi / 4, int(n)) for n in GRID.subcarrier_indices]
    np.testing.assert_allclose(g, 32.0, rtol=1e-10)


def test_near_field_focus_reaches_full_gain_at_focus():
    p = make_precoder(ARR, "near_field_focus", (0.5, 0.0), GRID, focus_distance=1.5)
    nf = ModelFlags(near_field=True)
    assert beam_gain(ARR, p, GRID, 0.5, 0, 1.5, nf) == pytest.approx(32.0)
    assert beam_gain(ARR, p, GRID, 0.5, 0, 6.0, nf) < 32.0


def test_response_map_shape_and_normalisation():
    p = make_precoder(ARR, "phase", (0.2, 0.0), GRID)
    angles = np.linspace(-1, 1, 41)
    m = response_map(ARR, p, GRID, angles, distances=[1.0, 2.0], subcarriers=[-32, 0, 31],
                     flags=ModelFlags(beam_squint=True))
    assert m.shape == (41, 2, 3)
    assert m.max() == pytest.approx(0.0)
    # far-field model: distance columns identical
    np.testing.assert_array_equal(m[:, 0], m[:, 1])


def test_unknown_kind_and_missing_focus():
    with pytest.raises(ValueError):
        make_precoder(ARR, "analog", (0, 0), GRID)
    with pytest.raises(ValueError):
        make_precoder(ARR, "near_field_focus", (0, 0), GRID)


def test_map_csv_layout():
    buf = io.StringIO(newline="")
    write_map_csv(buf, [0.0, 0.5], [1.0, 2.5], np.array([[0.0, -1.0], [-2.0, -3.0]]), "d_m")
    assert buf.getvalue() == "angle_rad,d_m=1,d_m=2.5\n0,0.000000,-1.000000\n0.5,-2.000000,-3.000000\n"


def test_reproduction_handles_broadside_target():
    import copy

    from radioloc.presets import FIG3, fig3_reproduction
    cfg = copy.deepcopy(FIG3)
    cfg["figure"].update(target_azimuth=0.0, n_angles=5, n_distances=40)
    cfg["tx"]["position"] = [2.8, 0.0, 0.0]
    m = fig3_reproduction(cfg).metrics
    assert m["squint_relative_error_low"] == 0.0
    # curvature across the full aperture is larger at broadside than at pi/4
    assert m["far_field_loss_db"] > 3.0


def test_displaced_elements_lower_peak_and_raise_sidelobes():
    import copy

    from radioloc.presets import FIG3, fig3_reproduction
    cfg = copy.deepcopy(FIG3)
    cfg["figure"]["n_distances"] = 3
    r = fig3_reproduction(cfg)
    assert r.impaired_map.shape == (r.angles.size, 1)
    assert r.metrics["impaired_peak_loss_db"] > 0
    assert r.metrics["impaired_sidelobe_rise_db"] > 0
    cfg["figure"]["displacement_sigma_wavelengths"] = 0.0
    m = fig3_reproduction(cfg).metrics
    assert m["impaired_peak_loss_db"] == 0 and m["impaired_sidelobe_rise_db"] == 0
