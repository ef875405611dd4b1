import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from radioloc.errors import ConfigError, DegenerateGeometryError, ValidationError
from radioloc.scenario import (SPEED_OF_LIGHT, ClockModel, PathGeometry, ProfileSet, RisPanel, Scenario,
                               SpectralGrid, angles_jacobian, angles_of, direction, direction_jacobian,
                               geometric_path_params, load_scenario, rotation_zyx, rotvec_to_matrix,
                               single_antenna, ula, upa, wrap_angle)

az_s = st.floats(-math.pi + 1e-3, math.pi - 1e-3)
el_s = st.floats(-1.4, 1.4)


@given(az_s, el_s)
def test_direction_angles_roundtrip(az, el):
    got = angles_of(3.7 * direction(az, el))
    assert got[0] == pytest.approx(az, abs=1e-9)
    assert got[1] == pytest.approx(el, abs=1e-9)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3).filter(lambda v: math.hypot(v[0], v[1]) > 0.1))
def test_angles_jacobian_matches_finite_differences(v):
    v = np.array(v)
    h = 1e-6
    fd = np.column_stack([wrap_angle(np.array(angles_of(v + h * e)) - np.array(angles_of(v - h * e))) / (2 * h)
                          for e in np.eye(3)])
    np.testing.assert_allclose(angles_jacobian(v), fd, atol=1e-6)


@given(az_s, el_s)
def test_direction_jacobian_matches_finite_differences(az, el):
    h = 1e-6
    fd = np.column_stack([(direction(az + h, el) - direction(az - h, el)) / (2 * h),
                          (direction(az, el + h) - direction(az, el - h)) / (2 * h)])
    np.testing.assert_allclose(direction_jacobian(az, el), fd, atol=1e-8)


def test_zero_vector_has_no_direction():
    with pytest.raises(DegenerateGeometryError):
        angles_of(np.zeros(3))


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_rotvec_matches_scipy(r):
    np.testing.assert_allclose(rotvec_to_matrix(r), Rotation.from_rotvec(r).as_matrix(), atol=1e-12)


@given(az_s, st.floats(-1.5, 1.5), az_s)
def test_rotation_zyx_matches_scipy(yaw, pitch, roll):
    want = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()
    np.testing.assert_allclose(rotation_zyx(yaw, pitch, roll), want, atol=1e-12)


@given(st.floats(-100, 100))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)


def test_grid_indices_and_derived_quantities():
    g = SpectralGrid(28e9, 1e6, 8)
    assert list(g.subcarrier_indices) == [-4, -3, -2, -1, 0, 1, 2, 3]
    assert g.bandwidth == 8e6
    assert g.wavelength == pytest.approx(SPEED_OF_LIGHT / 28e9)
    assert g.T_s == pytest.approx(1e-6)
    assert list(SpectralGrid(28e9, 1e6, 5).subcarrier_indices) == [-2, -1, 0, 1, 2]


@pytest.mark.parametrize("kw", [dict(f_c=-1, delta_f=1, n_subcarriers=4),
                                dict(f_c=1e9, delta_f=0, n_subcarriers=4),
                                dict(f_c=1e9, delta_f=1e6, n_subcarriers=2000),
                                dict(f_c=1e9, delta_f=1e6, n_subcarriers=4, T_s=1e-7)])
def test_grid_rejects_bad_values(kw):
    with pytest.raises(ValidationError):
        SpectralGrid(**kw)


def test_array_builders():
    a = ula(5, 0.01)
    np.testing.assert_allclose(a.element_offsets.mean(axis=0), 0, atol=1e-15)
    np.testing.assert_allclose(np.diff(a.element_offsets[:, 1]), 0.01)
    assert a.aperture == pytest.approx(0.04)
    p = upa(3, 2, 0.5)
    assert p.n_elements == 6
    assert np.all(p.element_offsets[:, 0] == 0)


def test_los_parameters_follow_geometry(grid):
    tx = single_antenna((1.0, 2.0, 3.0))
    rx = single_antenna((11.0, -3.0, 0.0))
    s = Scenario(tx, rx, (PathGeometry.los(),), grid, ClockModel(bias=5e-9))
    pp = geometric_path_params(s, 0)
    d = np.linalg.norm(rx.center - tx.center)
    assert pp.length == pytest.approx(d)
    assert pp.tau == pytest.approx(d / SPEED_OF_LIGHT + 5e-9)
    # free-space amplitude
    assert abs(pp.alpha) == pytest.approx(grid.wavelength / (4 * math.pi * d))
    np.testing.assert_allclose(direction(*pp.aoa), (tx.center - rx.center) / d, atol=1e-12)
    np.testing.assert_allclose(direction(*pp.aod), (rx.center - tx.center) / d, atol=1e-12)


def test_bounce_parameters(grid):
    ip = np.array([4.0, 6.0, 1.0])
    s = Scenario(single_antenna((0, 0, 0)), single_antenna((10, 0, 0)), (PathGeometry.bounce(ip, loss=0.5),), grid)
    pp = geometric_path_params(s, 0)
    assert pp.length == pytest.approx(np.linalg.norm(ip) + np.linalg.norm(ip - [10, 0, 0]))
    assert abs(pp.alpha) == pytest.approx(0.5 * grid.wavelength / (4 * math.pi * pp.length))


def test_local_frames_rotate_angles(grid):
    r = rotation_zyx(0.7)
    s = Scenario(single_antenna((0, 0, 0)), single_antenna((5, 0, 0), orientation=r), (PathGeometry.los(),), grid)
    az, el = geometric_path_params(s, 0).aoa
    assert wrap_angle(az - (math.pi - 0.7)) == pytest.approx(0, abs=1e-12)
    assert el == pytest.approx(0, abs=1e-12)


def test_doppler_sign(grid):
    s = Scenario(single_antenna((0, 0, 0)), single_antenna((5, 0, 0)), (PathGeometry.los(),), grid,
                 rx_velocity=np.array([-3.0, 0, 0]))
    assert geometric_path_params(s, 0).nu == pytest.approx(grid.f_c * 3.0 / SPEED_OF_LIGHT)


def test_scenario_invariants(grid):
    a = single_antenna((0, 0, 0))
    with pytest.raises(ValidationError):
        Scenario(a, single_antenna((0, 0, 0)), (PathGeometry.los(),), grid)
    with pytest.raises(ValidationError):
        Scenario(a, single_antenna((1, 0, 0)), (), grid)
    with pytest.raises(ValidationError):
        PathGeometry.bounce((1, 2, 3), loss=0.0)
    with pytest.raises(ValidationError):
        RisPanel(ula(4, 0.005), np.full((2, 4), 2.0))
    with pytest.raises(ValidationError):
        Scenario(a, single_antenna((1, 0, 0)), (PathGeometry.los(),), grid,
                 ris=RisPanel(ula(4, 0.005), np.ones((grid.n_symbols + 1, 4))))


def test_incidence_point_on_tx_is_degenerate(grid):
    s = Scenario(single_antenna((0, 0, 0)), single_antenna((1, 0, 0)), (PathGeometry.bounce((0, 0, 0)),), grid)
    with pytest.raises(DegenerateGeometryError):
        geometric_path_params(s, 0)


def test_quantized_profile_set():
    ps = ProfileSet("quantized", 2)
    w = ps.quantize(np.exp(1j * np.array([0.1, 1.5, 3.0, -1.7])))
    assert ps.admits(w)
    np.testing.assert_allclose(np.angle(w), [0, np.pi / 2, np.pi, -np.pi / 2], atol=1e-12)
    assert not ps.admits(np.exp(1j * np.array([0.3])))


CONFIG = """
schema_version: 1
grid: {carrier_frequency: 28.0e9, bandwidth: 100.0e6, n_subcarriers: 32, n_symbols: 2}
tx:
  position: [0, 0, 3]
  array: {type: ula, n: 8, spacing_wavelengths: 0.5}
rx: {position: [10, 2, 1], euler_zyx: [3.0, 0, 0]}
paths:
  - kind: los
  - {kind: single_bounce, incidence_point: [5, -3, 2], reflection_loss: 0.4}
clock: {bias: 2.0e-9}
noise: {psd: 1.0e-20}
flags: {beam_squint: true}
"""


def test_load_scenario_builds_validated_scenario():
    s = load_scenario(CONFIG)
    assert s.grid.delta_f == pytest.approx(100e6 / 32)
    assert s.tx.n_elements == 8
    assert s.tx.element_offsets[1, 1] - s.tx.element_offsets[0, 1] == pytest.approx(s.grid.wavelength / 2)
    np.testing.assert_allclose(s.rx.orientation, rotation_zyx(3.0))
    assert [p.kind for p in s.paths] == ["los", "single_bounce"]
    assert s.paths[1].reflection_loss == 0.4
    assert s.clock.bias == 2e-9 and s.noise_psd == 1e-20 and s.flags.beam_squint


@pytest.mark.parametrize("edit,field", [
    (("n_subcarriers: 32", "n_subcarier: 32"), "grid.n_subcarier"),
    (("schema_version: 1", "schema_version: 9"), "schema_version"),
    (("kind: los", "kind: mirror"), "paths[0].kind"),
    (("clock: {bias: 2.0e-9}", "clock: {bias: soon}"), "clock.bias"),
    (("flags: {beam_squint: true}", "flags: {beam_squint: 1}"), "flags.beam_squint"),
    (("position: [0, 0, 3]", "position: [0, 3]"), "tx.position"),
])
def test_config_errors_name_the_field(edit, field):
    with pytest.raises(ConfigError) as exc:
        load_scenario(CONFIG.replace(*edit))
    assert exc.value.field == field


def test_config_invariant_breach_is_validation_error():
    with pytest.raises(ValidationError):
        load_scenario(CONFIG.replace("psd: 1.0e-20", "psd: -1.0"))


def test_config_random_ris_profiles():
    text = CONFIG + """
ris:
  position: [5, 5, 2]
  array: {type: upa, n_y: 2, n_z: 2, spacing_wavelengths: 0.5}
  profile_set: {kind: quantized, bits: 1}
  profiles: {kind: random, seed: 3}
"""
    s = load_scenario(text)
    assert s.ris.profiles.shape == (2, 4)
    assert s.ris.profile_set.admits(s.ris.profiles)
