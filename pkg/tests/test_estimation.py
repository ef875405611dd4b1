import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radioloc.bounds import _cube, _generic, coded_ris_profiles, upa_offsets
from radioloc.channel import near_field_response, steering_vector, synthesize
from radioloc.errors import (AmbiguityTooWideError, NotIdentifiableError, SeparationError, ValidationError)
from radioloc.estimation import (PathEstimate, PathMeasurement, carrier_phase_range, estimate_angles,
                                 estimate_delay, estimate_paths, measurements_from_estimates, multipath_fix,
                                 read_measurements_csv, ris_fix, write_measurements_csv)
from radioloc.scenario import (SPEED_OF_LIGHT, ArrayGeometry, ClockModel, PathGeometry, RisPanel, Scenario,
                               SpectralGrid, direction, geometric_path_params, single_antenna, ula, upa,
                               wrap_angle)

GRID = SpectralGrid(28e9, 132e6 / 64, 64)
LAM = GRID.wavelength


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.999), st.floats(0.1, 10.0), st.floats(-math.pi, math.pi))
def test_noiseless_delay_is_exact(frac, amp, phase):
    tau = frac / GRID.delta_f
    n = GRID.subcarrier_indices
    y = amp * np.exp(1j * phase) * np.exp(-2j * np.pi * n * GRID.delta_f * tau)
    e = estimate_delay(y, 1.0, GRID)
    err = (e.tau_hat - tau + 0.5 / GRID.delta_f) % (1 / GRID.delta_f) - 0.5 / GRID.delta_f
    assert abs(err) * GRID.bandwidth < 1e-6
    assert abs(e.alpha_hat - amp * np.exp(1j * phase)) < 1e-6 * amp
    assert e.quality == pytest.approx(1.0)
    assert 0 <= e.tau_hat < 1 / GRID.delta_f


def test_noise_only_is_low_confidence():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    assert estimate_delay(y, 1.0, GRID).low_confidence


def test_path_estimate_quality_range():
    with pytest.raises(ValidationError):
        PathEstimate(0.0, None, None, 1.0, 1.5)


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.3, 1.3))
def test_ula_azimuth_exact(az):
    arr = ula(16, LAM / 2)
    a = estimate_angles(2.0 * steering_vector(arr, (az, 0.0), LAM), arr, LAM)
    assert a.az == pytest.approx(az, abs=1e-8)
    assert not a.ambiguous


def test_grating_lobes_flagged():
    arr = ula(8, LAM)
    a = estimate_angles(steering_vector(arr, (0.3, 0.0), LAM), arr, LAM)
    assert a.ambiguous and len(a.candidates) >= 2
    b = estimate_angles(steering_vector(arr, (0.3, 0.0), LAM), arr, LAM, prior=(0.3, 0.0))
    assert b.az == pytest.approx(0.3, abs=1e-8)


def test_planar_array_azimuth_and_elevation():
    arr = upa(4, 4, LAM / 2)
    a = estimate_angles(steering_vector(arr, (0.4, -0.2), LAM), arr, LAM)
    assert (a.az, a.el) == pytest.approx((0.4, -0.2), abs=1e-7)


def test_near_field_distance_recovered():
    arr = ula(64, LAM / 2)
    src = direction(math.pi / 4, 0.0) * 2.8
    a = estimate_angles(near_field_response(arr, src, LAM), arr, LAM, near_field=True)
    assert a.az == pytest.approx(math.pi / 4, abs=1e-5)
    assert a.distance == pytest.approx(2.8, rel=1e-3)


def test_single_antenna_has_no_direction():
    with pytest.raises(Exception):
        estimate_angles(np.ones(1), single_antenna(), LAM)


def _mimo(paths, n_symbols=1, seed=3):
    geo = _generic(np.random.default_rng(seed), 1, 4, 1)
    g = SpectralGrid(28e9, 10e6, 16, n_symbols=n_symbols)
    bs = _cube(*geo.bs[0])
    ue = _cube(geo.ue, geo.ue_rot)
    return geo, bs, Scenario(bs, ue, paths(geo), g, ClockModel(bias=3e-9))


def test_estimate_paths_noiseless_two_paths():
    geo, bs, s = _mimo(lambda g: (PathGeometry.los(), PathGeometry.bounce(g.ips[0])))
    ests = estimate_paths(synthesize(s).entries, s.tx, s.rx, s.grid, max_paths=2)
    truth = sorted((geometric_path_params(s, l) for l in range(2)), key=lambda p: p.tau)
    assert len(ests) == 2
    for e, t in zip(ests, truth):
        assert e.tau_hat == pytest.approx(t.tau, abs=1e-13)
        assert wrap_angle(e.aoa_hat[0] - t.aoa[0]) == pytest.approx(0, abs=1e-6)
        assert e.aod_hat[1] == pytest.approx(t.aod[1], abs=1e-6)


def test_measurement_validation_and_csv_roundtrip():
    m1 = PathMeasurement.build("los", 1e-8, (0.1, 0.2), (0.3, -0.1), variances=[1e-20, 1e-4, 1e-4, 1e-4, 1e-4])
    m2 = PathMeasurement.build("nlos", 2e-8, (0.5, None), None, variances=[1e-20, 1e-4])
    assert list(m2.mask) == [True, True, False, False, False]
    buf = io.StringIO(newline="")
    write_measurements_csv(buf, [m1, m2])
    back = read_measurements_csv(io.StringIO(buf.getvalue()))
    for a, b in zip([m1, m2], back):
        assert a.kind == b.kind
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.covariance, b.covariance)
    with pytest.raises(ValidationError):
        PathMeasurement("ghost", np.full(5, 1.0), np.eye(5))
    with pytest.raises(ValidationError):
        PathMeasurement.build("los", 1e-8, variances=[-1.0])


def _exact_meas(s):
    out = []
    for l, p in enumerate(s.paths):
        pp = geometric_path_params(s, l)
        out.append(PathMeasurement.build(p.kind if p.kind == "los" else "nlos", pp.tau, pp.aoa, pp.aod,
                                         variances=[1e-20, 1e-6, 1e-6, 1e-6, 1e-6]))
    return out


def test_multipath_fix_noiseless_los_plus_bounce():
    geo, bs, s = _mimo(lambda g: (PathGeometry.los(), PathGeometry.bounce(g.ips[0])))
    r = multipath_fix(_exact_meas(s), bs)
    assert r.converged
    assert np.linalg.norm(r.position_hat - geo.ue) < 1e-6
    assert r.bias_hat == pytest.approx(3e-9, abs=1e-15)
    np.testing.assert_allclose(r.orientation_hat, geo.ue_rot, atol=1e-6)
    np.testing.assert_allclose(r.ip_hats[0], geo.ips[0], atol=1e-5)
    d = json.loads(r.to_json())
    assert d["converged"] and len(d["position_hat"]) == 3


def test_multipath_fix_without_los_needs_four_bounces():
    geo, bs, s4 = _mimo(lambda g: tuple(PathGeometry.bounce(ip) for ip in g.ips[:4]))
    r = multipath_fix(_exact_meas(s4), bs)
    assert np.linalg.norm(r.position_hat - geo.ue) < 1e-4
    _, _, s3 = _mimo(lambda g: tuple(PathGeometry.bounce(ip) for ip in g.ips[:3]))
    with pytest.raises(NotIdentifiableError) as exc:
        multipath_fix(_exact_meas(s3), bs)
    assert exc.value.null_space_dim >= 1


def test_measurements_from_estimates_labels_first_path_los():
    geo, bs, s = _mimo(lambda g: (PathGeometry.los(), PathGeometry.bounce(g.ips[0])))
    ests = estimate_paths(synthesize(s).entries, s.tx, s.rx, s.grid, max_paths=2)
    meas = measurements_from_estimates(ests, s.tx, s.rx, s.grid, 1e-12)
    assert [m.kind for m in meas] == ["los", "nlos"]
    assert all(m.mask.all() for m in meas)


def _ris_scenario(profiles=None):
    rng = np.random.default_rng(3)
    geo = _generic(rng, 1, 4, 1)
    g = SpectralGrid(28e9, 1e6, 64, n_symbols=16)
    p, o = geo.ris[0]
    prof = coded_ris_profiles(64, 16, rng) if profiles is None else profiles
    panel = RisPanel(ArrayGeometry(p, o, upa_offsets(8, 8, g.wavelength / 2)), prof)
    s = Scenario(single_antenna(geo.bs[0][0]), single_antenna(geo.ue), (PathGeometry.los(),), g,
                 ClockModel(bias=2e-9), panel)
    return geo, s


def test_ris_fix_noiseless():
    geo, s = _ris_scenario()
    r = ris_fix(synthesize(s).entries[:, :, 0, 0], s)
    assert np.linalg.norm(r.position_hat - geo.ue) < 1e-5
    assert r.bias_hat == pytest.approx(2e-9, abs=1e-13)


def test_ris_fix_needs_varying_profiles():
    _, s = _ris_scenario(np.ones((16, 64), complex))
    with pytest.raises(SeparationError):
        ris_fix(synthesize(s).entries[:, :, 0, 0], s)


def test_carrier_phase_resolves_integer():
    lam = 0.01
    d = 10.0025
    r = carrier_phase_range(-2 * np.pi * d / lam, 10.0, 0.002, lam)
    assert r.range_hat == pytest.approx(d, abs=1e-9)
    assert r.integer == round((d - 0.0025) / lam)
    # hardware phase offsets are removed before resolution
    r2 = carrier_phase_range(-2 * np.pi * d / lam + 0.7 + 0.2, 10.001, 0.002, lam, psi_tx=0.7, psi_rx=0.2)
    assert r2.range_hat == pytest.approx(d, abs=1e-9)


def test_carrier_phase_window_limits():
    with pytest.raises(AmbiguityTooWideError):
        carrier_phase_range(0.0, 10.0, 1.0, 0.01)
    r = carrier_phase_range(0.0, 10.0, 0.01, 0.01)
    assert r.low_confidence


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.3, 1.3), st.floats(-1.2, 1.2))
def test_planar_estimates_are_canonical(az, el):
    arr = upa(4, 4, LAM / 2)
    a = estimate_angles(steering_vector(arr, (az, el), LAM), arr, LAM)
    assert -math.pi < a.az <= math.pi and -math.pi / 2 <= a.el <= math.pi / 2
    np.testing.assert_allclose(direction(a.az, a.el), direction(az, el), atol=1e-6)
