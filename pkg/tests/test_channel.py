import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radioloc.channel import (ChannelTensor, ImpairmentSpec, NearFieldValidityWarning, apply_impairments,
                              far_field_distance, near_field_response, observe, ris_gains, ris_term,
                              steering_derivatives, steering_vector, synthesize, synthesize_impaired)
from radioloc.errors import ValidationError
from radioloc.scenario import (SPEED_OF_LIGHT, ClockModel, ModelFlags, PathGeometry, RisPanel, Scenario,
                               SpectralGrid, direction, geometric_path_params, single_antenna, ula, upa)

from conftest import rel_err


def test_siso_los_tones(siso_scenario):
    s = siso_scenario
    h = synthesize(s).entries[:, :, 0, 0]
    pp = geometric_path_params(s, 0)
    n = s.grid.subcarrier_indices
    want = pp.alpha * np.exp(-2j * np.pi * n * s.grid.delta_f * pp.tau)
    np.testing.assert_allclose(h, np.repeat(want[:, None], s.grid.n_symbols, axis=1), rtol=1e-12)


def test_far_field_path_is_rank_one_outer_product(mimo_scenario):
    s = mimo_scenario.replace(paths=mimo_scenario.paths[:1])
    h = synthesize(s).entries
    pp = geometric_path_params(s, 0)
    lam = s.grid.wavelength
    outer = np.outer(steering_vector(s.rx, pp.aoa, lam), steering_vector(s.tx, pp.aod, lam))
    n = s.grid.subcarrier_indices
    for i in (0, 7, 15):
        coef = pp.alpha * np.exp(-2j * np.pi * n[i] * s.grid.delta_f * pp.tau)
        np.testing.assert_allclose(h[i, 0], coef * outer, rtol=1e-10)
        assert np.linalg.matrix_rank(h[i, 0], tol=1e-8 * abs(coef)) == 1


def test_paths_superpose(mimo_scenario):
    s = mimo_scenario
    parts = [synthesize(s.replace(paths=(p,))).entries for p in s.paths]
    np.testing.assert_allclose(synthesize(s).entries, sum(parts), rtol=1e-12, atol=1e-20)


def test_tensor_binary_roundtrip(mimo_scenario):
    h = synthesize(mimo_scenario)
    data = h.to_bytes()
    assert data[:4] == b"RLCT"
    back = ChannelTensor.from_bytes(data)
    assert back.shape == h.shape and back.grid == h.grid
    np.testing.assert_array_equal(back.entries, h.entries)
    with pytest.raises(ValueError):
        ChannelTensor.from_bytes(data[:-8])


def test_tensor_csv_layout(siso_scenario):
    buf = io.StringIO(newline="")
    synthesize(siso_scenario).write_csv(buf)
    text = buf.getvalue()
    assert "\r" not in text
    lines = text.splitlines()
    assert lines[0] == "n,k,p,q,re,im"
    assert len(lines) == 1 + 16 * 4
    assert lines[1].startswith("-8,0,0,0,")


def test_tensor_rejects_non_finite(grid):
    bad = np.zeros((16, 4, 1, 1), complex)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        ChannelTensor(bad, grid)


@settings(max_examples=25, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.2, 1.2))
def test_steering_derivatives_match_finite_differences(az, el):
    arr = upa(3, 3, 0.005)
    lam = 0.0107
    d_az, d_el = steering_derivatives(arr, (az, el), lam)
    h = 1e-7
    fd_az = (steering_vector(arr, (az + h, el), lam) - steering_vector(arr, (az - h, el), lam)) / (2 * h)
    fd_el = (steering_vector(arr, (az, el + h), lam) - steering_vector(arr, (az, el - h), lam)) / (2 * h)
    assert rel_err(d_az, fd_az) < 1e-5
    assert rel_err(d_el, fd_el) < 1e-5


def test_near_field_converges_to_far_field(mimo_scenario):
    s = mimo_scenario.replace(paths=mimo_scenario.paths[:1])
    aperture = max(s.tx.aperture, s.rx.aperture)
    u = (s.rx.center - s.tx.center) / np.linalg.norm(s.rx.center - s.tx.center)
    errs = []
    for scale in (1e2, 1e3, 1e4):
        far = s.replace(rx=s.rx.moved(center=s.tx.center + u * scale * aperture))
        ff = synthesize(far).entries
        nf = synthesize(far.replace(flags=ModelFlags(near_field=True))).entries
        errs.append(rel_err(nf, ff))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-3


def test_near_field_response_reference_and_warning():
    arr = ula(16, 0.005)
    a = near_field_response(arr, (3.0, 0.5, 0.0), 0.01)
    assert np.all(np.isclose(np.abs(a), 1))
    with pytest.warns(NearFieldValidityWarning):
        near_field_response(arr, (0.0, 0.01, 0.001), 0.01)


def test_far_field_distance():
    arr = ula(11, 0.01)
    assert far_field_distance(arr, 0.02) == pytest.approx(2 * 0.1**2 / 0.02)


def test_beam_squint_uses_per_subcarrier_wavelength():
    g = SpectralGrid(28e9, 400e6 / 8, 8)
    s = Scenario(single_antenna((0, 0, 0)), ula(8, g.wavelength / 2, center=(3, 3, 0)), (PathGeometry.los(),), g)
    h = synthesize(s.replace(flags=ModelFlags(beam_squint=True))).entries[:, 0, :, 0]
    pp = geometric_path_params(s, 0)
    for i, lam in enumerate(g.wavelengths):
        a = steering_vector(s.rx, pp.aoa, lam)
        tone = pp.alpha * np.exp(-2j * np.pi * g.subcarrier_indices[i] * g.delta_f * pp.tau)
        np.testing.assert_allclose(h[i], tone * a, rtol=1e-10)


def test_non_stationary_gains_vary_across_elements():
    g = SpectralGrid(28e9, 1e6, 4)
    s = Scenario(single_antenna((0, 0, 0)), ula(64, 0.05, center=(1.0, 0, 0)), (PathGeometry.los(),), g,
                 flags=ModelFlags(non_stationary=True, near_field=True))
    mag = np.abs(synthesize(s).entries[0, 0, :, 0])
    d = np.linalg.norm(s.rx.element_positions(), axis=1)
    np.testing.assert_allclose(mag, g.wavelength / (4 * math.pi * d), rtol=1e-10)


def test_observe_noiseless_and_noise_statistics(mimo_scenario):
    h = synthesize(mimo_scenario)
    rng = np.random.default_rng(0)
    f = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    w = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    y = observe(h, f, 0.25, w)
    np.testing.assert_allclose(y, 0.5 * np.einsum("p,nkpq,q->nk", w.conj(), h.entries, f), rtol=1e-12)
    z = observe(h, f, 0.0, None, noise_psd=2e-12, seed=4)
    assert np.var(z) == pytest.approx(2e-12 * h.grid.delta_f, rel=0.1)
    np.testing.assert_array_equal(z, observe(h, f, 0.0, None, noise_psd=2e-12, seed=4))
    with pytest.raises(ValueError):
        observe(h, f, -1.0)
    with pytest.raises(ValueError):
        observe(h, f, np.ones(16), power_budget=1.0)


def _ris_scenario(grid, profiles):
    lam = grid.wavelength
    panel = RisPanel(upa(4, 4, lam / 2, center=(5.0, 6.0, 1.0)), profiles)
    return Scenario(single_antenna((0, 0, 0)), single_antenna((10, 0, 0)), (PathGeometry.los(),), grid, ris=panel)


def test_ris_term_is_linear_in_profiles(grid):
    rng = np.random.default_rng(1)
    w1 = np.exp(2j * np.pi * rng.random((grid.n_symbols, 16)))
    w2 = np.exp(2j * np.pi * rng.random((grid.n_symbols, 16)))
    s = _ris_scenario(grid, w1)
    t1, t2 = ris_term(s).entries, ris_term(s, w2).entries
    t12 = ris_term(s, 0.5 * (w1 + w2)).entries
    np.testing.assert_allclose(t12, 0.5 * (t1 + t2), rtol=1e-10, atol=1e-22)
    assert np.all(ris_gains(s, np.zeros_like(w1)) == 0)
    full = synthesize(s).entries
    np.testing.assert_allclose(full - synthesize(s, include_ris=False).entries, t1, atol=1e-22)


def test_timing_offset_matches_clock_bias(siso_scenario):
    s = siso_scenario
    shifted = apply_impairments(synthesize(s), ImpairmentSpec(timing_offset=4e-9)).entries
    biased = synthesize(s.replace(clock=ClockModel(bias=4e-9))).entries
    np.testing.assert_allclose(shifted, biased, rtol=1e-10)


def test_cfo_rotates_symbols(siso_scenario):
    s = siso_scenario
    h = synthesize(s).entries
    g = apply_impairments(synthesize(s), ImpairmentSpec(cfo=1e3)).entries
    k = s.grid.symbol_indices
    np.testing.assert_allclose(g, h * np.exp(2j * np.pi * k * s.grid.T_s * 1e3)[None, :, None, None])


def test_displacement_is_frozen_by_seed(mimo_scenario):
    spec = ImpairmentSpec(element_displacement_sigma=mimo_scenario.grid.wavelength / 20, seed=7)
    a = synthesize_impaired(mimo_scenario, spec).entries
    b = synthesize_impaired(mimo_scenario, spec).entries
    c = synthesize_impaired(mimo_scenario, ImpairmentSpec(element_displacement_sigma=spec.element_displacement_sigma,
                                                         seed=8)).entries
    np.testing.assert_array_equal(a, b)
    assert rel_err(a, c) > 1e-3
    with pytest.raises(ValidationError):
        ImpairmentSpec(phase_noise=-1)
