"""Pinned configurations for the three reproduction jobs and the beamforming
case study (squint and near-field focusing)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .precoding import beam_gain, beam_peak, make_precoder, response_map, squint_angle
from .channel import displace_elements
from .scenario import ModelFlags, Scenario, scenario_from_dict

FIG3 = {
    "schema_version": 1,
    "grid": {"carrier_frequency": 28e9, "bandwidth": 400e6, "n_subcarriers": 64},
    "tx": {"position": [2.8 * np.cos(np.pi / 4), 2.8 * np.sin(np.pi / 4), 0.0]},
    "rx": {"position": [0.0, 0.0, 0.0],
           "array": {"type": "ula", "n": 64, "spacing_wavelengths": 0.5, "axis": "y"}},
    "paths": [{"kind": "los"}],
    "flags": {"near_field": True, "beam_squint": True},
    "figure": {"target_azimuth": np.pi / 4, "user_distance": 2.8,
               "n_angles": 721, "distance_min": 0.5, "distance_max": 100.0, "n_distances": 400,
               "displacement_sigma_wavelengths": 0.05, "displacement_seed": 0},
}

FIG4 = {
    "schema_version": 1,
    "grid": {"carrier_frequency": 28e9, "bandwidth": 132e6, "n_subcarriers": 64},
    "tx": {"position": [10.0, 0.0, 0.0]},
    "rx": {"position": [0.0, 0.0, 0.0]},
    "paths": [{"kind": "los"}],
    "design": {"true_distance": 10.0, "prior": {"distance": 10.0, "half_width": 0.8},
               "sidelobe_margin_db": 3.0, "snr": 1.0},
}

TABLE1 = {"draws": 10}

PRESETS = {"fig3": FIG3, "fig4": FIG4, "table1": TABLE1}


def split_config(cfg: dict, extra: tuple[str, ...]) -> tuple[Scenario | None, dict]:
    """Separate job sections from the scenario sections and build the scenario."""
    cfg = dict(cfg)
    jobs = {k: cfg.pop(k) for k in extra if k in cfg}
    return (scenario_from_dict(cfg) if "grid" in cfg else None), jobs


@dataclass
class Fig3Result:
    angles: np.ndarray
    distances: np.ndarray
    subcarriers: np.ndarray
    phase_map: np.ndarray        # (angles, subcarriers) dB
    time_delay_map: np.ndarray   # (angles, subcarriers) dB
    far_field_map: np.ndarray    # (angles, distances) dB
    near_field_map: np.ndarray   # (angles, distances) dB
    impaired_map: np.ndarray     # (angles, 1) dB, displaced elements, carrier
    metrics: dict[str, float] = field(default_factory=dict)


def fig3_reproduction(cfg: dict = FIG3) -> Fig3Result:
    """Beam squint of phase versus true-time-delay beams, and far-field versus
    near-field focusing at short range.

    Every map is normalised to the array gain (0 dB = coherent sum over all
    elements). Squint error compares the phase beam's peak shift at the band
    edges with the analytic ULA squint. The focusing loss is the on-target
    gain of the focusing beam minus that of the far-field beam, both evaluated
    with the spherical-wave model. The impaired map keeps the nominal phase
    beam but evaluates it on an array with Gaussian element displacements.
    """
    s, jobs = split_config(cfg, ("figure",))
    fig = jobs["figure"]
    arr, grid = s.rx, s.grid
    target = float(fig["target_azimuth"])
    d_user = float(fig["user_distance"])
    angles = np.linspace(-np.pi / 2, np.pi / 2, int(fig["n_angles"]))
    dists = np.geomspace(float(fig["distance_min"]), float(fig["distance_max"]), int(fig["n_distances"]))
    subs = grid.subcarrier_indices
    full = 10 * np.log10(arr.n_elements)

    p_ph = make_precoder(arr, "phase", (target, 0.0), grid)
    p_td = make_precoder(arr, "time_delay", (target, 0.0), grid)
    p_nf = make_precoder(arr, "near_field_focus", (target, 0.0), grid, focus_distance=d_user)
    squint = ModelFlags(beam_squint=True)
    near = ModelFlags(near_field=True)
    ph_map = response_map(arr, p_ph, grid, angles, subcarriers=subs, flags=squint, normalize=False)[:, 0] - full
    td_map = response_map(arr, p_td, grid, angles, subcarriers=subs, flags=squint, normalize=False)[:, 0] - full
    ff_map = response_map(arr, p_ph, grid, angles, dists, flags=near, normalize=False)[:, :, 0] - full
    nf_map = response_map(arr, p_nf, grid, angles, dists, flags=near, normalize=False)[:, :, 0] - full

    sigma = float(fig.get("displacement_sigma_wavelengths", 0.05)) * grid.wavelength
    bent = displace_elements(arr, sigma, np.random.default_rng(int(fig.get("displacement_seed", 0))))
    nom_map = response_map(arr, p_ph, grid, angles, normalize=False)[:, 0, :] - full
    hwi_map = response_map(bent, p_ph, grid, angles, normalize=False)[:, 0, :] - full

    m: dict[str, float] = {}
    for tag, n in (("low", int(subs[0])), ("high", int(subs[-1]))):
        f = grid.f_c + n * grid.delta_f
        peak = beam_peak(arr, p_ph, grid, n)
        want = squint_angle(target, grid.f_c, f)
        m[f"phase_peak_{tag}_rad"] = peak
        m[f"analytic_squint_{tag}_rad"] = want
        shift, err = abs(want - target), abs(peak - want)
        # broadside has no squint; fall back to an exact-match test
        m[f"squint_relative_error_{tag}"] = err / shift if shift > 0 else (0.0 if err < 1e-9 else np.inf)
    td = np.array([beam_gain(arr, p_td, grid, target, int(n)) for n in subs])
    td_db = 10 * np.log10(td) - full
    m["time_delay_gain_min_db"] = float(td_db.min())
    m["time_delay_gain_spread_db"] = float(td_db.max() - td_db.min())
    g_ff = beam_gain(arr, p_ph, grid, target, 0, d_user, near)
    g_nf = beam_gain(arr, p_nf, grid, target, 0, d_user, near)
    m["far_field_loss_db"] = float(10 * np.log10(g_nf / g_ff))
    profile = np.array([beam_gain(arr, p_nf, grid, target, 0, d, near) for d in dists])
    i = int(np.argmax(profile))
    m["near_field_peak_distance_m"] = float(dists[i])
    # log-spaced grid: one cell is a constant ratio
    m["near_field_peak_cells_off"] = float(abs(np.log(dists[i] / d_user)) / np.log(dists[1] / dists[0]))
    m["user_distance_m"] = d_user
    m["displacement_sigma_m"] = sigma
    m["impaired_peak_loss_db"] = float(10 * np.log10(beam_gain(arr, p_ph, grid, target) /
                                                     beam_gain(bent, p_ph, grid, target)))
    # outside the null-to-null main lobe of the nominal beam
    side = np.abs(np.sin(angles) - np.sin(target)) > 2 / arr.n_elements

    def mean_db(x):
        return 10 * np.log10(np.mean(10 ** (x[side] / 10)))
    m["impaired_sidelobe_rise_db"] = float(mean_db(hwi_map) - mean_db(nom_map))
    return Fig3Result(angles, dists, subs, ph_map, td_map, ff_map, nf_map, hwi_map, m)
