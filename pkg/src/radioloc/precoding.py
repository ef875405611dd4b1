"""Phase, true-time-delay and near-field focusing beamformers and their
array-response maps."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .channel import near_field_response, steering_vector
from .scenario import SPEED_OF_LIGHT, ArrayGeometry, ModelFlags, SpectralGrid, direction

KINDS = ("phase", "time_delay", "near_field_focus")


@dataclass(frozen=True)
class Precoder:
    """Beamforming weights, one unit-norm vector per subcarrier.

    The array gain toward a response ``a`` on subcarrier row ``i`` is
    ``|coefficients[i].conj() @ a|**2``.
    """

    kind: str
    target: tuple[float, float]
    coefficients: np.ndarray
    subcarrier_indices: np.ndarray
    focus_distance: float | None = None
    delays: np.ndarray | None = None

    def row(self, n: int) -> np.ndarray:
        i = np.flatnonzero(self.subcarrier_indices == n)
        if i.size == 0:
            raise KeyError(f"subcarrier {n} not in precoder")
        return self.coefficients[i[0]]


def make_precoder(arr: ArrayGeometry, kind: str, target, grid: SpectralGrid,
                  focus_distance: float | None = None) -> Precoder:
    """Matched beamformer toward ``target`` = (az, el) in the array frame."""
    if kind not in KINDS:
        raise ValueError(f"unknown precoder kind {kind!r}")
    target = (float(target[0]), float(target[1]))
    n_idx = grid.subcarrier_indices
    norm = np.sqrt(arr.n_elements)
    delays = None
    if kind == "phase":
        w = steering_vector(arr, target, grid.wavelength) / norm
        coef = np.tile(w, (len(n_idx), 1))
    elif kind == "time_delay":
        # exp(-j 2pi f_n tau_p) with tau_p = -offset_p . u / c
        delays = -(arr.element_offsets @ direction(*target)) / SPEED_OF_LIGHT
        freqs = grid.f_c + n_idx * grid.delta_f
        coef = np.exp(-2j * np.pi * np.outer(freqs, delays)) / norm
    else:
        if focus_distance is None or focus_distance <= 0:
            raise ValueError("near_field_focus precoder needs a positive focus distance")
        point = arr.center + arr.orientation @ direction(*target) * focus_distance
        w = near_field_response(arr, point, grid.wavelength) / norm
        coef = np.tile(w, (len(n_idx), 1))
    coef.setflags(write=False)
    return Precoder(kind, target, coef, n_idx.copy(), focus_distance, delays)


def array_response(arr: ArrayGeometry, angle: tuple[float, float], wavelength: float,
                   distance: float | None = None) -> np.ndarray:
    """Far-field steering vector, or the near-field response when a distance is given."""
    if distance is None:
        return steering_vector(arr, angle, wavelength)
    point = arr.center + arr.orientation @ direction(*angle) * distance
    return near_field_response(arr, point, wavelength)


def response_map(arr: ArrayGeometry, p: Precoder, grid: SpectralGrid, angles: Sequence[float],
                 distances: Sequence[float] | None = None, subcarriers: Sequence[int] | None = None,
                 flags: ModelFlags = ModelFlags(), elevation: float = 0.0,
                 normalize: bool = True) -> np.ndarray:
    """Beamformer gain |w_n^H a(angle, distance, lambda_n)|^2 in dB.

    Returns shape (len(angles), len(distances), len(subcarriers)). Path loss
    is ignored, so under the far-field model every distance column is
    identical. With ``normalize`` the global peak is 0 dB.
    """
    angles = np.asarray(angles, dtype=float)
    if angles.size == 0:
        raise ValueError("empty angle grid")
    dists = [None] if distances is None else [float(d) for d in distances]
    subs = [0] if subcarriers is None else [int(n) for n in subcarriers]
    u = direction(angles, np.full_like(angles, elevation))        # (A, 3)
    out = np.empty((angles.size, len(dists), len(subs)))
    for j, n in enumerate(subs):
        lam = SPEED_OF_LIGHT / (grid.f_c + n * grid.delta_f) if flags.beam_squint else grid.wavelength
        w = p.row(n)
        for i, d in enumerate(dists):
            if d is None or not flags.near_field:
                resp = np.exp(2j * np.pi / lam * (u @ arr.element_offsets.T))
            else:
                pts = arr.center + (u @ arr.orientation.T) * d
                dp = np.linalg.norm(pts[:, None, :] - arr.element_positions()[None], axis=-1)
                resp = np.exp(-2j * np.pi / lam * (dp - d))
            out[:, i, j] = np.abs(resp @ w.conj()) ** 2
    with np.errstate(divide="ignore"):
        db = 10 * np.log10(out)
    if normalize:
        db -= db.max()
    return db


def beam_gain(arr: ArrayGeometry, p: Precoder, grid: SpectralGrid, angle: float, n: int = 0,
              distance: float | None = None, flags: ModelFlags = ModelFlags(beam_squint=True),
              elevation: float = 0.0) -> float:
    """Linear gain |w_n^H a|^2 at one point (no normalisation)."""
    lam = SPEED_OF_LIGHT / (grid.f_c + n * grid.delta_f) if flags.beam_squint else grid.wavelength
    a = array_response(arr, (angle, elevation), lam, distance if flags.near_field else None)
    return float(np.abs(p.row(n).conj() @ a) ** 2)


def beam_peak(arr: ArrayGeometry, p: Precoder, grid: SpectralGrid, n: int,
              search: tuple[float, float] = (-np.pi / 2, np.pi / 2), n_grid: int = 721) -> float:
    """Azimuth of the far-field response peak on subcarrier n, refined off-grid."""
    angles = np.linspace(search[0], search[1], n_grid)
    g = response_map(arr, p, grid, angles, subcarriers=[n], flags=ModelFlags(beam_squint=True),
                     normalize=False)[:, 0, 0]
    i = int(np.argmax(g))
    lo, hi = angles[max(i - 1, 0)], angles[min(i + 1, n_grid - 1)]
    res = minimize_scalar(lambda a: -beam_gain(arr, p, grid, a, n), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-12})
    return float(res.x)


def squint_angle(target: float, f_c: float, f: float) -> float:
    """Peak azimuth of a carrier-matched phase beam (ULA) evaluated at frequency f."""
    return float(np.arcsin(np.sin(target) * f_c / f))


def write_map_csv(fh: IO[str], angles, columns, values: np.ndarray, column_label: str) -> None:
    """One row per angle, one column per distance or subcarrier, values in dB."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["angle_rad"] + [f"{column_label}={c:g}" for c in columns])
    for a, row in zip(angles, values):
        w.writerow([f"{a:.9g}"] + [f"{v:.6f}" for v in row])
