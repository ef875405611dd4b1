"""Channel synthesis: multipath sum, near-field, non-stationary, wideband,
RIS term and hardware impairments."""
from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass
from typing import IO

import numpy as np

from .scenario import (
    ArrayGeometry,
    Scenario,
    SpectralGrid,
    direction,
    direction_jacobian,
    geometric_path_params,
    ris_path_params,
)
from .errors import ValidationError


class NearFieldValidityWarning(UserWarning):
    """Source lies inside the array's bounding sphere."""


@dataclass(frozen=True)
class ChannelTensor:
    """Channel matrices H[n, k] stacked as entries[n, k, p, q].

    ``n`` runs over ``grid.subcarrier_indices`` in order, ``k`` over symbols,
    ``p`` over Rx elements and ``q`` over Tx elements.
    """

    entries: np.ndarray
    grid: SpectralGrid

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=complex)
        if e.ndim != 4:
            raise ValidationError("channel tensor has dims (N, K, P, Q)")
        if e.shape[:2] != (self.grid.n_subcarriers, self.grid.n_symbols):
            raise ValidationError("tensor dims consistent with grid")
        if not np.all(np.isfinite(e)):
            raise ValidationError("finite channel entries")
        e = e.copy()
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.entries.shape

    def __add__(self, other: "ChannelTensor") -> "ChannelTensor":
        return ChannelTensor(self.entries + other.entries, self.grid)

    # -- export ------------------------------------------------------------

    MAGIC = b"RLCT"
    VERSION = 1

    def to_bytes(self) -> bytes:
        """Binary layout: magic, u32 version, u32 ndim, u64 dims[4], f64 f_c,
        delta_f, T_s, then interleaved (re, im) float64 pairs in row-major
        (n, k, p, q) order. Little endian throughout."""
        head = struct.pack("<4sII4Q3d", self.MAGIC, self.VERSION, 4, *self.shape,
                           self.grid.f_c, self.grid.delta_f, self.grid.T_s)
        body = np.ascontiguousarray(self.entries).astype("<c16").view("<f8").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ChannelTensor":
        fmt = "<4sII4Q3d"
        size = struct.calcsize(fmt)
        magic, version, ndim, n, k, p, q, f_c, delta_f, t_s = struct.unpack(fmt, data[:size])
        if magic != cls.MAGIC or version != cls.VERSION or ndim != 4:
            raise ValueError("not a channel tensor file")
        flat = np.frombuffer(data[size:], dtype="<f8")
        if flat.size != 2 * n * k * p * q:
            raise ValueError("truncated channel tensor body")
        entries = flat.view("<c16").reshape(n, k, p, q)
        return cls(entries, SpectralGrid(f_c, delta_f, n, t_s, k))

    def write_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "k", "p", "q", "re", "im"])
        idx = self.grid.subcarrier_indices
        for (i, k, p, q), v in np.ndenumerate(self.entries):
            w.writerow([int(idx[i]), k, p, q, repr(float(v.real)), repr(float(v.imag))])


@dataclass(frozen=True)
class ImpairmentSpec:
    element_displacement_sigma: float = 0.0
    phase_noise: float = 0.0
    cfo: float = 0.0
    timing_offset: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.element_displacement_sigma < 0 or self.phase_noise < 0:
            raise ValidationError("impairment variances >= 0")


# ---------------------------------------------------------------------------
# array responses


def steering_vector(arr: ArrayGeometry, direction_angles, wavelength) -> np.ndarray:
    """Far-field response exp(j 2pi/lambda offset_p . u).

    ``wavelength`` may be an array, in which case the result has one row per
    wavelength.
    """
    lam = np.asarray(wavelength, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("wavelength must be positive")
    u = direction(*direction_angles)
    proj = arr.element_offsets @ u
    return np.exp(2j * np.pi * np.multiply.outer(1.0 / lam, proj))


def steering_derivatives(arr: ArrayGeometry, direction_angles, wavelength) -> tuple[np.ndarray, np.ndarray]:
    """(da/daz, da/del) of :func:`steering_vector`."""
    a = steering_vector(arr, direction_angles, wavelength)
    du = direction_jacobian(*direction_angles)
    lam = np.asarray(wavelength, dtype=float)
    k = 2j * np.pi / lam
    d_az = np.multiply.outer(k, arr.element_offsets @ du[:, 0]) * a
    d_el = np.multiply.outer(k, arr.element_offsets @ du[:, 1]) * a
    return d_az, d_el


def near_field_response(arr: ArrayGeometry, source, wavelength) -> np.ndarray:
    """Spherical-wavefront response exp(-j 2pi (d_p - d_ref)/lambda)."""
    source = np.asarray(source, dtype=float)
    lam = np.asarray(wavelength, dtype=float)
    pos = arr.element_positions()
    d_p = np.linalg.norm(source - pos, axis=1)
    if np.any(d_p == 0):
        raise ValueError("source coincides with an array element")
    d_ref = np.linalg.norm(source - arr.center)
    if arr.n_elements > 1 and d_ref <= np.max(np.linalg.norm(arr.element_offsets, axis=1)):
        warnings.warn("source inside the array bounding sphere; near-field model validity is "
                      "questionable", NearFieldValidityWarning, stacklevel=2)
    return np.exp(-2j * np.pi * np.multiply.outer(1.0 / lam, d_p - d_ref))


# ---------------------------------------------------------------------------
# synthesis


def _steering_wavelengths(s: Scenario) -> np.ndarray:
    if s.flags.beam_squint:
        return s.grid.wavelengths
    return np.array([s.grid.wavelength])


def _pair_geometry(s: Scenario, l: int):
    """Per (p, q) path lengths and local unit directions at each end."""
    path = s.paths[l]
    xr = s.rx.element_positions()[:, None, :]
    xt = s.tx.element_positions()[None, :, :]
    if path.kind == "los":
        v_rx = xt - xr                         # Rx element -> Tx element
        d = np.linalg.norm(v_rx, axis=-1)
        v_tx = -v_rx
        ref = float(np.linalg.norm(s.tx.center - s.rx.center))
    else:
        ip = path.incidence_point
        v_rx = np.broadcast_to(ip - xr, (xr.shape[0], xt.shape[1], 3))
        v_tx = np.broadcast_to(ip - xt, (xr.shape[0], xt.shape[1], 3))
        d = np.linalg.norm(v_rx, axis=-1) + np.linalg.norm(v_tx, axis=-1)
        ref = float(np.linalg.norm(ip - s.rx.center) + np.linalg.norm(ip - s.tx.center))
    u_rx = s.rx.to_local(v_rx / np.linalg.norm(v_rx, axis=-1, keepdims=True))
    u_tx = s.tx.to_local(v_tx / np.linalg.norm(v_tx, axis=-1, keepdims=True))
    return d, ref, u_rx, u_tx


def _path_spatial(s: Scenario, l: int, pp) -> np.ndarray:
    """Spatial part of path l, shape (S, P, Q), relative to alpha_l.

    S is 1 without beam squint, else one slice per subcarrier.
    """
    lams = _steering_wavelengths(s)
    need_pairs = s.flags.near_field or s.flags.non_stationary
    if need_pairs:
        d, ref, u_rx, u_tx = _pair_geometry(s, l)
    if s.flags.near_field:
        spatial = np.exp(-2j * np.pi * np.multiply.outer(1.0 / lams, d - ref))
    else:
        a_rx = steering_vector(s.rx, pp.aoa, lams)
        a_tx = steering_vector(s.tx, pp.aod, lams)
        spatial = a_rx[:, :, None] * a_tx[:, None, :]
    if s.flags.non_stationary:
        lam = s.grid.wavelength
        loss = s.paths[l].reflection_loss
        mag = lam / (4 * np.pi * d) * np.sqrt(s.rx.gain_pattern(u_rx) * s.tx.gain_pattern(u_tx)) * loss
        spatial = spatial * (mag / abs(pp.alpha))[None]
    return spatial


def _tones(grid: SpectralGrid, tau: float, nu: float) -> np.ndarray:
    """e^{-j2pi n df tau} e^{j2pi k Ts nu}, shape (N, K)."""
    n = grid.subcarrier_indices
    k = grid.symbol_indices
    return np.exp(-2j * np.pi * n * grid.delta_f * tau)[:, None] * np.exp(2j * np.pi * k * grid.T_s * nu)[None, :]


def _assemble(grid: SpectralGrid, coef, spatial: np.ndarray) -> np.ndarray:
    """coef has shape (N, K); spatial (S, P, Q) with S in {1, N}."""
    if spatial.shape[0] == 1:
        return coef[:, :, None, None] * spatial[0][None, None]
    return coef[:, :, None, None] * spatial[:, None]


def synthesize(s: Scenario, include_ris: bool = True) -> ChannelTensor:
    """Channel tensor of the scenario's paths (plus the RIS term when present)."""
    grid = s.grid
    h = np.zeros((grid.n_subcarriers, grid.n_symbols, s.rx.n_elements, s.tx.n_elements), complex)
    for l in range(s.n_paths):
        pp = geometric_path_params(s, l)
        h += _assemble(grid, pp.alpha * _tones(grid, pp.tau, pp.nu), _path_spatial(s, l, pp))
    out = ChannelTensor(h, grid)
    if include_ris and s.ris is not None:
        out = out + ris_term(s)
    return out


def ris_gains(s: Scenario, profiles: np.ndarray | None = None) -> np.ndarray:
    """alpha_k^ris for every symbol, shape (K,)."""
    if s.ris is None:
        raise ValidationError("scenario has a RIS", "ris_term needs a RIS panel")
    rp = ris_path_params(s)
    lam = s.grid.wavelength
    a_in = steering_vector(s.ris.geometry, rp.ris_incidence, lam)
    a_out = steering_vector(s.ris.geometry, rp.ris_departure, lam)
    omega = s.ris.profiles if profiles is None else np.asarray(profiles, complex)
    return rp.alpha_tx_ris * rp.alpha_ris_rx * (omega @ (a_out * a_in))


def ris_term(s: Scenario, profiles: np.ndarray | None = None) -> ChannelTensor:
    """Extra RIS-reflected channel term (far-field RIS response)."""
    gains = ris_gains(s, profiles)
    rp = ris_path_params(s)
    lams = _steering_wavelengths(s)
    a_rx = steering_vector(s.rx, rp.aoa, lams)
    a_tx = steering_vector(s.tx, rp.aod, lams)
    coef = gains[None, :] * _tones(s.grid, rp.tau, rp.nu)
    return ChannelTensor(_assemble(s.grid, coef, a_rx[:, :, None] * a_tx[:, None, :]), s.grid)


# ---------------------------------------------------------------------------
# impairments


def apply_impairments(h: ChannelTensor, spec: ImpairmentSpec) -> ChannelTensor:
    """Synchronisation errors: CFO ramp, Wiener phase noise and a timing offset.

    Element displacements need the geometry; use :func:`synthesize_impaired`.
    """
    if spec.cfo == 0 and spec.phase_noise == 0 and spec.timing_offset == 0:
        return h
    grid = h.grid
    k = grid.symbol_indices
    rng = np.random.default_rng(spec.seed)
    walk = np.zeros(grid.n_symbols)
    if spec.phase_noise > 0 and grid.n_symbols > 1:
        walk[1:] = np.cumsum(rng.normal(0.0, np.sqrt(spec.phase_noise), grid.n_symbols - 1))
    sym = np.exp(1j * (2 * np.pi * k * grid.T_s * spec.cfo + walk))
    sub = np.exp(-2j * np.pi * grid.subcarrier_indices * grid.delta_f * spec.timing_offset)
    return ChannelTensor(h.entries * sub[:, None, None, None] * sym[None, :, None, None], grid)


def displace_elements(arr: ArrayGeometry, sigma: float, rng: np.random.Generator) -> ArrayGeometry:
    if sigma == 0:
        return arr
    return arr.moved(element_offsets=arr.element_offsets + rng.normal(0.0, sigma, arr.element_offsets.shape))


def synthesize_impaired(s: Scenario, spec: ImpairmentSpec, include_ris: bool = True) -> ChannelTensor:
    """Re-synthesize with displaced elements, then apply synchronisation errors.

    Displacements are frozen by ``spec.seed``: the same seed always yields the
    same (static) array errors.
    """
    rng = np.random.default_rng([spec.seed, 1])
    tx = displace_elements(s.tx, spec.element_displacement_sigma, rng)
    rx = displace_elements(s.rx, spec.element_displacement_sigma, rng)
    h = synthesize(s.replace(tx=tx, rx=rx), include_ris=include_ris)
    return apply_impairments(h, spec)


# ---------------------------------------------------------------------------
# receive model


def observe(h: ChannelTensor, precoders, powers, combiner=None, noise_psd: float = 0.0,
            seed: int | None = None, power_budget: float | None = None) -> np.ndarray:
    """Noisy pilot observations sqrt(p_n) w^H H[n,k] f[n,k] + noise.

    precoders: shape (Q,), (N, Q) or (N, K, Q).
    combiner: None (keep every Rx element), (P,) or (N, P).
    Returns (N, K) with a combiner, else (N, K, P). Noise is circular
    Gaussian with variance ``noise_psd * delta_f`` per sample.
    """
    n_sub, n_sym, n_rx, n_tx = h.shape
    f = np.asarray(precoders, dtype=complex)
    if f.shape[-1] != n_tx:
        raise ValueError(f"precoder length {f.shape[-1]} != {n_tx} Tx elements")
    if f.ndim == 1:
        f = np.broadcast_to(f, (n_sub, n_sym, n_tx))
    elif f.ndim == 2:
        if f.shape[0] != n_sub:
            raise ValueError("per-subcarrier precoders need N rows")
        f = np.broadcast_to(f[:, None, :], (n_sub, n_sym, n_tx))
    elif f.shape != (n_sub, n_sym, n_tx):
        raise ValueError("precoder array shape mismatch")
    p = np.broadcast_to(np.asarray(powers, dtype=float), (n_sub,))
    if np.any(p < 0):
        raise ValueError("powers must be nonnegative")
    if power_budget is not None and p.sum() > power_budget * (1 + 1e-12):
        raise ValueError("total power exceeds the budget")
    hf = np.einsum("nkpq,nkq->nkp", h.entries, f)
    if combiner is not None:
        w = np.asarray(combiner, dtype=complex)
        if w.shape[-1] != n_rx:
            raise ValueError(f"combiner length {w.shape[-1]} != {n_rx} Rx elements")
        if w.ndim == 1:
            y = hf @ w.conj()
        elif w.shape == (n_sub, n_rx):
            y = np.einsum("nkp,np->nk", hf, w.conj())
        else:
            raise ValueError("combiner shape mismatch")
        y = np.sqrt(p)[:, None] * y
    else:
        y = np.sqrt(p)[:, None, None] * hf
    sigma2 = noise_psd * h.grid.delta_f
    if sigma2 > 0:
        rng = np.random.default_rng(seed)
        y = y + np.sqrt(sigma2 / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return y


def far_field_distance(arr: ArrayGeometry, wavelength: float) -> float:
    """Fraunhofer distance 2 D^2 / lambda."""
    return 2 * arr.aperture ** 2 / wavelength
