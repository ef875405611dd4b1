"""Maximum-likelihood channel-parameter estimators and position solvers.

Channel level: correlation-peak delay estimation, beam-scan angle
estimation (far or near field) and a successive-cancellation path extractor.
Position level: a Levenberg-Marquardt weighted least-squares solver that
exploits single-bounce multipath, a RIS-aided fix that separates the RIS term
through its temporal code, and integer-ambiguity carrier-phase ranging.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .bounds import null_space_dim
from .channel import near_field_response, steering_derivatives, steering_vector
from .errors import (
    AmbiguityTooWideError,
    DegenerateGeometryError,
    NotIdentifiableError,
    SeparationError,
    ValidationError,
)
from .scenario import (
    SPEED_OF_LIGHT,
    ArrayGeometry,
    Scenario,
    SpectralGrid,
    angles_jacobian,
    angles_of,
    direction,
    rotvec_to_matrix,
    skew,
    wrap_angle,
)

LOW_CONFIDENCE = 0.2
DELAY_OVERSAMPLE = 32
COMPONENTS = ("tau", "aoa_az", "aoa_el", "aod_az", "aod_el")
MAX_ITER = 100
GRAD_TOL = 1e-10


@dataclass(frozen=True)
class PathEstimate:
    """One resolved path. Angles are None when the array cannot measure them."""

    tau_hat: float
    aoa_hat: tuple[float, float] | None
    aod_hat: tuple[float, float] | None
    alpha_hat: complex
    quality: float
    low_confidence: bool = False
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.quality <= 1.0 + 1e-12:
            raise ValidationError("quality in [0, 1]", f"{self.quality}")
        object.__setattr__(self, "quality", float(min(self.quality, 1.0)))


# ---------------------------------------------------------------------------
# delay


def _as_columns(y) -> np.ndarray:
    y = np.asarray(y, dtype=complex)
    if y.ndim == 1:
        return y[:, None]
    return y.reshape(y.shape[0], -1)


def _corr(x: np.ndarray, n: np.ndarray, df: float, tau: float, order: int = 0):
    """c(tau) = sum_n x_n e^{j2pi n df tau} per column, and its tau-derivatives."""
    e = np.exp(2j * np.pi * n * df * tau)
    w = (2j * np.pi * n * df)
    out = [e @ x]
    if order >= 1:
        out.append((w * e) @ x)
    if order >= 2:
        out.append((w * w * e) @ x)
    return out


def estimate_delay(y, powers, grid: SpectralGrid, oversample: int = DELAY_OVERSAMPLE,
                   window: tuple[float, float] | None = None) -> PathEstimate:
    """ML delay of the dominant path from pilots y_n = alpha sqrt(p_n) e^{-j2pi n df tau} + noise.

    ``y`` is (N,) or (N, M); extra columns (antennas, symbols) are combined
    non-coherently. The correlation peak is found by a zero-padded inverse
    FFT, then refined by quadratic interpolation and Newton steps on the
    continuous correlation. The result lies in [0, 1/df). ``window``
    restricts the peak search to a delay interval [s].
    """
    x = _as_columns(y)
    p = np.broadcast_to(np.asarray(powers, float), (grid.n_subcarriers,))
    if x.shape[0] != grid.n_subcarriers:
        raise ValueError(f"expected {grid.n_subcarriers} subcarriers, got {x.shape[0]}")
    if oversample < 1:
        raise ValidationError("oversample >= 1")
    if np.sum(p) <= 0:
        raise ValidationError("some pilot power")
    n = grid.subcarrier_indices
    df = grid.delta_f
    period = 1.0 / df
    xs = np.sqrt(p)[:, None] * x
    m = oversample * grid.n_subcarriers
    buf = np.zeros((m, x.shape[1]), complex)
    buf[np.mod(n, m)] = xs
    prof = np.sum(np.abs(np.fft.ifft(buf, axis=0) * m) ** 2, axis=1)
    taus = np.arange(m) / (m * df)
    if window is not None:
        lo, hi = window
        rel = np.mod(taus - lo, period)
        allowed = rel <= (hi - lo)
        if not np.any(allowed):
            allowed = np.abs(wrap_angle(2 * np.pi * (taus - lo) / period)) <= np.pi / m * 2
        prof_s = np.where(allowed, prof, -np.inf)
    else:
        prof_s = prof
    i = int(np.argmax(prof_s))
    f0, fm, fp = prof[i], prof[(i - 1) % m], prof[(i + 1) % m]
    den = fm - 2 * f0 + fp
    step = 1.0 / (m * df)
    frac = 0.5 * (fm - fp) / den if den < 0 else 0.0
    tau = taus[i] + float(np.clip(frac, -0.5, 0.5)) * step
    for _ in range(30):
        c0, c1, c2 = _corr(xs, n, df, tau, 2)
        g = 2 * np.sum(np.real(np.conj(c0) * c1))
        h = 2 * np.sum(np.abs(c1) ** 2 + np.real(np.conj(c0) * c2))
        if h >= 0:
            break
        d = float(np.clip(-g / h, -step, step))
        tau += d
        if abs(d) < 1e-12 * step:
            break
    tau = float(np.mod(tau, period))
    if tau >= period:          # mod of a tiny negative number rounds up to the period
        tau = 0.0
    c0 = _corr(xs, n, df, tau)[0]
    energy = float(np.sum(np.abs(x) ** 2))
    quality = float(np.sum(np.abs(c0) ** 2) / (p.sum() * energy)) if energy > 0 else 0.0
    alpha = complex(c0[0] / p.sum()) if x.shape[1] == 1 else complex(np.nan)
    return PathEstimate(tau, None, None, alpha, min(quality, 1.0), quality < LOW_CONFIDENCE)


# ---------------------------------------------------------------------------
# angles


@dataclass(frozen=True)
class AngleEstimate:
    az: float
    el: float
    distance: float | None
    alpha: complex
    quality: float
    ambiguous: bool
    candidates: tuple[tuple[float, float], ...] = ()

    @property
    def angles(self) -> tuple[float, float]:
        return (self.az, self.el)


def array_rank(arr: ArrayGeometry) -> int:
    """Dimension of the affine span of the element positions (0 to 3)."""
    off = arr.element_offsets - arr.element_offsets.mean(axis=0)
    if arr.n_elements == 1:
        return 0
    s = np.linalg.svd(off, compute_uv=False)
    return int(np.sum(s > 1e-9 * max(s[0], 1e-30)))


def _default_search(rank: int):
    if rank == 1:
        return (-np.pi / 2, np.pi / 2), None
    if rank == 2:
        return (-np.pi / 2, np.pi / 2), (-np.pi / 2, np.pi / 2)
    return (-np.pi, np.pi), (-np.pi / 2, np.pi / 2)


def _scan_cost(arr: ArrayGeometry, lam: float, y: np.ndarray, az, el, dist=None) -> np.ndarray:
    """sum_s |a(theta)^H y_s|^2 / P for a batch of directions (and distances)."""
    az = np.atleast_1d(az)
    el = np.broadcast_to(el, az.shape)
    u = direction(az, el)
    if dist is None:
        a = np.exp(2j * np.pi / lam * (u @ arr.element_offsets.T))
    else:
        dist = np.broadcast_to(dist, az.shape)
        pts = arr.center + (u @ arr.orientation.T) * dist[:, None]
        dp = np.linalg.norm(pts[:, None, :] - arr.element_positions()[None], axis=-1)
        a = np.exp(-2j * np.pi / lam * (dp - dist[:, None]))
    return np.sum(np.abs(a.conj() @ y.T) ** 2, axis=1) / arr.n_elements


def _local_maxima(c: np.ndarray) -> np.ndarray:
    """Indices of local maxima of a 1-D or 2-D grid (plateaus keep one point)."""
    if c.ndim == 1:
        pad = np.concatenate([[-np.inf], c, [-np.inf]])
        ok = (pad[1:-1] >= pad[:-2]) & (pad[1:-1] > pad[2:])
        return np.flatnonzero(ok)
    pad = np.pad(c, 1, constant_values=-np.inf)
    core = pad[1:-1, 1:-1]
    ok = np.ones_like(core, bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = pad[1 + di:pad.shape[0] - 1 + di, 1 + dj:pad.shape[1] - 1 + dj]
            ok &= core >= nb if (di, dj) < (0, 0) else core > nb
    return np.flatnonzero(ok.ravel())


def estimate_angles(y, arr: ArrayGeometry, wavelength: float, prior: tuple[float, float] | None = None,
                    search: tuple | None = None, elevation: float = 0.0, oversample: int = 4,
                    near_field: bool = False, distances: Sequence[float] | None = None,
                    tie_tol: float = 1e-6) -> AngleEstimate:
    """Beam-scan ML direction: argmax of sum_s |a(theta)^H y_s|^2, refined off-grid.

    ``y`` is (P,) or (S, P) snapshots. Linear arrays measure azimuth only
    (elevation is held at ``elevation``); planar and linear arrays search the
    front half-space of the local x axis. With ``near_field`` the grid is over
    (azimuth, distance) with spherical wavefronts at fixed elevation.
    Distinct peaks whose costs agree to ``tie_tol`` (grating lobes) set
    ``ambiguous``; the candidate nearest ``prior`` (else nearest boresight)
    is returned.
    """
    ys = np.atleast_2d(np.asarray(y, complex))
    if ys.shape[1] != arr.n_elements:
        raise ValueError(f"expected {arr.n_elements} array samples per snapshot")
    rank = array_rank(arr)
    if rank == 0:
        raise DegenerateGeometryError("a single antenna cannot measure direction")
    az_rng, el_rng = _default_search(rank) if search is None else search
    if near_field:
        el_rng = None
    lam = float(wavelength)
    beam = lam / max(arr.aperture, lam / 2)
    step = beam / oversample
    azg = np.linspace(az_rng[0], az_rng[1], max(int(np.ceil((az_rng[1] - az_rng[0]) / step)) + 1, 9))
    el0 = elevation

    # second grid axis: elevation, distance (log scale) or none
    if near_field:
        if distances is None:
            d_ff = 2 * arr.aperture ** 2 / lam
            distances = np.geomspace(max(arr.aperture, 2 * lam), max(4 * d_ff, 10 * arr.aperture), 200)
        second = np.log(np.asarray(distances, float))
        scale = np.array([step, (second[1] - second[0]) if second.size > 1 else 0.1])
    elif el_rng is not None:
        second = np.linspace(el_rng[0], el_rng[1], max(int(np.ceil((el_rng[1] - el_rng[0]) / step)) + 1, 9))
        scale = np.array([step, step])
    else:
        second = None
        scale = np.array([step])

    def evaluate(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if near_field:
            return _scan_cost(arr, lam, ys, x[:, 0], el0, np.exp(x[:, 1]))
        if second is not None:
            return _scan_cost(arr, lam, ys, x[:, 0], x[:, 1])
        return _scan_cost(arr, lam, ys, x[:, 0], el0)

    if second is None:
        pts = azg[:, None]
        cost = evaluate(pts)
        peaks = _local_maxima(cost)
    else:
        g1, g2 = np.meshgrid(azg, second, indexing="ij")
        pts = np.column_stack([g1.ravel(), g2.ravel()])
        cost = evaluate(pts)
        peaks = _local_maxima(cost.reshape(g1.shape))
    top = cost.max()
    if top <= 0:
        raise DegenerateGeometryError("no signal energy in the observation")
    peaks = peaks[np.argsort(-cost[peaks])][:8]
    refined = []
    for k in peaks:
        x0 = pts[k]
        res = minimize(lambda v: -evaluate(x0 + v * scale)[0] / top, np.zeros_like(x0), method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": 4000})
        x = x0 + res.x * scale
        refined.append((x, float(evaluate(x)[0])))
    refined.sort(key=lambda t: -t[1])
    best_val = refined[0][1]
    ties: list[np.ndarray] = []
    for x, val in refined:
        if val >= best_val * (1 - tie_tol) and all(_distinct(x, t, beam) for t in ties):
            ties.append(x)
    chosen = ties[0]
    if len(ties) > 1:
        if prior is not None:
            chosen = min(ties, key=lambda x: abs(wrap_angle(x[0] - prior[0])))
        else:
            chosen = min(ties, key=lambda x: abs(wrap_angle(x[0])))
    az = float(wrap_angle(chosen[0]))
    el, dist = el0, None
    if near_field:
        dist = float(np.exp(chosen[1]))
    elif second is not None:
        el = float(chosen[1])
    if dist is None:
        a = steering_vector(arr, (az, el), lam)
    else:
        a = near_field_response(arr, arr.center + arr.orientation @ direction(az, el) * dist, lam)
    energy = float(np.sum(np.abs(ys) ** 2))
    proj = ys @ a.conj()
    quality = float(np.sum(np.abs(proj) ** 2) / (arr.n_elements * energy))
    alpha = complex(proj[0] / arr.n_elements)
    cands = tuple((float(wrap_angle(x[0])), float(x[1]) if second is not None and not near_field else float(el0))
                  for x in ties)
    return AngleEstimate(az, float(el), dist, alpha, min(quality, 1.0), len(ties) > 1, cands)


def _distinct(a: np.ndarray, b: np.ndarray, beam: float) -> bool:
    """Peaks more than half a beamwidth apart in direction-cosine space."""
    ua = direction(a[0], a[1] if a.size > 1 else 0.0)
    ub = direction(b[0], b[1] if b.size > 1 else 0.0)
    return float(np.linalg.norm(ua - ub)) > 0.5 * beam


# ---------------------------------------------------------------------------
# multi-path extraction


def _path_atom(tau, aoa, aod, tx: ArrayGeometry, rx: ArrayGeometry, grid: SpectralGrid) -> np.ndarray:
    """Unit-gain narrowband path response, shape (N, P, Q)."""
    lam = grid.wavelength
    tone = np.exp(-2j * np.pi * grid.subcarrier_indices * grid.delta_f * tau)
    a_rx = steering_vector(rx, aoa, lam) if aoa is not None else np.ones(rx.n_elements)
    a_tx = steering_vector(tx, aod, lam) if aod is not None else np.ones(tx.n_elements)
    return tone[:, None, None] * a_rx[None, :, None] * a_tx[None, None, :]


def _single_path(h: np.ndarray, tx: ArrayGeometry, rx: ArrayGeometry, grid: SpectralGrid):
    """Delay, then angles from the dominant singular pair of the delay-matched slice."""
    n_sub, n_rx, n_tx = h.shape
    d = estimate_delay(h.reshape(n_sub, -1), 1.0, grid)
    tone = np.exp(2j * np.pi * grid.subcarrier_indices * grid.delta_f * d.tau_hat)
    m = np.tensordot(tone, h, axes=(0, 0)) / n_sub                # (P, Q)
    u, sv, vh = np.linalg.svd(m)
    flags = []
    aoa = aod = None
    lam = grid.wavelength
    if array_rank(rx) > 0:
        ea = estimate_angles(u[:, 0] * sv[0], rx, lam)
        aoa = ea.angles
        if ea.ambiguous:
            flags.append("aoa_ambiguous")
    if array_rank(tx) > 0:
        # m ~ alpha a_rx a_tx^T, so a_tx is the conjugate of the right singular vector
        ed = estimate_angles(vh[0] * sv[0], tx, lam)
        aod = ed.angles
        if ed.ambiguous:
            flags.append("aod_ambiguous")
    return d.tau_hat, aoa, aod, flags


def _refine_path(h, tau, aoa, aod, tx, rx, grid, rank_rx, rank_tx):
    """Joint Nelder-Mead refinement of one path's parameters (gain profiled)."""
    def unpack(v):
        i = 1
        a = d = None
        if aoa is not None:
            a = (v[i], v[i + 1] if rank_rx > 1 else aoa[1])
            i += 2 if rank_rx > 1 else 1
        if aod is not None:
            d = (v[i], v[i + 1] if rank_tx > 1 else aod[1])
        return v[0], a, d

    x0 = [tau]
    scale = [1.0 / grid.bandwidth]
    for ang, rk, arr in ((aoa, rank_rx, rx), (aod, rank_tx, tx)):
        if ang is not None:
            beam = grid.wavelength / max(arr.aperture, grid.wavelength / 2)
            x0 += [ang[0]] + ([ang[1]] if rk > 1 else [])
            scale += [beam] * (2 if rk > 1 else 1)
    x0 = np.array(x0)
    scale = np.array(scale)
    energy = float(np.vdot(h, h).real)

    def cost(v):
        t, a, d = unpack(x0 + v * scale)
        atom = _path_atom(t, a, d, tx, rx, grid)
        return -abs(np.vdot(atom, h)) ** 2 / (np.vdot(atom, atom).real * energy)

    res = minimize(cost, np.zeros_like(x0), method="Nelder-Mead",
                   options={"xatol": 1e-9, "fatol": 1e-15, "maxiter": 4000})
    t, a, d = unpack(x0 + res.x * scale)
    a = _canonical(a, rank_rx)
    d = _canonical(d, rank_tx)
    atom = _path_atom(t, a, d, tx, rx, grid)
    alpha = np.vdot(atom, h) / np.vdot(atom, atom).real
    return t, a, d, complex(alpha), atom


def _canonical(ang, rank):
    """Same direction with az in (-pi, pi] and el in [-pi/2, pi/2]."""
    if ang is None:
        return None
    if rank > 1:
        return angles_of(direction(*ang))
    return (wrap_angle(ang[0]), ang[1])


def estimate_paths(h, tx: ArrayGeometry, rx: ArrayGeometry, grid: SpectralGrid, max_paths: int = 3,
                   min_quality: float = 0.05, sweeps: int = 2) -> list[PathEstimate]:
    """Successive-cancellation extraction of up to ``max_paths`` paths.

    ``h`` is a noisy channel estimate of shape (N, K, P, Q) or (N, P, Q);
    symbols are averaged. Each path is gridded on the residual, refined
    jointly, and subtracted; ``sweeps`` extra passes re-estimate every path
    with the others removed. Paths are returned in order of increasing delay.
    Extraction stops when a new path explains less than ``min_quality`` of
    the remaining energy.
    """
    h = np.asarray(h, complex)
    if h.ndim == 4:
        h = h.mean(axis=1)
    if h.shape != (grid.n_subcarriers, rx.n_elements, tx.n_elements):
        raise ValueError("channel estimate shape does not match grid and arrays")
    if max_paths < 1 or max_paths > 3:
        raise ValidationError("1 <= max_paths <= 3")
    rr, rt = array_rank(rx), array_rank(tx)
    paths: list[list] = []
    resid = h.copy()
    total = float(np.vdot(h, h).real)
    for _ in range(max_paths):
        e_res = float(np.vdot(resid, resid).real)
        if e_res <= 1e-20 * total:
            break
        tau, aoa, aod, flags = _single_path(resid, tx, rx, grid)
        tau, aoa, aod, alpha, atom = _refine_path(resid, tau, aoa, aod, tx, rx, grid, rr, rt)
        explained = abs(alpha) ** 2 * np.vdot(atom, atom).real / e_res
        if paths and explained < min_quality:
            break
        paths.append([tau, aoa, aod, alpha, atom, flags, explained])
        resid = resid - alpha * atom
    for _ in range(sweeps):
        for i, pth in enumerate(paths):
            others = sum((q[3] * q[4] for j, q in enumerate(paths) if j != i), np.zeros_like(h))
            tau, aoa, aod, alpha, atom = _refine_path(h - others, *pth[:3], tx, rx, grid, rr, rt)
            pth[:5] = [tau, aoa, aod, alpha, atom]
    out = []
    for tau, aoa, aod, alpha, atom, flags, explained in sorted(paths, key=lambda p: p[0]):
        q = float(np.clip(explained, 0.0, 1.0))
        out.append(PathEstimate(float(tau), aoa, aod, alpha, q, q < LOW_CONFIDENCE, tuple(flags)))
    return out


def path_covariance(est: PathEstimate, tx: ArrayGeometry, rx: ArrayGeometry, grid: SpectralGrid,
                    noise_var: float) -> tuple[np.ndarray, list[str]]:
    """CRB-based covariance of the measured components of one path (gain profiled).

    Uses the narrowband single-path model with unit pilots and ``noise_var``
    per channel entry. Returns (covariance, component names).
    """
    lam = grid.wavelength
    n = grid.subcarrier_indices
    tone = np.exp(-2j * np.pi * n * grid.delta_f * est.tau_hat)
    a_rx = steering_vector(rx, est.aoa_hat, lam) if est.aoa_hat is not None else np.ones(rx.n_elements)
    a_tx = steering_vector(tx, est.aod_hat, lam) if est.aod_hat is not None else np.ones(tx.n_elements)
    base = tone[:, None, None] * a_rx[None, :, None] * a_tx[None, None, :]
    cols, names = [], []
    cols.append(est.alpha_hat * (-2j * np.pi * n * grid.delta_f)[:, None, None] * base)
    names.append("tau")
    if est.aoa_hat is not None:
        d_az, d_el = steering_derivatives(rx, est.aoa_hat, lam)
        cols.append(est.alpha_hat * tone[:, None, None] * d_az[None, :, None] * a_tx[None, None, :])
        names.append("aoa_az")
        if array_rank(rx) > 1:
            cols.append(est.alpha_hat * tone[:, None, None] * d_el[None, :, None] * a_tx[None, None, :])
            names.append("aoa_el")
    if est.aod_hat is not None:
        d_az, d_el = steering_derivatives(tx, est.aod_hat, lam)
        cols.append(est.alpha_hat * tone[:, None, None] * a_rx[None, :, None] * d_az[None, None, :])
        names.append("aod_az")
        if array_rank(tx) > 1:
            cols.append(est.alpha_hat * tone[:, None, None] * a_rx[None, :, None] * d_el[None, None, :])
            names.append("aod_el")
    cols += [base, 1j * base]
    d = np.column_stack([c.ravel() for c in cols])
    fim = 2.0 / noise_var * np.real(d.conj().T @ d)
    k = len(names)
    eff = fim[:k, :k] - fim[:k, k:] @ np.linalg.solve(fim[k:, k:], fim[k:, :k])
    return np.linalg.inv(0.5 * (eff + eff.T)), names


# ---------------------------------------------------------------------------
# measurements


@dataclass(frozen=True)
class PathMeasurement:
    """Measured (tau, aoa az/el, aod az/el) of one path; missing components are NaN.

    ``covariance`` covers the present components in the order of
    :data:`COMPONENTS`.
    """

    kind: str
    values: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        if self.kind not in ("los", "nlos"):
            raise ValidationError("measurement kind in {los, nlos}", self.kind)
        v = np.array(self.values, float)
        if v.shape != (5,):
            raise ValidationError("five measurement components")
        k = int(np.sum(~np.isnan(v)))
        if k == 0:
            raise ValidationError("at least one measured component")
        c = np.atleast_2d(np.array(self.covariance, float))
        if c.shape != (k, k) or not np.allclose(c, c.T, rtol=1e-9, atol=0):
            raise ValidationError("covariance is symmetric over the present components")
        try:
            np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            raise ValidationError("covariance is positive definite") from None
        v.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "covariance", c)

    @classmethod
    def build(cls, kind: str, tau=None, aoa=None, aod=None, variances=None, covariance=None):
        vals = np.full(5, np.nan)
        if tau is not None:
            vals[0] = tau
        for off, ang in ((1, aoa), (3, aod)):
            if ang is not None:
                vals[off] = ang[0]
                if len(ang) > 1 and ang[1] is not None and not np.isnan(ang[1]):
                    vals[off + 1] = ang[1]
        mask = ~np.isnan(vals)
        if covariance is None:
            var = np.asarray(variances, float)
            if var.size == 5:
                var = var[mask]
            covariance = np.diag(var)
        return cls(kind, vals, covariance)

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.values)


def write_measurements_csv(fh: IO[str], meas: Sequence[PathMeasurement]) -> None:
    """One row per path: type, five components, five variances (blank when absent)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["type", *COMPONENTS, *[f"var_{c}" for c in COMPONENTS]])
    for m in meas:
        var = np.full(5, np.nan)
        var[m.mask] = np.diag(m.covariance)
        fmt = lambda x: "" if np.isnan(x) else f"{x:.17g}"
        w.writerow([m.kind, *[fmt(x) for x in m.values], *[fmt(x) for x in var]])


def read_measurements_csv(fh: IO[str]) -> list[PathMeasurement]:
    rows = list(csv.DictReader(fh))
    out = []
    for i, r in enumerate(rows):
        try:
            vals = np.array([float(r[c]) if r.get(c, "") not in ("", None) else np.nan for c in COMPONENTS])
            var = np.array([float(r[f"var_{c}"]) if r.get(f"var_{c}", "") not in ("", None) else np.nan
                            for c in COMPONENTS])
        except (KeyError, ValueError) as exc:
            raise ValidationError("measurement CSV row", f"row {i + 1}: {exc}") from None
        mask = ~np.isnan(vals)
        if np.any(np.isnan(var[mask])):
            raise ValidationError("measurement CSV row", f"row {i + 1}: missing variance")
        out.append(PathMeasurement(r["type"].strip(), vals, np.diag(var[mask])))
    return out


def measurements_from_estimates(ests: Sequence[PathEstimate], tx: ArrayGeometry, rx: ArrayGeometry,
                                grid: SpectralGrid, noise_var: float, los_first: bool = True
                                ) -> list[PathMeasurement]:
    """Attach CRB covariances; the earliest path is labelled LoS when ``los_first``."""
    out = []
    for i, e in enumerate(sorted(ests, key=lambda e: e.tau_hat)):
        cov, names = path_covariance(e, tx, rx, grid, noise_var)
        vals = np.full(5, np.nan)
        src = {"tau": e.tau_hat}
        if e.aoa_hat is not None:
            src["aoa_az"], src["aoa_el"] = e.aoa_hat
        if e.aod_hat is not None:
            src["aod_az"], src["aod_el"] = e.aod_hat
        for nm in names:
            vals[COMPONENTS.index(nm)] = src[nm]
        out.append(PathMeasurement("los" if (los_first and i == 0) else "nlos", vals, cov))
    return out


# ---------------------------------------------------------------------------
# multipath position fix


@dataclass
class FixResult:
    position_hat: np.ndarray
    orientation_hat: np.ndarray | None
    bias_hat: float
    ip_hats: list[np.ndarray]
    covariance_hat: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float = 0.0
    state_labels: list[str] = field(default_factory=list)
    message: str = ""
    details: dict = field(default_factory=dict)

    def position_covariance(self) -> np.ndarray:
        return self.covariance_hat[:3, :3]

    def to_dict(self) -> dict:
        return {
            "position_hat": [float(x) for x in self.position_hat],
            "orientation_hat": None if self.orientation_hat is None else np.asarray(self.orientation_hat).tolist(),
            "bias_hat_s": float(self.bias_hat),
            "ip_hats": [[float(x) for x in p] for p in self.ip_hats],
            "covariance_hat": np.asarray(self.covariance_hat).tolist(),
            "state_labels": list(self.state_labels),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "residual_norm": float(self.residual_norm),
            "message": self.message,
            "details": {k: float(v) for k, v in self.details.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class _State:
    pos: np.ndarray
    rot: np.ndarray
    bias_m: float
    ips: np.ndarray           # (n_nlos, 3)

    def copy(self) -> "_State":
        return _State(self.pos.copy(), self.rot.copy(), self.bias_m, self.ips.copy())


class _FixProblem:
    def __init__(self, meas: Sequence[PathMeasurement], bs: ArrayGeometry, ue_orientation):
        self.meas = list(meas)
        self.bs = bs
        self.est_rot = ue_orientation is None and any(m.mask[1:3].any() for m in self.meas)
        self.known_rot = None if ue_orientation is None else np.asarray(ue_orientation, float)
        self.est_bias = any(m.mask[0] for m in self.meas)
        self.nlos = [i for i, m in enumerate(self.meas) if m.kind == "nlos"]
        self.n_state = 3 + 3 * self.est_rot + self.est_bias + 3 * len(self.nlos)
        self.n_meas = int(sum(m.mask.sum() for m in self.meas))
        self.whiten = [np.linalg.inv(np.linalg.cholesky(m.covariance)) for m in self.meas]
        self.i_rot = 3 if self.est_rot else None
        self.i_bias = 3 + 3 * self.est_rot if self.est_bias else None
        self.i_ip0 = 3 + 3 * self.est_rot + self.est_bias

    def labels(self) -> list[str]:
        out = ["x", "y", "z"]
        if self.est_rot:
            out += ["rot_x", "rot_y", "rot_z"]
        if self.est_bias:
            out.append("clock_bias_m")
        for i in range(len(self.nlos)):
            out += [f"ip{i}_x", f"ip{i}_y", f"ip{i}_z"]
        return out

    def predict_only(self, st: _State, m: PathMeasurement, ip_index: int | None) -> np.ndarray:
        bs = self.bs.center
        far = bs if m.kind == "los" else st.ips[ip_index]
        d_ue = np.linalg.norm(far - st.pos)
        length = d_ue if m.kind == "los" else d_ue + np.linalg.norm(far - bs)
        end = st.pos if m.kind == "los" else far
        return np.array([(length + st.bias_m) / SPEED_OF_LIGHT, *angles_of(st.rot.T @ (far - st.pos)),
                         *angles_of(self.bs.orientation.T @ (end - bs))])

    def predict(self, st: _State, m: PathMeasurement, ip_index: int | None):
        """Full 5-component prediction and its (5, n_state) Jacobian."""
        jac = np.zeros((5, self.n_state))
        bs = self.bs.center
        rb = self.bs.orientation
        ru = st.rot
        ue = st.pos
        if m.kind == "los":
            d = ue - bs
            dist = np.linalg.norm(d)
            tau = (dist + st.bias_m) / SPEED_OF_LIGHT
            jac[0, :3] = d / (SPEED_OF_LIGHT * dist)
            v_a = ru.T @ (bs - ue)
            v_d = rb.T @ (ue - bs)
            ja = angles_jacobian(v_a)
            jd = angles_jacobian(v_d)
            jac[1:3, :3] = -ja @ ru.T
            jac[3:5, :3] = jd @ rb.T
        else:
            ip = st.ips[ip_index]
            sl = slice(self.i_ip0 + 3 * ip_index, self.i_ip0 + 3 * ip_index + 3)
            d1 = np.linalg.norm(ip - bs)
            d2 = np.linalg.norm(ip - ue)
            tau = (d1 + d2 + st.bias_m) / SPEED_OF_LIGHT
            jac[0, :3] = (ue - ip) / (SPEED_OF_LIGHT * d2)
            jac[0, sl] = ((ip - bs) / d1 + (ip - ue) / d2) / SPEED_OF_LIGHT
            v_a = ru.T @ (ip - ue)
            v_d = rb.T @ (ip - bs)
            ja = angles_jacobian(v_a)
            jd = angles_jacobian(v_d)
            jac[1:3, :3] = -ja @ ru.T
            jac[1:3, sl] = ja @ ru.T
            jac[3:5, sl] = jd @ rb.T
        if self.est_rot:
            jac[1:3, 3:6] = ja @ skew(v_a)
        if self.est_bias:
            jac[0, self.i_bias] = 1.0 / SPEED_OF_LIGHT
        pred = np.array([tau, *angles_of(v_a), *angles_of(v_d)])
        return pred, jac

    def residual(self, st: _State):
        rs, js = [], []
        for i, m in enumerate(self.meas):
            ip_index = self.nlos.index(i) if m.kind == "nlos" else None
            pred, jac = self.predict(st, m, ip_index)
            r = pred - m.values
            r[1] = wrap_angle(r[1])
            r[3] = wrap_angle(r[3])
            mk = m.mask
            rs.append(self.whiten[i] @ r[mk])
            js.append(self.whiten[i] @ jac[mk])
        return np.concatenate(rs), np.vstack(js)

    def cost(self, st: _State) -> float:
        total = 0.0
        try:
            for i, m in enumerate(self.meas):
                ip_index = self.nlos.index(i) if m.kind == "nlos" else None
                r = self.predict_only(st, m, ip_index) - m.values
                r[1] = wrap_angle(r[1])
                r[3] = wrap_angle(r[3])
                w = self.whiten[i] @ r[m.mask]
                total += float(w @ w)
        except DegenerateGeometryError:
            return np.inf
        return total

    def apply(self, st: _State, delta: np.ndarray) -> _State:
        out = st.copy()
        out.pos = st.pos + delta[:3]
        if self.est_rot:
            out.rot = st.rot @ rotvec_to_matrix(delta[3:6])
        if self.est_bias:
            out.bias_m = st.bias_m + delta[self.i_bias]
        if self.nlos:
            out.ips = st.ips + delta[self.i_ip0:].reshape(-1, 3)
        return out


def _levenberg_marquardt(prob: _FixProblem, st: _State, max_iter: int = MAX_ITER, gtol: float = GRAD_TOL):
    try:
        r, j = prob.residual(st)
    except DegenerateGeometryError:
        return st, np.inf, 0, False
    cost = float(r @ r)
    mu = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = j.T @ r
        if np.max(np.abs(g)) < gtol:
            converged = True
            break
        a = j.T @ j
        dg = np.maximum(np.diag(a), 1e-12 * max(np.max(np.diag(a)), 1e-300))
        accepted = False
        while mu < 1e16:
            try:
                delta = np.linalg.solve(a + mu * np.diag(dg), -g)
            except np.linalg.LinAlgError:
                mu *= 4
                continue
            new = prob.apply(st, delta)
            try:
                r2, j2 = prob.residual(new)
            except DegenerateGeometryError:
                mu *= 4
                continue
            c2 = float(r2 @ r2)
            if c2 <= cost:
                accepted = True
                small = cost - c2 <= 1e-15 * max(cost, 1e-300) or np.linalg.norm(delta) <= 1e-13 * (
                    1 + np.linalg.norm(st.pos))
                st, r, j, cost = new, r2, j2, c2
                mu = max(mu / 3, 1e-12)
                break
            mu *= 4
        if not accepted or small:
            # no further decrease is possible at machine precision
            g = j.T @ r
            scale = np.linalg.norm(j) * (1 + np.sqrt(cost))
            converged = bool(np.max(np.abs(g)) <= 1e-7 * scale)
            break
    return st, cost, it, converged


def _frame(u: np.ndarray) -> np.ndarray:
    """Orthonormal matrix whose first column is u."""
    u = u / np.linalg.norm(u)
    t = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    v = np.cross(u, t)
    v /= np.linalg.norm(v)
    return np.column_stack([u, v, np.cross(u, v)])


def _align(local: np.ndarray, glob: np.ndarray, roll: float) -> np.ndarray:
    """Rotation R with R @ local = glob, rotated by ``roll`` about glob."""
    fa = _frame(local)
    fb = _frame(glob)
    c, s = math.cos(roll), math.sin(roll)
    spin = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    return fb @ spin @ fa.T


def _ray_point(p: np.ndarray, w: np.ndarray, focus: np.ndarray, length: float) -> np.ndarray | None:
    """Point p + t w on the ellipse |x - p| + |x - focus| = length."""
    a = p - focus
    den = 2 * (a @ w + length)
    if abs(den) < 1e-12:
        return None
    t = (length ** 2 - a @ a) / den
    return p + max(t, 0.1) * w


def _ray_intersection(p1, d1, p2, d2) -> np.ndarray | None:
    """Midpoint of the closest approach of two rays (None if parallel or behind)."""
    w0 = p1 - p2
    a, b, c = d1 @ d1, d1 @ d2, d2 @ d2
    d, e = d1 @ w0, d2 @ w0
    den = a * c - b * b
    if den < 1e-10:
        return None
    t1 = (b * e - c * d) / den
    t2 = (a * e - b * d) / den
    if t1 <= 0 or t2 <= 0:
        return None
    return 0.5 * (p1 + t1 * d1 + p2 + t2 * d2)


def _init_ips(prob: _FixProblem, pos, rot, bias_m, rng) -> np.ndarray | None:
    bs = prob.bs.center
    ips = []
    for i in prob.nlos:
        m = prob.meas[i]
        v = m.values
        d_bs = prob.bs.orientation @ direction(v[3], 0.0 if np.isnan(v[4]) else v[4]) if m.mask[3] else None
        d_ue = rot @ direction(v[1], 0.0 if np.isnan(v[2]) else v[2]) if m.mask[1] else None
        ip = None
        if d_bs is not None and d_ue is not None:
            ip = _ray_intersection(bs, d_bs, pos, d_ue)
        length = SPEED_OF_LIGHT * v[0] - bias_m if m.mask[0] else None
        if ip is None and length is not None and length > np.linalg.norm(pos - bs):
            if d_bs is not None:
                ip = _ray_point(bs, d_bs, pos, length)
            elif d_ue is not None:
                ip = _ray_point(pos, d_ue, bs, length)
        if ip is None:
            ip = 0.5 * (bs + pos) + rng.normal(0, max(np.linalg.norm(pos - bs), 1.0), 3)
        ips.append(ip)
    return np.array(ips).reshape(-1, 3)


def _candidates(prob: _FixProblem, rng: np.random.Generator, n_random: int) -> list[_State]:
    bs = prob.bs.center
    los = [m for m in prob.meas if m.kind == "los"]
    base_rot = prob.known_rot if prob.known_rot is not None else np.eye(3)
    out = []
    if los and los[0].mask[3]:
        m = los[0]
        v = m.values
        u = prob.bs.orientation @ direction(v[3], 0.0 if np.isnan(v[4]) else v[4])
        if prob.est_rot and m.mask[1]:
            local = direction(v[1], 0.0 if np.isnan(v[2]) else v[2])
            rots = [_align(local, -u, roll) for roll in np.linspace(0, 2 * np.pi, 12, endpoint=False)]
        elif prob.est_rot:
            rots = [Rotation.random(random_state=rng).as_matrix() for _ in range(12)]
        else:
            rots = [base_rot]
        for r in np.geomspace(0.5, 1000.0, 60):
            pos = bs + r * u
            bias = SPEED_OF_LIGHT * v[0] - r if m.mask[0] else 0.0
            for rot in rots:
                out.append(_State(pos, rot, bias, _init_ips(prob, pos, rot, bias, rng)))
        return out
    taus = [m.values[0] for m in prob.meas if m.mask[0]]
    rmax = max(SPEED_OF_LIGHT * max(taus), 5.0) if taus else 100.0
    for _ in range(n_random):
        pos = bs + rng.uniform(0.5, rmax) * Rotation.random(random_state=rng).apply([1.0, 0, 0])
        rot = Rotation.random(random_state=rng).as_matrix() if prob.est_rot else base_rot
        out.append(_State(pos, rot, 0.0, _init_ips(prob, pos, rot, 0.0, rng)))
    return out


def multipath_fix(meas: Sequence[PathMeasurement], bs: ArrayGeometry, ue_orientation=None,
                  seed: int = 0, n_starts: int = 6, n_random: int = 400,
                  max_iter: int = MAX_ITER, init: dict | None = None) -> FixResult:
    """Weighted least-squares UE fix from per-path (tau, AoA, AoD) measurements.

    The BS pose is known. Unknowns are the UE position, the UE orientation
    (when AoAs are measured and ``ue_orientation`` is not given), the clock
    bias (when delays are measured) and one incidence point per NLoS path.
    With a LoS AoD the start points come from a closed form along the LoS
    ray (range grid times a roll grid); otherwise from random multi-start.
    The best ``n_starts`` candidates are refined by Levenberg-Marquardt.
    ``covariance_hat`` is the inverse Gauss-Newton Hessian at the solution,
    with the orientation as a rotation-vector increment.
    """
    if not meas:
        raise ValidationError("at least one measurement")
    prob = _FixProblem(meas, bs, ue_orientation)
    if prob.n_meas < prob.n_state:
        raise NotIdentifiableError(
            f"{prob.n_meas} measured components for {prob.n_state} unknowns; not identifiable",
            prob.n_state - prob.n_meas)
    rng = np.random.default_rng(seed)
    if init is not None:
        rot = np.asarray(init.get("orientation", prob.known_rot if prob.known_rot is not None else np.eye(3)))
        pos = np.asarray(init["position"], float)
        bias = float(init.get("bias_m", 0.0))
        ips = np.asarray(init["ips"], float).reshape(-1, 3) if "ips" in init else _init_ips(prob, pos, rot, bias, rng)
        cands = [_State(pos, rot, bias, ips)]
    else:
        cands = _candidates(prob, rng, n_random)
    costs = np.array([prob.cost(c) for c in cands])
    finite = np.isfinite(costs)
    if not finite.any():
        raise DegenerateGeometryError("no valid start point")
    order = [i for i in np.argsort(costs) if finite[i]]
    # identifiability verdict from the Jacobian at the most plausible start
    _, j0 = prob.residual(cands[order[0]])
    nsd = null_space_dim(j0.T @ j0)
    if nsd > 0:
        raise NotIdentifiableError(f"state Fisher information has a {nsd}-dimensional null space; "
                                   "not identifiable", nsd)
    best = None
    for i in order[:n_starts]:
        st, cost, it, conv = _levenberg_marquardt(prob, cands[i], max_iter)
        if best is None or cost < best[1]:
            best = (st, cost, it, conv)
    st, cost, it, conv = best
    _, j = prob.residual(st)
    h = j.T @ j
    try:
        cov = np.linalg.inv(h)
        cov = 0.5 * (cov + cov.T)
    except np.linalg.LinAlgError:
        cov = np.full_like(h, np.inf)
        conv = False
    msg = "converged" if conv else f"not converged after {it} iterations; whitened residual {np.sqrt(cost):.3g}"
    return FixResult(st.pos.copy(), st.rot.copy() if (prob.est_rot or prob.known_rot is not None) else None,
                     st.bias_m / SPEED_OF_LIGHT, [p.copy() for p in st.ips], cov, conv, it,
                     float(np.sqrt(cost)), prob.labels(), msg)


# ---------------------------------------------------------------------------
# RIS-aided fix


def _ris_gain_vectors(s: Scenario, phi: tuple[float, float], omega: np.ndarray) -> np.ndarray:
    """g_k(phi) = sum_m omega_km a_m(phi) a_m(incidence) for every symbol."""
    geom = s.ris.geometry
    lam = s.grid.wavelength
    a_in = steering_vector(geom, geom.local_angles_to(s.tx.center), lam)
    return omega @ (steering_vector(geom, phi, lam) * a_in)


def ris_fix(y, s: Scenario, noise_var: float | None = None, oversample: int = 8) -> FixResult:
    """SISO position and clock-bias fix with one BS and one coded RIS.

    ``y`` is (N, K) (or (N, K, 1)) received with unit pilots. Subtracting the
    mean over symbols removes every term that is constant across the code,
    leaving only the RIS path. Its delay and departure angle come from that
    residual, the LoS delay from the symbol mean. The position follows in
    closed form on the departure ray and is refined by Gauss-Newton; the
    covariance is the inverse signal-level Fisher information at the fit.
    """
    if s.ris is None:
        raise ValidationError("scenario has a RIS")
    if s.tx.n_elements != 1 or s.rx.n_elements != 1:
        raise ValidationError("ris_fix expects single-antenna Tx and Rx")
    y = np.asarray(y, complex).reshape(s.grid.n_subcarriers, s.grid.n_symbols)
    omega = np.asarray(s.ris.profiles, complex)
    centred = omega - omega.mean(axis=0)
    if s.grid.n_symbols < 2 or np.linalg.norm(centred) <= 1e-9 * max(np.linalg.norm(omega), 1e-300):
        raise SeparationError("RIS profiles do not vary over symbols; the RIS path cannot be separated")
    grid = s.grid
    n = grid.subcarrier_indices
    y_mean = y.mean(axis=1)
    y_ris = y - y_mean[:, None]

    d_ris = estimate_delay(y_ris, 1.0, grid)
    z = np.exp(2j * np.pi * n * grid.delta_f * d_ris.tau_hat) @ y_ris / grid.n_subcarriers   # (K,)
    geom = s.ris.geometry
    lam = grid.wavelength
    a_in = steering_vector(geom, geom.local_angles_to(s.tx.center), lam)
    # departure angle: beam scan of z against the centred code, via the virtual array a_m(phi)
    virt = centred * a_in[None, :]                       # z_k ~ beta sum_m virt_km a_m(phi)

    def phi_cost(az, el):
        g = virt @ steering_vector(geom, (az, el), lam)
        return abs(np.vdot(g, z)) ** 2 / max(np.vdot(g, g).real, 1e-300)

    beam = lam / max(geom.aperture, lam / 2)
    step = beam / oversample
    azs = np.arange(-np.pi / 2, np.pi / 2 + step, step)
    els = np.arange(-np.pi / 2 + step, np.pi / 2, step)
    grid_cost = np.array([[phi_cost(a, e) for e in els] for a in azs])
    ia, ie = np.unravel_index(np.argmax(grid_cost), grid_cost.shape)
    x0 = np.array([d_ris.tau_hat, azs[ia], els[ie]])
    sc = np.array([1.0 / grid.bandwidth, step, step])
    energy = float(np.vdot(y_ris, y_ris).real)

    def joint(v):
        t, az, el = x0 + v * sc
        g = virt @ steering_vector(geom, (az, el), lam)
        atom = np.exp(-2j * np.pi * n * grid.delta_f * t)[:, None] * g[None, :]
        return -abs(np.vdot(atom, y_ris)) ** 2 / (np.vdot(atom, atom).real * energy)

    res = minimize(joint, np.zeros(3), method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": 4000})
    tau_r, phi_az, phi_el = x0 + res.x * sc
    d_los = estimate_delay(y_mean, 1.0, grid)
    tau_l = d_los.tau_hat

    # closed form on the RIS departure ray, then Gauss-Newton on the four measurements
    ris = geom.center
    bs = s.tx.center
    u = geom.orientation @ direction(phi_az, phi_el)
    a = ris - bs
    dd = SPEED_OF_LIGHT * (tau_r - tau_l) - np.linalg.norm(a)
    den = 2 * (a @ u + dd)
    r = (dd ** 2 - a @ a) / den if abs(den) > 1e-12 else 1.0
    if not r > 0:
        r = 1.0
    pos = ris + r * u
    bias_m = SPEED_OF_LIGHT * tau_r - np.linalg.norm(a) - r
    meas = np.array([SPEED_OF_LIGHT * tau_l, SPEED_OF_LIGHT * tau_r, phi_az, phi_el])

    def predict(x):
        p, b = x[:3], x[3]
        ang = geom.local_angles_to(p)
        return np.array([np.linalg.norm(p - bs) + b, np.linalg.norm(a) + np.linalg.norm(p - ris) + b, *ang])

    def jac(x):
        p = x[:3]
        v = geom.to_local(p - ris)
        j = np.zeros((4, 4))
        j[0, :3] = (p - bs) / np.linalg.norm(p - bs)
        j[1, :3] = (p - ris) / np.linalg.norm(p - ris)
        j[0, 3] = j[1, 3] = 1.0
        j[2:4, :3] = angles_jacobian(v) @ geom.orientation.T
        return j

    x = np.array([*pos, bias_m])
    w = np.array([1.0, 1.0, r, r])            # angles to metres at the RIS range
    it = 0
    converged = False
    for it in range(1, MAX_ITER + 1):
        e = predict(x) - meas
        e[2] = wrap_angle(e[2])
        jj = jac(x) * w[:, None]
        g = jj.T @ (e * w)
        if np.max(np.abs(g)) < GRAD_TOL:
            converged = True
            break
        dx = np.linalg.lstsq(jj, -(e * w), rcond=None)[0]
        x = x + dx
        if np.linalg.norm(dx) < 1e-13 * (1 + np.linalg.norm(x)):
            converged = True
            break
    pos, bias_m = x[:3], x[3]

    # signal-level Fisher information for (position, bias, LoS gain, RIS gain)
    tone = lambda t: np.exp(-2j * np.pi * n * grid.delta_f * t)
    g_full = _ris_gain_vectors(s, (phi_az, phi_el), omega)
    alpha = np.vdot(tone(tau_l), y_mean) / grid.n_subcarriers
    atom_r = tone(tau_r)[:, None] * (g_full - g_full.mean())[None, :]
    beta = np.vdot(atom_r, y_ris) / np.vdot(atom_r, atom_r).real

    def model(th):
        p, b = th[:3], th[3]
        tl = (np.linalg.norm(p - bs) + b) / SPEED_OF_LIGHT
        tr = (np.linalg.norm(a) + np.linalg.norm(p - ris) + b) / SPEED_OF_LIGHT
        g = _ris_gain_vectors(s, geom.local_angles_to(p), omega)
        al = th[4] + 1j * th[5]
        be = th[6] + 1j * th[7]
        return (al * tone(tl)[:, None] + be * tone(tr)[:, None] * g[None, :]).ravel()

    th0 = np.array([*pos, bias_m, alpha.real, alpha.imag, beta.real, beta.imag])
    steps = np.array([1e-6] * 4 + [1e-6 * max(abs(alpha), 1e-30)] * 2 + [1e-6 * max(abs(beta), 1e-30)] * 2)
    cols = []
    for k in range(th0.size):
        e = np.zeros_like(th0)
        e[k] = steps[k]
        cols.append((model(th0 + e) - model(th0 - e)) / (2 * steps[k]))
    dm = np.column_stack(cols)
    if noise_var is None:
        noise_var = s.noise_psd * grid.delta_f
    if not noise_var > 0:
        fit = model(th0) - y.ravel()
        noise_var = max(float(np.vdot(fit, fit).real) / max(y.size - th0.size, 1), 1e-300)
    fim = 2.0 / noise_var * np.real(dm.conj().T @ dm)
    try:
        cov_full = np.linalg.inv(fim)
    except np.linalg.LinAlgError:
        cov_full = np.linalg.pinv(fim)
    cov = cov_full[:4, :4]
    cov = 0.5 * (cov + cov.T)
    e = predict(x) - meas
    e[2] = wrap_angle(e[2])
    return FixResult(pos.copy(), None, bias_m / SPEED_OF_LIGHT, [], cov, converged, it,
                     float(np.linalg.norm(e * w)), ["x", "y", "z", "clock_bias_m"],
                     "converged" if converged else "not converged",
                     {"tau_los": tau_l, "tau_ris": tau_r, "ris_departure_az": phi_az,
                      "ris_departure_el": phi_el})


# ---------------------------------------------------------------------------
# carrier phase


@dataclass(frozen=True)
class CarrierPhaseResult:
    range_hat: float
    integer: int
    confidence: float          # posterior probability of the chosen integer
    n_candidates: int
    low_confidence: bool


def carrier_phase_range(psi: float, coarse_range: float, sigma: float, wavelength: float,
                        psi_tx: float = 0.0, psi_rx: float = 0.0,
                        max_candidates: int = 100) -> CarrierPhaseResult:
    """Range from the LoS carrier phase psi = -2 pi D / lambda + psi_tx + psi_rx (mod 2 pi).

    The fractional range lambda * wrap(-psi + psi_tx + psi_rx) / (2 pi) is
    completed by the integer z whose range is nearest the coarse estimate
    within +-3 sigma. ``confidence`` is the Gaussian posterior weight of the
    chosen integer among all candidates; below 0.99 the result is flagged.
    """
    if not wavelength > 0:
        raise ValidationError("wavelength > 0")
    if not sigma >= 0:
        raise ValidationError("sigma >= 0")
    frac = wavelength * np.mod(-psi + psi_tx + psi_rx, 2 * np.pi) / (2 * np.pi)
    lo = coarse_range - 3 * sigma
    hi = coarse_range + 3 * sigma
    z_lo = int(np.ceil((lo - frac) / wavelength))
    z_hi = int(np.floor((hi - frac) / wavelength))
    count = z_hi - z_lo + 1
    if count > max_candidates:
        raise AmbiguityTooWideError(
            f"+-3 sigma window spans {count} integer ambiguities (limit {max_candidates})")
    z_near = int(np.round((coarse_range - frac) / wavelength))
    zs = np.arange(min(z_lo, z_near), max(z_hi, z_near) + 1)
    ranges = frac + zs * wavelength
    if sigma > 0:
        ll = -0.5 * ((ranges - coarse_range) / sigma) ** 2
        # include the neighbours just outside the window in the normalisation
        ext = frac + np.arange(zs[0] - 1, zs[-1] + 2) * wavelength
        lle = -0.5 * ((ext - coarse_range) / sigma) ** 2
        k = int(np.argmax(ll))
        conf = float(np.exp(ll[k] - lle.max()) / np.sum(np.exp(lle - lle.max())))
    else:
        k = int(np.argmin(np.abs(ranges - coarse_range)))
        conf = 1.0
    z = int(zs[k])
    return CarrierPhaseResult(float(ranges[k]), z, conf, int(max(count, 1)), conf < 0.99)
