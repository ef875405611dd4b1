"""Fisher information in the channel and state domains, position/orientation
error bounds, identifiability verdicts and a model-mismatch bias probe."""
from __future__ import annotations

import csv
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
from scipy.optimize import minimize

from .channel import steering_derivatives, steering_vector, synthesize
from .errors import ResolutionError, SingularInputError
from .scenario import (
    SPEED_OF_LIGHT,
    ArrayGeometry,
    ClockModel,
    ModelFlags,
    PathGeometry,
    RisPanel,
    Scenario,
    SpectralGrid,
    angles_jacobian,
    geometric_path_params,
    ris_path_params,
    rotation_zyx,
    skew,
)

RANK_THRESHOLD = 1e-9
GEO_PARAMS = ("tau", "aoa_az", "aoa_el", "aod_az", "aod_el")


@dataclass(frozen=True)
class Signal:
    """Pilot transmission: precoders (N, K, Q), powers (N,), combiner (P, R) or None."""

    precoders: np.ndarray
    powers: np.ndarray
    combiner: np.ndarray | None = None


def default_signal(s: Scenario, total_power: float = 1.0, seed: int = 0) -> Signal:
    """Uniform powers; random unit-norm precoders for multi-antenna Tx.

    Each precoder is held for two consecutive symbols so that a +/- coded RIS
    (see :func:`coded_ris_profiles`) stays orthogonal to the uncontrolled paths.
    """
    n, k, q = s.grid.n_subcarriers, s.grid.n_symbols, s.tx.n_elements
    if q == 1:
        f = np.ones((n, k, 1), complex)
    else:
        rng = np.random.default_rng(seed)
        m = (k + 1) // 2
        g = rng.standard_normal((m, q)) + 1j * rng.standard_normal((m, q))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        g = np.repeat(g, 2, axis=0)[:k]
        f = np.broadcast_to(g[None], (n, k, q)).copy()
    return Signal(f, np.full(n, total_power / n), None)


def coded_ris_profiles(n_elements: int, n_symbols: int, rng: np.random.Generator) -> np.ndarray:
    """Random unit-modulus RIS profiles applied with a +/- temporal code.

    Symbol 2b uses a random profile, symbol 2b+1 its negation; the RIS term
    then sums to zero over every pair and is orthogonal to anything constant
    across the pair. ``n_symbols`` must be even.
    """
    if n_symbols % 2:
        raise ValueError("coded RIS profiles need an even number of symbols")
    base = np.exp(2j * np.pi * rng.random((n_symbols // 2, n_elements)))
    out = np.empty((n_symbols, n_elements), complex)
    out[0::2] = base
    out[1::2] = -base
    return out


# ---------------------------------------------------------------------------
# parametric far-field link model


@dataclass
class _PathTerm:
    kind: str                      # "path" or "ris"
    tau: float
    aoa: tuple[float, float]
    aod: tuple[float, float]       # Tx AoD for paths, RIS departure for RIS terms
    nu: float
    gain: complex
    ris: RisPanel | None = None
    tx_aod: tuple[float, float] | None = None   # fixed Tx -> RIS direction
    ris_in: tuple[float, float] | None = None


class LinkModel:
    """Noiseless observation mu[n, k, r] as a function of the channel parameters.

    Per path the parameter block is (tau, aoa_az, aoa_el, aod_az, aod_el,
    [nu], re gain, im gain). For RIS terms the "aod" pair is the departure
    angle at the RIS toward the Rx and the gain is alpha^{tx-ris} alpha^{ris-rx}.
    """

    def __init__(self, s: Scenario, signal: Signal, include_doppler: bool = False,
                 extra_ris: Sequence[RisPanel] = ()):
        self.s = s
        self.grid = s.grid
        self.signal = signal
        self.include_doppler = include_doppler
        self.terms: list[_PathTerm] = []
        for l in range(s.n_paths):
            pp = geometric_path_params(s, l)
            self.terms.append(_PathTerm("path", pp.tau, pp.aoa, pp.aod, pp.nu, pp.alpha))
        panels = ([s.ris] if s.ris is not None else []) + list(extra_ris)
        for panel in panels:
            rp = ris_path_params(s.replace(ris=panel))
            self.terms.append(_PathTerm("ris", rp.tau, rp.aoa, rp.ris_departure, rp.nu,
                                        rp.alpha_tx_ris * rp.alpha_ris_rx, panel, rp.aod,
                                        rp.ris_incidence))
        self.n_block = 8 if include_doppler else 7
        n, k = self.grid.n_subcarriers, self.grid.n_symbols
        self.f = np.broadcast_to(np.asarray(signal.precoders, complex), (n, k, s.tx.n_elements))
        self.sqrt_p = np.sqrt(np.broadcast_to(np.asarray(signal.powers, float), (n,)))
        self.w = None if signal.combiner is None else np.asarray(signal.combiner, complex)
        if s.flags.beam_squint:
            self.lams = self.grid.wavelengths
        else:
            self.lams = np.full(n, self.grid.wavelength)

    @property
    def n_params(self) -> int:
        return self.n_block * len(self.terms)

    def labels(self) -> list[str]:
        names = ["tau", "aoa_az", "aoa_el", "aod_az", "aod_el"]
        if self.include_doppler:
            names.append("nu")
        names += ["re", "im"]
        return [f"{nm}[{i}]" for i in range(len(self.terms)) for nm in names]

    def eta0(self) -> np.ndarray:
        out = []
        for t in self.terms:
            blk = [t.tau, *t.aoa, *t.aod]
            if self.include_doppler:
                blk.append(t.nu)
            blk += [t.gain.real, t.gain.imag]
            out += blk
        return np.array(out)

    def _unpack(self, blk):
        tau, th_az, th_el, ph_az, ph_el = blk[:5]
        nu = blk[5] if self.include_doppler else 0.0
        gain = blk[-2] + 1j * blk[-1]
        return tau, (th_az, th_el), (ph_az, ph_el), nu, gain

    def _combine(self, x: np.ndarray) -> np.ndarray:
        """x[n, k, p] -> mu[n, k, r]."""
        if self.w is None:
            return x
        return x @ self.w.conj()

    def _term_parts(self, t: _PathTerm, blk, with_derivs: bool):
        tau, aoa, aod, nu, gain = self._unpack(blk)
        if not self.include_doppler:
            nu = t.nu
        g = self.grid
        n = g.subcarrier_indices
        k = g.symbol_indices
        tone = (np.exp(-2j * np.pi * n * g.delta_f * tau)[:, None]
                * np.exp(2j * np.pi * k * g.T_s * nu)[None, :])          # (N, K)
        a_rx = steering_vector(self.s.rx, aoa, self.lams)                 # (N, P)
        if t.kind == "path":
            a_tx = steering_vector(self.s.tx, aod, self.lams)             # (N, Q)
            b = np.einsum("nq,nkq->nk", a_tx, self.f)
            if with_derivs:
                da_az, da_el = steering_derivatives(self.s.tx, aod, self.lams)
                db = (np.einsum("nq,nkq->nk", da_az, self.f), np.einsum("nq,nkq->nk", da_el, self.f))
        else:
            a_tx = steering_vector(self.s.tx, t.tx_aod, self.lams)
            bt = np.einsum("nq,nkq->nk", a_tx, self.f)
            lam = self.grid.wavelength
            geom = t.ris.geometry
            a_in = steering_vector(geom, t.ris_in, lam)
            a_out = steering_vector(geom, aod, lam)
            gk = t.ris.profiles @ (a_out * a_in)                          # (K,)
            b = bt * gk[None, :]
            if with_derivs:
                d_az, d_el = steering_derivatives(geom, aod, lam)
                db = (bt * (t.ris.profiles @ (d_az * a_in))[None, :],
                      bt * (t.ris.profiles @ (d_el * a_in))[None, :])
        unit = (self.sqrt_p[:, None] * tone * b)[:, :, None] * a_rx[:, None, :]   # (N, K, P)
        if not with_derivs:
            return gain * unit
        dr_az, dr_el = steering_derivatives(self.s.rx, aoa, self.lams)
        c = self.sqrt_p[:, None] * tone
        d = {
            "tau": gain * (-2j * np.pi * n * g.delta_f)[:, None, None] * unit,
            "aoa_az": gain * (c * b)[:, :, None] * dr_az[:, None, :],
            "aoa_el": gain * (c * b)[:, :, None] * dr_el[:, None, :],
            "aod_az": gain * (c * db[0])[:, :, None] * a_rx[:, None, :],
            "aod_el": gain * (c * db[1])[:, :, None] * a_rx[:, None, :],
            "nu": gain * (2j * np.pi * k * g.T_s)[None, :, None] * unit,
            "re": unit,
            "im": 1j * unit,
        }
        return gain * unit, d

    def mean(self, eta: np.ndarray | None = None) -> np.ndarray:
        eta = self.eta0() if eta is None else np.asarray(eta, float)
        x = 0
        for i, t in enumerate(self.terms):
            x = x + self._term_parts(t, eta[i * self.n_block:(i + 1) * self.n_block], False)
        return self._combine(x)

    def jacobian(self, eta: np.ndarray | None = None) -> np.ndarray:
        """d mu / d eta, flattened to shape (N*K*R, n_params)."""
        eta = self.eta0() if eta is None else np.asarray(eta, float)
        names = ["tau", "aoa_az", "aoa_el", "aod_az", "aod_el"]
        if self.include_doppler:
            names.append("nu")
        names += ["re", "im"]
        cols = []
        for i, t in enumerate(self.terms):
            _, d = self._term_parts(t, eta[i * self.n_block:(i + 1) * self.n_block], True)
            cols += [self._combine(d[nm]).ravel() for nm in names]
        return np.column_stack(cols)

    def numerical_jacobian(self, eta: np.ndarray | None = None, rel_step: float = 1e-6) -> np.ndarray:
        """Central finite differences of :meth:`mean`."""
        eta = self.eta0() if eta is None else np.asarray(eta, float)
        cols = []
        for j in range(eta.size):
            h = rel_step * max(abs(eta[j]), 1e-3)
            if self.labels()[j].startswith("tau"):
                h = rel_step / self.grid.bandwidth
            e = np.zeros_like(eta)
            e[j] = h
            cols.append(((self.mean(eta + e) - self.mean(eta - e)) / (2 * h)).ravel())
        return np.column_stack(cols)


def channel_fim(s: Scenario, signal: Signal | None = None, noise_psd: float | None = None,
                include_doppler: bool = False, extra_ris: Sequence[RisPanel] = (),
                resolvable: bool = False) -> np.ndarray:
    """Slepian-Bangs FIM (2/sigma^2) Re{D^H D} of the far-field observation model.

    Parameter order follows :meth:`LinkModel.labels`: per path
    (tau, aoa az/el, aod az/el, [nu], re, im); RIS terms come after paths.
    With ``resolvable`` the paths are treated as perfectly separated and the
    cross-path blocks are dropped, so adding a path can only add information.
    """
    signal = default_signal(s) if signal is None else signal
    noise_psd = s.noise_psd if noise_psd is None else noise_psd
    sigma2 = noise_psd * s.grid.delta_f
    if not sigma2 > 0 or not np.isfinite(sigma2):
        raise SingularInputError("noise variance must be finite and positive (finite SNR)")
    if np.sum(np.asarray(signal.powers)) <= 0:
        raise SingularInputError("zero signal power")
    model = LinkModel(s, signal, include_doppler, extra_ris)
    d = model.jacobian()
    f = 2.0 / sigma2 * np.real(d.conj().T @ d)
    if resolvable:
        term = np.arange(f.shape[0]) // model.n_block
        f = np.where(term[:, None] == term[None, :], f, 0.0)
    return 0.5 * (f + f.T)


# ---------------------------------------------------------------------------
# state domain


@dataclass(frozen=True)
class StateLayout:
    """Parameter ordering: position(3), [orientation increment(3)], [c*B (m)], IPs(3 each)."""

    mimo: bool
    delay: bool
    ip_positions: tuple[tuple[float, float, float], ...] = ()

    @property
    def dim(self) -> int:
        return 3 + 3 * self.mimo + self.delay + 3 * len(self.ip_positions)

    @property
    def orientation_slice(self) -> slice | None:
        return slice(3, 6) if self.mimo else None

    @property
    def bias_index(self) -> int | None:
        return 3 + 3 * self.mimo if self.delay else None

    def ip_slice(self, point) -> slice:
        key = tuple(float(x) for x in point)
        i = self.ip_positions.index(key)
        start = 3 + 3 * self.mimo + self.delay + 3 * i
        return slice(start, start + 3)

    def labels(self) -> list[str]:
        out = ["x", "y", "z"]
        if self.mimo:
            out += ["rot_x", "rot_y", "rot_z"]
        if self.delay:
            out.append("clock_bias_m")
        for i in range(len(self.ip_positions)):
            out += [f"ip{i}_x", f"ip{i}_y", f"ip{i}_z"]
        return out


def layout_for(scenarios: Sequence[Scenario], mimo: bool | None = None,
               delay: bool | None = None) -> StateLayout:
    s0 = scenarios[0]
    if mimo is None:
        mimo = s0.rx.n_elements > 1
    if delay is None:
        delay = s0.grid.n_subcarriers > 1
    ips: list[tuple[float, float, float]] = []
    for s in scenarios:
        for p in s.paths:
            if p.kind == "single_bounce":
                key = tuple(float(x) for x in p.incidence_point)
                if key not in ips:
                    ips.append(key)
    return StateLayout(mimo, delay, tuple(ips))


def _angle_rows(arr: ArrayGeometry, target, origin):
    """d(az, el) of the local direction origin->target w.r.t. (target, origin, rotation)."""
    v = arr.to_local(np.asarray(target) - np.asarray(origin))
    ja = angles_jacobian(v)
    rt = arr.orientation.T
    return ja @ rt, -ja @ rt, ja @ skew(v)


def state_jacobian(s: Scenario, layout: StateLayout, include_doppler: bool = False,
                   extra_ris: Sequence[RisPanel] = ()) -> np.ndarray:
    """d(channel params)/d(state); rows match :meth:`LinkModel.labels`.

    The Tx (BS) and RIS poses are known; the Rx (UE) pose, the clock bias and
    the incidence points are unknown. Gain rows are zero.
    """
    nb = 8 if include_doppler else 7
    panels = ([s.ris] if s.ris is not None else []) + list(extra_ris)
    n_terms = s.n_paths + len(panels)
    jac = np.zeros((nb * n_terms, layout.dim))
    pos = slice(0, 3)
    rot = layout.orientation_slice
    b = layout.bias_index
    ue = s.rx.center
    bs = s.tx.center
    kf = s.grid.f_c / SPEED_OF_LIGHT

    def doppler_row(row, target, ip_sl=None):
        u = target - ue
        d = np.linalg.norm(u)
        u = u / d
        g = kf * (np.eye(3) - np.outer(u, u)) @ s.rx_velocity / d
        jac[row, pos] += -g
        if ip_sl is not None:
            jac[row, ip_sl] += g

    for l, path in enumerate(s.paths):
        r0 = nb * l
        if path.kind == "los":
            d = np.linalg.norm(ue - bs)
            jac[r0, pos] = (ue - bs) / (SPEED_OF_LIGHT * d)
            d_t, d_o, d_r = _angle_rows(s.rx, bs, ue)
            jac[r0 + 1:r0 + 3, pos] = d_o
            if rot is not None:
                jac[r0 + 1:r0 + 3, rot] = d_r
            d_t, _, _ = _angle_rows(s.tx, ue, bs)
            jac[r0 + 3:r0 + 5, pos] = d_t
            if include_doppler:
                doppler_row(r0 + 5, bs)
        else:
            ip = path.incidence_point
            sl = layout.ip_slice(ip)
            d1 = np.linalg.norm(ip - bs)
            d2 = np.linalg.norm(ip - ue)
            jac[r0, pos] = (ue - ip) / (SPEED_OF_LIGHT * d2)
            jac[r0, sl] = ((ip - bs) / d1 + (ip - ue) / d2) / SPEED_OF_LIGHT
            d_t, d_o, d_r = _angle_rows(s.rx, ip, ue)
            jac[r0 + 1:r0 + 3, pos] = d_o
            jac[r0 + 1:r0 + 3, sl] = d_t
            if rot is not None:
                jac[r0 + 1:r0 + 3, rot] = d_r
            d_t, _, _ = _angle_rows(s.tx, ip, bs)
            jac[r0 + 3:r0 + 5, sl] = d_t
            if include_doppler:
                doppler_row(r0 + 5, ip, sl)
        if b is not None:
            jac[r0, b] = 1.0 / SPEED_OF_LIGHT
    for i, panel in enumerate(panels):
        r0 = nb * (s.n_paths + i)
        rp = panel.position
        d2 = np.linalg.norm(ue - rp)
        jac[r0, pos] = (ue - rp) / (SPEED_OF_LIGHT * d2)
        d_t, d_o, d_r = _angle_rows(s.rx, rp, ue)
        jac[r0 + 1:r0 + 3, pos] = d_o
        if rot is not None:
            jac[r0 + 1:r0 + 3, rot] = d_r
        d_t, _, _ = _angle_rows(panel.geometry, ue, rp)
        jac[r0 + 3:r0 + 5, pos] = d_t
        if include_doppler:
            doppler_row(r0 + 5, rp)
        if b is not None:
            jac[r0, b] = 1.0 / SPEED_OF_LIGHT
    return jac


def profile_gains(fim: np.ndarray, n_block: int) -> tuple[np.ndarray, np.ndarray]:
    """Schur-complement the per-path complex gains out of a channel FIM.

    Returns (effective FIM over all params with gain rows/cols zeroed, mask of
    geometric params).
    """
    n = fim.shape[0]
    nuis = np.zeros(n, bool)
    for start in range(0, n, n_block):
        nuis[start + n_block - 2:start + n_block] = True
    g = ~nuis
    f_gg = fim[np.ix_(g, g)]
    f_gn = fim[np.ix_(g, nuis)]
    f_nn = fim[np.ix_(nuis, nuis)]
    eff = f_gg - f_gn @ np.linalg.pinv(f_nn, rcond=1e-12, hermitian=True) @ f_gn.T
    out = np.zeros_like(fim)
    out[np.ix_(g, g)] = 0.5 * (eff + eff.T)
    return out, g


def null_space_dim(fim: np.ndarray, threshold: float = RANK_THRESHOLD) -> int:
    """Number of unidentifiable directions of a diagonally normalised FIM."""
    diag = np.diag(fim).copy()
    zero = diag <= 0
    keep = ~zero
    if not np.any(keep):
        return int(fim.shape[0])
    scale = 1.0 / np.sqrt(diag[keep])
    f = fim[np.ix_(keep, keep)] * np.outer(scale, scale)
    ev = np.linalg.eigvalsh(0.5 * (f + f.T))
    return int(zero.sum() + np.sum(ev < threshold * ev.max()))


def _structural_fim(eff: np.ndarray, jac: np.ndarray, n_block: int) -> np.ndarray:
    """State FIM with every measured channel parameter given unit information
    (delays in metres, angles in radians), keeping the channel correlations.

    The rank of this matrix is the structural identifiability; unlike the
    physical FIM it is not swamped by path-power disparities (a RIS path is
    typically 50-60 dB below LoS).
    """
    d = np.sqrt(np.clip(np.diag(eff), 0, None))
    meas = d > 0
    scale = np.where(meas, 1.0 / np.where(meas, d, 1.0), 0.0)
    corr = eff * np.outer(scale, scale)
    units = np.ones(len(d))
    units[0::n_block] = SPEED_OF_LIGHT
    js = jac * units[:, None]
    return js.T @ corr @ js


@dataclass
class FimReport:
    fim_channel: np.ndarray
    jacobian: np.ndarray
    fim_state: np.ndarray
    peb: float
    oeb: float
    identifiable: bool
    null_space_dim: int
    layout: StateLayout
    labels: list[str] = field(default_factory=list)

    def crb(self) -> np.ndarray:
        return np.linalg.pinv(self.fim_state, rcond=1e-15, hermitian=True)


def state_fim(s: Scenario | Sequence[Scenario], fim_channel: np.ndarray | Sequence[np.ndarray],
              layout: StateLayout | None = None, include_doppler: bool = False,
              extra_ris: Sequence[Sequence[RisPanel]] | None = None) -> FimReport:
    """Transform channel-domain FIM(s) to the state domain.

    Several links (one per BS, same UE) may be passed as parallel sequences;
    their state FIMs add. Complex gains are profiled out first.
    """
    if isinstance(s, Scenario):
        scenarios, fims = [s], [fim_channel]
    else:
        scenarios, fims = list(s), list(fim_channel)
    extra_ris = [()] * len(scenarios) if extra_ris is None else list(extra_ris)
    layout = layout_for(scenarios) if layout is None else layout
    nb = 8 if include_doppler else 7
    total = np.zeros((layout.dim, layout.dim))
    structural = np.zeros_like(total)
    jacs = []
    for sc, f, ex in zip(scenarios, fims, extra_ris):
        j = state_jacobian(sc, layout, include_doppler, ex)
        eff, _ = profile_gains(np.asarray(f), nb)
        total += j.T @ eff @ j
        structural += _structural_fim(eff, j, nb)
        jacs.append(j)
    total = 0.5 * (total + total.T)
    nsd = null_space_dim(structural)
    identifiable = nsd == 0
    peb = oeb = float("inf")
    if identifiable:
        crb = np.linalg.inv(total)
        peb = float(np.sqrt(max(np.trace(crb[:3, :3]), 0.0)))
        if layout.mimo:
            oeb = float(np.sqrt(max(np.trace(crb[3:6, 3:6]), 0.0)))
    from scipy.linalg import block_diag

    return FimReport(block_diag(*fims), np.vstack(jacs), total, peb, oeb, identifiable, nsd, layout,
                     layout.labels())


def localization_report(s: Scenario | Sequence[Scenario], signal: Signal | None = None,
                        noise_psd: float | None = None, layout: StateLayout | None = None,
                        include_doppler: bool = False,
                        extra_ris: Sequence[Sequence[RisPanel]] | None = None,
                        resolvable: bool = False) -> FimReport:
    """channel_fim + state_fim in one call (one link per scenario)."""
    scenarios = [s] if isinstance(s, Scenario) else list(s)
    extra_ris = [()] * len(scenarios) if extra_ris is None else list(extra_ris)
    fims = [channel_fim(sc, signal if signal is not None else default_signal(sc), noise_psd,
                        include_doppler, ex, resolvable) for sc, ex in zip(scenarios, extra_ris)]
    return state_fim(scenarios, fims, layout, include_doppler, extra_ris)


# ---------------------------------------------------------------------------
# identifiability table sweep

TABLE1_ROWS = ("BS only", "BS + multipath", "BS + multipath, no LOS", "BS + RIS")
TABLE1_COLS = ("Angle-only SISO", "Angle-only MIMO", "Angle & delay SISO", "Angle & delay MIMO")
TABLE1_EXPECTED = {
    ("BS only", "Angle-only SISO"): "not applicable",
    ("BS only", "Angle-only MIMO"): "2 BS",
    ("BS only", "Angle & delay SISO"): "4 BS",
    ("BS only", "Angle & delay MIMO"): "2 BS",
    ("BS + multipath", "Angle-only SISO"): "not applicable",
    ("BS + multipath", "Angle-only MIMO"): "2 BS",
    ("BS + multipath", "Angle & delay SISO"): "4 BS",
    ("BS + multipath", "Angle & delay MIMO"): "1 BS, 1 IP",
    ("BS + multipath, no LOS", "Angle-only SISO"): "not applicable",
    ("BS + multipath, no LOS", "Angle-only MIMO"): "not identifiable",
    ("BS + multipath, no LOS", "Angle & delay SISO"): "not identifiable",
    ("BS + multipath, no LOS", "Angle & delay MIMO"): "1 BS, 4 IP",
    ("BS + RIS", "Angle-only SISO"): "1 BS, 2 RIS",
    ("BS + RIS", "Angle-only MIMO"): "1 BS, 1 RIS",
    ("BS + RIS", "Angle & delay SISO"): "1 BS, 1 RIS",
    ("BS + RIS", "Angle & delay MIMO"): "1 BS, 1 RIS",
}

MAX_BS = 5
MAX_IP = 6
MAX_RIS = 3
_F_C = 28e9
_LAM = SPEED_OF_LIGHT / _F_C


@dataclass
class _Geometry:
    bs: list[tuple[np.ndarray, np.ndarray]]   # (position, orientation)
    ue: np.ndarray
    ue_rot: np.ndarray
    ips: list[np.ndarray]
    ris: list[tuple[np.ndarray, np.ndarray]]


def _cube(center, orientation) -> ArrayGeometry:
    h = _LAM / 4
    off = np.array(list(itertools.product((-h, h), repeat=3)))
    return ArrayGeometry(np.asarray(center), orientation, off)


def _min_angle(a, b, c) -> float:
    """Smallest interior angle (rad) of triangle abc."""
    pts = [np.asarray(a), np.asarray(b), np.asarray(c)]
    out = np.pi
    for i in range(3):
        u = pts[(i + 1) % 3] - pts[i]
        v = pts[(i + 2) % 3] - pts[i]
        cosang = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
        out = min(out, float(np.arccos(np.clip(cosang, -1, 1))))
    return out


def _generic(rng: np.random.Generator, n_bs: int, n_ip: int, n_ris: int) -> _Geometry:
    """Random geometry with collinear/clustered draws rejected and redrawn."""
    while True:
        ue = np.array([*rng.uniform(-15, 15, 2), rng.uniform(0.5, 2.0)])
        ue_rot = rotation_zyx(*rng.uniform(-np.pi, np.pi, 3))
        bs = [(np.array([*rng.uniform(-25, 25, 2), rng.uniform(3, 10)]),
               rotation_zyx(rng.uniform(-np.pi, np.pi), rng.uniform(-0.3, 0.3), 0.0))
              for _ in range(n_bs)]
        ips = [np.array([*rng.uniform(-25, 25, 2), rng.uniform(0.0, 8.0)]) for _ in range(n_ip)]
        ris = []
        for _ in range(n_ris):
            p = np.array([*rng.uniform(-25, 25, 2), rng.uniform(2, 6)])
            # face the RIS roughly toward the UE so departures stay off endfire
            yaw = np.arctan2(ue[1] - p[1], ue[0] - p[0]) + rng.uniform(-0.5, 0.5)
            ris.append((p, rotation_zyx(yaw)))
        pts = [ue] + [b[0] for b in bs] + ips + [r[0] for r in ris]
        dmin = min(np.linalg.norm(a - b) for a, b in itertools.combinations(pts, 2))
        if dmin < 3.0:
            continue
        ok = all(_min_angle(b[0], ue, ip) > 0.15 for b in bs for ip in ips)
        ok &= all(_min_angle(bs[0][0], ue, r[0]) > 0.15 for r in ris)
        if n_bs >= 2:
            ok &= all(_min_angle(a[0], ue, b[0]) > 0.15 for a, b in itertools.combinations(bs, 2))
        if ok:
            return _Geometry(bs, ue, ue_rot, ips, ris)


def _cell_links(geo: _Geometry, mimo: bool, delay: bool, los: bool, n_bs: int, n_ip: int,
                n_ris: int, rng: np.random.Generator):
    n_sub = 16 if delay else 1
    k_sym = 16
    grid = SpectralGrid(_F_C, 10e6, n_sub, n_symbols=k_sym)
    make = _cube if mimo else (lambda c, o: ArrayGeometry(np.asarray(c), o, np.zeros((1, 3))))
    ue = make(geo.ue, geo.ue_rot)
    links, extras = [], []
    for i in range(n_bs):
        bs = make(*geo.bs[i])
        paths = [PathGeometry.los()] if los else []
        if i == 0:
            paths += [PathGeometry.bounce(ip, rng.uniform(0, 2 * np.pi)) for ip in geo.ips[:n_ip]]
        panels = []
        if i == 0:
            for p, o in geo.ris[:n_ris]:
                geom = ArrayGeometry(p, o, upa_offsets(4, 4, _LAM / 2))
                prof = coded_ris_profiles(geom.n_elements, k_sym, rng)
                panels.append(RisPanel(geom, prof))
        if not paths and not panels:
            continue
        if not paths:
            # keep the Scenario invariant (>= 1 path or RIS) by carrying the first panel
            s = Scenario(bs, ue, (), grid, ClockModel(), panels[0], noise_psd=1e-20)
            links.append(s)
            extras.append(panels[1:])
        else:
            links.append(Scenario(bs, ue, tuple(paths), grid, ClockModel(), noise_psd=1e-20))
            extras.append(panels)
    return links, extras


def upa_offsets(n_y: int, n_z: int, spacing: float) -> np.ndarray:
    yy, zz = np.meshgrid((np.arange(n_y) - (n_y - 1) / 2) * spacing,
                         (np.arange(n_z) - (n_z - 1) / 2) * spacing, indexing="ij")
    return np.column_stack([np.zeros(yy.size), yy.ravel(), zz.ravel()])


def _evaluate(geo, mimo, delay, los, n_bs, n_ip, n_ris, seed) -> FimReport | None:
    rng = np.random.default_rng(seed)
    links, extras = _cell_links(geo, mimo, delay, los, n_bs, n_ip, n_ris, rng)
    if not links:
        return None
    signals = []
    for s in links:
        signals.append(default_signal(s, seed=int(rng.integers(2**31))))
    fims = [channel_fim(s, sig, None, False, ex) for s, sig, ex in zip(links, signals, extras)]
    layout = layout_for(links, mimo=mimo, delay=delay)
    return state_fim(links, fims, layout, False, extras)


def _candidates(row: str):
    """(n_bs, n_ip, n_ris, los) in increasing order of infrastructure."""
    if row == "BS only":
        return [(b, 0, 0, True) for b in range(1, MAX_BS + 1)]
    if row == "BS + multipath":
        return [(b, i, 0, True) for b in range(1, MAX_BS + 1) for i in range(0, MAX_IP + 1)]
    if row == "BS + multipath, no LOS":
        return [(1, i, 0, False) for i in range(1, MAX_IP + 1)]
    return [(1, 0, r, True) for r in range(0, MAX_RIS + 1)]


def _label(n_bs, n_ip, n_ris) -> str:
    out = f"{n_bs} BS"
    if n_ip:
        out += f", {n_ip} IP"
    if n_ris:
        out += f", {n_ris} RIS"
    return out


@dataclass
class Table1Cell:
    row: str
    column: str
    expected: str
    found: str
    per_draw: list[str]
    offending_geometry: dict | None = None

    @property
    def agrees(self) -> bool:
        return all(f == self.expected for f in self.per_draw)


def minimal_configuration(row: str, column: str, seed: int) -> str:
    mimo = column.endswith("MIMO")
    delay = column.startswith("Angle & delay")
    if column == "Angle-only SISO" and row != "BS + RIS":
        return "not applicable"
    rng = np.random.default_rng(seed)
    geo = _generic(rng, MAX_BS, MAX_IP, MAX_RIS)
    for n_bs, n_ip, n_ris, los in _candidates(row):
        # beyond one BS, multipath cannot beat adding a BS; skip the redundant IP counts
        if row == "BS + multipath" and n_bs > 1 and n_ip > 0:
            continue
        rep = _evaluate(geo, mimo, delay, los, n_bs, n_ip, n_ris, seed + 7919 * (n_bs + 10 * n_ip + 100 * n_ris))
        if rep is not None and rep.identifiable:
            return _label(n_bs, n_ip, n_ris)
    return "not identifiable"


def _cell(row: str, column: str, draws: int, seed: int) -> Table1Cell:
    per = []
    offending = None
    for d in range(draws):
        sd = seed + 1000 * d
        found = minimal_configuration(row, column, sd)
        per.append(found)
        if found != TABLE1_EXPECTED[(row, column)] and offending is None:
            geo = _generic(np.random.default_rng(sd), MAX_BS, MAX_IP, MAX_RIS)
            offending = {"seed": sd, "ue": geo.ue.tolist(),
                         "bs": [b[0].tolist() for b in geo.bs],
                         "ips": [ip.tolist() for ip in geo.ips],
                         "ris": [r[0].tolist() for r in geo.ris]}
    found = per[0] if len(set(per)) == 1 else "inconsistent"
    return Table1Cell(row, column, TABLE1_EXPECTED[(row, column)], found, per, offending)


def table1_sweep(draws: int = 10, seed: int = 0, threads: int = 1) -> list[Table1Cell]:
    """Minimal identifiable configuration for every cell, over random generic geometries."""
    cells = [(r, c) for r in TABLE1_ROWS for c in TABLE1_COLS]
    jobs = [(r, c, draws, seed + 100_003 * i) for i, (r, c) in enumerate(cells)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda a: _cell(*a), jobs))
    return [_cell(*a) for a in jobs]


def write_table1_csv(fh: IO[str], cells: Sequence[Table1Cell]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["row", "column", "expected", "found", "agree", "draws", "offending_seed"])
    for c in cells:
        w.writerow([c.row, c.column, c.expected, c.found, str(c.agrees).lower(), len(c.per_draw),
                    "" if c.offending_geometry is None else c.offending_geometry["seed"]])


# ---------------------------------------------------------------------------
# model-mismatch bias probe


@dataclass
class MismatchResult:
    truth: dict[str, float]
    pseudo_true: dict[str, float]
    bias: dict[str, float]
    residual: float


def _fit_response(s: Scenario, az: float, el: float, tau: float) -> np.ndarray:
    """Far-field single-path SIMO response (N, P) with unit gain."""
    lams = s.grid.wavelengths if s.flags.beam_squint else np.full(s.grid.n_subcarriers, s.grid.wavelength)
    a = steering_vector(s.rx, (az, el), lams)
    tone = np.exp(-2j * np.pi * s.grid.subcarrier_indices * s.grid.delta_f * tau)
    return tone[:, None] * a


def _profiled_cost(y: np.ndarray, m: np.ndarray) -> float:
    mm = np.vdot(m, m).real
    return float(np.vdot(y, y).real - abs(np.vdot(m, y)) ** 2 / mm)


def mismatch_bias_probe(truth: Scenario, fit_flags: ModelFlags = ModelFlags(),
                        n_az: int = 81, n_tau: int = 41, az_span: float | None = None,
                        tau_span: float | None = None) -> MismatchResult:
    """Pseudo-true (azimuth, delay) of a far-field fit to the truth model's noiseless
    LoS response, and the resulting bias.

    The fit model must share the truth's parameterisation: LoS path, single-antenna
    Tx, array Rx. The complex gain is profiled in closed form.
    """
    if truth.tx.n_elements != 1:
        raise ValueError("bias probe expects a single-antenna transmitter")
    los = [i for i, p in enumerate(truth.paths) if p.kind == "los"]
    if not los:
        raise ValueError("bias probe needs a LoS path")
    one = truth.replace(paths=(truth.paths[los[0]],), ris=None)
    y = synthesize(one).entries[:, 0, :, 0]
    pp = geometric_path_params(one, 0)
    fit = one.replace(flags=fit_flags)
    az0, el0 = pp.aoa
    tau0 = pp.tau
    if az_span is None:
        az_span = 8.0 / max(fit.rx.aperture / fit.grid.wavelength, 1.0)
    if tau_span is None:
        tau_span = 2.0 / fit.grid.bandwidth
    # grids centred on the truth so the truth itself is a candidate
    az_grid = az0 + np.linspace(-az_span, az_span, n_az)
    tau_grid = tau0 + np.linspace(-tau_span, tau_span, n_tau)
    costs = np.array([[_profiled_cost(y, _fit_response(fit, a, el0, t)) for t in tau_grid] for a in az_grid])
    i, j = np.unravel_index(np.argmin(costs), costs.shape)
    if i in (0, n_az - 1) or j in (0, n_tau - 1):
        raise ResolutionError("probe grid does not bracket the pseudo-true minimum; widen the spans")
    best = np.array([az_grid[i], tau_grid[j]])
    best_cost = costs[i, j]
    energy = np.vdot(y, y).real
    if best_cost > 1e-12 * energy:
        scale = np.array([az_span / n_az, tau_span / n_tau])

        def obj(x):
            return _profiled_cost(y, _fit_response(fit, best[0] + x[0] * scale[0], el0,
                                                   best[1] + x[1] * scale[1])) / energy

        res = minimize(obj, np.zeros(2), method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-16, "maxiter": 4000})
        if res.fun * energy < best_cost:
            best = best + res.x * scale
            best_cost = res.fun * energy
    truth_d = {"aoa_az": az0, "tau": tau0}
    pseudo = {"aoa_az": float(best[0]), "tau": float(best[1])}
    bias = {k: pseudo[k] - truth_d[k] for k in truth_d}
    return MismatchResult(truth_d, pseudo, bias, float(best_cost / energy))
