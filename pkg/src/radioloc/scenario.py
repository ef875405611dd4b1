"""Domain types, coordinate conventions and configuration parsing.

Angles are (azimuth, elevation) pairs in an array's local frame with
``u(az, el) = (cos el cos az, cos el sin az, sin el)``. Orientation matrices
map local coordinates to the global frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from .errors import ConfigError, DegenerateGeometryError, ValidationError

SPEED_OF_LIGHT = 299_792_458.0
SCHEMA_VERSION = 1
DEFAULT_REFLECTION_LOSS = 0.1

_TOL = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# angle helpers


def direction(az, el) -> np.ndarray:
    """Unit vector(s) for the given azimuth/elevation, shape (..., 3)."""
    az = np.asarray(az, dtype=float)
    el = np.asarray(el, dtype=float)
    return np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1
    )


def angles_of(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=float)
    r = np.linalg.norm(v)
    if r == 0:
        raise DegenerateGeometryError("direction of a zero vector is undefined")
    return float(np.arctan2(v[1], v[0])), float(np.arcsin(np.clip(v[2] / r, -1, 1)))


def angles_jacobian(v) -> np.ndarray:
    """d(az, el)/dv for a (not necessarily unit) local vector v, shape (2, 3)."""
    x, y, z = np.asarray(v, dtype=float)
    rho2 = x * x + y * y
    rho = math.sqrt(rho2)
    r2 = rho2 + z * z
    if rho2 == 0:
        raise DegenerateGeometryError("azimuth undefined at the zenith")
    d_az = np.array([-y / rho2, x / rho2, 0.0])
    d_el = np.array([-x * z / (r2 * rho), -y * z / (r2 * rho), rho / r2])
    return np.vstack([d_az, d_el])


def direction_jacobian(az: float, el: float) -> np.ndarray:
    """du/d(az, el), shape (3, 2)."""
    return np.array(
        [
            [-np.cos(el) * np.sin(az), -np.sin(el) * np.cos(az)],
            [np.cos(el) * np.cos(az), -np.sin(el) * np.sin(az)],
            [0.0, np.cos(el)],
        ]
    )


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def rotation_zyx(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Rotation matrix R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.eye(3) + skew(r)
    k = skew(r / theta)
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * (k @ k)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class SpectralGrid:
    f_c: float
    delta_f: float
    n_subcarriers: int
    T_s: float | None = None
    n_symbols: int = 1

    def __post_init__(self):
        if not self.f_c > 0:
            raise ValidationError("f_c > 0")
        if not self.delta_f > 0:
            raise ValidationError("delta_f > 0")
        if self.T_s is None:
            object.__setattr__(self, "T_s", 1.0 / self.delta_f)
        if self.n_subcarriers < 1 or self.n_symbols < 1:
            raise ValidationError("n_subcarriers >= 1 and n_symbols >= 1")
        if not self.bandwidth < self.f_c:
            raise ValidationError("bandwidth < f_c")
        if self.T_s < (1.0 / self.delta_f) * (1 - 1e-12):
            raise ValidationError("T_s >= 1/delta_f")

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.delta_f

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    @property
    def subcarrier_indices(self) -> np.ndarray:
        """Symmetric index set {-N/2, ..., N/2 - 1} (floor division for odd N)."""
        n = self.n_subcarriers
        return np.arange(n) - n // 2

    @property
    def symbol_indices(self) -> np.ndarray:
        return np.arange(self.n_symbols)

    @property
    def wavelengths(self) -> np.ndarray:
        return SPEED_OF_LIGHT / (self.f_c + self.subcarrier_indices * self.delta_f)


@dataclass(frozen=True)
class GainPattern:
    """Element power gain as a function of local direction.

    ``isotropic`` returns ``peak`` everywhere; ``cosine`` returns
    ``peak * max(u_x, 0) ** exponent`` (boresight along local +x).
    """

    kind: str = "isotropic"
    exponent: float = 1.0
    peak: float = 1.0

    def __post_init__(self):
        if self.kind not in ("isotropic", "cosine"):
            raise ValidationError("gain pattern kind in {isotropic, cosine}", self.kind)
        if self.peak <= 0:
            raise ValidationError("gain peak > 0")

    def __call__(self, u_local) -> np.ndarray | float:
        u = np.asarray(u_local, dtype=float)
        if self.kind == "isotropic":
            g = np.full(u.shape[:-1], self.peak)
        else:
            g = self.peak * np.clip(u[..., 0], 0.0, None) ** self.exponent
        return float(g) if g.ndim == 0 else g


ISOTROPIC = GainPattern()


@dataclass(frozen=True)
class ArrayGeometry:
    center: np.ndarray
    orientation: np.ndarray
    element_offsets: np.ndarray
    gain_pattern: GainPattern = ISOTROPIC

    def __post_init__(self):
        c = _frozen(self.center)
        r = _frozen(self.orientation)
        off = _frozen(np.atleast_2d(self.element_offsets))
        if c.shape != (3,) or not np.all(np.isfinite(c)):
            raise ValidationError("array center is a finite 3-vector")
        if r.shape != (3, 3) or not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or not np.isclose(
            np.linalg.det(r), 1.0, atol=1e-9
        ):
            raise ValidationError("orientation is orthonormal with determinant +1")
        if off.ndim != 2 or off.shape[1] != 3 or off.shape[0] < 1:
            raise ValidationError("element count >= 1 with 3-vector offsets")
        if not np.all(np.isfinite(off)):
            raise ValidationError("element offsets finite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "orientation", r)
        object.__setattr__(self, "element_offsets", off)

    @property
    def n_elements(self) -> int:
        return self.element_offsets.shape[0]

    @property
    def position(self) -> np.ndarray:
        return self.center

    @property
    def aperture(self) -> float:
        off = self.element_offsets
        if len(off) == 1:
            return 0.0
        diffs = off[:, None, :] - off[None, :, :]
        return float(np.max(np.linalg.norm(diffs, axis=-1)))

    def element_positions(self) -> np.ndarray:
        return self.center + self.element_offsets @ self.orientation.T

    def to_local(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.orientation

    def local_angles_to(self, point) -> tuple[float, float]:
        return angles_of(self.to_local(np.asarray(point, dtype=float) - self.center))

    def moved(self, center=None, orientation=None, element_offsets=None) -> "ArrayGeometry":
        return ArrayGeometry(
            self.center if center is None else center,
            self.orientation if orientation is None else orientation,
            self.element_offsets if element_offsets is None else element_offsets,
            self.gain_pattern,
        )


def ula(n: int, spacing: float, center=(0.0, 0.0, 0.0), orientation=None, axis: str = "y",
        gain_pattern: GainPattern = ISOTROPIC) -> ArrayGeometry:
    """Uniform linear array centred on its phase reference, along a local axis."""
    k = "xyz".index(axis)
    off = np.zeros((n, 3))
    off[:, k] = (np.arange(n) - (n - 1) / 2) * spacing
    return ArrayGeometry(np.asarray(center, float), np.eye(3) if orientation is None else orientation,
                         off, gain_pattern)


def upa(n_y: int, n_z: int, spacing: float, center=(0.0, 0.0, 0.0), orientation=None,
        gain_pattern: GainPattern = ISOTROPIC) -> ArrayGeometry:
    """Uniform planar array in the local y-z plane (boresight +x)."""
    yy, zz = np.meshgrid((np.arange(n_y) - (n_y - 1) / 2) * spacing,
                         (np.arange(n_z) - (n_z - 1) / 2) * spacing, indexing="ij")
    off = np.column_stack([np.zeros(yy.size), yy.ravel(), zz.ravel()])
    return ArrayGeometry(np.asarray(center, float), np.eye(3) if orientation is None else orientation,
                         off, gain_pattern)


def single_antenna(center=(0.0, 0.0, 0.0), orientation=None,
                   gain_pattern: GainPattern = ISOTROPIC) -> ArrayGeometry:
    return ArrayGeometry(np.asarray(center, float), np.eye(3) if orientation is None else orientation,
                         np.zeros((1, 3)), gain_pattern)


@dataclass(frozen=True)
class PathGeometry:
    kind: str = "los"
    incidence_point: np.ndarray | None = None
    reflection_phase: float = 0.0
    reflection_loss: float = DEFAULT_REFLECTION_LOSS

    def __post_init__(self):
        if self.kind not in ("los", "single_bounce"):
            raise ValidationError("path kind in {los, single_bounce}", self.kind)
        if self.kind == "single_bounce":
            if self.incidence_point is None:
                raise ValidationError("single-bounce requires an incidence point")
            ip = _frozen(self.incidence_point)
            if ip.shape != (3,) or not np.all(np.isfinite(ip)):
                raise ValidationError("incidence point is a finite 3-vector")
            object.__setattr__(self, "incidence_point", ip)
        else:
            object.__setattr__(self, "incidence_point", None)
            object.__setattr__(self, "reflection_phase", 0.0)
            object.__setattr__(self, "reflection_loss", 1.0)
        if not 0 <= self.reflection_phase < 2 * np.pi:
            raise ValidationError("reflection_phase in [0, 2pi)")
        if not 0 < self.reflection_loss <= 1:
            raise ValidationError("reflection_loss in (0, 1]")

    @classmethod
    def los(cls) -> "PathGeometry":
        return cls("los")

    @classmethod
    def bounce(cls, point, phase: float = 0.0, loss: float = DEFAULT_REFLECTION_LOSS) -> "PathGeometry":
        return cls("single_bounce", np.asarray(point, float), float(phase) % (2 * np.pi), loss)


@dataclass(frozen=True)
class ProfileSet:
    """Admissible RIS element coefficients: continuous unit-modulus or b-bit phases."""

    kind: str = "continuous"
    bits: int = 1

    def __post_init__(self):
        if self.kind not in ("continuous", "quantized"):
            raise ValidationError("profile set kind in {continuous, quantized}", self.kind)
        if self.kind == "quantized" and self.bits < 1:
            raise ValidationError("quantized profile set needs bits >= 1")

    def admits(self, w: np.ndarray) -> bool:
        w = np.asarray(w)
        if np.any(np.abs(w) > 1 + 1e-12):
            return False
        if self.kind == "continuous":
            return True
        on = np.abs(w) > 1e-12
        if np.any(np.abs(np.abs(w[on]) - 1) > 1e-9):
            return False
        step = 2 * np.pi / 2 ** self.bits
        frac = np.angle(w[on]) / step
        return bool(np.all(np.abs(frac - np.round(frac)) < 1e-6))

    def quantize(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=complex)
        if self.kind == "continuous":
            mag = np.abs(w)
            return np.where(mag > 1, w / np.where(mag > 0, mag, 1), w)
        step = 2 * np.pi / 2 ** self.bits
        return np.exp(1j * step * np.round(np.angle(w) / step))


@dataclass(frozen=True)
class RisPanel:
    geometry: ArrayGeometry
    profiles: np.ndarray
    profile_set: ProfileSet = ProfileSet()

    def __post_init__(self):
        prof = _frozen(np.atleast_2d(self.profiles), complex)
        if prof.shape[1] != self.geometry.n_elements:
            raise ValidationError("RIS profile width equals element count M")
        if np.any(np.abs(prof) > 1 + 1e-12):
            raise ValidationError("|omega| <= 1 (no amplification)")
        if not self.profile_set.admits(prof):
            raise ValidationError("RIS profiles belong to the admissible set")
        object.__setattr__(self, "profiles", prof)

    @property
    def n_elements(self) -> int:
        return self.geometry.n_elements

    @property
    def position(self) -> np.ndarray:
        return self.geometry.center


@dataclass(frozen=True)
class ClockModel:
    bias: float = 0.0
    cfo: float = 0.0
    phase_noise_variance_per_symbol: float = 0.0
    tx_chain_phase: float = 0.0
    rx_chain_phase: float = 0.0

    def __post_init__(self):
        vals = (self.bias, self.cfo, self.phase_noise_variance_per_symbol,
                self.tx_chain_phase, self.rx_chain_phase)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError("clock parameters finite")
        if self.phase_noise_variance_per_symbol < 0:
            raise ValidationError("phase_noise_variance_per_symbol >= 0")


@dataclass(frozen=True)
class ModelFlags:
    near_field: bool = False
    non_stationary: bool = False
    beam_squint: bool = False


@dataclass(frozen=True)
class Scenario:
    tx: ArrayGeometry
    rx: ArrayGeometry
    paths: tuple[PathGeometry, ...]
    grid: SpectralGrid
    clock: ClockModel = ClockModel()
    ris: RisPanel | None = None
    rx_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    noise_psd: float = 0.0
    flags: ModelFlags = ModelFlags()

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        v = _frozen(self.rx_velocity)
        if v.shape != (3,) or not np.all(np.isfinite(v)):
            raise ValidationError("rx_velocity is a finite 3-vector")
        object.__setattr__(self, "rx_velocity", v)
        if not self.paths and self.ris is None:
            raise ValidationError("at least one path or one RIS")
        if np.linalg.norm(self.tx.center - self.rx.center) < _TOL:
            raise ValidationError("Tx and Rx positions distinct")
        if self.noise_psd < 0 or not math.isfinite(self.noise_psd):
            raise ValidationError("noise_psd >= 0")
        if self.ris is not None and self.ris.profiles.shape[0] != self.grid.n_symbols:
            raise ValidationError("RIS profile length equals n_symbols",
                                  f"{self.ris.profiles.shape[0]} != {self.grid.n_symbols}")

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def has_los(self) -> bool:
        return any(p.kind == "los" for p in self.paths)

    def replace(self, **changes) -> "Scenario":
        import dataclasses

        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class PathParams:
    alpha: complex
    aoa: tuple[float, float]
    aod: tuple[float, float]
    tau: float
    nu: float
    length: float


@dataclass(frozen=True)
class RisPathParams:
    """Geometry of the Tx -> RIS -> Rx leg pair (far-field RIS)."""

    tau: float
    nu: float
    aoa: tuple[float, float]          # at Rx, toward RIS
    aod: tuple[float, float]          # at Tx, toward RIS
    ris_incidence: tuple[float, float]  # RIS frame, toward Tx
    ris_departure: tuple[float, float]  # RIS frame, toward Rx
    alpha_tx_ris: complex
    alpha_ris_rx: complex
    length: float


# ---------------------------------------------------------------------------
# geometry


def _check_separation(a, b, what: str):
    if np.linalg.norm(np.asarray(a) - np.asarray(b)) < _TOL:
        raise DegenerateGeometryError(f"{what} coincide")


def path_legs(s: Scenario, l: int) -> tuple[np.ndarray, np.ndarray]:
    """(point seen from Tx, point seen from Rx) for path l."""
    p = s.paths[l]
    if p.kind == "los":
        return s.rx.center, s.tx.center
    return p.incidence_point, p.incidence_point


def geometric_path_params(s: Scenario, l: int) -> PathParams:
    """Channel parameters of path ``l`` implied by the scenario geometry."""
    if not 0 <= l < len(s.paths):
        raise IndexError(f"path index {l} out of range")
    path = s.paths[l]
    _check_separation(s.tx.center, s.rx.center, "Tx and Rx")
    if path.kind == "los":
        length = float(np.linalg.norm(s.rx.center - s.tx.center))
        loss = 1.0
    else:
        ip = path.incidence_point
        _check_separation(ip, s.tx.center, "incidence point and Tx")
        _check_separation(ip, s.rx.center, "incidence point and Rx")
        length = float(np.linalg.norm(ip - s.tx.center) + np.linalg.norm(ip - s.rx.center))
        loss = path.reflection_loss
    toward_tx_seen, toward_rx_seen = path_legs(s, l)
    v_rx = s.rx.to_local(toward_rx_seen - s.rx.center)
    v_tx = s.tx.to_local(toward_tx_seen - s.tx.center)
    aoa = angles_of(v_rx)
    aod = angles_of(v_tx)
    lam = s.grid.wavelength
    g = s.rx.gain_pattern(v_rx / np.linalg.norm(v_rx)) * s.tx.gain_pattern(v_tx / np.linalg.norm(v_tx))
    mag = lam / (4 * np.pi * length) * math.sqrt(g) * loss
    phase = (-2 * np.pi * length / lam + s.clock.tx_chain_phase + s.clock.rx_chain_phase
             + path.reflection_phase)
    u_global = (toward_rx_seen - s.rx.center) / np.linalg.norm(toward_rx_seen - s.rx.center)
    nu = s.grid.f_c * float(s.rx_velocity @ u_global) / SPEED_OF_LIGHT
    tau = length / SPEED_OF_LIGHT + s.clock.bias
    return PathParams(complex(mag * np.exp(1j * phase)), aoa, aod, tau, nu, length)


def ris_path_params(s: Scenario) -> RisPathParams:
    if s.ris is None:
        raise ValidationError("scenario has a RIS")
    r = s.ris.geometry
    _check_separation(r.center, s.tx.center, "RIS and Tx")
    _check_separation(r.center, s.rx.center, "RIS and Rx")
    d1 = float(np.linalg.norm(r.center - s.tx.center))
    d2 = float(np.linalg.norm(r.center - s.rx.center))
    lam = s.grid.wavelength
    v_rx = s.rx.to_local(r.center - s.rx.center)
    v_tx = s.tx.to_local(r.center - s.tx.center)
    g_tx = s.tx.gain_pattern(v_tx / d1)
    g_rx = s.rx.gain_pattern(v_rx / d2)
    a1 = lam / (4 * np.pi * d1) * math.sqrt(g_tx) * np.exp(1j * (-2 * np.pi * d1 / lam + s.clock.tx_chain_phase))
    a2 = lam / (4 * np.pi * d2) * math.sqrt(g_rx) * np.exp(1j * (-2 * np.pi * d2 / lam + s.clock.rx_chain_phase))
    u_global = (r.center - s.rx.center) / d2
    nu = s.grid.f_c * float(s.rx_velocity @ u_global) / SPEED_OF_LIGHT
    return RisPathParams(
        tau=(d1 + d2) / SPEED_OF_LIGHT + s.clock.bias,
        nu=nu,
        aoa=angles_of(v_rx),
        aod=angles_of(v_tx),
        ris_incidence=r.local_angles_to(s.tx.center),
        ris_departure=r.local_angles_to(s.rx.center),
        alpha_tx_ris=complex(a1),
        alpha_ris_rx=complex(a2),
        length=d1 + d2,
    )


# ---------------------------------------------------------------------------
# configuration


_TOP_KEYS = {"schema_version", "grid", "tx", "rx", "paths", "ris", "clock", "noise", "flags"}
_GRID_KEYS = {"carrier_frequency", "subcarrier_spacing", "n_subcarriers", "symbol_duration",
              "n_symbols", "bandwidth"}
_NODE_KEYS = {"position", "orientation", "euler_zyx", "array", "gain", "velocity"}
_ARRAY_KEYS = {"type", "n", "n_y", "n_z", "spacing", "spacing_wavelengths", "axis", "offsets"}
_GAIN_KEYS = {"pattern", "exponent", "peak"}
_PATH_KEYS = {"kind", "incidence_point", "reflection_phase", "reflection_loss"}
_RIS_KEYS = {"position", "orientation", "euler_zyx", "array", "profile_set", "profiles"}
_PROFILE_KEYS = {"kind", "phases", "amplitudes", "seed"}
_PROFILE_SET_KEYS = {"kind", "bits"}
_CLOCK_KEYS = {"bias", "cfo", "phase_noise_variance", "tx_chain_phase", "rx_chain_phase"}
_NOISE_KEYS = {"psd"}
_FLAG_KEYS = {"near_field", "non_stationary", "beam_squint"}


def _section(d: Any, name: str, allowed: set[str], required: Sequence[str] = ()) -> Mapping:
    if not isinstance(d, Mapping):
        raise ConfigError(name, "expected a mapping")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    for key in required:
        if key not in d:
            raise ConfigError(f"{name}.{key}", "missing required key")
    return d


def _num(d: Mapping, key: str, where: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise ConfigError(f"{where}.{key}", "missing required key")
        return default
    v = d[key]
    if isinstance(v, bool):
        raise ConfigError(f"{where}.{key}", "expected a number")
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}", f"expected a number, got {v!r}") from None


def _vec(d: Mapping, key: str, where: str, n: int = 3) -> np.ndarray:
    try:
        v = np.asarray(d[key], dtype=float)
    except KeyError:
        raise ConfigError(f"{where}.{key}", "missing required key") from None
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}", "expected a numeric vector") from None
    if v.shape != (n,):
        raise ConfigError(f"{where}.{key}", f"expected {n} numbers")
    return v


def _orientation(d: Mapping, where: str) -> np.ndarray:
    if "orientation" in d and "euler_zyx" in d:
        raise ConfigError(where, "give either orientation or euler_zyx, not both")
    if "orientation" in d:
        try:
            r = np.asarray(d["orientation"], dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}.orientation", "expected a 3x3 matrix") from None
        if r.shape != (3, 3):
            raise ConfigError(f"{where}.orientation", "expected a 3x3 matrix")
        return r
    if "euler_zyx" in d:
        return rotation_zyx(*_vec(d, "euler_zyx", where))
    return np.eye(3)


def _array(d: Mapping, where: str, wavelength: float, center, orientation, gain) -> ArrayGeometry:
    d = _section(d, where, _ARRAY_KEYS, ["type"])
    kind = d["type"]
    if kind == "single":
        return single_antenna(center, orientation, gain)
    if "spacing" in d and "spacing_wavelengths" in d:
        raise ConfigError(where, "give either spacing or spacing_wavelengths")
    if kind in ("ula", "upa"):
        spacing = _num(d, "spacing", where) if "spacing" in d else \
            _num(d, "spacing_wavelengths", where, 0.5) * wavelength
    if kind == "ula":
        axis = d.get("axis", "y")
        if axis not in ("x", "y", "z"):
            raise ConfigError(f"{where}.axis", "expected x, y or z")
        return ula(int(_num(d, "n", where)), spacing, center, orientation, axis, gain)
    if kind == "upa":
        return upa(int(_num(d, "n_y", where)), int(_num(d, "n_z", where)), spacing, center,
                   orientation, gain)
    if kind == "custom":
        try:
            off = np.asarray(d["offsets"], dtype=float)
        except KeyError:
            raise ConfigError(f"{where}.offsets", "missing required key") from None
        return ArrayGeometry(np.asarray(center), orientation, off, gain)
    raise ConfigError(f"{where}.type", f"unknown array type {kind!r}")


def _gain(d: Mapping | None, where: str) -> GainPattern:
    if d is None:
        return ISOTROPIC
    d = _section(d, where, _GAIN_KEYS)
    return GainPattern(d.get("pattern", "isotropic"), _num(d, "exponent", where, 1.0),
                       _num(d, "peak", where, 1.0))


def _node(d: Any, where: str, wavelength: float) -> tuple[ArrayGeometry, np.ndarray]:
    d = _section(d, where, _NODE_KEYS, ["position"])
    if where != "rx" and "velocity" in d:
        raise ConfigError(f"{where}.velocity", "only the receiver may move")
    center = _vec(d, "position", where)
    arr_cfg = d.get("array", {"type": "single"})
    arr = _array(arr_cfg, f"{where}.array", wavelength, center, _orientation(d, where),
                 _gain(d.get("gain"), f"{where}.gain"))
    vel = _vec(d, "velocity", where) if "velocity" in d else np.zeros(3)
    return arr, vel


def _ris(d: Any, wavelength: float, n_symbols: int) -> RisPanel:
    d = _section(d, "ris", _RIS_KEYS, ["position", "array", "profiles"])
    geom = _array(d["array"], "ris.array", wavelength, _vec(d, "position", "ris"),
                  _orientation(d, "ris"), ISOTROPIC)
    ps_cfg = _section(d.get("profile_set", {}), "ris.profile_set", _PROFILE_SET_KEYS)
    pset = ProfileSet(ps_cfg.get("kind", "continuous"), int(ps_cfg.get("bits", 1)))
    pc = _section(d["profiles"], "ris.profiles", _PROFILE_KEYS, ["kind"])
    m = geom.n_elements
    kind = pc["kind"]
    if kind == "explicit":
        try:
            ph = np.asarray(pc["phases"], dtype=float)
        except KeyError:
            raise ConfigError("ris.profiles.phases", "missing required key") from None
        amp = np.asarray(pc.get("amplitudes", np.ones_like(ph)), dtype=float)
        if ph.ndim != 2 or amp.shape != ph.shape:
            raise ConfigError("ris.profiles.phases", "expected a K x M matrix")
        prof = amp * np.exp(1j * ph)
    elif kind == "random":
        rng = np.random.default_rng(int(pc.get("seed", 0)))
        prof = pset.quantize(np.exp(2j * np.pi * rng.random((n_symbols, m))))
    elif kind == "off":
        prof = np.zeros((n_symbols, m), complex)
    else:
        raise ConfigError("ris.profiles.kind", f"unknown profile kind {kind!r}")
    return RisPanel(geom, prof, pset)


def scenario_from_dict(cfg: Mapping) -> Scenario:
    """Build and validate a Scenario from an already-parsed config mapping."""
    cfg = _section(cfg, "config", _TOP_KEYS, ["schema_version", "grid", "tx", "rx"])
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {cfg['schema_version']!r}")
    g = _section(cfg["grid"], "grid", _GRID_KEYS, ["carrier_frequency", "n_subcarriers"])
    n_sub = int(_num(g, "n_subcarriers", "grid"))
    if "subcarrier_spacing" in g and "bandwidth" in g:
        raise ConfigError("grid", "give either subcarrier_spacing or bandwidth")
    if "bandwidth" in g:
        delta_f = _num(g, "bandwidth", "grid") / n_sub
    else:
        delta_f = _num(g, "subcarrier_spacing", "grid")
    grid = SpectralGrid(
        f_c=_num(g, "carrier_frequency", "grid"),
        delta_f=delta_f,
        n_subcarriers=n_sub,
        T_s=_num(g, "symbol_duration", "grid") if "symbol_duration" in g else None,
        n_symbols=int(_num(g, "n_symbols", "grid", 1)),
    )
    lam = grid.wavelength
    tx, _ = _node(cfg["tx"], "tx", lam)
    rx, vel = _node(cfg["rx"], "rx", lam)
    paths_cfg = cfg.get("paths", [])
    if not isinstance(paths_cfg, list):
        raise ConfigError("paths", "expected a list")
    paths = []
    for i, pc in enumerate(paths_cfg):
        where = f"paths[{i}]"
        pc = _section(pc, where, _PATH_KEYS, ["kind"])
        if pc["kind"] == "los":
            if set(pc) - {"kind"}:
                raise ConfigError(where, "LoS paths take no further keys")
            paths.append(PathGeometry.los())
        elif pc["kind"] == "single_bounce":
            paths.append(PathGeometry("single_bounce", _vec(pc, "incidence_point", where),
                                      _num(pc, "reflection_phase", where, 0.0),
                                      _num(pc, "reflection_loss", where, DEFAULT_REFLECTION_LOSS)))
        else:
            raise ConfigError(f"{where}.kind", f"unknown path kind {pc['kind']!r}")
    ris = _ris(cfg["ris"], lam, grid.n_symbols) if cfg.get("ris") is not None else None
    c = _section(cfg.get("clock", {}), "clock", _CLOCK_KEYS)
    clock = ClockModel(_num(c, "bias", "clock", 0.0), _num(c, "cfo", "clock", 0.0),
                       _num(c, "phase_noise_variance", "clock", 0.0),
                       _num(c, "tx_chain_phase", "clock", 0.0), _num(c, "rx_chain_phase", "clock", 0.0))
    nz = _section(cfg.get("noise", {}), "noise", _NOISE_KEYS)
    f = _section(cfg.get("flags", {}), "flags", _FLAG_KEYS)
    for key, val in f.items():
        if not isinstance(val, bool):
            raise ConfigError(f"flags.{key}", "expected true/false")
    flags = ModelFlags(**f)
    return Scenario(tx, rx, tuple(paths), grid, clock, ris, vel, _num(nz, "psd", "noise", 0.0), flags)


def load_scenario(config_text: str) -> Scenario:
    """Parse a YAML (or JSON) scenario document."""
    try:
        cfg = yaml.safe_load(config_text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML/JSON: {exc}") from None
    return scenario_from_dict(cfg)


def load_scenario_file(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return load_scenario(fh.read())
