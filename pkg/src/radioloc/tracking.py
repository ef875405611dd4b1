"""Extended Kalman filter for a moving UE.

State: position (3), velocity (3) and clock bias expressed in metres (c * B).
Measurements are either direct position fixes or per-path delay and AoA
observations through the scenario geometry.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .errors import ValidationError
from .scenario import SPEED_OF_LIGHT, Scenario, angles_jacobian, angles_of, wrap_angle

STATE_DIM = 7
STATE_LABELS = ("x", "y", "z", "vx", "vy", "vz", "clock_bias_m")


def _check_cov(c: np.ndarray, what: str) -> np.ndarray:
    c = np.asarray(c, float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValidationError(f"{what} is square")
    if not np.allclose(c, c.T, rtol=1e-9, atol=1e-15 * max(np.abs(c).max(), 1e-300)):
        raise ValidationError(f"{what} is symmetric")
    if np.linalg.eigvalsh(0.5 * (c + c.T)).min() < -1e-12 * max(np.abs(c).max(), 1.0):
        raise ValidationError(f"{what} is positive semi-definite")
    return 0.5 * (c + c.T)


@dataclass(frozen=True)
class TrackState:
    mean: np.ndarray
    covariance: np.ndarray
    timestamp: float
    last_update: float | None = None
    nis: float | None = None
    innovation: np.ndarray | None = None

    def __post_init__(self):
        m = np.array(self.mean, float)
        if m.shape != (STATE_DIM,):
            raise ValidationError("state mean has 7 entries")
        c = _check_cov(self.covariance, "state covariance")
        if c.shape != (STATE_DIM, STATE_DIM):
            raise ValidationError("state covariance is 7x7")
        m.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", c)

    @property
    def position(self) -> np.ndarray:
        return self.mean[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[3:6]


@dataclass(frozen=True)
class MotionModel:
    """Constant velocity with white acceleration noise and a random-walk clock bias."""

    process_noise_psd: float = 0.0          # (m/s^2)^2/Hz per axis
    clock_drift_variance: float = 0.0       # m^2/s for c*B
    kind: str = "constant_velocity"

    def __post_init__(self):
        if self.kind != "constant_velocity":
            raise ValidationError("motion model kind is constant_velocity", self.kind)
        if self.process_noise_psd < 0 or self.clock_drift_variance < 0:
            raise ValidationError("noise >= 0")

    def transition(self, dt: float) -> np.ndarray:
        f = np.eye(STATE_DIM)
        f[:3, 3:6] = dt * np.eye(3)
        return f

    def noise(self, dt: float) -> np.ndarray:
        q = np.zeros((STATE_DIM, STATE_DIM))
        s = self.process_noise_psd
        q[:3, :3] = s * dt**3 / 3 * np.eye(3)
        q[:3, 3:6] = q[3:6, :3] = s * dt**2 / 2 * np.eye(3)
        q[3:6, 3:6] = s * dt * np.eye(3)
        q[6, 6] = self.clock_drift_variance * dt
        return q


def predict(t: TrackState, m: MotionModel, dt: float) -> TrackState:
    if not dt > 0:
        raise ValidationError("dt > 0", f"got {dt}")
    f = m.transition(dt)
    p = f @ t.covariance @ f.T + m.noise(dt)
    return TrackState(f @ t.mean, 0.5 * (p + p.T), t.timestamp + dt, t.last_update)


# ---------------------------------------------------------------------------
# measurements


@dataclass(frozen=True)
class PositionFix:
    position: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class PathObservation:
    """Delay [s] and/or AoA (az, el) of path ``path_index`` of the scenario."""

    path_index: int
    tau: float | None = None
    aoa: tuple[float, float] | None = None


def _path_model(x: np.ndarray, s: Scenario, obs: PathObservation):
    """Predicted components and Jacobian for one path, UE orientation known."""
    path = s.paths[obs.path_index]
    pos, b = x[:3], x[6]
    bs = s.tx.center
    far = bs if path.kind == "los" else np.asarray(path.incidence_point, float)
    rows, jac = [], []
    if obs.tau is not None:
        d2 = np.linalg.norm(far - pos)
        length = d2 + (0.0 if path.kind == "los" else np.linalg.norm(far - bs))
        rows.append((length + b) / SPEED_OF_LIGHT)
        j = np.zeros(STATE_DIM)
        j[:3] = (pos - far) / (SPEED_OF_LIGHT * d2)
        j[6] = 1.0 / SPEED_OF_LIGHT
        jac.append(j)
    if obs.aoa is not None:
        r = s.rx.orientation
        v = r.T @ (far - pos)
        rows += list(angles_of(v))
        ja = np.zeros((2, STATE_DIM))
        ja[:, :3] = -angles_jacobian(v) @ r.T
        jac += list(ja)
    return np.array(rows), np.array(jac)


def _observed(obs: PathObservation) -> np.ndarray:
    out = []
    if obs.tau is not None:
        out.append(obs.tau)
    if obs.aoa is not None:
        out += list(obs.aoa)
    return np.array(out, float)


def update(t: TrackState, meas: PositionFix | Sequence[PathObservation], covariance: np.ndarray | None = None,
           s: Scenario | None = None) -> TrackState:
    """EKF update with a position fix or with per-path (tau, AoA) observations.

    Path observations use the scenario's BS position, UE orientation and
    incidence points; ``covariance`` then covers the stacked components in
    order. The Joseph form keeps the posterior covariance PSD. The normalised
    innovation squared is stored on the returned state.
    """
    if t.last_update is not None and not t.timestamp > t.last_update:
        raise ValidationError("timestamps strictly increasing across updates",
                              f"{t.timestamp} after {t.last_update}")
    x = t.mean
    if isinstance(meas, PositionFix):
        r = _check_cov(meas.covariance, "measurement covariance")
        h = np.zeros((3, STATE_DIM))
        h[:, :3] = np.eye(3)
        nu = np.asarray(meas.position, float) - x[:3]
    else:
        if s is None:
            raise ValidationError("path observations need a scenario")
        if covariance is None:
            raise ValidationError("path observations need a covariance")
        r = _check_cov(covariance, "measurement covariance")
        preds, jacs, zs, az_rows = [], [], [], []
        k = 0
        for o in meas:
            p, j = _path_model(x, s, o)
            preds.append(p)
            jacs.append(j)
            zs.append(_observed(o))
            if o.aoa is not None:
                az_rows.append(k + (1 if o.tau is not None else 0))
            k += p.size
        pred = np.concatenate(preds)
        h = np.vstack(jacs)
        nu = np.concatenate(zs) - pred
        for i in az_rows:
            nu[i] = wrap_angle(nu[i])
    if r.shape != (nu.size, nu.size):
        raise ValidationError("measurement covariance matches the measurement size")
    if not np.all(np.isfinite(h)):
        raise ValidationError("measurement Jacobian finite at the predicted state")
    p = t.covariance
    s_mat = h @ p @ h.T + r
    k_gain = np.linalg.solve(s_mat.T, (p @ h.T).T).T
    a = np.eye(STATE_DIM) - k_gain @ h
    p_new = a @ p @ a.T + k_gain @ r @ k_gain.T
    nis = float(nu @ np.linalg.solve(s_mat, nu))
    return TrackState(x + k_gain @ nu, 0.5 * (p_new + p_new.T), t.timestamp, t.timestamp, nis, nu)


# ---------------------------------------------------------------------------
# simulation helpers


@dataclass
class TrackRun:
    times: np.ndarray
    truth: np.ndarray | None   # (T, 7); None for recorded fixes
    fixes: np.ndarray          # (T, 3)
    states: list[TrackState] = field(default_factory=list)

    def estimates(self) -> np.ndarray:
        return np.array([s.mean for s in self.states])

    def write_csv(self, fh: IO[str]) -> None:
        """t, true state, estimate, covariance diagonal, NIS."""
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *[f"true_{k}" for k in STATE_LABELS], *[f"est_{k}" for k in STATE_LABELS],
                    *[f"var_{k}" for k in STATE_LABELS], "nis"])
        blank = [""] * STATE_DIM
        truth = [None] * len(self.states) if self.truth is None else self.truth
        for t, tr, st in zip(self.times, truth, self.states):
            w.writerow([f"{t:.6f}", *(blank if tr is None else [f"{v:.9g}" for v in tr]),
                        *[f"{v:.9g}" for v in st.mean],
                        *[f"{v:.9g}" for v in np.diag(st.covariance)],
                        "" if st.nis is None else f"{st.nis:.9g}"])


def simulate_cv(n_steps: int, dt: float, model: MotionModel, x0: np.ndarray, rng: np.random.Generator
                ) -> np.ndarray:
    """Truth trajectory drawn from the same discretised model the filter uses."""
    f = model.transition(dt)
    q = model.noise(dt)
    out = [np.asarray(x0, float)]
    for _ in range(n_steps - 1):
        out.append(f @ out[-1] + rng.multivariate_normal(np.zeros(STATE_DIM), q))
    return np.array(out)


def track_position_fixes(times: np.ndarray, fixes: np.ndarray, fix_cov: np.ndarray, model: MotionModel,
                         init: TrackState) -> list[TrackState]:
    """Filter a sequence of position fixes; the first fix is applied at ``init.timestamp``."""
    states = []
    st = init
    for i, (t, z) in enumerate(zip(times, fixes)):
        if i > 0:
            st = predict(st, model, t - st.timestamp)
        st = update(st, PositionFix(z, fix_cov))
        states.append(st)
    return states


def run_cv_trial(n_steps: int, dt: float, model: MotionModel, fix_sigma: float, rng: np.random.Generator,
                 x0: np.ndarray | None = None, p0: np.ndarray | None = None) -> TrackRun:
    """One Monte-Carlo run: truth drawn from the prior and the motion model, noisy fixes, EKF."""
    if p0 is None:
        p0 = np.diag([25.0] * 3 + [4.0] * 3 + [1.0])
    if x0 is None:
        x0 = np.zeros(STATE_DIM)
    truth0 = rng.multivariate_normal(x0, p0)
    truth = simulate_cv(n_steps, dt, model, truth0, rng)
    times = dt * np.arange(n_steps)
    cov = fix_sigma**2 * np.eye(3)
    fixes = truth[:, :3] + rng.normal(0, fix_sigma, (n_steps, 3))
    states = track_position_fixes(times, fixes, cov, model, TrackState(x0, p0, 0.0))
    return TrackRun(times, truth, fixes, states)


def read_fixes_csv(fh: IO[str]) -> tuple[np.ndarray, np.ndarray]:
    """Columns t, x, y, z (header row). Returns (times, positions)."""
    rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError("fix file has at least one row")
    try:
        t = np.array([float(r["t"]) for r in rows])
        z = np.array([[float(r[k]) for k in ("x", "y", "z")] for r in rows])
    except KeyError as exc:
        raise ValidationError("fix file has columns t, x, y, z", f"missing {exc}") from None
    if np.any(np.diff(t) <= 0):
        raise ValidationError("timestamps strictly increasing across updates")
    return t, z


def nees(state: TrackState, truth: np.ndarray) -> float:
    e = np.asarray(truth, float) - state.mean
    return float(e @ np.linalg.solve(state.covariance, e))
