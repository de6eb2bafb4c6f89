"""Dynamic movement primitives for 3-D end-effector positions.

Transformation system per Cartesian dimension, canonical phase ``x``::

    tau * dz = alpha_z * (beta_z * (g - y) - z) + f(x)
    tau * dy = z
    tau * dx = -alpha_x * x

with ``f(x) = sum(psi_i(x) w_i) / sum(psi_i(x)) * x * (g - y0)`` and
``psi_i(x) = exp(-h_i (x - c_i)**2)``.  Weights come from per-basis locally
weighted regression on the forcing term implied by the demonstration.

Orientation and the gripper channel are not DMP-encoded: orientation is
slerped between the start and goal quaternions and the gripper follows the
demonstrated open/close schedule in normalized time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import IDENTITY_QUAT, Trajectory, quat_normalize, slerp
from .errors import DegenerateDemo, NonFiniteState, SchemaError, TooFewSamples

ALPHA_Z = 25.0
BETA_Z = ALPHA_Z / 4.0
ALPHA_X = math.log(100.0)  # phase reaches 0.01 at t = tau
N_BASIS = 30
SUBSTEPS = 10
GOAL_EPS = 1e-6


def basis_centers(n_basis: int, alpha_x: float = ALPHA_X) -> tuple[np.ndarray, np.ndarray]:
    """Centers equally spaced in time, widths from neighbour spacing."""
    if n_basis < 2:
        raise ValueError("need at least 2 basis functions")
    c = np.exp(-alpha_x * np.arange(n_basis) / (n_basis - 1))
    h = np.empty(n_basis)
    h[:-1] = 1.0 / np.diff(c) ** 2
    h[-1] = h[-2]
    return c, h


@dataclass(frozen=True, eq=False)
class DmpModel:
    weights: np.ndarray  # (3, n_basis)
    centers: np.ndarray
    widths: np.ndarray
    y0: np.ndarray
    g: np.ndarray
    tau: float
    demo_duration: float
    alpha_z: float = ALPHA_Z
    beta_z: float = BETA_Z
    alpha_x: float = ALPHA_X
    q_start: tuple = IDENTITY_QUAT
    q_goal: tuple = IDENTITY_QUAT
    # (normalized time, closed) change points; first entry at 0.0 is the initial state
    gripper_events: tuple = ((0.0, False),)

    def __post_init__(self):
        for name in ("weights", "centers", "widths", "y0", "g"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.weights.shape != (3, len(self.centers)) or len(self.widths) != len(self.centers):
            raise ValueError("weights must be (3, n_basis) and match centers/widths")
        if self.n_basis < 2:
            raise ValueError("need at least 2 basis functions")
        if np.any(self.widths <= 0) or self.tau <= 0:
            raise ValueError("basis widths and tau must be positive")
        if abs(self.alpha_z - 4.0 * self.beta_z) > 1e-12:
            raise ValueError("alpha_z must equal 4 * beta_z (critical damping)")
        object.__setattr__(self, "gripper_events", tuple((float(t), bool(c)) for t, c in self.gripper_events))

    @property
    def n_basis(self) -> int:
        return len(self.centers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DmpModel):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def forcing_shape(self, x: float) -> np.ndarray:
        """Normalized basis mixture ``sum(psi w)/sum(psi)`` per dimension."""
        psi = np.exp(-self.widths * (x - self.centers) ** 2)
        return self.weights @ psi / max(psi.sum(), 1e-300)

    def gripper_at(self, s: float) -> bool:
        closed = self.gripper_events[0][1]
        for t, c in self.gripper_events:
            if t <= s + 1e-12:
                closed = c
        return closed

    def to_dict(self) -> dict:
        return {
            "alpha_z": self.alpha_z,
            "beta_z": self.beta_z,
            "alpha_x": self.alpha_x,
            "n_basis": self.n_basis,
            "tau": self.tau,
            "demo_duration_s": self.demo_duration,
            "dims": [
                {"y0": float(self.y0[d]), "g": float(self.g[d]), "w": self.weights[d].tolist(),
                 "c": self.centers.tolist(), "h": self.widths.tolist()}
                for d in range(3)
            ],
            "orientation": {"q0": list(self.q_start), "qg": list(self.q_goal)},
            "gripper": [[t, c] for t, c in self.gripper_events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DmpModel":
        try:
            dims = d["dims"]
            if len(dims) != 3:
                raise ValueError("expected 3 dims")
            orient = d.get("orientation", {})
            model = cls(
                weights=np.array([dim["w"] for dim in dims]),
                centers=np.array(dims[0]["c"]),
                widths=np.array(dims[0]["h"]),
                y0=np.array([dim["y0"] for dim in dims]),
                g=np.array([dim["g"] for dim in dims]),
                tau=float(d["tau"]),
                demo_duration=float(d["demo_duration_s"]),
                alpha_z=float(d["alpha_z"]),
                beta_z=float(d["beta_z"]),
                alpha_x=float(d["alpha_x"]),
                q_start=tuple(orient.get("q0", IDENTITY_QUAT)),
                q_goal=tuple(orient.get("qg", IDENTITY_QUAT)),
                gripper_events=tuple(tuple(e) for e in d.get("gripper", [[0.0, False]])),
            )
        except (KeyError, ValueError, TypeError, IndexError) as exc:
            raise SchemaError(f"bad dmp block: {exc}") from exc
        if model.n_basis != int(d["n_basis"]):
            raise SchemaError("n_basis does not match the stored basis")
        return model


def _goal_scale(g: np.ndarray, y0: np.ndarray) -> np.ndarray:
    scale = np.asarray(g, dtype=float) - np.asarray(y0, dtype=float)
    scale[np.abs(scale) < GOAL_EPS] = 0.0
    return scale


def _gripper_events(closed: np.ndarray, duration: float, rate: float) -> tuple:
    events = [(0.0, bool(closed[0]))]
    for i in np.flatnonzero(closed[1:] != closed[:-1]) + 1:
        events.append(((i / rate) / duration, bool(closed[i])))
    return tuple(events)


def fit(demo: Trajectory, n_basis: int = N_BASIS, *, alpha_z: float = ALPHA_Z,
        alpha_x: float = ALPHA_X) -> DmpModel:
    n = len(demo)
    if n < 3:
        raise TooFewSamples(f"fitting needs at least 3 samples, got {n}")
    rate = demo.sample_rate
    dt = 1.0 / rate
    duration = n * dt  # step count times sample period
    tau = duration
    beta_z = alpha_z / 4.0
    c, h = basis_centers(n_basis, alpha_x)

    y = demo.positions
    y0, g = y[0].copy(), y[-1].copy()
    yd = np.gradient(y, dt, axis=0)
    ydd = np.gradient(yd, dt, axis=0)
    # same discrete phase sequence the rollout integrator produces
    x = (1.0 - (dt / SUBSTEPS) * alpha_x / tau) ** (np.arange(n) * SUBSTEPS)

    f_target = tau ** 2 * ydd - alpha_z * (beta_z * (g - y) - tau * yd)
    scale = _goal_scale(g, y0)
    psi = np.exp(-h[None, :] * (x[:, None] - c[None, :]) ** 2)  # (n, N)

    weights = np.zeros((3, n_basis))
    excursion = np.ptp(y, axis=0)
    if np.all(excursion < 1e-6) and np.allclose(y0, g):
        warnings.warn("demonstration has no motion; returning a zero-weight model", DegenerateDemo,
                      stacklevel=2)
    else:
        for d in range(3):
            if scale[d] == 0.0:
                continue
            s = x * scale[d]
            num = (s[:, None] * psi * f_target[:, d, None]).sum(axis=0)
            den = (s[:, None] ** 2 * psi).sum(axis=0)
            weights[d] = num / np.maximum(den, 1e-300)

    return DmpModel(
        weights=weights, centers=c, widths=h, y0=y0, g=g, tau=tau, demo_duration=duration,
        alpha_z=alpha_z, beta_z=beta_z, alpha_x=alpha_x,
        q_start=tuple(quat_normalize(demo.orientations[0])),
        q_goal=tuple(quat_normalize(demo.orientations[-1])),
        gripper_events=_gripper_events(demo.gripper_closed, duration, rate),
    )


@dataclass
class DmpStates:
    """Integrated DMP states at every output sample."""

    y: np.ndarray
    z: np.ndarray
    x: np.ndarray
    y0: np.ndarray
    g: np.ndarray
    tau: float
    dt: float
    substeps: int = field(default=SUBSTEPS)


def integrate(model: DmpModel, y0, g, n_steps: int, dt: float, tau: float, *,
              y_start=None, z_start=None, x_start: float = 1.0,
              substeps: int = SUBSTEPS) -> DmpStates:
    """Explicit-Euler integration of ``n_steps`` output samples after the start state.

    ``y_start``/``z_start``/``x_start`` resume from a mid-rollout state (online
    goal change); by default the system starts at rest at ``y0`` with x = 1.
    The forcing term is always scaled by ``g - y0``.
    """
    y0 = np.asarray(y0, dtype=float)
    g = np.asarray(g, dtype=float)
    y = y0.copy() if y_start is None else np.array(y_start, dtype=float)
    z = np.zeros(3) if z_start is None else np.array(z_start, dtype=float)
    x = float(x_start)
    scale = _goal_scale(g, y0)
    az, bz, ax = model.alpha_z, model.beta_z, model.alpha_x
    h = dt / substeps
    total = n_steps * substeps
    # the phase recursion does not depend on y, so the forcing term is precomputed
    xk = x * (1.0 - h * ax / tau) ** np.arange(total + 1)
    psi = np.exp(-model.widths[None, :] * (xk[:total, None] - model.centers[None, :]) ** 2)
    shape = (psi @ model.weights.T) / np.maximum(psi.sum(axis=1), 1e-300)[:, None]
    forcing = shape * (xk[:total] * 1.0)[:, None] * scale[None, :]
    a = h / tau
    ys = np.empty((n_steps + 1, 3))
    zs = np.empty((n_steps + 1, 3))
    ys[0], zs[0] = y, z
    for d in range(3):
        yv, zv, gd = float(y[d]), float(z[d]), float(g[d])
        fd = (forcing[:, d] + az * bz * gd).tolist()
        col_y = ys[:, d]
        col_z = zs[:, d]
        i = 0
        for k in range(1, n_steps + 1):
            for _ in range(substeps):
                yv, zv = yv + a * zv, zv + a * (fd[i] - az * bz * yv - az * zv)
                i += 1
            col_y[k] = yv
            col_z[k] = zv
    xs = xk[::substeps].copy()
    if not np.all(np.isfinite(ys)):
        raise NonFiniteState("DMP integration diverged")
    return DmpStates(ys, zs, xs, y0, g, tau, dt, substeps)


def sample_count(duration: float, rate: float) -> int:
    return int(math.floor(duration * rate + 1e-9)) + 1


def rollout(model: DmpModel, y0, g, duration: float, rate: float, *, q0=None, qg=None,
            substeps: int = SUBSTEPS) -> Trajectory:
    """Generate a trajectory from ``y0`` to ``g`` lasting ``duration`` seconds."""
    if duration <= 0 or rate <= 0:
        raise ValueError("duration and rate must be positive")
    n = sample_count(duration, rate)
    states = integrate(model, y0, g, n - 1, 1.0 / rate, duration, substeps=substeps)
    return states_to_trajectory(model, states, duration, q0=q0, qg=qg)


def states_to_trajectory(model: DmpModel, states: DmpStates, duration: float, *, t0: float = 0.0,
                         q0=None, qg=None) -> Trajectory:
    n = len(states.y)
    rate = 1.0 / states.dt
    q0 = model.q_start if q0 is None else q0
    qg = model.q_goal if qg is None else qg
    s = np.clip((np.arange(n) / rate) / duration, 0.0, 1.0)
    quats = np.array([slerp(q0, qg, si) for si in s])
    grip = np.array([model.gripper_at(si) for si in s])
    return Trajectory.from_positions(states.y, rate, t0=t0, orientations=quats, gripper_closed=grip)


def resample(traj: Trajectory, n: int) -> Trajectory:
    """Resample to ``n`` samples; endpoints are preserved exactly."""
    if n < 2:
        raise TooFewSamples(f"cannot resample to {n} samples")
    m = len(traj)
    if n == m:
        return traj
    u = np.linspace(0.0, m - 1, n)
    lo = np.minimum(np.floor(u).astype(int), m - 2)
    frac = (u - lo)[:, None]
    pos = traj.positions[lo] * (1.0 - frac) + traj.positions[lo + 1] * frac
    pos[0], pos[-1] = traj.positions[0], traj.positions[-1]
    quats = np.array([slerp(traj.orientations[i], traj.orientations[i + 1], float(f))
                      for i, f in zip(lo, frac[:, 0])])
    quats[0], quats[-1] = traj.orientations[0], traj.orientations[-1]
    grip = traj.gripper_closed[np.rint(u).astype(int)]
    rate = (n - 1) / traj.duration
    return Trajectory.from_positions(pos, rate, t0=float(traj.times[0]), orientations=quats,
                                     gripper_closed=grip)
