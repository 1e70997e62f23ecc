"""Discrete-time kinematic bicycle model with exact per-step Jacobians.

State is [x, y, theta, v] (east, north, heading, speed), controls are
[a, delta] (longitudinal acceleration, front steering angle). The update is
explicit Euler on the rear-axle bicycle model:

    x'     = x + v cos(theta) dt
    y'     = y + v sin(theta) dt
    theta' = theta + v tan(delta) / L dt
    v'     = max(0, v + a dt)

Controls are saturated to their bounds before use and headings are wrapped
to (-pi, pi]. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    return -((np.pi - np.asarray(theta)) % TWO_PI - np.pi)


@dataclass(frozen=True)
class KinematicParams:
    """Vehicle and integration constants. L > 0, dt > 0."""

    wheelbase: float = 2.9
    dt: float = 0.1
    a_max: float = 5.0
    delta_max: float = 0.6

    def __post_init__(self):
        if self.wheelbase <= 0.0:
            raise ValueError(f"wheelbase must be positive, got {self.wheelbase}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class AgentState:
    """One sample of an agent's pose and speed."""

    x: float
    y: float
    theta: float
    v: float

    def as_array(self):
        return np.array([self.x, self.y, self.theta, self.v], dtype=float)

    @classmethod
    def from_array(cls, arr):
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(eq=False)
class ControlSequence:
    """Planned control entries, shape (T, 2) columns [a, delta], with step duration dt."""

    controls: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, 2)

    def __len__(self):
        return self.controls.shape[0]

    def copy(self):
        return ControlSequence(self.controls.copy(), self.dt)


@dataclass(eq=False)
class Trajectory:
    """Rolled-out states, shape (T+1, 4) rows [x, y, theta, v], states[0] is the start."""

    states: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, 4)

    def __len__(self):
        return self.states.shape[0]

    @property
    def positions(self):
        return self.states[:, :2]

    @property
    def headings(self):
        return self.states[:, 2]

    @property
    def speeds(self):
        return self.states[:, 3]


def saturate_controls(controls, params):
    """Clip raw control entries to the configured bounds."""
    out = np.asarray(controls, dtype=float).copy()
    out[..., 0] = np.clip(out[..., 0], -params.a_max, params.a_max)
    out[..., 1] = np.clip(out[..., 1], -params.delta_max, params.delta_max)
    return out


def step(state, control, params):
    """One Euler step of the bicycle model on raw arrays (control already saturated or not)."""
    x, y, theta, v = state
    a = np.clip(control[0], -params.a_max, params.a_max)
    delta = np.clip(control[1], -params.delta_max, params.delta_max)
    dt = params.dt
    return np.array(
        [
            x + v * np.cos(theta) * dt,
            y + v * np.sin(theta) * dt,
            wrap_angle(theta + v * np.tan(delta) / params.wheelbase * dt),
            max(0.0, v + a * dt),
        ]
    )


def rollout(start: AgentState, pi: ControlSequence, params: KinematicParams) -> Trajectory:
    """Integrate a control sequence from a start state.

    Returns a trajectory of len(pi) + 1 states whose first state equals the
    start. Raises ValueError on an empty control sequence.
    """
    controls = np.asarray(pi.controls, dtype=float)
    if controls.shape[0] == 0:
        raise ValueError("control sequence is empty")
    sat = saturate_controls(controls, params)
    T = sat.shape[0]
    dt = params.dt
    states = np.empty((T + 1, 4))
    states[0] = start.as_array()
    x, y, theta, v = states[0]
    for t in range(T):
        a, delta = sat[t]
        x = x + v * np.cos(theta) * dt
        y = y + v * np.sin(theta) * dt
        theta = wrap_angle(theta + v * np.tan(delta) / params.wheelbase * dt)
        v = max(0.0, v + a * dt)
        states[t + 1] = (x, y, theta, v)
    return Trajectory(states, dt=dt)


def rollout_jacobians(start: AgentState, pi: ControlSequence, params: KinematicParams):
    """Rollout plus analytic per-step Jacobians.

    Returns (traj, As, Bs) where As[t] = d state_{t+1} / d state_t (4x4) and
    Bs[t] = d state_{t+1} / d u_t (4x2), both evaluated along the rollout.
    Saturated control entries get a zero Jacobian column; when the speed
    clamp is active (v + a dt < 0) the velocity row loses its dependence on
    both v and a.
    """
    raw = np.asarray(pi.controls, dtype=float)
    if raw.shape[0] == 0:
        raise ValueError("control sequence is empty")
    traj = rollout(start, pi, params)
    sat = saturate_controls(raw, params)
    T = raw.shape[0]
    dt = params.dt
    L = params.wheelbase

    # d(saturated)/d(raw): zero exactly at and beyond the bound
    a_free = (np.abs(raw[:, 0]) < params.a_max).astype(float)
    d_free = (np.abs(raw[:, 1]) < params.delta_max).astype(float)

    As = np.zeros((T, 4, 4))
    Bs = np.zeros((T, 4, 2))
    for t in range(T):
        x, y, theta, v = traj.states[t]
        a, delta = sat[t]
        c, s = np.cos(theta), np.sin(theta)
        sec2 = 1.0 / np.cos(delta) ** 2
        clamp_free = 1.0 if v + a * dt >= 0.0 else 0.0

        A = As[t]
        A[0, 0] = 1.0
        A[0, 2] = -v * s * dt
        A[0, 3] = c * dt
        A[1, 1] = 1.0
        A[1, 2] = v * c * dt
        A[1, 3] = s * dt
        A[2, 2] = 1.0
        A[2, 3] = np.tan(delta) / L * dt
        A[3, 3] = clamp_free

        B = Bs[t]
        B[2, 1] = v * sec2 / L * dt * d_free[t]
        B[3, 0] = dt * clamp_free * a_free[t]
    return traj, As, Bs


def chain_control_jacobian(As, Bs):
    """Assemble d states / d controls from per-step Jacobians.

    Returns S with shape (T+1, 4, T, 2): S[t, :, j, :] = d state_t / d u_j
    (zero for j >= t). Cost of assembly is O(T) small matmuls.
    """
    T = As.shape[0]
    S = np.zeros((T + 1, 4, T, 2))
    for t in range(1, T + 1):
        # propagate all earlier control sensitivities, then add the new block
        if t >= 2:
            S[t, :, : t - 1, :] = np.einsum("ij,jkc->ikc", As[t - 1], S[t - 1, :, : t - 1, :])
        S[t, :, t - 1, :] = Bs[t - 1]
    return S


def backprop_through_rollout(As, Bs, dstates):
    """Pull a gradient w.r.t. trajectory states back onto the controls.

    dstates has shape (T+1, 4); returns (T, 2). This is the adjoint recursion
    lam_t = dstates_t + As[t]^T lam_{t+1}, du_t = Bs[t]^T lam_{t+1}.
    """
    T = As.shape[0]
    dstates = np.asarray(dstates, dtype=float)
    dcontrols = np.zeros((T, 2))
    lam = dstates[T].copy()
    for t in range(T - 1, -1, -1):
        dcontrols[t] = Bs[t].T @ lam
        lam = dstates[t] + As[t].T @ lam
    return dcontrols
