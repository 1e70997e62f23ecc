"""Residual terms entering the nonlinear refinement objective.

Nine weighted cost terms, each contributing one residual entry per planning
step (difference terms carry a leading zero so every block has length T and
the stacked vector has length 9T). The refinement objective is
0.5 * ||residuals||^2. Residual formulas are piecewise smooth with an
obvious zero at nominal driving: tracking the centerline at the speed limit
under a green light with no one nearby.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import D_SAFE
from .frames import constant_velocity_predictions
from .kinematics import (
    KinematicParams,
    chain_control_jacobian,
    rollout_jacobians,
    wrap_angle,
)

COST_TERMS = ("speed", "acc", "jerk", "steer", "rate", "pos", "head", "traffic", "safety")

#: Safety cost considers at most this many nearest neighbors.
MAX_SAFETY_NEIGHBORS = 10


@dataclass(frozen=True)
class CostWeights:
    """Nonnegative per-term weights of the refinement objective."""

    speed: float = 0.1
    acc: float = 0.5
    jerk: float = 0.1
    steer: float = 0.01
    rate: float = 0.5
    pos: float = 0.5
    head: float = 5.0
    traffic: float = 10.0
    safety: float = 10.0

    def __post_init__(self):
        arr = self.as_array()
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("cost weights must be finite and nonnegative")

    def as_array(self):
        return np.array([getattr(self, t) for t in COST_TERMS], dtype=float)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (len(COST_TERMS),):
            raise ValueError(f"expected shape (9,), got {arr.shape}")
        return cls(*(float(v) for v in arr))


@dataclass(eq=False)
class ResidualVector:
    """Stacked weighted residuals; block t of length T per term, in COST_TERMS order."""

    values: np.ndarray
    horizon: int

    def term(self, name):
        i = COST_TERMS.index(name)
        return self.values[i * self.horizon : (i + 1) * self.horizon]

    def objective(self):
        return 0.5 * float(self.values @ self.values)


@dataclass(eq=False)
class PlanContext:
    """Frame geometry pre-extracted for residual evaluation (and its torch twin)."""

    route_xy: np.ndarray  # (M, 2)
    route_tangent: np.ndarray  # (M,)
    route_vlim: np.ndarray  # (M,)
    route_arc: np.ndarray  # (M,)
    red_light: bool
    stop_line_s: float
    neighbor_preds: np.ndarray  # (K, T, 2), K <= MAX_SAFETY_NEIGHBORS
    d_safe: float = D_SAFE


def plan_context(frame, horizon, neighbor_predictions=None, d_safe=D_SAFE) -> PlanContext:
    """Gather everything the residual terms need from a frame.

    neighbor_predictions may come from the policy's prediction head; when
    absent, neighbors are extrapolated at constant velocity. At most the
    MAX_SAFETY_NEIGHBORS nearest are kept.
    """
    if frame.route.shape[0] < 2:
        raise ValueError("frame has no usable route")
    route = frame.route_geometry
    if neighbor_predictions is None:
        preds = constant_velocity_predictions(frame, horizon)
    else:
        preds = np.asarray(neighbor_predictions, dtype=float)
        if preds.size and preds.shape[1] < horizon:
            raise ValueError("neighbor predictions shorter than the planning horizon")
    order = frame.nearest_neighbor_order()[:MAX_SAFETY_NEIGHBORS]
    preds = preds[order] if len(order) else np.zeros((0, horizon, 2))
    return PlanContext(
        route_xy=route.samples[:, :2].copy(),
        route_tangent=route.samples[:, 2].copy(),
        route_vlim=route.samples[:, 3].copy(),
        route_arc=route.arc.copy(),
        red_light=frame.traffic_light.state == "red",
        stop_line_s=frame.traffic_light.stop_line_s,
        neighbor_preds=preds,
        d_safe=d_safe,
    )


def _locate_states(ctx, positions):
    """Vectorized projection of positions (n, 2) onto the route polyline."""
    diff = positions[:, None, :] - ctx.route_xy[None, :, :]
    idx = np.argmin(np.einsum("tmi,tmi->tm", diff, diff), axis=1)
    phi = ctx.route_tangent[idx]
    rel = positions - ctx.route_xy[idx]
    lon = np.cos(phi) * rel[:, 0] + np.sin(phi) * rel[:, 1]
    lat = -np.sin(phi) * rel[:, 0] + np.cos(phi) * rel[:, 1]
    return ctx.route_arc[idx] + lon, lat, phi, ctx.route_vlim[idx]


def _assemble(pi, start_state, ctx, w, params, want_jacobian):
    from .kinematics import AgentState, ControlSequence

    controls = np.asarray(pi.controls, dtype=float)
    T = controls.shape[0]
    dt = params.dt
    weights = w.as_array()
    start = AgentState.from_array(start_state)

    if want_jacobian:
        traj, As, Bs = rollout_jacobians(start, ControlSequence(controls, dt), params)
        S = chain_control_jacobian(As, Bs).reshape(T + 1, 4, 2 * T)
    else:
        from .kinematics import rollout

        traj = rollout(start, ControlSequence(controls, dt), params)
        S = None

    states = traj.states
    a = controls[:, 0]
    delta = controls[:, 1]
    s_arc, lat, phi, v_lim = _locate_states(ctx, states[1:, :2])

    r = np.zeros((len(COST_TERMS), T))
    r[0] = weights[0] * (states[1:, 3] - v_lim)
    r[1] = weights[1] * a
    r[2, 1:] = weights[2] * (a[1:] - a[:-1]) / dt
    r[3] = weights[3] * delta
    r[4, 1:] = weights[4] * (delta[1:] - delta[:-1]) / dt
    r[5] = weights[5] * lat
    r[6] = weights[6] * wrap_angle(states[1:, 2] - phi)

    overrun = np.zeros(T)
    if ctx.red_light:
        overrun = np.maximum(0.0, s_arc - ctx.stop_line_s)
    r[7] = weights[7] * overrun

    preds = ctx.neighbor_preds
    hinge = np.zeros((preds.shape[0], T))
    gaps = np.zeros((preds.shape[0], T))
    if preds.shape[0]:
        d = states[1:, None, :2] - preds.transpose(1, 0, 2)  # (T, K, 2)
        gaps = np.hypot(d[..., 0], d[..., 1]).T  # (K, T)
        hinge = np.maximum(0.0, ctx.d_safe - gaps)
        r[8] = weights[8] * hinge.sum(axis=0)

    residual = ResidualVector(values=r.reshape(-1), horizon=T)
    if not want_jacobian:
        return residual, traj, None

    J = np.zeros((len(COST_TERMS) * T, 2 * T))
    cols_a = 2 * np.arange(T)
    cols_d = cols_a + 1

    blk = lambda i: slice(i * T, (i + 1) * T)
    # speed: d v_{t+1} / d u
    J[blk(0)] = weights[0] * S[1:, 3, :]
    # acc / steer: direct dependence on the raw control entry
    J[blk(1), :][np.arange(T), cols_a] = weights[1]
    J[blk(3), :][np.arange(T), cols_d] = weights[3]
    # jerk / rate: first differences of the controls
    rows = np.arange(1, T)
    J[blk(2).start + rows, cols_a[1:]] = weights[2] / dt
    J[blk(2).start + rows, cols_a[:-1]] = -weights[2] / dt
    J[blk(4).start + rows, cols_d[1:]] = weights[4] / dt
    J[blk(4).start + rows, cols_d[:-1]] = -weights[4] / dt
    # pos / head / traffic: route association treated as locally fixed
    sin_p, cos_p = np.sin(phi), np.cos(phi)
    J[blk(5)] = weights[5] * (-sin_p[:, None] * S[1:, 0, :] + cos_p[:, None] * S[1:, 1, :])
    J[blk(6)] = weights[6] * S[1:, 2, :]
    if ctx.red_light:
        active = (overrun > 0.0).astype(float)
        J[blk(7)] = (
            weights[7]
            * active[:, None]
            * (cos_p[:, None] * S[1:, 0, :] + sin_p[:, None] * S[1:, 1, :])
        )
    # safety: sum of active hinges against fixed predicted neighbor positions
    if preds.shape[0]:
        for t in range(T):
            row = np.zeros(2 * T)
            for k in range(preds.shape[0]):
                if hinge[k, t] > 0.0 and gaps[k, t] > 0.0:
                    unit = (states[t + 1, :2] - preds[k, t]) / gaps[k, t]
                    row -= unit[0] * S[t + 1, 0, :] + unit[1] * S[t + 1, 1, :]
            J[blk(8).start + t] = weights[8] * row
    return residual, traj, J


def residuals(pi, start, frame, w, params=None, neighbor_predictions=None) -> ResidualVector:
    """Weighted residual vector of a control sequence on a frame."""
    params = params or KinematicParams(dt=pi.dt)
    ctx = plan_context(frame, len(pi), neighbor_predictions)
    start_arr = start.as_array() if hasattr(start, "as_array") else np.asarray(start, dtype=float)
    res, _, _ = _assemble(pi, start_arr, ctx, w, params, want_jacobian=False)
    return res


def residual_jacobian(pi, start, frame, w, params=None, neighbor_predictions=None):
    """Residuals plus their Jacobian w.r.t. the flattened controls [a_0, d_0, a_1, ...].

    Returns (ResidualVector, J) with J of shape (9T, 2T). Inactive hinge rows
    are exactly zero.
    """
    params = params or KinematicParams(dt=pi.dt)
    ctx = plan_context(frame, len(pi), neighbor_predictions)
    start_arr = start.as_array() if hasattr(start, "as_array") else np.asarray(start, dtype=float)
    res, _, J = _assemble(pi, start_arr, ctx, w, params, want_jacobian=True)
    return res, J
