"""Style features of a trajectory in its scenario context.

Seven scaled, nonnegative features describe how a trajectory is driven:
lateral/longitudinal acceleration, lateral/longitudinal jerk, efficiency
(speed deficit against the limit), road offset, and safety (proximity to
the nearest other agent). Each is a scaled mean of a per-step magnitude, so
vectors from different trajectories are directly comparable, and the style
error between two vectors is their mean absolute difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import Trajectory, wrap_angle

FEATURE_NAMES = (
    "acc_lat",
    "acc_lon",
    "jerk_lat",
    "jerk_lon",
    "efficiency",
    "road_offset",
    "safety",
)

#: Safe-gap radius (m) shared by the safety feature and the safety cost term.
D_SAFE = 5.0


@dataclass(frozen=True)
class FeatureScaling:
    """Per-feature scale factors applied at extraction time."""

    beta: tuple = (0.008, 0.008, 0.004, 0.01, 0.004, 0.0005, 0.01)

    def __post_init__(self):
        if len(self.beta) != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} scale factors")
        if any(b <= 0 for b in self.beta):
            raise ValueError("scale factors must be positive")

    def as_array(self):
        return np.asarray(self.beta, dtype=float)


@dataclass(frozen=True)
class FeatureVector:
    acc_lat: float
    acc_lon: float
    jerk_lat: float
    jerk_lon: float
    efficiency: float
    road_offset: float
    safety: float

    def as_array(self):
        return np.array([getattr(self, name) for name in FEATURE_NAMES], dtype=float)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (len(FEATURE_NAMES),):
            raise ValueError(f"expected shape (7,), got {arr.shape}")
        return cls(*(float(v) for v in arr))

    def to_dict(self):
        return {name: float(getattr(self, name)) for name in FEATURE_NAMES}

    @classmethod
    def from_dict(cls, doc):
        return cls(*(float(doc[name]) for name in FEATURE_NAMES))


def extract_features(traj, frame, beta=FeatureScaling(), d_safe=D_SAFE) -> FeatureVector:
    raw, _ = _features_impl(traj, frame, d_safe, want_grad=False)
    return FeatureVector.from_array(raw * beta.as_array())


def extract_features_with_grad(traj, frame, beta=FeatureScaling(), d_safe=D_SAFE):
    """Features plus their gradient w.r.t. every trajectory state.

    Returns (FeatureVector, grad) with grad of shape (7, n_states, 4).
    Subgradients at |.| and hinge kinks are taken as zero.
    """
    raw, grad = _features_impl(traj, frame, d_safe, want_grad=True)
    b = beta.as_array()
    return FeatureVector.from_array(raw * b), grad * b[:, None, None]


def _features_impl(traj, frame, d_safe, want_grad):
    states = np.asarray(traj.states, dtype=float)
    n = states.shape[0] - 1  # number of intervals
    if n < 2:
        raise ValueError("trajectory must have at least 3 states")
    dt = traj.dt
    v = states[:, 3]
    theta = states[:, 2]

    # per-interval signals: heading rate, lateral acceleration, longitudinal acceleration
    dtheta = wrap_angle(theta[1:] - theta[:-1])
    theta_dot = dtheta / dt
    w_lat = v[:-1] * theta_dot
    a_lon = (v[1:] - v[:-1]) / dt
    jerk_lat_sig = (w_lat[1:] - w_lat[:-1]) / dt
    jerk_lon_sig = (a_lon[1:] - a_lon[:-1]) / dt

    route = frame.route_geometry
    # per-state signals over the future part (states 1..n)
    v_lim = np.empty(n)
    lat = np.empty(n)
    tangents = np.empty(n)
    for t in range(n):
        _, lat[t], tangents[t], v_lim[t] = route.locate(states[t + 1, :2])

    deficit = np.maximum(0.0, v_lim - v[1:])

    futures = frame.neighbor_futures_gt
    have_neighbors = futures.size > 0 and futures.shape[1] > 0
    if have_neighbors:
        gaps = np.empty(n)
        nearest = np.empty(n, dtype=int)
        horizon = futures.shape[1]
        for t in range(n):
            q = futures[:, min(t, horizon - 1), :]
            d = np.hypot(q[:, 0] - states[t + 1, 0], q[:, 1] - states[t + 1, 1])
            nearest[t] = int(np.argmin(d))
            gaps[t] = d[nearest[t]]
        prox = np.maximum(0.0, 1.0 - gaps / d_safe)
    else:
        prox = np.zeros(n)

    raw = np.array(
        [
            np.mean(np.abs(w_lat)),
            np.mean(np.abs(a_lon)),
            np.mean(np.abs(jerk_lat_sig)),
            np.mean(np.abs(jerk_lon_sig)),
            np.mean(deficit),
            np.mean(np.abs(lat)),
            np.mean(prox),
        ]
    )

    if not want_grad:
        return raw, None

    grad = np.zeros((len(FEATURE_NAMES), n + 1, 4))

    def add_w_lat(out, coeff):
        # w_lat[t] = v[t] * (theta[t+1]-theta[t]) / dt for t = 0..n-1
        for t in range(n):
            out[t, 3] += coeff[t] * theta_dot[t]
            out[t + 1, 2] += coeff[t] * v[t] / dt
            out[t, 2] -= coeff[t] * v[t] / dt

    def add_a_lon(out, coeff):
        for t in range(n):
            out[t + 1, 3] += coeff[t] / dt
            out[t, 3] -= coeff[t] / dt

    # acc_lat: mean |w_lat|
    add_w_lat(grad[0], np.sign(w_lat) / n)
    # acc_lon: mean |a_lon|
    add_a_lon(grad[1], np.sign(a_lon) / n)
    # jerk_lat: mean |(w_lat[t+1]-w_lat[t])/dt|
    c = np.sign(jerk_lat_sig) / ((n - 1) * dt)
    coeff_w = np.zeros(n)
    coeff_w[1:] += c
    coeff_w[:-1] -= c
    add_w_lat(grad[2], coeff_w)
    # jerk_lon
    c = np.sign(jerk_lon_sig) / ((n - 1) * dt)
    coeff_a = np.zeros(n)
    coeff_a[1:] += c
    coeff_a[:-1] -= c
    add_a_lon(grad[3], coeff_a)
    # efficiency: mean max(0, v_lim - v), route lookup treated as locally constant
    grad[4][1:, 3] = -(deficit > 0).astype(float) / n
    # road_offset: mean |lat|; d lat / d (x, y) = (-sin phi, cos phi) at the fixed nearest sample
    sgn = np.sign(lat) / n
    grad[5][1:, 0] = -np.sin(tangents) * sgn
    grad[5][1:, 1] = np.cos(tangents) * sgn
    # safety: mean max(0, 1 - gap/d_safe) against the fixed nearest neighbor
    if have_neighbors:
        horizon = futures.shape[1]
        for t in range(n):
            if prox[t] > 0.0 and gaps[t] > 0.0:
                q = futures[nearest[t], min(t, horizon - 1), :]
                unit = (states[t + 1, :2] - q) / gaps[t]
                grad[6][t + 1, :2] = -unit / (d_safe * n)
    return raw, grad


def style_error(f_hat: FeatureVector, f: FeatureVector) -> float:
    """Mean absolute difference between two scaled feature vectors."""
    a = f_hat.as_array()
    b = f.as_array()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("feature vectors must be finite")
    return float(np.mean(np.abs(a - b)))
