"""Training/evaluation samples and the JSONL file format.

A Frame is one 7 s window of a driving scene: 2 s of history for the ego
and its neighbors, the route geometry with speed limits, the traffic-light
situation, and 5 s of ground-truth futures. All geometry is in world
coordinates; headings in radians; distances in meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FrameParseError

HISTORY_LEN = 20
FUTURE_LEN = 50
LIGHT_STATES = ("green", "red", "none")


@dataclass
class TrafficLight:
    state: str = "none"
    stop_line_s: float = 0.0

    def __post_init__(self):
        if self.state not in LIGHT_STATES:
            raise ValueError(f"unknown traffic light state {self.state!r}")


@dataclass(eq=False)
class Neighbor:
    """Another agent: its observed history and box extents (half sizes)."""

    history: np.ndarray  # (HISTORY_LEN, 4)
    half_length: float = 2.4
    half_width: float = 1.0

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=float).reshape(-1, 4)

    def current_position(self):
        return self.history[-1, :2]


class Route:
    """A route centerline sampled at ~1 m: columns (x, y, tangent, speed_limit).

    locate() projects a point onto the polyline: nearest sample plus a local
    linearization along its tangent, giving continuous arc length and signed
    lateral offset (left of the route is positive).
    """

    def __init__(self, samples):
        self.samples = np.asarray(samples, dtype=float).reshape(-1, 4)
        if self.samples.shape[0] < 2:
            raise ValueError("route needs at least two samples")
        d = np.diff(self.samples[:, :2], axis=0)
        self.arc = np.concatenate([[0.0], np.cumsum(np.hypot(d[:, 0], d[:, 1]))])
        if not np.all(np.diff(self.arc) > 0):
            raise ValueError("route must be monotone in arc length")

    def __len__(self):
        return self.samples.shape[0]

    def nearest_index(self, xy):
        diff = self.samples[:, :2] - np.asarray(xy, dtype=float)
        return int(np.argmin(np.einsum("ij,ij->i", diff, diff)))

    def locate(self, xy):
        """Return (s, lateral, tangent, speed_limit) at the projection of xy."""
        i = self.nearest_index(xy)
        x_r, y_r, phi, v_lim = self.samples[i]
        dx = float(xy[0]) - x_r
        dy = float(xy[1]) - y_r
        c, s = np.cos(phi), np.sin(phi)
        lon = c * dx + s * dy
        lat = -s * dx + c * dy
        return self.arc[i] + lon, lat, phi, v_lim

    def point_at(self, s):
        """Route sample nearest to arc length s (clamped to the ends)."""
        i = int(np.clip(np.searchsorted(self.arc, s), 0, len(self.arc) - 1))
        return self.samples[i]


@dataclass(eq=False)
class Frame:
    scene_id: str
    frame_index: int
    ego_history: np.ndarray  # (HISTORY_LEN, 4)
    route: np.ndarray  # (M, 4) x, y, tangent, speed_limit
    ego_future_gt: np.ndarray  # (FUTURE_LEN, 4)
    neighbors: list = field(default_factory=list)  # list[Neighbor]
    neighbor_futures_gt: np.ndarray | None = None  # (K, FUTURE_LEN, 2)
    traffic_light: TrafficLight = field(default_factory=TrafficLight)
    dt: float = 0.1

    def __post_init__(self):
        self.ego_history = np.asarray(self.ego_history, dtype=float).reshape(-1, 4)
        self.route = np.asarray(self.route, dtype=float).reshape(-1, 4)
        self.ego_future_gt = np.asarray(self.ego_future_gt, dtype=float).reshape(-1, 4)
        if self.neighbor_futures_gt is None:
            self.neighbor_futures_gt = np.zeros((len(self.neighbors), 0, 2))
        self.neighbor_futures_gt = np.asarray(self.neighbor_futures_gt, dtype=float)
        self._route_obj = None

    @property
    def route_geometry(self) -> Route:
        if self._route_obj is None:
            self._route_obj = Route(self.route)
        return self._route_obj

    def current_state(self):
        """The ego state at planning time (last history sample)."""
        return self.ego_history[-1]

    def future_trajectory(self):
        """Ground-truth future as a trajectory rooted at the current state."""
        from .kinematics import Trajectory

        states = np.vstack([self.current_state()[None, :], self.ego_future_gt])
        return Trajectory(states, dt=self.dt)

    def nearest_neighbor_order(self):
        """Indices of neighbors sorted by distance to the ego at planning time."""
        if not self.neighbors:
            return []
        ego = self.current_state()[:2]
        d = [float(np.hypot(*(n.current_position() - ego))) for n in self.neighbors]
        return list(np.argsort(d, kind="stable"))


def constant_velocity_predictions(frame, horizon):
    """Neighbor future positions by constant-velocity extrapolation of the history.

    Returns (K, horizon, 2); K = len(frame.neighbors).
    """
    preds = np.zeros((len(frame.neighbors), horizon, 2))
    steps = np.arange(1, horizon + 1)[:, None] * frame.dt
    for k, nb in enumerate(frame.neighbors):
        p_last = nb.history[-1, :2]
        vel = (nb.history[-1, :2] - nb.history[-2, :2]) / frame.dt
        preds[k] = p_last[None, :] + steps * vel[None, :]
    return preds


# ---------------------------------------------------------------------------
# JSONL serialization. Field names match the Frame dataclass; floats use
# Python's shortest round-trip repr so numeric values survive save/load
# bit-exactly.
# ---------------------------------------------------------------------------


def frame_to_dict(frame):
    return {
        "scene_id": frame.scene_id,
        "frame_index": frame.frame_index,
        "dt": frame.dt,
        "ego_history": frame.ego_history.tolist(),
        "neighbors": [
            {
                "history": nb.history.tolist(),
                "half_length": nb.half_length,
                "half_width": nb.half_width,
            }
            for nb in frame.neighbors
        ],
        "route": frame.route.tolist(),
        "traffic_light": {
            "state": frame.traffic_light.state,
            "stop_line_s": frame.traffic_light.stop_line_s,
        },
        "ego_future_gt": frame.ego_future_gt.tolist(),
        "neighbor_futures_gt": frame.neighbor_futures_gt.tolist(),
    }


def frame_from_dict(doc):
    return Frame(
        scene_id=doc["scene_id"],
        frame_index=int(doc["frame_index"]),
        dt=float(doc["dt"]),
        ego_history=np.array(doc["ego_history"], dtype=float),
        neighbors=[
            Neighbor(
                history=np.array(nb["history"], dtype=float),
                half_length=float(nb["half_length"]),
                half_width=float(nb["half_width"]),
            )
            for nb in doc["neighbors"]
        ],
        route=np.array(doc["route"], dtype=float),
        traffic_light=TrafficLight(
            state=doc["traffic_light"]["state"],
            stop_line_s=float(doc["traffic_light"]["stop_line_s"]),
        ),
        ego_future_gt=np.array(doc["ego_future_gt"], dtype=float),
        neighbor_futures_gt=_futures_array(doc["neighbor_futures_gt"], len(doc["neighbors"])),
    )


def _futures_array(raw, n_neighbors):
    arr = np.array(raw, dtype=float)
    if arr.size == 0:
        return np.zeros((n_neighbors, 0, 2))
    return arr.reshape(n_neighbors, -1, 2)


def save_frames(frames, path):
    """Write frames as JSON Lines, one frame per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for frame in frames:
            fh.write(json.dumps(frame_to_dict(frame)) + "\n")


def load_frames(path):
    """Read a JSONL frame file; malformed lines raise FrameParseError with the line number."""
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                frames.append(frame_from_dict(doc))
            except (json.JSONDecodeError, KeyError, TypeError, IndexError) as exc:
                raise FrameParseError(
                    f"line {lineno}: cannot parse frame ({exc})", line_number=lineno
                ) from exc
    return frames
