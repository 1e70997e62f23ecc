"""Synthetic scene generation, frame windowing, and user-style extraction.

Scenes are 20 s logs at 10 Hz over straight roads, constant-radius curves,
and a signalized intersection, with scripted surrounding traffic. The ego
log is produced by a feedback controller whose targets (speed fraction,
curve aggressiveness, command smoothing, lane offset) come from a style
parameter set, and every state transition goes through the kinematics
module's update, so logged trajectories are exactly reproducible by a
rollout of the logged controls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .classification import classify_dataset
from .errors import DataError
from .features import FeatureScaling, extract_features
from .frames import (
    FUTURE_LEN,
    HISTORY_LEN,
    Frame,
    Neighbor,
    Route,
    TrafficLight,
    load_frames,
    save_frames,
)
from .kinematics import KinematicParams, step, wrap_angle

SCENE_STEPS = 200  # 20 s at 10 Hz
WINDOW = HISTORY_LEN + FUTURE_LEN
WINDOW_STRIDE = 10
SCENE_KINDS = ("straight", "curve", "intersection")

COMFORT_LAT_ACC = 1.5  # m/s^2 at lateral_aggressiveness = 1
COMFORT_BRAKE = 1.7  # m/s^2 used for red-light approach
STOP_MARGIN = 3.0  # m short of the stop line


@dataclass(frozen=True)
class StyleParams:
    """Knobs separating driving styles.

    speed_fraction: target speed as a fraction of the limit (0.4 .. 1.1).
    lateral_aggressiveness: scales the comfortable lateral acceleration in
        curves (0.5 gentle .. 3 sporty).
    smoothness: low-pass factor on the acceleration command in [0, 1);
        higher means softer jerk.
    lane_offset: preferred signed offset from the centerline in meters.
    """

    speed_fraction: float = 0.9
    lateral_aggressiveness: float = 1.0
    smoothness: float = 0.5
    lane_offset: float = 0.0


AGGRESSIVE_STYLE = StyleParams(
    speed_fraction=1.05, lateral_aggressiveness=2.5, smoothness=0.1, lane_offset=0.45
)
GENTLE_STYLE = StyleParams(
    speed_fraction=0.6, lateral_aggressiveness=0.7, smoothness=0.8, lane_offset=-0.35
)
NEUTRAL_STYLE = StyleParams()


@dataclass(eq=False)
class SceneNeighbor:
    log: np.ndarray  # (SCENE_STEPS, 4)
    half_length: float = 2.4
    half_width: float = 1.0


@dataclass(eq=False)
class Scene:
    scene_id: str
    dt: float
    route: np.ndarray  # (M, 4)
    curvature: np.ndarray  # (M,)
    light_states: list  # per-step "green"/"red"/"none"
    stop_line_s: float
    ego_log: np.ndarray  # (SCENE_STEPS, 4)
    ego_controls: np.ndarray  # (SCENE_STEPS - 1, 2)
    neighbors: list = field(default_factory=list)

    def __len__(self):
        return self.ego_log.shape[0]


def _route_from_pieces(pieces, v_lim):
    """Concatenate (x, y, tangent, curvature) piece arrays into route + curvature."""
    xy = np.concatenate([p[0] for p in pieces])
    tan = np.concatenate([p[1] for p in pieces])
    kappa = np.concatenate([p[2] for p in pieces])
    samples = np.column_stack([xy, tan, np.full(len(tan), v_lim)])
    return samples, kappa


def _straight_piece(start, heading, length):
    n = int(length)
    ts = np.arange(n, dtype=float)
    xy = start[None, :] + ts[:, None] * np.array([np.cos(heading), np.sin(heading)])
    return xy, np.full(n, heading), np.zeros(n)


def _arc_piece(start, heading, radius, sign, length):
    n = int(length)
    ts = np.arange(n, dtype=float)
    dpsi = sign * ts / radius
    # center sits perpendicular-left (sign=+1) or -right (sign=-1) of the heading
    center = start + sign * radius * np.array([-np.sin(heading), np.cos(heading)])
    ang0 = np.arctan2(start[1] - center[1], start[0] - center[0])
    ang = ang0 + dpsi
    xy = center[None, :] + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    tangents = wrap_angle(heading + dpsi)
    kappa = np.full(n, sign / radius)
    return xy, tangents, kappa


def _build_route(kind, rng):
    heading = float(rng.uniform(0, 2 * np.pi))
    origin = rng.uniform(-50, 50, size=2)
    v_lim = float(rng.uniform(9.0, 14.0))
    if kind == "curve":
        radius = float(rng.uniform(20.0, 100.0))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        entry = float(rng.uniform(60, 110))
        arc_len = float(np.clip(rng.uniform(1.2, 2.2) * radius, 60, 260))
        p1 = _straight_piece(origin, heading, entry)
        start2 = p1[0][-1] + np.array([np.cos(heading), np.sin(heading)])
        p2 = _arc_piece(start2, heading, radius, sign, arc_len)
        exit_heading = float(p2[1][-1])
        start3 = p2[0][-1] + np.array([np.cos(exit_heading), np.sin(exit_heading)])
        p3 = _straight_piece(start3, exit_heading, 600)
        samples, kappa = _route_from_pieces([p1, p2, p3], v_lim)
    else:
        samples, kappa = _route_from_pieces(
            [_straight_piece(origin, heading, 700)], v_lim
        )
    return samples, kappa, v_lim


def _light_schedule(kind, rng, v_lim):
    if kind != "intersection":
        return ["none"] * SCENE_STEPS, 0.0
    stop_line_s = float(rng.uniform(120.0, 170.0))
    if rng.random() < 0.4:
        return ["green"] * SCENE_STEPS, stop_line_s
    switch = int(rng.integers(60, 140))
    return ["red"] * switch + ["green"] * (SCENE_STEPS - switch), stop_line_s


def _scripted_ego(route, curvature, light_states, stop_line_s, style, rng, params):
    """Drive the route with style-dependent targets; returns (log, controls)."""
    geometry = Route(route)
    v_lim = float(route[0, 3])
    v0 = min(0.8 * style.speed_fraction * v_lim, 0.9 * v_lim)
    start_s = 5.0
    p0 = geometry.point_at(start_s)
    state = np.array([p0[0], p0[1], p0[2], v0])
    # nudge laterally toward the preferred offset so offsets show up immediately
    state[0] += -np.sin(p0[2]) * style.lane_offset
    state[1] += np.cos(p0[2]) * style.lane_offset

    log = np.empty((SCENE_STEPS, 4))
    controls = np.empty((SCENE_STEPS - 1, 2))
    log[0] = state
    a_prev = 0.0
    arc = geometry.arc
    for t in range(SCENE_STEPS - 1):
        s_arc, lat, phi, _ = geometry.locate(state[:2])
        i0 = int(np.searchsorted(arc, s_arc))
        i1 = int(np.searchsorted(arc, s_arc + 25.0))
        kappa_ahead = float(np.max(np.abs(curvature[i0 : max(i1, i0 + 1)]))) if i0 < len(
            curvature
        ) else 0.0

        v_target = style.speed_fraction * v_lim
        if kappa_ahead > 1e-9:
            v_curve = np.sqrt(COMFORT_LAT_ACC * style.lateral_aggressiveness / kappa_ahead)
            v_target = min(v_target, v_curve)
        braking_for_light = False
        if light_states[t] == "red" and s_arc < stop_line_s:
            gap = stop_line_s - STOP_MARGIN - s_arc
            v_stop = 0.0 if gap <= 0.5 else float(np.sqrt(2.0 * COMFORT_BRAKE * gap))
            if v_stop < v_target:
                v_target = v_stop
                braking_for_light = True

        a_cmd = float(np.clip(1.2 * (v_target - state[3]), -4.0, 3.0))
        # the command low-pass models jerk preference, but a red light must
        # override it: never cross the stop line while red
        a_t = a_cmd if braking_for_light else (
            style.smoothness * a_prev + (1.0 - style.smoothness) * a_cmd
        )
        a_prev = a_t

        lookahead = max(3.0, 0.8 * state[3])
        phi_la = float(geometry.point_at(s_arc + lookahead)[2])
        heading_err = float(wrap_angle(phi_la - state[2]))
        lat_err = style.lane_offset - lat
        delta = float(
            np.clip(
                1.0 * heading_err + np.arctan2(0.9 * lat_err, max(state[3], 2.0)),
                -params.delta_max,
                params.delta_max,
            )
        )
        controls[t] = (a_t, delta)
        state = step(state, controls[t], params)
        log[t + 1] = state
    return log, controls


def _neighbor_logs(kind, route, stop_line_s, rng, params):
    """Scripted traffic around the ego; all logs are (SCENE_STEPS, 4)."""
    geometry = Route(route)
    dt = params.dt
    v_lim = float(route[0, 3])
    total_len = geometry.arc[-1]
    neighbors = []

    def along_route(s0, speed, flip=False, lateral=0.0):
        log = np.empty((SCENE_STEPS, 4))
        for t in range(SCENE_STEPS):
            s = s0 - speed * t * dt if flip else s0 + speed * t * dt
            s = float(np.clip(s, 0.0, total_len - 1.0))
            px, py, phi, _ = geometry.point_at(s)
            heading = wrap_angle(phi + np.pi) if flip else phi
            log[t] = (
                px - np.sin(phi) * lateral,
                py + np.cos(phi) * lateral,
                heading,
                speed,
            )
        return log

    # lead vehicle on the same lane
    lead_speed = float(rng.uniform(0.65, 0.95) * v_lim)
    neighbors.append(SceneNeighbor(log=along_route(float(rng.uniform(35, 60)), lead_speed)))
    # oncoming vehicle on the opposite lane
    onc_speed = float(rng.uniform(0.6, 0.9) * v_lim)
    neighbors.append(
        SceneNeighbor(
            log=along_route(float(rng.uniform(150, 260)), onc_speed, flip=True, lateral=3.5)
        )
    )
    if kind == "intersection":
        # crossing vehicle passing the intersection box
        cross_anchor = geometry.point_at(stop_line_s + 8.0)
        perp = cross_anchor[2] + np.pi / 2.0
        speed = float(rng.uniform(6.0, 9.0))
        t0 = float(rng.uniform(2.0, 8.0))
        log = np.empty((SCENE_STEPS, 4))
        for t in range(SCENE_STEPS):
            d = (t * dt - t0) * speed
            log[t] = (
                cross_anchor[0] + np.cos(perp) * d,
                cross_anchor[1] + np.sin(perp) * d,
                wrap_angle(perp),
                speed,
            )
        neighbors.append(SceneNeighbor(log=log))
    if rng.random() < 0.5:
        # parked car off the driving lane
        spot = geometry.point_at(float(rng.uniform(60, 100)))
        log = np.tile(
            [spot[0] - np.sin(spot[2]) * -3.2, spot[1] + np.cos(spot[2]) * -3.2,
             spot[2], 0.0],
            (SCENE_STEPS, 1),
        )
        neighbors.append(SceneNeighbor(log=log))
    return neighbors


def generate_scenes(count, style=NEUTRAL_STYLE, seed=0, params=None, kinds=SCENE_KINDS):
    """Deterministic list of scenes; scene i draws from default_rng([seed, i])."""
    if count < 1:
        raise ValueError("count must be >= 1")
    params = params or KinematicParams()
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        kind = kinds[i % len(kinds)]
        route, kappa, v_lim = _build_route(kind, rng)
        light_states, stop_line_s = _light_schedule(kind, rng, v_lim)
        ego_log, ego_controls = _scripted_ego(
            route, kappa, light_states, stop_line_s, style, rng, params
        )
        neighbors = _neighbor_logs(kind, route, stop_line_s, rng, params)
        scenes.append(
            Scene(
                scene_id=f"{kind}-{seed}-{i}",
                dt=params.dt,
                route=route,
                curvature=kappa,
                light_states=light_states,
                stop_line_s=stop_line_s,
                ego_log=ego_log,
                ego_controls=ego_controls,
                neighbors=neighbors,
            )
        )
    return scenes


ROUTE_BEHIND = 30  # meters of route kept behind the ego in a frame
ROUTE_AHEAD = 150  # meters kept ahead


def _frame_route(scene_route, geometry, ego_pos, stop_line_s):
    """Trim the scene route around the ego; returns (route, frame-local stop s)."""
    i_cur = geometry.nearest_index(ego_pos)
    lo = max(0, i_cur - ROUTE_BEHIND)
    hi = min(len(scene_route), i_cur + ROUTE_AHEAD)
    offset = float(geometry.arc[lo])
    return scene_route[lo:hi].copy(), stop_line_s - offset


def segment_frames(scene):
    """Slide a (history + future) window over the scene with a 1 s stride."""
    n = len(scene)
    if n < WINDOW:
        raise ValueError(f"scene has {n} steps; windowing needs at least {WINDOW}")
    geometry = Route(scene.route)
    frames = []
    for index, start in enumerate(range(0, n - WINDOW + 1, WINDOW_STRIDE)):
        cur = start + HISTORY_LEN - 1
        ego_pos = scene.ego_log[cur, :2]
        order = sorted(
            range(len(scene.neighbors)),
            key=lambda k: float(np.hypot(*(scene.neighbors[k].log[cur, :2] - ego_pos))),
        )[:10]
        neighbors = [
            Neighbor(history=scene.neighbors[k].log[start : start + HISTORY_LEN].copy(),
                     half_length=scene.neighbors[k].half_length,
                     half_width=scene.neighbors[k].half_width)
            for k in order
        ]
        futures = (
            np.stack(
                [
                    scene.neighbors[k].log[
                        start + HISTORY_LEN : start + WINDOW, :2
                    ].copy()
                    for k in order
                ]
            )
            if order
            else np.zeros((0, FUTURE_LEN, 2))
        )
        route, stop_s = _frame_route(scene.route, geometry, ego_pos, scene.stop_line_s)
        frames.append(
            Frame(
                scene_id=scene.scene_id,
                frame_index=index,
                dt=scene.dt,
                ego_history=scene.ego_log[start : start + HISTORY_LEN].copy(),
                neighbors=neighbors,
                route=route,
                traffic_light=TrafficLight(
                    state=scene.light_states[cur], stop_line_s=stop_s
                ),
                ego_future_gt=scene.ego_log[start + HISTORY_LEN : start + WINDOW].copy(),
                neighbor_futures_gt=futures,
            )
        )
    return frames


def lloyd_kmeans(X, k, seed=0, max_iter=100):
    """Plain Lloyd iteration with k-means++ seeding on rows of X.

    Returns (centers, assignments, inertia_history); converged when the
    assignments stop changing.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n < k:
        raise DataError(f"k-means needs at least {k} points, got {n}")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j:] = X[rng.integers(n, size=k - j)]
            break
        centers[j] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))

    assign = np.full(n, -1)
    inertia_history = []
    for _ in range(max_iter):
        dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dists, axis=1)
        inertia_history.append(float(dists[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = X[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers, assign, inertia_history


def kmeans_user_split(frames, k=3, per_cluster=64, beta=FeatureScaling(), seed=0):
    """Cluster frames by their ground-truth style features; return user datasets.

    Runs Lloyd's k-means on the scaled 7-dim feature vectors and returns
    (user_datasets, centers) where user_datasets[j] holds the per_cluster
    frames nearest center j.
    """
    frames = list(frames)
    if len(frames) < k * per_cluster:
        raise DataError(
            f"need at least {k * per_cluster} frames for {k} users of {per_cluster}, "
            f"got {len(frames)}"
        )
    X = np.stack(
        [extract_features(f.future_trajectory(), f, beta).as_array() for f in frames]
    )
    centers, _, _ = lloyd_kmeans(X, k, seed=seed)
    users = []
    for j in range(k):
        d = np.sum((X - centers[j]) ** 2, axis=1)
        nearest = np.argsort(d, kind="stable")[:per_cluster]
        users.append([frames[i] for i in nearest])
    return users, centers


def write_dataset_manifest(path, frames, style_name, seed):
    """Counts per class plus provenance, next to a frame file."""
    counts = {
        cls.value: len(v) for cls, v in classify_dataset(frames).items()
    }
    doc = {
        "frames": len(frames),
        "counts_per_class": counts,
        "style": style_name,
        "seed": seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


__all__ = [
    "AGGRESSIVE_STYLE",
    "GENTLE_STYLE",
    "NEUTRAL_STYLE",
    "Scene",
    "SceneNeighbor",
    "StyleParams",
    "generate_scenes",
    "kmeans_user_split",
    "lloyd_kmeans",
    "load_frames",
    "save_frames",
    "segment_frames",
    "write_dataset_manifest",
]
