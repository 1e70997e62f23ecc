"""Open-loop metric suite and report emission.

Each frame is planned independently (encode, forward, pick the best-scored
mode, optionally refine, roll out) and compared against the logged ground
truth: displacement of the plan at 1 s and 3 s, neighbor prediction ADE/FDE
over the horizon, oriented-box collision with logged neighbors, road
departure, stop-line violations under a red light, and the style error
against a per-class feature expectation. Reports serialize to CSV plus a
JSON mirror.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classification import TrajectoryClass, classify_frame
from .costs import CostWeights
from .features import FeatureScaling, FeatureVector, extract_features, style_error
from .irl import STYLE_CLASSES, StyleTarget
from .kinematics import AgentState, KinematicParams, rollout
from .optimizer import SolverConfig, refine
from .policy import encode_scene, forward, predictions_for_frame, select_best

REPORT_COLUMNS = (
    "model",
    "domain",
    "plan_err_1s",
    "plan_err_3s",
    "ade_5s",
    "fde_5s",
    "collision_pct",
    "off_route_pct",
    "red_light_pct",
    "style_error",
    "frames",
)


@dataclass(frozen=True)
class EvalConfig:
    ego_half_length: float = 2.4
    ego_half_width: float = 1.0
    half_road_width: float = 3.5
    scaling: FeatureScaling = field(default_factory=FeatureScaling)
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class MetricsReport:
    model: str
    domain: str
    plan_error_1s: float
    plan_error_3s: float
    ade_5s: float
    fde_5s: float
    collision_rate: float  # percent of frames
    off_route_rate: float
    red_light_rate: float
    style_error: float
    frame_count: int

    def row(self):
        return [
            self.model,
            self.domain,
            repr(self.plan_error_1s),
            repr(self.plan_error_3s),
            repr(self.ade_5s),
            repr(self.fde_5s),
            repr(self.collision_rate),
            repr(self.off_route_rate),
            repr(self.red_light_rate),
            repr(self.style_error),
            self.frame_count,
        ]

    def to_dict(self):
        return {
            "model": self.model,
            "domain": self.domain,
            "plan_err_1s": self.plan_error_1s,
            "plan_err_3s": self.plan_error_3s,
            "ade_5s": self.ade_5s,
            "fde_5s": self.fde_5s,
            "collision_pct": self.collision_rate,
            "off_route_pct": self.off_route_rate,
            "red_light_pct": self.red_light_rate,
            "style_error": self.style_error,
            "frames": self.frame_count,
        }


def rectangles_overlap(c1, heading1, hl1, hw1, c2, heading2, hl2, hw2):
    """Separating-axis test for two oriented rectangles (touching counts as overlap)."""
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    d = c2 - c1
    for heading in (heading1, heading2):
        ax = np.array([np.cos(heading), np.sin(heading)])
        ay = np.array([-np.sin(heading), np.cos(heading)])
        for axis in (ax, ay):
            r1 = _projected_radius(axis, heading1, hl1, hw1)
            r2 = _projected_radius(axis, heading2, hl2, hw2)
            if abs(float(axis @ d)) > r1 + r2:
                return False
    return True


def _projected_radius(axis, heading, hl, hw):
    ax = np.array([np.cos(heading), np.sin(heading)])
    ay = np.array([-np.sin(heading), np.cos(heading)])
    return hl * abs(float(axis @ ax)) + hw * abs(float(axis @ ay))


def _future_headings(positions, fallback):
    """Headings along a position-only future, holding the last value when stopped."""
    n = positions.shape[0]
    headings = np.empty(n)
    prev = fallback
    for t in range(n):
        if t + 1 < n:
            d = positions[t + 1] - positions[t]
        else:
            d = positions[t] - positions[t - 1] if n > 1 else np.zeros(2)
        if float(np.hypot(d[0], d[1])) > 1e-6:
            prev = float(np.arctan2(d[1], d[0]))
        headings[t] = prev
    return headings


def make_planner(params, cost_weights=None, structure="nn", solver=SolverConfig(),
                 kin=KinematicParams()):
    """Build planner_fn(frame) -> (trajectory, world predictions or None)."""
    cost_weights = cost_weights or CostWeights()

    def planner(frame):
        enc = encode_scene(frame, params.config)
        out = forward(params, enc)
        plan = select_best(out)
        preds = predictions_for_frame(out, frame)
        if structure == "nn_cf":
            start = AgentState.from_array(frame.current_state())
            plan = refine(plan, start, frame, cost_weights, solver, kin, preds)
        traj = rollout(AgentState.from_array(frame.current_state()), plan, kin)
        return traj, preds

    return planner


def evaluate_planner(planner_fn, dataset, target: StyleTarget, cfg=EvalConfig(),
                     model="model", domain="out") -> MetricsReport:
    """Run the metric suite over a dataset with an arbitrary planner callable."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")

    plan_1s = []
    plan_3s = []
    ade = []
    fde = []
    collisions = 0
    off_route = 0
    red_light = 0
    class_feats = {cls: [] for cls in STYLE_CLASSES}

    for frame in dataset:
        traj, preds = planner_fn(frame)
        states = traj.states
        T = states.shape[0] - 1
        gt = frame.ego_future_gt

        i1, i3 = min(10, T), min(30, T)
        plan_1s.append(float(np.hypot(*(states[i1, :2] - gt[i1 - 1, :2]))))
        plan_3s.append(float(np.hypot(*(states[i3, :2] - gt[i3 - 1, :2]))))

        futures = frame.neighbor_futures_gt
        if preds is not None and futures.size and futures.shape[1] > 0:
            horizon = min(T, futures.shape[1], preds.shape[1])
            disp = np.hypot(
                *(preds[:, :horizon] - futures[:, :horizon]).transpose(2, 0, 1)
            )
            ade.append(float(disp.mean()))
            fde.append(float(disp[:, -1].mean()))

        route = frame.route_geometry
        hit = False
        off = False
        red = False
        headings = [
            _future_headings(futures[k], float(frame.neighbors[k].history[-1, 2]))
            for k in range(len(frame.neighbors))
        ] if futures.size else []
        for t in range(1, T + 1):
            s_arc, lat, _, _ = route.locate(states[t, :2])
            if abs(lat) > cfg.half_road_width:
                off = True
            if (
                frame.traffic_light.state == "red"
                and s_arc > frame.traffic_light.stop_line_s
            ):
                red = True
            if not hit and futures.size and futures.shape[1] > 0:
                idx = min(t - 1, futures.shape[1] - 1)
                for k, nb in enumerate(frame.neighbors):
                    if rectangles_overlap(
                        states[t, :2],
                        states[t, 2],
                        cfg.ego_half_length,
                        cfg.ego_half_width,
                        futures[k, idx],
                        headings[k][idx],
                        nb.half_length,
                        nb.half_width,
                    ):
                        hit = True
                        break
        collisions += int(hit)
        off_route += int(off)
        red_light += int(red)

        cls = classify_frame(frame)
        if cls in class_feats:
            class_feats[cls].append(extract_features(traj, frame, cfg.scaling).as_array())

    style_errors = []
    for cls in STYLE_CLASSES:
        if class_feats[cls] and target.has(cls):
            mean_vec = FeatureVector.from_array(np.mean(class_feats[cls], axis=0))
            style_errors.append(style_error(mean_vec, target.features[cls]))

    n = len(dataset)
    return MetricsReport(
        model=model,
        domain=domain,
        plan_error_1s=float(np.mean(plan_1s)),
        plan_error_3s=float(np.mean(plan_3s)),
        ade_5s=float(np.mean(ade)) if ade else 0.0,
        fde_5s=float(np.mean(fde)) if fde else 0.0,
        collision_rate=100.0 * collisions / n,
        off_route_rate=100.0 * off_route / n,
        red_light_rate=100.0 * red_light / n,
        style_error=float(np.mean(style_errors)) if style_errors else 0.0,
        frame_count=n,
    )


def evaluate(params, cost_weights, dataset, target, structure="nn", cfg=EvalConfig(),
             model="model", domain="out", kin=KinematicParams()) -> MetricsReport:
    """Plan every frame with the policy (optionally refined) and score it."""
    planner = make_planner(params, cost_weights, structure, cfg.solver, kin)
    return evaluate_planner(planner, dataset, target, cfg, model=model, domain=domain)


def emit_report(reports, path):
    """Write reports as CSV with the canonical header, plus a JSON mirror."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for report in reports:
            writer.writerow(report.row())
    mirror = path.with_suffix(".json")
    with open(mirror, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)
    return path
