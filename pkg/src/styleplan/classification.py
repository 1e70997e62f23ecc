"""Rule-based classification of a frame's ground-truth future trajectory.

Frames are Stationary when the future carries no meaningful motion (they
hold no style information and are skipped during fine-tuning), Turn when
the heading change exceeds pi/6 with a consistent lateral displacement, and
Straight otherwise. The rules are total: every frame maps to exactly one
class.
"""

from __future__ import annotations

import enum

import numpy as np

from .kinematics import wrap_angle

HEADING_THRESHOLD = np.pi / 6.0
SPEED_THRESHOLD = 2.0  # m/s
DISPLACEMENT_THRESHOLD = 2.0  # m


class TrajectoryClass(enum.Enum):
    STATIONARY = "stationary"
    STRAIGHT = "straight"
    TURN = "turn"


def classify_frame(frame) -> TrajectoryClass:
    """Classify by the ground-truth future relative to the current ego pose.

    delta_heading is the wrapped heading change from the current state to
    the future endpoint; lateral displacement is the endpoint's signed
    lateral offset in the current heading frame. A turn needs the heading
    change and the lateral displacement to agree in sign; the pi/6 boundary
    itself counts as straight.
    """
    cur = frame.current_state()
    future = frame.ego_future_gt
    if future.shape[0] == 0:
        raise ValueError("frame has no ground-truth future")

    max_speed = float(np.max(future[:, 3]))
    disp = float(np.hypot(*(future[-1, :2] - cur[:2])))
    if max_speed < SPEED_THRESHOLD or disp < DISPLACEMENT_THRESHOLD:
        return TrajectoryClass.STATIONARY

    d_heading = float(wrap_angle(future[-1, 2] - cur[2]))
    rel = future[-1, :2] - cur[:2]
    lateral = float(-np.sin(cur[2]) * rel[0] + np.cos(cur[2]) * rel[1])
    if (d_heading > HEADING_THRESHOLD and lateral > 0.0) or (
        d_heading < -HEADING_THRESHOLD and lateral < 0.0
    ):
        return TrajectoryClass.TURN
    return TrajectoryClass.STRAIGHT


def classify_dataset(frames):
    """Partition frames into {TrajectoryClass: list[Frame]} (all classes present as keys)."""
    out = {cls: [] for cls in TrajectoryClass}
    for frame in frames:
        out[classify_frame(frame)].append(frame)
    return out
