import numpy as np
import pytest

from styleplan.frames import Frame, Neighbor, TrafficLight
from styleplan.kinematics import AgentState, ControlSequence, KinematicParams, rollout


def straight_route(length=400.0, v_lim=12.0, x0=-120.0, y=0.0):
    """Route along +x sampled at 1 m: columns (x, y, tangent, speed_limit)."""
    n = int(length) + 1
    samples = np.zeros((n, 4))
    samples[:, 0] = x0 + np.arange(n)
    samples[:, 1] = y
    samples[:, 3] = v_lim
    return samples


def constant_speed_history(speed, dt=0.1, heading=0.0, end_xy=(0.0, 0.0), steps=20):
    """History of `steps` states ending at end_xy moving at constant speed."""
    t = np.arange(-(steps - 1), 1, dtype=float) * dt * speed
    hist = np.zeros((steps, 4))
    hist[:, 0] = end_xy[0] + t * np.cos(heading)
    hist[:, 1] = end_xy[1] + t * np.sin(heading)
    hist[:, 2] = heading
    hist[:, 3] = speed
    return hist


def make_frame(
    speed=10.0,
    v_lim=12.0,
    route=None,
    neighbors=None,
    neighbor_futures=None,
    light=None,
    future_controls=None,
    dt=0.1,
    scene_id="test",
):
    """A synthetic frame: straight-road ego at constant speed unless overridden.

    future_controls, when given as an (50, 2) array, generates the ground
    truth future by rolling them out from the current state.
    """
    route = straight_route(v_lim=v_lim) if route is None else route
    hist = constant_speed_history(speed, dt=dt)
    params = KinematicParams(dt=dt)
    if future_controls is None:
        future_controls = np.zeros((50, 2))
    traj = rollout(
        AgentState.from_array(hist[-1]), ControlSequence(future_controls, dt), params
    )
    future = traj.states[1:]
    neighbors = neighbors or []
    if neighbor_futures is None:
        neighbor_futures = np.zeros((len(neighbors), 0, 2))
    return Frame(
        scene_id=scene_id,
        frame_index=0,
        dt=dt,
        ego_history=hist,
        neighbors=neighbors,
        route=route,
        traffic_light=light or TrafficLight(),
        ego_future_gt=future,
        neighbor_futures_gt=np.asarray(neighbor_futures, dtype=float),
    )


def make_neighbor(xy, speed=0.0, heading=0.0, dt=0.1, half_length=2.4, half_width=1.0):
    hist = constant_speed_history(speed, dt=dt, heading=heading, end_xy=xy)
    return Neighbor(history=hist, half_length=half_length, half_width=half_width)


def neighbor_future_const(xy, speed=0.0, heading=0.0, dt=0.1, steps=50):
    t = np.arange(1, steps + 1, dtype=float) * dt * speed
    out = np.zeros((steps, 2))
    out[:, 0] = xy[0] + t * np.cos(heading)
    out[:, 1] = xy[1] + t * np.sin(heading)
    return out


@pytest.fixture
def nominal_frame():
    """Ego tracking the centerline exactly at the speed limit, nothing around."""
    return make_frame(speed=12.0, v_lim=12.0)
