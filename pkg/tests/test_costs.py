import numpy as np
import pytest

from styleplan.costs import COST_TERMS, CostWeights, residual_jacobian, residuals
from styleplan.frames import TrafficLight
from styleplan.kinematics import AgentState, ControlSequence

from conftest import make_frame, make_neighbor, neighbor_future_const, straight_route

TABLE_WEIGHTS = (0.1, 0.5, 0.1, 0.01, 0.5, 0.5, 5.0, 10.0, 10.0)


def start_of(frame):
    return AgentState.from_array(frame.current_state())


def test_default_weights_match_hand_crafted_table():
    np.testing.assert_array_equal(CostWeights().as_array(), TABLE_WEIGHTS)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        CostWeights(speed=-0.1)


def test_nominal_driving_all_residuals_zero():
    frame = make_frame(speed=12.0, v_lim=12.0)
    pi = ControlSequence(np.zeros((50, 2)))
    res = residuals(pi, start_of(frame), frame, CostWeights())
    np.testing.assert_array_equal(res.values, np.zeros(9 * 50))


def test_red_light_overrun_hinge():
    route = straight_route(v_lim=12.0)
    # ego at x=0 moving 2 m/s; route starts at x=-120 so arc(x) = x + 120
    frame = make_frame(
        speed=2.0, route=route, light=TrafficLight(state="red", stop_line_s=129.0)
    )
    pi = ControlSequence(np.zeros((50, 2)))
    res = residuals(pi, start_of(frame), frame, CostWeights())
    traffic = res.term("traffic")
    assert traffic[-1] == pytest.approx(10.0 * 1.0, abs=1e-9)
    # steps before the stop line contribute nothing
    assert traffic[10] == 0.0
    # same plan under a green light is free
    frame_green = make_frame(speed=2.0, route=route)
    res_green = residuals(pi, start_of(frame_green), frame_green, CostWeights())
    assert np.all(res_green.term("traffic") == 0.0)


def test_zero_weight_eliminates_term():
    frame = make_frame(speed=9.0)
    rng = np.random.default_rng(0)
    pi = ControlSequence(
        np.column_stack([rng.uniform(-2, 2, 30), rng.uniform(-0.3, 0.3, 30)])
    )
    w = CostWeights(jerk=0.0)
    res, J = residual_jacobian(pi, start_of(frame), frame, w)
    assert np.all(res.term("jerk") == 0.0)
    i = COST_TERMS.index("jerk")
    assert np.all(J[i * 30 : (i + 1) * 30] == 0.0)


def test_weight_linearity():
    frame = make_frame(speed=9.0)
    rng = np.random.default_rng(1)
    pi = ControlSequence(
        np.column_stack([rng.uniform(-2, 2, 30), rng.uniform(-0.3, 0.3, 30)])
    )
    base = residuals(pi, start_of(frame), frame, CostWeights(pos=0.5))
    scaled = residuals(pi, start_of(frame), frame, CostWeights(pos=1.5))
    np.testing.assert_allclose(scaled.term("pos"), 3.0 * base.term("pos"), rtol=1e-12)
    np.testing.assert_array_equal(scaled.term("speed"), base.term("speed"))


def test_objective_invariant_under_entry_reorder():
    frame = make_frame(speed=9.0)
    pi = ControlSequence(np.ones((20, 2)) * 0.1)
    res = residuals(pi, start_of(frame), frame, CostWeights())
    rng = np.random.default_rng(2)
    perm = rng.permutation(res.values.size)
    assert res.objective() == pytest.approx(
        0.5 * float(res.values[perm] @ res.values[perm]), rel=1e-12
    )


def test_steer_row_is_exactly_its_weight():
    frame = make_frame(speed=9.0)
    pi = ControlSequence(np.full((15, 2), 0.05))
    _, J = residual_jacobian(pi, start_of(frame), frame, CostWeights())
    i = COST_TERMS.index("steer")
    for t in range(15):
        row = J[i * 15 + t]
        assert row[2 * t + 1] == pytest.approx(0.01)
        mask = np.ones(30, dtype=bool)
        mask[2 * t + 1] = False
        assert np.all(row[mask] == 0.0)


def test_inactive_safety_hinge_rows_zero():
    # only distant traffic: hinge never activates
    frame = make_frame(
        speed=9.0,
        neighbors=[make_neighbor((200.0, 50.0))],
        neighbor_futures=neighbor_future_const((200.0, 50.0))[None],
    )
    pi = ControlSequence(np.zeros((20, 2)))
    res, J = residual_jacobian(pi, start_of(frame), frame, CostWeights())
    i = COST_TERMS.index("safety")
    assert np.all(res.term("safety") == 0.0)
    assert np.all(J[i * 20 : (i + 1) * 20] == 0.0)


def test_missing_route_rejected():
    frame = make_frame(speed=9.0)
    frame.route = np.zeros((0, 4))
    with pytest.raises(ValueError):
        residuals(ControlSequence(np.zeros((5, 2))), start_of(frame), frame, CostWeights())


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(17)
    frame = make_frame(
        speed=8.0,
        neighbors=[make_neighbor((12.0, 0.5), speed=7.0)],
        neighbor_futures=neighbor_future_const((12.0, 0.5), speed=7.0)[None],
        light=TrafficLight(state="red", stop_line_s=140.0),
    )
    T = 20
    controls = np.column_stack(
        [rng.uniform(-1.5, 1.5, T), rng.uniform(-0.25, 0.25, T)]
    )
    pi = ControlSequence(controls)
    start = start_of(frame)
    w = CostWeights()
    _, J = residual_jacobian(pi, start, frame, w)

    h = 1e-6
    worst = 0.0
    for col in range(2 * T):
        plus = controls.reshape(-1).copy()
        minus = plus.copy()
        plus[col] += h
        minus[col] -= h
        rp = residuals(ControlSequence(plus.reshape(T, 2)), start, frame, w).values
        rm = residuals(ControlSequence(minus.reshape(T, 2)), start, frame, w).values
        fd = (rp - rm) / (2 * h)
        scale = np.maximum(np.abs(fd), 1.0)
        worst = max(worst, float(np.max(np.abs(J[:, col] - fd) / scale)))
    assert worst < 1e-4
