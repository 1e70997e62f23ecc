import numpy as np
import pytest

from styleplan.costs import COST_TERMS, CostWeights, residuals
from styleplan.errors import SolverFailure
from styleplan.kinematics import AgentState, ControlSequence
from styleplan.optimizer import SolverConfig, gauss_newton, refine, refine_with_grad, refine_vjp

from conftest import make_frame, make_neighbor, neighbor_future_const


def start_of(frame):
    return AgentState.from_array(frame.current_state())


def objective(pi, frame, w):
    return residuals(pi, start_of(frame), frame, w).objective()


def test_zero_iterations_is_identity():
    frame = make_frame(speed=9.0)
    pi0 = ControlSequence(np.random.default_rng(0).normal(size=(10, 2)) * 0.1)
    cfg = SolverConfig(iterations=0)
    out = refine(pi0, start_of(frame), frame, CostWeights(), cfg)
    np.testing.assert_array_equal(out.controls, pi0.controls)
    out2, d_w, d_pi0 = refine_with_grad(pi0, start_of(frame), frame, CostWeights(), cfg)
    np.testing.assert_array_equal(out2.controls, pi0.controls)
    np.testing.assert_array_equal(d_pi0, np.eye(20))
    np.testing.assert_array_equal(d_w, np.zeros((20, 9)))


def test_pure_quadratic_one_step_exact():
    rng = np.random.default_rng(3)
    target = rng.normal(size=12)
    cfg = SolverConfig(step_size=1.0, iterations=1, damping=0.0)
    x, trace = gauss_newton(
        lambda x: x - target, lambda x: np.eye(12), rng.normal(size=12), cfg
    )
    np.testing.assert_allclose(x, target, atol=1e-8)
    assert trace[0].accepted

    # general linear least squares lands on the normal-equation solution
    A = rng.normal(size=(20, 8))
    b = rng.normal(size=20)
    x_star = np.linalg.solve(A.T @ A, A.T @ b)
    x, _ = gauss_newton(lambda x: A @ x - b, lambda x: A, rng.normal(size=8), cfg)
    np.testing.assert_allclose(x, x_star, atol=1e-8)


def test_solver_failure_carries_last_iterate():
    cfg = SolverConfig(iterations=1)
    x0 = np.ones(3)
    with pytest.raises(SolverFailure) as exc:
        gauss_newton(lambda x: x, lambda x: np.full((3, 3), np.nan), x0, cfg)
    np.testing.assert_array_equal(exc.value.last_controls, x0)


def test_objective_non_increasing_on_random_frames():
    rng = np.random.default_rng(11)
    w = CostWeights()
    cfg = SolverConfig()  # the production setting: step 0.4, 2 iterations
    for _ in range(20):
        speed = float(rng.uniform(2, 14))
        frame = make_frame(
            speed=speed,
            v_lim=float(rng.uniform(8, 15)),
            neighbors=[make_neighbor((rng.uniform(5, 30), rng.uniform(-3, 3)), speed=speed)],
            neighbor_futures=neighbor_future_const((10.0, 1.0), speed=speed)[None],
        )
        pi0 = ControlSequence(
            np.column_stack([rng.uniform(-2, 2, 15), rng.uniform(-0.3, 0.3, 15)])
        )
        refined = refine(pi0, start_of(frame), frame, w, cfg)
        assert objective(refined, frame, w) <= objective(pi0, frame, w) + 1e-12


def test_fixed_point_stays_put():
    frame = make_frame(speed=12.0, v_lim=12.0)
    pi0 = ControlSequence(np.zeros((20, 2)))
    refined = refine(pi0, start_of(frame), frame, CostWeights())
    np.testing.assert_allclose(refined.controls, pi0.controls, atol=1e-10)


def test_refine_with_grad_value_bit_identical():
    rng = np.random.default_rng(4)
    frame = make_frame(speed=8.0)
    pi0 = ControlSequence(
        np.column_stack([rng.uniform(-1, 1, 8), rng.uniform(-0.2, 0.2, 8)])
    )
    a = refine(pi0, start_of(frame), frame, CostWeights())
    b, _, _ = refine_with_grad(pi0, start_of(frame), frame, CostWeights())
    assert np.array_equal(a.controls, b.controls)


def _grad_test_instance():
    rng = np.random.default_rng(21)
    frame = make_frame(
        speed=8.0,
        v_lim=10.0,
        neighbors=[make_neighbor((9.0, 1.2), speed=7.5)],
        neighbor_futures=neighbor_future_const((9.0, 1.2), speed=7.5)[None],
    )
    T = 5
    pi0 = ControlSequence(
        np.column_stack([rng.uniform(-1, 1, T), rng.uniform(-0.2, 0.2, T)])
    )
    return frame, pi0


def test_unrolled_gradients_match_finite_differences():
    frame, pi0 = _grad_test_instance()
    start = start_of(frame)
    w = CostWeights()
    cfg = SolverConfig()
    refined, d_w, d_pi0 = refine_with_grad(pi0, start, frame, w, cfg)
    T = len(pi0)

    h = 1e-6
    fd_pi0 = np.zeros((2 * T, 2 * T))
    for col in range(2 * T):
        plus = pi0.controls.reshape(-1).copy()
        minus = plus.copy()
        plus[col] += h
        minus[col] -= h
        rp = refine(ControlSequence(plus.reshape(T, 2)), start, frame, w, cfg)
        rm = refine(ControlSequence(minus.reshape(T, 2)), start, frame, w, cfg)
        fd_pi0[:, col] = (rp.controls - rm.controls).reshape(-1) / (2 * h)
    scale = np.maximum(np.abs(fd_pi0), 1.0)
    assert np.max(np.abs(d_pi0 - fd_pi0) / scale) < 1e-3

    fd_w = np.zeros((2 * T, 9))
    base = w.as_array()
    for col in range(9):
        plus = base.copy()
        minus = base.copy()
        plus[col] += h
        minus[col] -= h
        rp = refine(pi0, start, frame, CostWeights.from_array(plus), cfg)
        rm = refine(pi0, start, frame, CostWeights.from_array(minus), cfg)
        fd_w[:, col] = (rp.controls - rm.controls).reshape(-1) / (2 * h)
    scale = np.maximum(np.abs(fd_w), 1.0)
    assert np.max(np.abs(d_w - fd_w) / scale) < 1e-3


def test_vjp_agrees_with_full_jacobians():
    frame, pi0 = _grad_test_instance()
    start = start_of(frame)
    w = CostWeights()
    cfg = SolverConfig()
    refined, d_w, d_pi0 = refine_with_grad(pi0, start, frame, w, cfg)
    rng = np.random.default_rng(0)
    g = rng.normal(size=2 * len(pi0))
    refined2, g_pi0, g_w = refine_vjp(pi0, start, frame, w, g, cfg)
    assert np.array_equal(refined.controls, refined2.controls)
    np.testing.assert_allclose(g_pi0, g @ d_pi0, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(g_w, g @ d_w, rtol=1e-9, atol=1e-12)


def test_dead_terms_have_zero_weight_columns():
    # green light and no neighbors: traffic and safety residuals are inactive
    frame = make_frame(speed=8.0, v_lim=10.0)
    rng = np.random.default_rng(6)
    pi0 = ControlSequence(
        np.column_stack([rng.uniform(-1, 1, 5), rng.uniform(-0.2, 0.2, 5)])
    )
    w = CostWeights(acc=0.0, jerk=0.0, steer=0.0, rate=0.0, pos=0.0, head=0.0)
    _, d_w, _ = refine_with_grad(pi0, start_of(frame), frame, w)
    i_traffic = COST_TERMS.index("traffic")
    i_safety = COST_TERMS.index("safety")
    assert np.all(d_w[:, i_traffic] == 0.0)
    assert np.all(d_w[:, i_safety] == 0.0)
