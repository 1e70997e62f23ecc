"""Damped Gauss-Newton refinement of a control sequence.

refine() runs a fixed, small number of Gauss-Newton iterations on the
stacked cost residuals (step direction -(J^T J + lam I)^-1 J^T r, scaled by
a constant step size). A step that would increase the objective is rejected
and retried with doubled damping, so the objective is non-increasing.

refine_with_grad() additionally returns the Jacobians of the refined
controls w.r.t. the cost weights and the warm-start controls, obtained by
differentiating the performed iterations in sequence (unrolling). The value
path stays in numpy; the unroll is replayed with torch autograd using the
recorded damping/acceptance decisions, with hinge activations and route
associations frozen per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costs import COST_TERMS, plan_context, _assemble
from .errors import SolverFailure
from .kinematics import ControlSequence, KinematicParams

MAX_RETRIES = 5


@dataclass(frozen=True)
class SolverConfig:
    step_size: float = 0.4
    iterations: int = 2
    damping: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.step_size <= 1.0):
            raise ValueError("step_size must be in (0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")


@dataclass
class IterationRecord:
    lam: float
    accepted: bool


def gauss_newton(residual_fn, jacobian_fn, x0, cfg):
    """Generic damped Gauss-Newton loop; returns (x, trace).

    residual_fn(x) -> r; jacobian_fn(x) -> J (rows residuals, cols entries
    of x). Each iteration solves the damped normal equations and accepts the
    scaled step only if the objective does not increase; otherwise damping
    doubles (up to MAX_RETRIES times) and the iterate is kept.
    """
    x = np.asarray(x0, dtype=float).copy()
    trace = []
    for _ in range(cfg.iterations):
        r = residual_fn(x)
        J = jacobian_fn(x)
        obj = 0.5 * float(r @ r)
        lam = cfg.damping
        accepted = False
        for attempt in range(MAX_RETRIES + 1):
            M = J.T @ J + lam * np.eye(x.size)
            try:
                delta = np.linalg.solve(M, -(J.T @ r))
            except np.linalg.LinAlgError:
                delta = None
            if delta is None or not np.all(np.isfinite(delta)):
                if attempt == MAX_RETRIES:
                    raise SolverFailure(
                        "normal equations unsolvable after damping retries",
                        last_controls=x,
                    )
                lam = max(lam * 2.0, 1e-12)
                continue
            x_new = x + cfg.step_size * delta
            r_new = residual_fn(x_new)
            if 0.5 * float(r_new @ r_new) <= obj:
                x = x_new
                accepted = True
                break
            lam = max(lam * 2.0, 1e-12)
        trace.append(IterationRecord(lam=lam, accepted=accepted))
    return x, trace


def _closures(pi0, start, frame, w, cfg, params, neighbor_predictions):
    T = len(pi0)
    params = params or KinematicParams(dt=pi0.dt)
    ctx = plan_context(frame, T, neighbor_predictions)
    start_arr = start.as_array() if hasattr(start, "as_array") else np.asarray(start, dtype=float)

    def residual(x):
        seq = ControlSequence(x.reshape(T, 2), pi0.dt)
        res, _, _ = _assemble(seq, start_arr, ctx, w, params, want_jacobian=False)
        return res.values

    def jacobian(x):
        seq = ControlSequence(x.reshape(T, 2), pi0.dt)
        _, _, J = _assemble(seq, start_arr, ctx, w, params, want_jacobian=True)
        return J

    return ctx, params, start_arr, residual, jacobian


def refine(pi0, start, frame, w, cfg=SolverConfig(), params=None, neighbor_predictions=None):
    """Refined control sequence after cfg.iterations damped Gauss-Newton steps."""
    seq, _ = _refine_traced(pi0, start, frame, w, cfg, params, neighbor_predictions)
    return seq


def _refine_traced(pi0, start, frame, w, cfg, params=None, neighbor_predictions=None):
    if cfg.iterations == 0:
        return pi0.copy(), []
    _, params, _, residual, jacobian = _closures(
        pi0, start, frame, w, cfg, params, neighbor_predictions
    )
    x, trace = gauss_newton(residual, jacobian, pi0.controls.reshape(-1), cfg)
    return ControlSequence(x.reshape(len(pi0), 2), pi0.dt), trace


def refine_with_grad(
    pi0, start, frame, w, cfg=SolverConfig(), params=None, neighbor_predictions=None
):
    """Refine and differentiate the unrolled iterations.

    Returns (refined, d_controls/d_weights with shape (2T, 9),
    d_controls/d_warm_start with shape (2T, 2T)). The refined value is
    bit-identical to refine()'s output under the same config.
    """
    T = len(pi0)
    if cfg.iterations == 0:
        return pi0.copy(), np.zeros((2 * T, len(COST_TERMS))), np.eye(2 * T)
    refined, trace = _refine_traced(pi0, start, frame, w, cfg, params, neighbor_predictions)
    if not any(rec.accepted for rec in trace):
        return refined, np.zeros((2 * T, len(COST_TERMS))), np.eye(2 * T)

    from ._unroll import unrolled_jacobians

    params = params or KinematicParams(dt=pi0.dt)
    ctx = plan_context(frame, T, neighbor_predictions)
    start_arr = start.as_array() if hasattr(start, "as_array") else np.asarray(start, dtype=float)
    d_pi0, d_w = unrolled_jacobians(
        pi0.controls.reshape(-1), w.as_array(), start_arr, ctx, params, cfg, trace
    )
    return refined, d_w, d_pi0


def refine_vjp(
    pi0,
    start,
    frame,
    w,
    grad_refined,
    cfg=SolverConfig(),
    params=None,
    neighbor_predictions=None,
):
    """Refine and pull one gradient w.r.t. the refined controls back to the inputs.

    grad_refined has shape (2T,) (or (T, 2)); returns
    (refined, d_loss/d_warm_start (2T,), d_loss/d_weights (9,)). Cheaper than
    refine_with_grad when only a single downstream gradient is needed.
    """
    T = len(pi0)
    g = np.asarray(grad_refined, dtype=float).reshape(-1)
    if cfg.iterations == 0:
        return pi0.copy(), g.copy(), np.zeros(len(COST_TERMS))
    refined, trace = _refine_traced(pi0, start, frame, w, cfg, params, neighbor_predictions)
    if not any(rec.accepted for rec in trace):
        return refined, g.copy(), np.zeros(len(COST_TERMS))

    from ._unroll import unrolled_vjp

    params = params or KinematicParams(dt=pi0.dt)
    ctx = plan_context(frame, T, neighbor_predictions)
    start_arr = start.as_array() if hasattr(start, "as_array") else np.asarray(start, dtype=float)
    d_pi0, d_w = unrolled_vjp(
        pi0.controls.reshape(-1), w.as_array(), start_arr, ctx, params, cfg, trace, g
    )
    return refined, d_pi0, d_w
