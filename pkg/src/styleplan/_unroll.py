"""Torch replay of the Gauss-Newton unroll (internal).

The numpy solver decides damping and step acceptance; this module replays
the accepted iterations as a torch graph so the refined controls can be
differentiated w.r.t. the cost weights and the warm-start controls. Hinge
activations and route/neighbor associations are recomputed from detached
states, which freezes them per iteration exactly like the numpy Jacobian
does. All tensors are float64.
"""

from __future__ import annotations

import numpy as np
import torch

TWO_PI = 2.0 * np.pi


def _wrap(theta):
    return -((np.pi - theta) % TWO_PI - np.pi)


def _masked(raw, bound):
    # value clamped to [-bound, bound]; gradient zero at and beyond the bound
    raw_det = raw.detach()
    mask = (raw_det.abs() < bound).to(raw.dtype)
    return torch.clamp(raw_det, -bound, bound) + mask * (raw - raw_det)


class _Geometry:
    """Torch constants shared by every replay iteration."""

    def __init__(self, start_arr, ctx, params, dt):
        as_t = lambda a: torch.as_tensor(np.asarray(a, dtype=float), dtype=torch.float64)
        self.start = as_t(start_arr)
        self.route_xy = as_t(ctx.route_xy)
        self.route_tangent = as_t(ctx.route_tangent)
        self.route_vlim = as_t(ctx.route_vlim)
        self.route_arc = as_t(ctx.route_arc)
        self.red_light = ctx.red_light
        self.stop_line_s = ctx.stop_line_s
        self.preds = as_t(ctx.neighbor_preds)
        self.d_safe = ctx.d_safe
        self.params = params
        self.dt = dt

    def build_selectors(self, T):
        E_a = np.zeros((T, 2 * T))
        E_d = np.zeros((T, 2 * T))
        E_a[np.arange(T), 2 * np.arange(T)] = 1.0
        E_d[np.arange(T), 2 * np.arange(T) + 1] = 1.0
        D = np.zeros((T, T))
        D[np.arange(1, T), np.arange(1, T)] = 1.0
        D[np.arange(1, T), np.arange(T - 1)] = -1.0
        self.E_a = torch.as_tensor(E_a)
        self.E_d = torch.as_tensor(E_d)
        self.D_a = torch.as_tensor(D @ E_a) / self.dt
        self.D_d = torch.as_tensor(D @ E_d) / self.dt


def _rollout_chain(x, geom):
    """Differentiable rollout plus the chain d states / d controls.

    x is the flat control vector (2T,). Returns (states (T+1, 4) stacked,
    S (T+1, 4, 2T)).
    """
    p = geom.params
    dt = p.dt
    L = p.wheelbase
    T = x.shape[0] // 2
    a = _masked(x[0::2], p.a_max)
    delta = _masked(x[1::2], p.delta_max)

    states = [geom.start]
    S_rows = [torch.zeros((4, 2 * T), dtype=torch.float64)]
    for t in range(T):
        sx, sy, th, v = states[t][0], states[t][1], states[t][2], states[t][3]
        c, s = torch.cos(th), torch.sin(th)
        tan_d = torch.tan(delta[t])
        sec2 = 1.0 / torch.cos(delta[t]) ** 2
        vnext_raw = v + a[t] * dt
        clamp_free = (vnext_raw.detach() >= 0.0).to(x.dtype)

        nx = sx + v * c * dt
        ny = sy + v * s * dt
        nth = _wrap(th + v * tan_d / L * dt)
        nv = clamp_free * vnext_raw
        states.append(torch.stack([nx, ny, nth, nv]))

        one = torch.ones((), dtype=torch.float64)
        zero = torch.zeros((), dtype=torch.float64)
        A = torch.stack(
            [
                torch.stack([one, zero, -v * s * dt, c * dt]),
                torch.stack([zero, one, v * c * dt, s * dt]),
                torch.stack([zero, zero, one, tan_d / L * dt]),
                torch.stack([zero, zero, zero, clamp_free]),
            ]
        )
        # columns of B w.r.t. the raw controls include the saturation masks,
        # which _masked() already encodes in a/delta; rebuild them explicitly
        a_free = (x[2 * t].detach().abs() < p.a_max).to(x.dtype)
        d_free = (x[2 * t + 1].detach().abs() < p.delta_max).to(x.dtype)
        B2 = v * sec2 / L * dt * d_free
        B3 = dt * clamp_free * a_free
        pad_left = torch.zeros((4, 2 * t), dtype=torch.float64)
        pad_right = torch.zeros((4, 2 * (T - t - 1)), dtype=torch.float64)
        Bblock = torch.stack(
            [
                torch.stack([zero, zero]),
                torch.stack([zero, zero]),
                torch.stack([zero, B2]),
                torch.stack([B3, zero]),
            ]
        )
        S_rows.append(A @ S_rows[t] + torch.cat([pad_left, Bblock, pad_right], dim=1))
    return torch.stack(states), torch.stack(S_rows)


def _residual_and_jac(x, w, geom):
    """Weighted residuals (9T,) and their Jacobian (9T, 2T), both differentiable."""
    T = x.shape[0] // 2
    dt = geom.dt
    states, S = _rollout_chain(x, geom)
    pos = states[1:, :2]
    theta = states[1:, 2]
    v = states[1:, 3]
    a = x[0::2]
    delta = x[1::2]

    # frozen route association from detached positions
    pos_det = pos.detach()
    diff = pos_det[:, None, :] - geom.route_xy[None, :, :]
    idx = torch.argmin((diff**2).sum(-1), dim=1)
    phi = geom.route_tangent[idx]
    vlim = geom.route_vlim[idx]
    arc = geom.route_arc[idx]
    anchor = geom.route_xy[idx]
    cos_p, sin_p = torch.cos(phi), torch.sin(phi)
    dx = pos[:, 0] - anchor[:, 0]
    dy = pos[:, 1] - anchor[:, 1]
    lon = cos_p * dx + sin_p * dy
    lat = -sin_p * dx + cos_p * dy
    s_arc = arc + lon

    zero_row = torch.zeros((1,), dtype=torch.float64)
    r_speed = w[0] * (v - vlim)
    r_acc = w[1] * a
    r_jerk = w[2] * torch.cat([zero_row, (a[1:] - a[:-1]) / dt])
    r_steer = w[3] * delta
    r_rate = w[4] * torch.cat([zero_row, (delta[1:] - delta[:-1]) / dt])
    r_pos = w[5] * lat
    r_head = w[6] * _wrap(theta - phi)

    if geom.red_light:
        over = s_arc - geom.stop_line_s
        t_mask = (over.detach() > 0.0).to(x.dtype)
        r_traffic = w[7] * t_mask * over
    else:
        t_mask = torch.zeros(T, dtype=torch.float64)
        r_traffic = torch.zeros(T, dtype=torch.float64)

    K = geom.preds.shape[0]
    if K:
        d = pos[None, :, :] - geom.preds  # (K, T, 2)
        gaps = torch.sqrt((d**2).sum(-1) + 0.0)
        s_mask = ((geom.d_safe - gaps.detach()) > 0.0).to(x.dtype)
        r_safety = w[8] * (s_mask * (geom.d_safe - gaps)).sum(0)
    else:
        r_safety = torch.zeros(T, dtype=torch.float64)

    r = torch.cat(
        [r_speed, r_acc, r_jerk, r_steer, r_rate, r_pos, r_head, r_traffic, r_safety]
    )

    Sx, Sy, Sth, Sv = S[1:, 0, :], S[1:, 1, :], S[1:, 2, :], S[1:, 3, :]
    J_speed = w[0] * Sv
    J_acc = w[1] * geom.E_a
    J_jerk = w[2] * geom.D_a
    J_steer = w[3] * geom.E_d
    J_rate = w[4] * geom.D_d
    J_pos = w[5] * (-sin_p[:, None] * Sx + cos_p[:, None] * Sy)
    J_head = w[6] * Sth
    if geom.red_light:
        J_traffic = w[7] * t_mask[:, None] * (cos_p[:, None] * Sx + sin_p[:, None] * Sy)
    else:
        J_traffic = torch.zeros((T, 2 * T), dtype=torch.float64)
    if K:
        safe_gaps = gaps + (gaps.detach() <= 0.0).to(x.dtype)  # avoid 0/0 on overlap
        units = d / safe_gaps[..., None]
        contrib = -(units[..., 0:1] * Sx[None] + units[..., 1:2] * Sy[None])  # (K, T, 2T)
        J_safety = w[8] * (s_mask[..., None] * contrib).sum(0)
    else:
        J_safety = torch.zeros((T, 2 * T), dtype=torch.float64)

    J = torch.cat(
        [J_speed, J_acc, J_jerk, J_steer, J_rate, J_pos, J_head, J_traffic, J_safety], dim=0
    )
    return r, J


def _replay(pi0, w, geom, cfg, trace):
    x = pi0
    n = x.shape[0]
    eye = torch.eye(n, dtype=torch.float64)
    for rec in trace:
        if not rec.accepted:
            continue
        r, J = _residual_and_jac(x, w, geom)
        M = J.T @ J + rec.lam * eye
        delta = torch.linalg.solve(M, -(J.T @ r))
        x = x + cfg.step_size * delta
    return x


def _prepare(pi0_flat, w_arr, start_arr, ctx, params, requires_grad):
    geom = _Geometry(start_arr, ctx, params, params.dt)
    geom.build_selectors(pi0_flat.size // 2)
    pi0_t = torch.tensor(pi0_flat, dtype=torch.float64, requires_grad=requires_grad)
    w_t = torch.tensor(w_arr, dtype=torch.float64, requires_grad=requires_grad)
    return geom, pi0_t, w_t


def unrolled_jacobians(pi0_flat, w_arr, start_arr, ctx, params, cfg, trace):
    """Full Jacobians (d_refined/d_warm_start, d_refined/d_weights) as numpy arrays."""
    geom, pi0_t, w_t = _prepare(pi0_flat, w_arr, start_arr, ctx, params, requires_grad=False)
    fn = lambda p, wv: _replay(p, wv, geom, cfg, trace)
    J_pi0, J_w = torch.autograd.functional.jacobian(fn, (pi0_t, w_t), vectorize=True)
    return J_pi0.numpy(), J_w.numpy()


def unrolled_vjp(pi0_flat, w_arr, start_arr, ctx, params, cfg, trace, grad_out):
    """One backward pass: gradients of g . refined w.r.t. warm start and weights."""
    geom, pi0_t, w_t = _prepare(pi0_flat, w_arr, start_arr, ctx, params, requires_grad=True)
    out = _replay(pi0_t, w_t, geom, cfg, trace)
    g = torch.as_tensor(np.asarray(grad_out, dtype=float), dtype=torch.float64)
    d_pi0, d_w = torch.autograd.grad(out, (pi0_t, w_t), grad_outputs=g, allow_unused=True)
    d_pi0 = d_pi0.numpy() if d_pi0 is not None else np.zeros_like(pi0_flat)
    d_w = d_w.numpy() if d_w is not None else np.zeros_like(w_arr)
    return d_pi0, d_w
