"""Compact learned planner: scene encoding, multi-modal MLP, imitation loss.

The policy flattens a frame into a fixed-length, ego-centric feature vector
and runs it through a two-hidden-layer tanh MLP with three heads: candidate
control sequences (squashed into the kinematic bounds), one score logit per
candidate, and neighbor position predictions in the ego frame. Training
gradients are computed by hand (backprop through the heads, the tanh stack,
and the kinematic rollout); no autodiff framework is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
import json

import numpy as np

from .kinematics import (
    AgentState,
    ControlSequence,
    KinematicParams,
    backprop_through_rollout,
    rollout,
    rollout_jacobians,
    wrap_angle,
)

POS_SCALE = 20.0
SPEED_SCALE = 10.0
STOP_DIST_SCALE = 50.0


@dataclass(frozen=True)
class PolicyConfig:
    n_modes: int = 3
    horizon: int = 50
    hidden: int = 256
    n_neighbors: int = 10
    history_len: int = 20
    n_route_points: int = 10
    route_spacing: float = 5.0
    a_max: float = 5.0
    delta_max: float = 0.6

    @property
    def encoding_dim(self):
        ego = 4 * self.history_len
        nbrs = 4 * self.history_len * self.n_neighbors
        route = 3 * self.n_route_points
        light = 4
        return ego + nbrs + route + light

    @property
    def plan_dim(self):
        return self.n_modes * self.horizon * 2

    @property
    def pred_dim(self):
        return self.n_neighbors * self.horizon * 2


@dataclass(frozen=True)
class ILLossConfig:
    lambda1: float = 1.0  # prediction
    lambda2: float = 1.0  # score
    lambda3: float = 1.0  # imitation

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")


ARRAY_FIELDS = ("W1", "b1", "W2", "b2", "Wp", "bp", "Ws", "bs", "Wq", "bq")


@dataclass(eq=False)
class PolicyParams:
    config: PolicyConfig
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wp: np.ndarray  # plan head
    bp: np.ndarray
    Ws: np.ndarray  # score head
    bs: np.ndarray
    Wq: np.ndarray  # prediction head
    bq: np.ndarray

    def arrays(self):
        return {name: getattr(self, name) for name in ARRAY_FIELDS}

    def n_parameters(self):
        return sum(a.size for a in self.arrays().values())

    def updated(self, grads, lr):
        """New params after one plain gradient-descent step."""
        new = {
            name: getattr(self, name) - lr * getattr(grads, name)
            for name in ARRAY_FIELDS
        }
        return replace(self, **new)


@dataclass(eq=False)
class PolicyGrads:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wp: np.ndarray
    bp: np.ndarray
    Ws: np.ndarray
    bs: np.ndarray
    Wq: np.ndarray
    bq: np.ndarray

    @classmethod
    def zeros_like(cls, params):
        return cls(**{n: np.zeros_like(a) for n, a in params.arrays().items()})

    def add_scaled(self, other, scale=1.0):
        for name in ARRAY_FIELDS:
            getattr(self, name).__iadd__(scale * getattr(other, name))
        return self

    def scale(self, k):
        for name in ARRAY_FIELDS:
            getattr(self, name).__imul__(k)
        return self

    def as_vector(self):
        return np.concatenate([getattr(self, n).reshape(-1) for n in ARRAY_FIELDS])


def init_policy_params(config=PolicyConfig(), seed=0) -> PolicyParams:
    """Xavier-style initialization; head weights small so initial plans hold speed."""
    rng = np.random.default_rng(seed)
    D, H = config.encoding_dim, config.hidden
    return PolicyParams(
        config=config,
        W1=rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, H)),
        b1=np.zeros(H),
        W2=rng.normal(0.0, 1.0 / np.sqrt(H), size=(H, H)),
        b2=np.zeros(H),
        Wp=rng.normal(0.0, 0.01 / np.sqrt(H), size=(H, config.plan_dim)),
        bp=np.zeros(config.plan_dim),
        Ws=rng.normal(0.0, 0.01 / np.sqrt(H), size=(H, config.n_modes)),
        bs=np.zeros(config.n_modes),
        Wq=rng.normal(0.0, 0.01 / np.sqrt(H), size=(H, config.pred_dim)),
        bq=np.zeros(config.pred_dim),
    )


@dataclass(eq=False)
class SceneEncoding:
    vector: np.ndarray
    neighbor_mask: np.ndarray  # (n_neighbors,) bool, True where a real neighbor fills the slot
    neighbor_order: list  # frame neighbor index per filled slot
    origin: np.ndarray  # (3,) x, y, theta of the ego at planning time
    dt: float


def _to_ego(points, origin):
    c, s = np.cos(origin[2]), np.sin(origin[2])
    dx = points[..., 0] - origin[0]
    dy = points[..., 1] - origin[1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def _to_world(points, origin):
    c, s = np.cos(origin[2]), np.sin(origin[2])
    lx, ly = points[..., 0], points[..., 1]
    return np.stack(
        [origin[0] + c * lx - s * ly, origin[1] + s * lx + c * ly], axis=-1
    )


def _encode_states(states, origin):
    """(n, 4) world states -> (n, 4) scaled ego-frame features."""
    rel = _to_ego(states[:, :2], origin) / POS_SCALE
    heading = wrap_angle(states[:, 2] - origin[2])
    speed = states[:, 3] / SPEED_SCALE
    return np.column_stack([rel, heading, speed])


def encode_scene(frame, config=PolicyConfig()) -> SceneEncoding:
    """Deterministic fixed-length encoding of a frame, ego-centric."""
    cur = frame.current_state()
    origin = cur[:3].copy()
    parts = [_encode_states(frame.ego_history, origin).reshape(-1)]

    order = frame.nearest_neighbor_order()[: config.n_neighbors]
    mask = np.zeros(config.n_neighbors, dtype=bool)
    block = np.zeros((config.n_neighbors, config.history_len, 4))
    for slot, k in enumerate(order):
        block[slot] = _encode_states(frame.neighbors[k].history, origin)
        mask[slot] = True
    parts.append(block.reshape(-1))

    route = frame.route_geometry
    s0, _, _, _ = route.locate(cur[:2])
    route_feats = np.zeros((config.n_route_points, 3))
    for k in range(config.n_route_points):
        sample = route.point_at(s0 + k * config.route_spacing)
        local = _to_ego(sample[None, :2], origin)[0]
        route_feats[k, 0] = local[1] / POS_SCALE
        route_feats[k, 1] = wrap_angle(sample[2] - origin[2])
        route_feats[k, 2] = sample[3] / SPEED_SCALE
    parts.append(route_feats.reshape(-1))

    light = frame.traffic_light
    one_hot = np.zeros(3)
    one_hot[("green", "red", "none").index(light.state)] = 1.0
    stop = 0.0
    if light.state != "none":
        stop = float(np.clip((light.stop_line_s - s0) / STOP_DIST_SCALE, -2.0, 2.0))
    parts.append(np.concatenate([one_hot, [stop]]))

    return SceneEncoding(
        vector=np.concatenate(parts),
        neighbor_mask=mask,
        neighbor_order=list(order),
        origin=origin,
        dt=frame.dt,
    )


@dataclass(eq=False)
class MultiModalOutput:
    plans: np.ndarray  # (n_modes, T, 2), squashed into kinematic bounds
    logits: np.ndarray  # (n_modes,)
    predictions: np.ndarray  # (n_neighbors, T, 2), ego frame
    dt: float
    origin: np.ndarray
    neighbor_mask: np.ndarray
    neighbor_order: list

    def predictions_world(self):
        return _to_world(self.predictions, self.origin)


@dataclass(eq=False)
class _ForwardCache:
    enc: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    plan_tanh: np.ndarray  # tanh of the raw plan head, shape (n_modes, T, 2)


def forward_with_cache(params: PolicyParams, enc: SceneEncoding):
    cfg = params.config
    x = enc.vector
    if x.shape != (cfg.encoding_dim,):
        raise ValueError(
            f"encoding has dimension {x.shape}, expected ({cfg.encoding_dim},)"
        )
    h1 = np.tanh(x @ params.W1 + params.b1)
    h2 = np.tanh(h1 @ params.W2 + params.b2)
    plan_tanh = np.tanh(h2 @ params.Wp + params.bp).reshape(cfg.n_modes, cfg.horizon, 2)
    plans = plan_tanh * np.array([cfg.a_max, cfg.delta_max])
    logits = h2 @ params.Ws + params.bs
    preds = (h2 @ params.Wq + params.bq).reshape(cfg.n_neighbors, cfg.horizon, 2)
    out = MultiModalOutput(
        plans=plans,
        logits=logits,
        predictions=preds,
        dt=enc.dt,
        origin=enc.origin,
        neighbor_mask=enc.neighbor_mask,
        neighbor_order=enc.neighbor_order,
    )
    return out, _ForwardCache(enc=x, h1=h1, h2=h2, plan_tanh=plan_tanh)


def forward(params: PolicyParams, enc: SceneEncoding) -> MultiModalOutput:
    out, _ = forward_with_cache(params, enc)
    return out


def backward(params, cache, d_plans, d_logits, d_preds) -> PolicyGrads:
    """Backprop head gradients to all parameters.

    d_plans is w.r.t. the squashed plans (n_modes, T, 2); d_logits (n_modes,);
    d_preds (n_neighbors, T, 2) w.r.t. the ego-frame predictions.
    """
    cfg = params.config
    bounds = np.array([cfg.a_max, cfg.delta_max])
    d_plan_raw = (d_plans * bounds * (1.0 - cache.plan_tanh**2)).reshape(-1)
    d_pred_raw = np.asarray(d_preds, dtype=float).reshape(-1)
    d_logits = np.asarray(d_logits, dtype=float)

    dh2 = params.Wp @ d_plan_raw + params.Ws @ d_logits + params.Wq @ d_pred_raw
    dh2_pre = dh2 * (1.0 - cache.h2**2)
    dh1 = params.W2 @ dh2_pre
    dh1_pre = dh1 * (1.0 - cache.h1**2)
    return PolicyGrads(
        W1=np.outer(cache.enc, dh1_pre),
        b1=dh1_pre,
        W2=np.outer(cache.h1, dh2_pre),
        b2=dh2_pre,
        Wp=np.outer(cache.h2, d_plan_raw),
        bp=d_plan_raw,
        Ws=np.outer(cache.h2, d_logits),
        bs=d_logits,
        Wq=np.outer(cache.h2, d_pred_raw),
        bq=d_pred_raw,
    )


def select_best(output: MultiModalOutput) -> ControlSequence:
    """The plan with the maximal score logit; ties go to the lowest mode index."""
    best = int(np.argmax(output.logits))
    return ControlSequence(output.plans[best].copy(), output.dt)


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _softmax(z):
    e = np.exp(z - np.max(z))
    return e / e.sum()


@dataclass
class ILBreakdown:
    prediction: float
    score: float
    imitation: float

    def total(self, cfg):
        return (
            cfg.lambda1 * self.prediction
            + cfg.lambda2 * self.score
            + cfg.lambda3 * self.imitation
        )


def il_terms(params, frame, cfg, kin, out, cache):
    """Loss pieces and head gradients given an already-computed forward pass.

    Returns (breakdown, grads, extras) where grads are w.r.t. the parameters
    for the weighted total, and extras carries the per-mode rollouts.
    """
    pcfg = params.config
    T = pcfg.horizon
    if frame.ego_future_gt.shape[0] < T:
        raise ValueError("frame lacks a ground-truth ego future for the horizon")
    gt_pos = frame.ego_future_gt[:T, :2]
    start = AgentState.from_array(frame.current_state())

    # roll out every mode (endpoint choice for the score target)
    mode_trajs = []
    for m in range(pcfg.n_modes):
        mode_trajs.append(rollout(start, ControlSequence(out.plans[m], out.dt), kin))
    endpoints = np.stack([t.states[-1, :2] for t in mode_trajs])
    target_mode = int(np.argmin(np.hypot(*(endpoints - gt_pos[-1]).T)))

    best = int(np.argmax(out.logits))
    traj_b, As, Bs = rollout_jacobians(
        start, ControlSequence(out.plans[best], out.dt), kin
    )
    err = traj_b.states[1:, :2] - gt_pos
    l_imit = float(np.mean(smooth_l1(err)))
    dstates = np.zeros((T + 1, 4))
    dstates[1:, :2] = smooth_l1_grad(err) / err.size
    d_ctrl = backprop_through_rollout(As, Bs, dstates)
    d_plans = np.zeros_like(out.plans)
    d_plans[best] = cfg.lambda3 * d_ctrl

    # neighbor prediction loss in the ego frame, masked to present slots
    d_preds = np.zeros_like(out.predictions)
    n_present = int(out.neighbor_mask.sum())
    if n_present:
        futures = frame.neighbor_futures_gt
        if futures.shape[1] < T:
            raise ValueError("frame lacks ground-truth neighbor futures for the horizon")
        l_pred_sum = 0.0
        denom = n_present * T * 2
        for slot, k in enumerate(out.neighbor_order):
            gt_ego = _to_ego(futures[k, :T], out.origin)
            e = out.predictions[slot] - gt_ego
            l_pred_sum += float(np.sum(smooth_l1(e)))
            d_preds[slot] = cfg.lambda1 * smooth_l1_grad(e) / denom
        l_pred = l_pred_sum / denom
    else:
        l_pred = 0.0

    probs = _softmax(out.logits)
    l_score = float(-np.log(max(probs[target_mode], 1e-300)))
    d_logits = cfg.lambda2 * (probs - np.eye(pcfg.n_modes)[target_mode])

    grads = backward(params, cache, d_plans, d_logits, d_preds)
    breakdown = ILBreakdown(prediction=l_pred, score=l_score, imitation=l_imit)
    return breakdown, grads, {"mode_trajectories": mode_trajs, "best": best}


def predictions_for_frame(out: MultiModalOutput, frame):
    """World-frame neighbor predictions indexed like frame.neighbors.

    Encoded slots carry the policy's predictions; any neighbor that did not
    fit the encoding falls back to constant-velocity extrapolation.
    """
    from .frames import constant_velocity_predictions

    horizon = out.predictions.shape[1]
    preds = constant_velocity_predictions(frame, horizon)
    world = out.predictions_world()
    for slot, k in enumerate(out.neighbor_order):
        preds[k] = world[slot]
    return preds


def il_loss(params, frame, cfg=ILLossConfig(), kin=KinematicParams()):
    """Imitation-learning loss and its parameter gradient for one frame."""
    enc = encode_scene(frame, params.config)
    out, cache = forward_with_cache(params, enc)
    breakdown, grads, _ = il_terms(params, frame, cfg, kin, out, cache)
    return breakdown.total(cfg), grads


# ---------------------------------------------------------------------------
# checkpointing: npz with a JSON config header; round-trips bit-exactly
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(params: PolicyParams, path):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": {f.name: getattr(params.config, f.name) for f in fields(PolicyConfig)},
    }
    header_bytes = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:  # write the exact path (np.savez would append .npz)
        np.savez(fh, __header__=header_bytes, **params.arrays())


def load_checkpoint(path) -> PolicyParams:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {header.get('format_version')}")
        config = PolicyConfig(**header["config"])
        arrays = {name: data[name].copy() for name in ARRAY_FIELDS}
    return PolicyParams(config=config, **arrays)
