"""Fine-tuning toward a user's style with mixed expert/user batches.

Each fine-tuning step samples, per trajectory class, a batch that mixes
expert frames (proportion P) with user frames, then applies one plain
gradient-descent update of the combined objective: the imitation loss plus
alpha times the style-matching loss of the batch's selected plans against
the user's per-class feature expectation. Plans can optionally pass through
the differentiable nonlinear refinement before the style loss, in which
case gradients reach the cost weights as well.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .classification import TrajectoryClass, classify_dataset, classify_frame
from .costs import COST_TERMS, CostWeights
from .errors import DataError
from .features import FeatureScaling
from .irl import STYLE_CLASSES, StyleTarget, feature_expectation, irl_loss
from .kinematics import (
    AgentState,
    ControlSequence,
    KinematicParams,
    backprop_through_rollout,
    rollout,
    rollout_jacobians,
)
from .optimizer import SolverConfig, refine_vjp
from .policy import (
    ILLossConfig,
    PolicyGrads,
    backward,
    encode_scene,
    forward_with_cache,
    il_terms,
)

STRUCTURES = ("nn", "nn_cf")
UPDATE_TARGETS = ("nn", "cf", "nn_cf")


@dataclass(frozen=True)
class FineTuneConfig:
    alpha: float = 100.0
    expert_proportion: float = 0.5
    batch_size: int = 64
    steps: int = 100
    lr_nn: float = 1e-5
    lr_cf: float = 1e-3
    seed: int = 0
    structure: str = "nn"
    update_target: str = "nn"
    solver: SolverConfig = field(default_factory=SolverConfig)
    il: ILLossConfig = field(default_factory=ILLossConfig)
    scaling: FeatureScaling = field(default_factory=FeatureScaling)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not (0.0 <= self.expert_proportion <= 1.0):
            raise ValueError("expert_proportion must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")
        if self.update_target not in UPDATE_TARGETS:
            raise ValueError(f"update_target must be one of {UPDATE_TARGETS}")

    def batch_split(self):
        """(n_expert, n_user): floor the expert share, the remainder is user."""
        n_expert = math.floor(self.batch_size * self.expert_proportion)
        return n_expert, self.batch_size - n_expert

    def to_dict(self):
        doc = {
            "alpha": self.alpha,
            "expert_proportion": self.expert_proportion,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "lr_nn": self.lr_nn,
            "lr_cf": self.lr_cf,
            "seed": self.seed,
            "structure": self.structure,
            "update_target": self.update_target,
            "solver": {
                "step_size": self.solver.step_size,
                "iterations": self.solver.iterations,
                "damping": self.solver.damping,
            },
            "il": {
                "lambda1": self.il.lambda1,
                "lambda2": self.il.lambda2,
                "lambda3": self.il.lambda3,
            },
            "scaling": list(self.scaling.beta),
        }
        return doc

    @classmethod
    def from_dict(cls, doc):
        kwargs = dict(doc)
        if "solver" in kwargs:
            kwargs["solver"] = SolverConfig(**kwargs["solver"])
        if "il" in kwargs:
            kwargs["il"] = ILLossConfig(**kwargs["il"])
        if "scaling" in kwargs:
            kwargs["scaling"] = FeatureScaling(tuple(kwargs["scaling"]))
        return cls(**kwargs)


def sample_mixed_batch(expert_by_class, user_by_class, klass, cfg, rng):
    """floor(N*P) expert frames then N - floor(N*P) user frames, with replacement."""
    n_expert, n_user = cfg.batch_split()
    batch = []
    for count, pool, side in (
        (n_expert, expert_by_class.get(klass, []), "expert"),
        (n_user, user_by_class.get(klass, []), "user"),
    ):
        if count == 0:
            continue
        if not pool:
            raise DataError(f"{side} dataset has no frames of class {klass.value!r}")
        idx = rng.integers(0, len(pool), size=count)
        batch.extend(pool[i] for i in idx)
    return batch


@dataclass
class TilGrads:
    nn: PolicyGrads | None
    cf: np.ndarray | None


@dataclass
class TilBreakdown:
    loss_il: float
    loss_irl: float

    def total(self, alpha):
        return self.loss_il + alpha * self.loss_irl


def til_loss(params, cost_weights, batch, target: StyleTarget, cfg: FineTuneConfig,
             kin=KinematicParams()):
    """Combined loss and gradients for one single-class batch.

    Returns (total, TilGrads, TilBreakdown). The imitation part is the plain
    per-frame loss averaged over the batch; the style part compares the
    batch's selected plans (refined through the optimizer when structure is
    "nn_cf") against the class target. Gradients are populated per
    cfg.update_target; the others are None.
    """
    if not batch:
        raise ValueError("batch is empty")
    classes = {classify_frame(fr) for fr in batch}
    if len(classes) != 1:
        raise ValueError(f"batch mixes classes: {sorted(c.value for c in classes)}")
    klass = classes.pop()
    if not target.has(klass):
        raise ValueError(f"style target has no expectation for class {klass.value!r}")

    n = len(batch)
    want_nn = cfg.update_target in ("nn", "nn_cf")
    want_cf = cfg.update_target in ("cf", "nn_cf")
    refine_plans = cfg.structure == "nn_cf"

    nn_grads = None
    il_total = 0.0
    per_frame = []  # (out, cache, plan, refined_plan, frame)
    for frame in batch:
        enc = encode_scene(frame, params.config)
        out, cache = forward_with_cache(params, enc)
        breakdown, grads, extras = il_terms(params, frame, cfg.il, kin, out, cache)
        il_total += breakdown.total(cfg.il)
        if want_nn:
            if nn_grads is None:
                nn_grads = PolicyGrads.zeros_like(params)
            nn_grads.add_scaled(grads, 1.0 / n)
        best = extras["best"]
        plan = ControlSequence(out.plans[best].copy(), out.dt)
        per_frame.append((out, cache, best, plan, frame))
    loss_il = il_total / n

    cf_grads = np.zeros(len(COST_TERMS)) if want_cf else None
    frames = [fr for *_, fr in per_frame]
    starts = [AgentState.from_array(fr.current_state()) for fr in frames]

    if cfg.alpha == 0.0:
        # pure imitation: skip the style path entirely so gradients reduce
        # bit-exactly; the style loss is still reported for the log
        planned = [
            rollout(start, plan, kin)
            for start, (_, _, _, plan, _) in zip(starts, per_frame)
        ]
        loss_irl, _ = irl_loss(planned, frames, target, cfg.scaling)
        return loss_il, TilGrads(nn=nn_grads, cf=cf_grads), TilBreakdown(loss_il, loss_irl)

    # plans feeding the style loss: refined when the optimizer is in the path
    if refine_plans:
        from .optimizer import refine as refine_fn
        from .policy import predictions_for_frame

        neighbor_preds = [
            predictions_for_frame(out, fr) for (out, *_, fr) in per_frame
        ]
        style_plans = [
            refine_fn(plan, start, frame, cost_weights, cfg.solver, kin, preds)
            for (out, cache, best, plan, frame), start, preds in zip(
                per_frame, starts, neighbor_preds
            )
        ]
    else:
        neighbor_preds = [None] * n
        style_plans = [plan for (_, _, _, plan, _) in per_frame]
    planned = [rollout(start, sp, kin) for start, sp in zip(starts, style_plans)]

    loss_irl, state_grads = irl_loss(planned, frames, target, cfg.scaling)

    # pull style gradients back through rollout (and the optimizer when present)
    for i, ((out, cache, best, plan, frame), g_states) in enumerate(
        zip(per_frame, state_grads)
    ):
        start = starts[i]
        _, As, Bs = rollout_jacobians(start, style_plans[i], kin)
        d_style_plan = backprop_through_rollout(As, Bs, g_states)
        if refine_plans:
            _, d_pi0, d_w = refine_vjp(
                plan,
                start,
                frame,
                cost_weights,
                d_style_plan.reshape(-1),
                cfg.solver,
                kin,
                neighbor_preds[i],
            )
            d_plan = d_pi0.reshape(-1, 2)
            if want_cf:
                cf_grads += cfg.alpha * d_w
        else:
            d_plan = d_style_plan
        if want_nn:
            d_plans = np.zeros_like(out.plans)
            d_plans[best] = cfg.alpha * d_plan
            irl_nn = backward(
                params,
                cache,
                d_plans,
                np.zeros_like(out.logits),
                np.zeros_like(out.predictions),
            )
            nn_grads.add_scaled(irl_nn, 1.0)

    breakdown = TilBreakdown(loss_il=loss_il, loss_irl=loss_irl)
    return breakdown.total(cfg.alpha), TilGrads(nn=nn_grads, cf=cf_grads), breakdown


@dataclass
class FineTuneLogEntry:
    step: int
    klass: str
    loss_il: float
    loss_irl: float
    loss_til: float


def finetune(params, cost_weights, expert, user, cfg: FineTuneConfig,
             kin=KinematicParams()):
    """Run the full fine-tuning loop; returns (params, cost_weights, log).

    Stationary frames carry no style information and are excluded; each step
    visits the straight and turn classes in order, sampling a fresh mixed
    batch and applying one update per class. Deterministic given
    (seed, config, datasets).
    """
    expert_by_class = classify_dataset(expert)
    user_by_class = classify_dataset(user)
    for klass in STYLE_CLASSES:
        if not user_by_class[klass]:
            raise DataError(f"user dataset has no frames of class {klass.value!r}")

    target = feature_expectation(user, cfg.scaling)
    rng = np.random.default_rng(cfg.seed)
    log = []
    for step in range(1, cfg.steps + 1):
        for klass in STYLE_CLASSES:
            try:
                batch = sample_mixed_batch(expert_by_class, user_by_class, klass, cfg, rng)
                total, grads, breakdown = til_loss(
                    params, cost_weights, batch, target, cfg, kin
                )
            except (DataError, ValueError) as exc:
                raise type(exc)(
                    f"step {step}, class {klass.value}: {exc}"
                ) from exc
            if grads.nn is not None:
                params = params.updated(grads.nn, cfg.lr_nn)
            if grads.cf is not None:
                new_w = np.maximum(cost_weights.as_array() - cfg.lr_cf * grads.cf, 0.0)
                cost_weights = CostWeights.from_array(new_w)
            log.append(
                FineTuneLogEntry(
                    step=step,
                    klass=klass.value,
                    loss_il=breakdown.loss_il,
                    loss_irl=breakdown.loss_irl,
                    loss_til=breakdown.total(cfg.alpha),
                )
            )
    return params, cost_weights, log


def write_log_csv(log, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "class", "loss_il", "loss_irl", "loss_til"])
        for entry in log:
            writer.writerow(
                [entry.step, entry.klass, repr(entry.loss_il), repr(entry.loss_irl),
                 repr(entry.loss_til)]
            )
