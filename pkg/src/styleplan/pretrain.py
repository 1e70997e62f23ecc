"""Imitation pre-training over the pooled expert dataset.

Plain shuffled mini-batch gradient descent on the imitation loss. The
shuffle stream for epoch e is seeded by (seed, e), so a run saved after k
epochs and resumed with start_epoch=k reproduces an uninterrupted run
bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import TrainingFailure
from .kinematics import KinematicParams
from .policy import ILLossConfig, PolicyGrads, il_loss


def pretrain(
    params,
    expert,
    epochs=5,
    batch_size=64,
    lr=1e-3,
    seed=0,
    cfg=ILLossConfig(),
    kin=KinematicParams(),
    start_epoch=0,
):
    """Returns (trained params, per-epoch mean loss list)."""
    expert = list(expert)
    if not expert:
        raise ValueError("expert dataset is empty")
    losses = []
    step = 0
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(expert))
        epoch_loss = 0.0
        for lo in range(0, len(order), batch_size):
            batch = [expert[i] for i in order[lo : lo + batch_size]]
            grads = PolicyGrads.zeros_like(params)
            batch_loss = 0.0
            for frame in batch:
                loss, g = il_loss(params, frame, cfg, kin)
                batch_loss += loss
                grads.add_scaled(g, 1.0 / len(batch))
            step += 1
            if not np.isfinite(batch_loss):
                raise TrainingFailure(
                    f"non-finite loss at update step {step}", step=step
                )
            epoch_loss += batch_loss
            params = params.updated(grads, lr)
        losses.append(epoch_loss / len(expert))
    return params, losses
