"""scikit-learn style estimators wrapping the training pipelines.

ImitationPlanner.fit pre-trains the policy on expert frames; predict plans a
trajectory per frame. StyleFineTuner.fit adapts a fitted planner toward the
style of the user frames it is given (expert frames arrive as a fit
parameter). Both expose get_params/set_params, so they compose with
scikit-learn model selection out of the box.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .costs import CostWeights
from .evaluation import EvalConfig, evaluate_planner, make_planner
from .irl import feature_expectation
from .kinematics import KinematicParams
from .optimizer import SolverConfig
from .policy import ILLossConfig, PolicyConfig, init_policy_params
from .pretrain import pretrain
from .transfer import FineTuneConfig, finetune
from .validation import check_fitted, check_frames


class ImitationPlanner(BaseEstimator):
    """Multi-modal driving policy trained by imitation.

    Parameters mirror the network and pre-training knobs; fit(X) consumes a
    list of frames (no labels: the frames carry their own ground truth).
    """

    def __init__(
        self,
        hidden=256,
        n_modes=3,
        epochs=5,
        batch_size=64,
        lr=1e-3,
        seed=0,
        lambda_prediction=1.0,
        lambda_score=1.0,
        lambda_imitation=1.0,
        wheelbase=2.9,
        dt=0.1,
        a_max=5.0,
        delta_max=0.6,
    ):
        self.hidden = hidden
        self.n_modes = n_modes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.lambda_prediction = lambda_prediction
        self.lambda_score = lambda_score
        self.lambda_imitation = lambda_imitation
        self.wheelbase = wheelbase
        self.dt = dt
        self.a_max = a_max
        self.delta_max = delta_max

    def _kinematics(self):
        return KinematicParams(
            wheelbase=self.wheelbase, dt=self.dt, a_max=self.a_max,
            delta_max=self.delta_max,
        )

    def _loss_config(self):
        return ILLossConfig(
            lambda1=self.lambda_prediction,
            lambda2=self.lambda_score,
            lambda3=self.lambda_imitation,
        )

    def fit(self, X, y=None):
        frames = check_frames(X)
        config = PolicyConfig(
            hidden=self.hidden, n_modes=self.n_modes,
            a_max=self.a_max, delta_max=self.delta_max,
        )
        params = init_policy_params(config, seed=self.seed)
        self.params_, self.loss_curve_ = pretrain(
            params,
            frames,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            cfg=self._loss_config(),
            kin=self._kinematics(),
        )
        return self

    def predict(self, X):
        """Planned trajectory for every frame."""
        check_fitted(self, "params_")
        frames = check_frames(X)
        planner = make_planner(self.params_, kin=self._kinematics())
        return [planner(f)[0] for f in frames]

    def score(self, X, y=None):
        """Negative mean plan displacement at 3 s (higher is better)."""
        check_fitted(self, "params_")
        frames = check_frames(X)
        errors = []
        for frame, traj in zip(frames, self.predict(frames)):
            errors.append(
                float(np.hypot(*(traj.states[30, :2] - frame.ego_future_gt[29, :2])))
            )
        return -float(np.mean(errors))


class StyleFineTuner(BaseEstimator):
    """Instance-transfer fine-tuning of a fitted ImitationPlanner.

    fit(X, planner=..., expert=...) treats X as the user demonstration
    frames; expert frames are mixed into every batch at the configured
    proportion. The style regularizer weight alpha balances imitation
    against matching the user's feature expectations.
    """

    def __init__(
        self,
        alpha=100.0,
        proportion=0.5,
        batch_size=64,
        steps=100,
        lr_nn=1e-5,
        lr_cf=1e-3,
        structure="nn",
        update_target="nn",
        seed=0,
        step_size=0.4,
        iterations=2,
    ):
        self.alpha = alpha
        self.proportion = proportion
        self.batch_size = batch_size
        self.steps = steps
        self.lr_nn = lr_nn
        self.lr_cf = lr_cf
        self.structure = structure
        self.update_target = update_target
        self.seed = seed
        self.step_size = step_size
        self.iterations = iterations

    def _config(self):
        return FineTuneConfig(
            alpha=self.alpha,
            expert_proportion=self.proportion,
            batch_size=self.batch_size,
            steps=self.steps,
            lr_nn=self.lr_nn,
            lr_cf=self.lr_cf,
            seed=self.seed,
            structure=self.structure,
            update_target=self.update_target,
            solver=SolverConfig(step_size=self.step_size, iterations=self.iterations),
        )

    def fit(self, X, y=None, *, planner=None, expert=None, cost_weights=None):
        if planner is None:
            raise ValueError("fit requires planner=<fitted ImitationPlanner>")
        check_fitted(planner, "params_")
        user = check_frames(X, name="user frames")
        expert_frames = check_frames(
            expert if expert is not None else [], name="expert frames",
            allow_empty=self.proportion == 0.0,
        )
        self.kinematics_ = planner._kinematics()
        cfg = self._config()
        self.params_, self.cost_weights_, self.log_ = finetune(
            planner.params_,
            cost_weights or CostWeights(),
            expert_frames,
            user,
            cfg,
            self.kinematics_,
        )
        self.target_ = feature_expectation(user, cfg.scaling)
        return self

    def predict(self, X):
        check_fitted(self, "params_")
        frames = check_frames(X)
        planner = make_planner(
            self.params_,
            self.cost_weights_,
            structure=self.structure,
            solver=SolverConfig(step_size=self.step_size, iterations=self.iterations),
            kin=self.kinematics_,
        )
        return [planner(f)[0] for f in frames]

    def score(self, X, y=None):
        """Negative style error against the fitted user target (higher is better)."""
        check_fitted(self, "params_")
        frames = check_frames(X)
        planner = make_planner(
            self.params_,
            self.cost_weights_,
            structure=self.structure,
            solver=SolverConfig(step_size=self.step_size, iterations=self.iterations),
            kin=self.kinematics_,
        )
        report = evaluate_planner(planner, frames, self.target_, EvalConfig())
        return -report.style_error
