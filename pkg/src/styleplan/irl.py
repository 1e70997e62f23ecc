"""Maximum-entropy style machinery.

Fine-tuning regularizes the planner toward a user's demonstrated style by
matching feature expectations: the mean feature vector of the planned
trajectories (the model's most likely plans) is pulled toward the mean
feature vector of the user's demonstrations, per trajectory class. The
partition function never appears in that training path; an enumerated-set
fitter over explicit candidate lists is provided for exercising the
underlying probability model directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .classification import TrajectoryClass, classify_frame
from .errors import FitFailure
from .features import (
    FEATURE_NAMES,
    FeatureScaling,
    FeatureVector,
    extract_features,
    extract_features_with_grad,
)

STYLE_CLASSES = (TrajectoryClass.STRAIGHT, TrajectoryClass.TURN)


@dataclass
class StyleTarget:
    """Per-class demonstration feature expectations with sample counts."""

    features: dict = field(default_factory=dict)  # TrajectoryClass -> FeatureVector
    counts: dict = field(default_factory=dict)  # TrajectoryClass -> int

    def has(self, cls):
        return cls in self.features

    def save(self, path):
        doc = {}
        for cls, vec in self.features.items():
            entry = vec.to_dict()
            entry["count"] = int(self.counts.get(cls, 0))
            doc[cls.value] = entry
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        target = cls()
        for name, entry in doc.items():
            klass = TrajectoryClass(name)
            target.features[klass] = FeatureVector.from_dict(entry)
            target.counts[klass] = int(entry.get("count", 0))
        return target


def feature_expectation(dataset, beta=FeatureScaling()) -> StyleTarget:
    """Mean ground-truth-future feature vector per non-stationary class."""
    sums = {cls: np.zeros(len(FEATURE_NAMES)) for cls in STYLE_CLASSES}
    counts = {cls: 0 for cls in STYLE_CLASSES}
    for frame in dataset:
        cls = classify_frame(frame)
        if cls not in sums:
            continue
        f = extract_features(frame.future_trajectory(), frame, beta)
        sums[cls] += f.as_array()
        counts[cls] += 1
    target = StyleTarget()
    for cls in STYLE_CLASSES:
        if counts[cls] > 0:
            target.features[cls] = FeatureVector.from_array(sums[cls] / counts[cls])
            target.counts[cls] = counts[cls]
    return target


def irl_loss(planned, frames, target: StyleTarget, beta=FeatureScaling()):
    """Style-matching loss of a batch of planned trajectories.

    planned[i] is the plan for frames[i]; all frames must share one class
    that the target covers. Returns (loss, grads) where grads[i] has the
    shape of planned[i].states. The loss is the mean absolute difference
    between the batch-mean feature vector and the class expectation;
    subgradient 0 is used at exact matches.
    """
    if len(planned) != len(frames) or not frames:
        raise ValueError("planned trajectories and frames must pair up nonempty")
    classes = {classify_frame(fr) for fr in frames}
    if len(classes) != 1:
        raise ValueError(f"batch mixes classes: {sorted(c.value for c in classes)}")
    cls = classes.pop()
    if not target.has(cls):
        raise ValueError(f"style target has no expectation for class {cls.value!r}")

    n = len(planned)
    feats = np.zeros((n, len(FEATURE_NAMES)))
    grads = []
    for i, (traj, frame) in enumerate(zip(planned, frames)):
        vec, g = extract_features_with_grad(traj, frame, beta)
        feats[i] = vec.as_array()
        grads.append(g)
    f_hat = feats.mean(axis=0)
    f_ref = target.features[cls].as_array()
    loss = float(np.mean(np.abs(f_hat - f_ref)))

    sign = np.sign(f_hat - f_ref)
    coeff = sign / (len(FEATURE_NAMES) * n)
    state_grads = [np.einsum("f,ftj->tj", coeff, g) for g in grads]
    return loss, state_grads


def maxent_probabilities(costs):
    """exp(-c_j) / sum_k exp(-c_k), computed with a max shift for stability."""
    costs = np.asarray(costs, dtype=float)
    if costs.size == 0:
        raise ValueError("cost list is empty")
    if not np.all(np.isfinite(costs)):
        raise ValueError("costs must be finite")
    z = -costs
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


@dataclass
class CandidateSet:
    """An enumerated plan set: per-candidate raw feature means plus the demo index."""

    features: np.ndarray  # (n_candidates, 7) raw feature means
    demo_index: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if not (0 <= self.demo_index < self.features.shape[0]):
            raise ValueError("demo index outside the candidate set")


def demo_log_likelihood(weights, candidate_sets, beta=FeatureScaling()):
    """Mean log probability of the demonstrations under linear feature costs."""
    b = beta.as_array()
    total = 0.0
    for cs in candidate_sets:
        probs = maxent_probabilities((cs.features * b) @ weights)
        total += float(np.log(max(probs[cs.demo_index], 1e-300)))
    return total / len(candidate_sets)


def maxent_weight_fit(candidate_sets, beta=FeatureScaling(), lr=0.5, steps=200):
    """Fit linear feature weights so demonstrations become most likely.

    Ascends the demonstration log-likelihood using the exact expectation
    gradient E_P[f] - f_demo over each enumerated set. Raises FitFailure if
    the negative log-likelihood increases 10 steps in a row.
    """
    if not candidate_sets:
        raise ValueError("no candidate sets given")
    b = beta.as_array()
    weights = np.zeros(len(FEATURE_NAMES))
    nll_prev = -demo_log_likelihood(weights, candidate_sets, beta)
    bad_streak = 0
    for step in range(steps):
        grad = np.zeros_like(weights)
        for cs in candidate_sets:
            scaled = cs.features * b
            probs = maxent_probabilities(scaled @ weights)
            grad += probs @ scaled - scaled[cs.demo_index]
        grad /= len(candidate_sets)
        weights = weights + lr * grad
        nll = -demo_log_likelihood(weights, candidate_sets, beta)
        if nll > nll_prev:
            bad_streak += 1
            if bad_streak >= 10:
                raise FitFailure(
                    f"negative log-likelihood increased {bad_streak} consecutive steps"
                )
        else:
            bad_streak = 0
        nll_prev = nll
    return weights
