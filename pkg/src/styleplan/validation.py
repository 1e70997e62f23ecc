"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

from sklearn.exceptions import NotFittedError

from .frames import Frame


def check_frames(X, name="X", allow_empty=False):
    """Materialize and validate an iterable of frames."""
    frames = list(X)
    if not frames and not allow_empty:
        raise ValueError(f"{name} is empty")
    for i, frame in enumerate(frames):
        if not isinstance(frame, Frame):
            raise TypeError(
                f"{name}[{i}] is {type(frame).__name__}, expected Frame"
            )
    horizons = {f.ego_future_gt.shape[0] for f in frames}
    if len(horizons) > 1:
        raise ValueError(f"{name} mixes future horizons: {sorted(horizons)}")
    return frames


def check_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; "
            "call fit before using this method."
        )
