"""Input checks shared by the estimators and metrics."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ShapeMismatch


def check_node_features(X, n_nodes: int | None = None, n_features: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a finite float array of shape ``(n_samples, n_nodes, n_features)``.

    A single ``(n_nodes, n_features)`` matrix is promoted to a batch of one.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2:
        X = X[None, :, :]
    if X.ndim != 3:
        raise ShapeMismatch(f"expected (n_samples, n_nodes, n_features) input, got shape {X.shape}")
    if n_nodes is not None and X.shape[1] != n_nodes:
        raise ShapeMismatch(f"input has {X.shape[1]} nodes, model expects {n_nodes}")
    if n_features is not None and X.shape[2] != n_features:
        raise ShapeMismatch(f"input has {X.shape[2]} features per node, model expects {n_features}")
    return X


def check_targets(y, n_samples: int, n_outputs: int | None = None) -> np.ndarray:
    y = check_array(y, ensure_2d=False, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :] if n_samples == 1 else y[:, None]
    if y.shape[0] != n_samples:
        raise ShapeMismatch(f"{y.shape[0]} targets for {n_samples} samples")
    if n_outputs is not None and y.shape[1] != n_outputs:
        raise ShapeMismatch(f"targets have width {y.shape[1]}, expected {n_outputs}")
    return y


def check_operator(v) -> np.ndarray:
    v = np.asarray(getattr(v, "v", v), dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ShapeMismatch(f"graph operator must be square, got shape {v.shape}")
    return v


def check_paired(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeMismatch(f"truth {y.shape} and prediction {yhat.shape} differ in shape")
    return y, yhat
