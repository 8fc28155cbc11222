"""Classification losses, center loss and top-k accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dcnn.autograd import Tensor
from dcnn.autograd import functional as F
from dcnn.autograd.tensor import DTYPE, compute_dtype, make_result
from dcnn.errors import ConfigError, DataError, DimensionError


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must be integers in [0, {k}), got {labels.tolist()}")
    return labels.astype(np.int64)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label] via a stable log-sum-exp."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    return F.cross_entropy(logits, labels)


@dataclass
class CenterLossState:
    centers: np.ndarray  # [K, F]

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "CenterLossState":
        return cls(np.zeros((num_classes, dim), dtype=DTYPE))


def center_loss(features: Tensor, labels, state: CenterLossState) -> Tensor:
    """(1/2N) sum_i ||f_i - c_{y_i}||^2; the centers are constants here."""
    if features.ndim != 2 or features.shape[1] != state.centers.shape[1]:
        raise DimensionError(f"features {features.shape} do not match centers {state.centers.shape}")
    n = features.shape[0]
    labels = _check_labels(labels, n, state.centers.shape[0])
    diff = features.data - state.centers[labels]
    value = np.array(0.5 * np.sum(diff.astype(np.float64) ** 2) / n, dtype=compute_dtype())

    def backward(g):
        return ((g * diff / n).astype(compute_dtype()),)

    return make_result(value, (features,), backward, "center_loss")


def update_centers(features, labels, state: CenterLossState, alpha: float) -> CenterLossState:
    """c_k <- c_k - alpha * mean_{i: y_i = k}(c_k - f_i) for every class in the batch."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"center alpha must be in (0, 1], got {alpha}")
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=DTYPE)
    labels = _check_labels(labels, feats.shape[0], state.centers.shape[0])
    centers = state.centers.copy()
    for k in np.unique(labels):
        sel = feats[labels == k]
        delta = np.mean(centers[k][None, :] - sel, axis=0)
        centers[k] = centers[k] - alpha * delta
    return CenterLossState(centers.astype(DTYPE))


def topk_correct(logits: np.ndarray, labels, k: int) -> np.ndarray:
    """Boolean per row: label among the k largest logits (ties broken by index)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return np.any(top == labels[:, None], axis=1)
