"""Class activation maps from the GAP-fed classifier heads, and red overlays."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dcnn.autograd import Tensor, no_grad
from dcnn.autograd.functional import bilinear_matrix
from dcnn.data import write_ppm
from dcnn.errors import DataError, DimensionError
from dcnn.model import DcnnModel

BRANCHES = ("sc", "sa", "fused")


@dataclass
class CamMap:
    grid: np.ndarray  # [h, w] in [0, 1]
    class_index: int
    branch: str


def normalize_cam(raw: np.ndarray) -> np.ndarray:
    """Clamp below at zero, then min-max scale; a constant map becomes all zeros."""
    x = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    lo, hi = x.min(), x.max()
    if not hi - lo > 1e-12 * max(1.0, abs(hi)):
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a 2-D map (half-pixel centres)."""
    rh = bilinear_matrix(grid.shape[0], h).astype(np.float64)
    rw = bilinear_matrix(grid.shape[1], w).astype(np.float64)
    return rh @ grid.astype(np.float64) @ rw.T


def sc_cam_raw(features: np.ndarray, head_weight: np.ndarray, class_index: int) -> np.ndarray:
    """sum_c w[k,c] * F[c] over the final SC feature map [C,h,w]."""
    w = head_weight.reshape(head_weight.shape[0], -1)[class_index]
    return np.tensordot(w.astype(np.float64), features.astype(np.float64), axes=(0, 0))


def sa_cam_raw(tokens: np.ndarray, head_weight: np.ndarray, class_index: int) -> np.ndarray:
    """Per-token class score tokens @ W[:, k], laid out on the sqrt(T) grid."""
    t = tokens.shape[0]
    g = int(round(t**0.5))
    if g * g != t:
        raise DimensionError(f"cannot lay {t} tokens on a square grid")
    return (tokens.astype(np.float64) @ head_weight[:, class_index].astype(np.float64)).reshape(g, g)


def compute_cam(model: DcnnModel, image, class_index: int, branch: str = "fused") -> CamMap:
    """CAM for one image ([3,H,W] or [1,3,H,W]); the model is run in eval mode."""
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    k = model.config.num_classes
    if not 0 <= class_index < k:
        raise DataError(f"class_index {class_index} outside [0, {k})")
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[0] != 1:
        raise DimensionError(f"compute_cam takes a single image, got batch {arr.shape[0]}")
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            _, _, trace = model(Tensor(arr))
    finally:
        model.train(was_training)
    sc = normalize_cam(sc_cam_raw(trace.sc_features.data[0], model.sc_head.weight.data, class_index))
    if branch == "sc":
        return CamMap(sc, class_index, "sc")
    sa = normalize_cam(sa_cam_raw(trace.tokens.data[0], model.sa_head.weight.data, class_index))
    if branch == "sa":
        return CamMap(sa, class_index, "sa")
    h = max(sc.shape[0], sa.shape[0])
    w = max(sc.shape[1], sa.shape[1])
    fused = 0.5 * (upsample(sc, h, w) + upsample(sa, h, w))
    return CamMap(normalize_cam(fused), class_index, "fused")


def cam_peak(cam: CamMap, h: int, w: int) -> tuple[int, int]:
    """(row, col) of the maximum after bilinear upsampling to h x w; first index wins ties."""
    up = upsample(cam.grid, h, w)
    return tuple(int(v) for v in np.unravel_index(int(np.argmax(up)), up.shape))


def overlay(cam: CamMap, base_image: np.ndarray) -> np.ndarray:
    """(1 - a) * base + a * red with a = upsampled CAM intensity; float [3,H,W]."""
    base = np.asarray(base_image, dtype=np.float64)
    if base.ndim != 3 or base.shape[0] != 3:
        raise DimensionError(f"base image must be [3,H,W], got {base.shape}")
    a = np.clip(upsample(cam.grid, base.shape[1], base.shape[2]), 0.0, 1.0)[None]
    red = np.zeros_like(base)
    red[0] = 1.0
    return (1.0 - a) * base + a * red


def render_heatmap(cam: CamMap, base_image: np.ndarray, out_path, side_by_side: bool = False) -> None:
    """Write the overlay (optionally next to the original) as a binary PPM."""
    img = overlay(cam, base_image)
    if side_by_side:
        img = np.concatenate([np.asarray(base_image, dtype=np.float64), img], axis=2)
    try:
        write_ppm(Path(out_path), img)
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {out_path}: {exc}") from exc
