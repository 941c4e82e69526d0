"""Input checks shared by the estimator wrappers and the command line."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError


def check_frame(frame) -> np.ndarray:
    """An HxWx3 uint8 frame, or raise :class:`DimensionError`."""
    arr = np.asarray(frame)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 frame, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.number) or arr.min() < 0 or arr.max() > 255 or np.any(arr != np.round(arr)):
            raise ValueError("frame values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def check_frames(frames) -> np.ndarray:
    """A batch ``(N, H, W, 3)`` of frames; a single frame is batched."""
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"expected (N, H, W, 3) frames, got shape {arr.shape}")
    return np.stack([check_frame(f) for f in arr]) if len(arr) else arr.astype(np.uint8)


def check_states(states, input_shape) -> np.ndarray:
    """Float64 batch ``(N, C, H, W)`` matching ``input_shape``; finite values only."""
    arr = np.asarray(states, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != tuple(input_shape):
        raise DimensionError(f"expected states of shape (N, {', '.join(map(str, input_shape))}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("states contain non-finite values")
    return arr
