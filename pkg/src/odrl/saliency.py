"""Pixel and object saliency maps for a chosen action.

The pixel map is the input gradient of ``Q(s, a)``, reduced to one value per
pixel by taking the largest absolute gradient over the RGB planes of the
newest frame. The object map scores each detected object by how much
``Q(s, a)`` drops when the object is painted over with the background colour:
``w = Q(s, a) - Q(s_o, a)``. Positive ``w`` marks a good object, negative a
bad one.

Masking covers all four history frames, so a moving object does not leak
through its earlier positions, and clears the object's box from its object
plane when the state has object channels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import HISTORY, RGB_PLANES
from .exceptions import DimensionError, RangeError
from .netpbm import write_pgm, write_ppm
from .tensornet import QNet

TAU = 1e-6
GOOD_COLOR = (0, 255, 0)
BAD_COLOR = (255, 0, 0)
LABELS = ("good", "bad", "neutral")


@dataclass
class PixelSaliencyMap:
    values: np.ndarray
    action: int
    state_id: str = ""
    gradient: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class ObjectSaliencyMap:
    entries: list
    action: int
    frame: np.ndarray = field(repr=False)
    base_q: float = 0.0
    state_id: str = ""

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.entries], dtype=np.float64)

    @property
    def detections(self) -> list:
        return [d for d, _ in self.entries]

    def overlay(self) -> np.ndarray:
        return render_overlay(self.frame, self.entries)


def _check_action(net: QNet, action) -> int:
    a = int(action)
    if not 0 <= a < net.n_actions:
        raise RangeError(f"action {a} outside [0, {net.n_actions})")
    return a


def _single_state(state) -> np.ndarray:
    s = np.asarray(state, dtype=np.float64)
    if s.ndim == 4 and s.shape[0] == 1:
        s = s[0]
    if s.ndim != 3 or s.shape[0] < RGB_PLANES:
        raise DimensionError(f"expected a single (C>={RGB_PLANES}, H, W) state, got {s.shape}")
    return s


def newest_frame(state) -> np.ndarray:
    """The newest RGB frame of a decoded state as HxWx3 uint8."""
    s = _single_state(state)
    rgb = s[RGB_PLANES - 3 : RGB_PLANES].transpose(1, 2, 0)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def modal_color(frame) -> tuple[int, int, int]:
    """Most frequent pixel colour; ties go to the smallest packed RGB value."""
    px = np.asarray(frame, dtype=np.int64).reshape(-1, 3)
    packed = (px[:, 0] << 16) | (px[:, 1] << 8) | px[:, 2]
    values, counts = np.unique(packed, return_counts=True)
    v = int(values[np.argmax(counts)])
    return (v >> 16) & 255, (v >> 8) & 255, v & 255


def pixel_saliency(net: QNet, state, action, state_id: str = "") -> PixelSaliencyMap:
    """Max-abs input gradient of ``Q(s, action)`` over the newest frame's RGB planes."""
    a = _check_action(net, action)
    s = _single_state(state)
    _, cache = net.forward(s[None])
    onehot = np.zeros((1, net.n_actions))
    onehot[0, a] = 1.0
    grad = net.backward(cache, onehot, need_input_grad=True).input[0]
    values = np.abs(grad[RGB_PLANES - 3 : RGB_PLANES]).max(axis=0)
    return PixelSaliencyMap(values, a, state_id, grad)


def mask_object(state, detection, background_color=(0, 0, 0)) -> np.ndarray:
    """Copy of ``state`` with ``detection``'s box painted over with the background.

    Works on decoded float states (colour scaled by 1/255) and on raw uint8
    states. Object planes, when present, lose the box in the detection's plane.
    """
    arr = np.asarray(state)
    if arr.ndim != 3 or arr.shape[0] < RGB_PLANES:
        raise DimensionError(f"expected a single (C>={RGB_PLANES}, H, W) state, got {arr.shape}")
    C, H, W = arr.shape
    x, y, w, h = int(detection.x), int(detection.y), int(detection.w), int(detection.h)
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > W or y + h > H:
        raise DimensionError(f"box ({x}, {y}, {w}, {h}) does not lie inside a {W}x{H} frame")
    out = arr.copy()
    color = np.asarray(background_color, dtype=np.float64)
    if np.issubdtype(out.dtype, np.floating):
        color = color / 255.0
    for f in range(HISTORY):
        for c in range(3):
            out[3 * f + c, y : y + h, x : x + w] = color[c]
    plane = RGB_PLANES + int(detection.object_type)
    if C > RGB_PLANES:
        if plane >= C:
            raise RangeError(f"object type {detection.object_type} has no object plane in a {C}-plane state")
        out[plane, y : y + h, x : x + w] = 0
    return out


def object_saliency(net: QNet, state, detections, action, background_color=None,
                    state_id: str = "") -> ObjectSaliencyMap:
    """``w = Q(s, action) - Q(s_o, action)`` for each detection, in input order.

    Uses one forward pass for the base state plus one per detection. The
    background defaults to the modal colour of the newest frame; in mazes
    where walls outnumber open pixels pass the environment's colour instead.
    """
    a = _check_action(net, action)
    s = _single_state(state)
    frame = newest_frame(s)
    if background_color is None:
        background_color = modal_color(frame)
    base = float(net.predict(s[None])[0, a])
    entries = []
    for det in detections:
        masked = mask_object(s, det, background_color)
        entries.append((det, base - float(net.predict(masked[None])[0, a])))
    return ObjectSaliencyMap(entries, a, frame, base, state_id)


def label_of(w: float, tau: float = TAU) -> str:
    if w > tau:
        return "good"
    if w < -tau:
        return "bad"
    return "neutral"


def classify_objects(smap: ObjectSaliencyMap, tau: float = TAU) -> list:
    """``(detection, label)`` pairs with label good / bad / neutral by the sign of ``w``."""
    return [(d, label_of(w, tau)) for d, w in smap.entries]


def render_overlay(frame, entries) -> np.ndarray:
    """Frame with each box blended toward green (good) or red (bad).

    The blend weight is ``|w| / max|w|``; pixels outside every box are untouched.
    """
    base = np.asarray(frame, dtype=np.uint8)
    out = base.astype(np.float64)
    ws = [abs(w) for _, w in entries]
    top = max(ws) if ws else 0.0
    H, W = base.shape[:2]
    for d, w in entries:
        label = label_of(w)
        if top == 0.0 or label == "neutral":
            continue
        alpha = abs(w) / top
        tint = np.asarray(GOOD_COLOR if label == "good" else BAD_COLOR, dtype=np.float64)
        ys = slice(max(d.y, 0), min(d.y + d.h, H))
        xs = slice(max(d.x, 0), min(d.x + d.w, W))
        out[ys, xs] = (1.0 - alpha) * base[ys, xs] + alpha * tint
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def scale_to_bytes(values) -> np.ndarray:
    """Min-max scale to 0..255 uint8; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_object_csv(path, smap: ObjectSaliencyMap) -> None:
    try:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["type", "x", "y", "w", "label"])
            for d, w in smap.entries:
                wr.writerow([d.object_type, d.x, d.y, repr(float(w)), label_of(w)])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def render_saliency(smap, path, csv_path=None) -> Path:
    """Write a pixel map as PGM or an object map as PPM overlay plus a CSV sidecar.

    The sidecar defaults to ``path`` with a ``.csv`` suffix.
    """
    path = Path(path)
    if isinstance(smap, PixelSaliencyMap):
        write_pgm(path, scale_to_bytes(smap.values))
    elif isinstance(smap, ObjectSaliencyMap):
        write_ppm(path, smap.overlay())
        write_object_csv(path.with_suffix(".csv") if csv_path is None else csv_path, smap)
    else:
        raise TypeError(f"cannot render {type(smap).__name__}")
    return path
