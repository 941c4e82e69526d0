"""Template matching, object detection, object channels and detection metrics.

:func:`match` evaluates the similarity score of a template at every valid
offset of a source image. It is vectorised over offsets but iterates over
template pixels (row, column, channel) in the same order a plain nested loop
would, so each score is produced by exactly the same sequence of IEEE
operations as the textbook double loop. Scores are therefore bit-identical to
a naive reference, not just close to it.

Multi-channel images sum the per-channel terms. For ``ccoeff`` both the
template and each source patch are mean-subtracted per channel.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .envsim import OBJECT_TYPES, GroundTruthBox, sprite
from .exceptions import DimensionError, FormatError, RangeError
from .netpbm import read_ppm, write_ppm

METHODS = ("sqdiff", "ccorr", "ccoeff")
DEFAULT_THRESHOLD = 0.95
NMS_IOU = 0.3
MATCH_IOU = 0.5


@dataclass
class Template:
    object_type: int
    pixels: np.ndarray
    match_threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DimensionError(f"template pixels must be HxW or HxWxC, got {px.shape}")
        if np.all(px == px.reshape(-1)[0]):
            raise ValueError("template must not be a constant patch")
        self.pixels = px

    @property
    def h(self) -> int:
        return self.pixels.shape[0]

    @property
    def w(self) -> int:
        return self.pixels.shape[1]


class Detection(NamedTuple):
    object_type: int
    x: int
    y: int
    w: int
    h: int
    score: float


@dataclass(frozen=True)
class DetectionMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "DetectionMetrics":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(tp, fp, fn, precision, recall, f1)


def _as_hwc(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimensionError(f"expected an HxW or HxWxC image, got shape {arr.shape}")
    return arr


def match(source, template, method: str = "ccoeff", normalized: bool = True) -> np.ndarray:
    """Score map of ``template`` slid over ``source``.

    Parameters
    ----------
    source : array (H, W) or (H, W, C)
    template : Template or array (h, w) or (h, w, C)
    method : {"sqdiff", "ccorr", "ccoeff"}
        For ``sqdiff`` lower is better, for the other two higher is better.
    normalized : bool
        Divide by the product of the L2 norms of the template and the patch
        (mean-subtracted for ``ccoeff``). A zero norm gives a score of 0
        (``sqdiff`` with a non-zero numerator gives 1).

    Returns
    -------
    ndarray of shape (H - h + 1, W - w + 1), indexed ``[y, x]``.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    tpl = template.pixels if isinstance(template, Template) else template
    src = _as_hwc(source)
    tpl = _as_hwc(tpl)
    H, W, C = src.shape
    h, w, tc = tpl.shape
    if tc != C:
        raise DimensionError(f"template has {tc} channels, source has {C}")
    if h > H or w > W:
        raise DimensionError(f"template {h}x{w} does not fit in source {H}x{W}")
    Ho, Wo = H - h + 1, W - w + 1
    n = w * h

    def window(dy, dx, c):
        return src[dy : dy + Ho, dx : dx + Wo, c]

    if method == "ccoeff":
        t_mean = []
        p_mean = []
        for c in range(C):
            ts = 0.0
            ps = np.zeros((Ho, Wo))
            for dy in range(h):
                for dx in range(w):
                    ts += tpl[dy, dx, c]
                    ps += window(dy, dx, c)
            t_mean.append(ts / n)
            p_mean.append(ps / n)

    acc = np.zeros((Ho, Wo))
    t_norm = 0.0
    p_norm = np.zeros((Ho, Wo))
    for dy in range(h):
        for dx in range(w):
            for c in range(C):
                t = tpl[dy, dx, c]
                p = window(dy, dx, c)
                if method == "ccoeff":
                    t = t - t_mean[c]
                    p = p - p_mean[c]
                if method == "sqdiff":
                    d = t - p
                    acc += d * d
                else:
                    acc += t * p
                if normalized:
                    t_norm += t * t
                    p_norm += p * p
    if not normalized:
        return acc
    denom = np.sqrt(t_norm * p_norm)
    out = np.zeros((Ho, Wo))
    ok = denom > 0
    out[ok] = acc[ok] / denom[ok]
    if method == "sqdiff":
        out[~ok & (acc != 0)] = 1.0
    return out


def iou(a, b) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _local_maxima(scores: np.ndarray, threshold: float):
    """Positions at or above ``threshold`` that are >= all 8 neighbours."""
    Ho, Wo = scores.shape
    out = []
    for y, x in zip(*np.nonzero(scores >= threshold)):
        v = scores[y, x]
        if v >= scores[max(y - 1, 0) : y + 2, max(x - 1, 0) : x + 2].max():
            out.append((int(y), int(x)))
    return out


def non_max_suppression(dets: list[Detection], iou_threshold: float = NMS_IOU) -> list[Detection]:
    """Greedy suppression: visit by descending score, drop boxes overlapping a kept one."""
    order = sorted(dets, key=lambda d: (-d.score, d.y, d.x))
    kept: list[Detection] = []
    for d in order:
        box = (d.x, d.y, d.w, d.h)
        if all(iou(box, (k.x, k.y, k.w, k.h)) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def detect_objects(frame, templates: list[Template]) -> list[Detection]:
    """Locate every instance of every template in ``frame``.

    Uses normalized ``ccoeff`` scores, keeps 3x3 local maxima at or above each
    template's threshold, then greedy NMS per type. Ordered by type, y, x.
    """
    if not templates:
        raise ValueError("detect_objects needs at least one template")
    src = _as_hwc(frame)
    out: list[Detection] = []
    for tpl in templates:
        scores = match(src, tpl, "ccoeff", True)
        peaks = _local_maxima(scores, tpl.match_threshold)
        cands = [Detection(tpl.object_type, x, y, tpl.w, tpl.h, float(scores[y, x])) for y, x in peaks]
        out.extend(non_max_suppression(cands))
    return sorted(out, key=lambda d: (d.object_type, d.y, d.x))


def build_object_channels(frame_dims, detections: Iterable, k: int) -> np.ndarray:
    """``(k, H, W)`` uint8 planes; plane ``j`` is 1 on pixels covered by type-``j`` boxes.

    Accepts :class:`Detection` or ground-truth boxes (anything with
    ``object_type, x, y, w, h``).
    """
    H, W = frame_dims[0], frame_dims[1]
    planes = np.zeros((k, H, W), dtype=np.uint8)
    for d in detections:
        if not 0 <= d.object_type < k:
            raise RangeError(f"object type {d.object_type} out of range for k={k}")
        planes[d.object_type, max(d.y, 0) : d.y + d.h, max(d.x, 0) : d.x + d.w] = 1
    return planes


def evaluate_detections(pred: Iterable[Detection], truth: Iterable[GroundTruthBox]) -> DetectionMetrics:
    """Greedy same-type IoU >= 0.5 matching, predictions taken by descending score."""
    truth = list(truth)
    used = [False] * len(truth)
    tp = fp = 0
    for d in sorted(pred, key=lambda d: -d.score):
        best, best_iou = -1, MATCH_IOU
        for i, t in enumerate(truth):
            if used[i] or t.object_type != d.object_type:
                continue
            v = iou((d.x, d.y, d.w, d.h), (t.x, t.y, t.w, t.h))
            if v >= best_iou:
                best, best_iou = i, v
                if v == 1.0:
                    break
        if best >= 0:
            used[best] = True
            tp += 1
        else:
            fp += 1
    fn = used.count(False)
    return DetectionMetrics.from_counts(tp, fp, fn)


def templates_for_env(env_id: str, cell_px: int, threshold: float = DEFAULT_THRESHOLD) -> list[Template]:
    """One template per object type, cut straight from the environment sprites."""
    return [
        Template(t, np.array(sprite(env_id, t, cell_px)), threshold)
        for t in range(len(OBJECT_TYPES[env_id]))
    ]


def save_templates(templates: list[Template], directory) -> Path:
    """Write ``template_<type>.ppm`` files plus ``manifest.txt``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for tpl in templates:
        name = f"template_{tpl.object_type}.ppm"
        write_ppm(directory / name, np.asarray(tpl.pixels, dtype=np.uint8))
        lines.append(f"{tpl.object_type} {name} {tpl.match_threshold!r}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_templates(manifest) -> list[Template]:
    """Read a ``type_id filename threshold`` manifest; filenames are relative to it."""
    manifest = Path(manifest)
    templates = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{manifest}:{lineno}: expected 'type_id filename threshold'")
        type_id, name, threshold = parts
        templates.append(Template(int(type_id), read_ppm(manifest.parent / name), float(threshold)))
    return templates


def write_detections_csv(path, rows: Iterable[tuple]) -> int:
    """Write ``frame_id,type,x,y,score`` rows from ``(frame_id, Detection)`` pairs."""
    n = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame_id", "type", "x", "y", "score"])
        for frame_id, d in rows:
            writer.writerow([frame_id, d.object_type, d.x, d.y, repr(float(d.score))])
            n += 1
    return n


def read_detections_csv(path) -> list[tuple[str, Detection]]:
    """Inverse of :func:`write_detections_csv`; box sizes are not stored and come back as 0."""
    out = []
    with open(os.fspath(path), newline="") as fh:
        for row in csv.DictReader(fh):
            out.append((row["frame_id"], Detection(int(row["type"]), int(row["x"]), int(row["y"]), 0, 0, float(row["score"]))))
    return out
