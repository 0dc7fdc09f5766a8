"""Rotated-box detection types, losses, BEV IoU, and evaluation metrics.

Boxes follow the (x, y, z, h, w, l, theta) layout: center, vertical extent h,
width w across the heading, length l along the heading, and yaw theta. BEV
overlap is computed on the rotated (l, w) footprint via convex polygon
clipping.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fusion import BevGrid
from .geometry import normalize_angle


@dataclass(frozen=True)
class RotatedBox3D:
    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    theta: float

    def __post_init__(self) -> None:
        vals = [self.x, self.y, self.z, self.h, self.w, self.l, self.theta]
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError("box fields must be finite")
        if self.h <= 0.0 or self.w <= 0.0 or self.l <= 0.0:
            raise ValueError("box extents must be positive")
        for name in ("x", "y", "z", "h", "w", "l"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.h, self.w, self.l, self.theta]

    def corners_bev(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape (4, 2)."""
        c = math.cos(self.theta)
        s = math.sin(self.theta)
        dx = self.l / 2.0
        dy = self.w / 2.0
        local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


@dataclass(frozen=True)
class Detection:
    box: RotatedBox3D
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        object.__setattr__(self, "score", float(self.score))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.3, 0.5, 0.7)
    score_threshold: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in [0, 1]")
        for t in self.iou_thresholds:
            if not 0.0 < t < 1.0:
                raise ValueError("iou thresholds must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class HeadParams:
    """Per-cell linear decode head: 8 outputs from C input channels.

    Output layout: [objectness, dx, dy, z, log h, log w, log l, theta]."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weight, dtype=float)
        b = np.array(self.bias, dtype=float).reshape(-1)
        if w.ndim != 2 or w.shape[0] != 8 or b.shape[0] != 8:
            raise ValueError("head weight must be (8, C) and bias (8,)")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> float:
    """Mean smooth-L1 (Huber-style) regression loss with cutover beta."""
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    diff = np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    per = np.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)
    return float(per.mean())


def focal_loss(
    p: np.ndarray,
    target: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    eps: float = 1e-7,
) -> float:
    """Mean focal loss on probabilities with the usual alpha_t weighting:
    alpha for positives, (1 - alpha) for negatives. Probabilities are clamped
    to [eps, 1 - eps] before the log."""
    prob = np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)
    y = np.asarray(target, dtype=float)
    if ((y != 0.0) & (y != 1.0)).any():
        raise ValueError("targets must be 0 or 1")
    p_t = np.where(y == 1.0, prob, 1.0 - prob)
    a_t = np.where(y == 1.0, alpha, 1.0 - alpha)
    return float(np.mean(-a_t * (1.0 - p_t) ** gamma * np.log(p_t)))


def _polygon_area(poly: np.ndarray) -> float:
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(poly: list[np.ndarray], a: np.ndarray, b: np.ndarray) -> list[np.ndarray]:
    """Keep the part of poly on the left of directed edge a -> b."""
    edge = b - a
    out: list[np.ndarray] = []
    n = len(poly)
    for i in range(n):
        cur = poly[i]
        nxt = poly[(i + 1) % n]
        cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= -1e-12
        nxt_in = edge[0] * (nxt[1] - a[1]) - edge[1] * (nxt[0] - a[0]) >= -1e-12
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            seg = nxt - cur
            denom = edge[0] * seg[1] - edge[1] * seg[0]
            if denom != 0.0:
                t = (edge[0] * (a[1] - cur[1]) - edge[1] * (a[0] - cur[0])) / denom
                out.append(cur + t * seg)
    return out


def rotated_iou_bev(a: RotatedBox3D, b: RotatedBox3D) -> float:
    """Intersection over union of the two rotated BEV footprints."""
    pa = a.corners_bev()
    pb = b.corners_bev()
    clipped = [pa[i] for i in range(4)]
    for i in range(4):
        if not clipped:
            break
        clipped = _clip_polygon(clipped, pb[i], pb[(i + 1) % 4])
    inter = _polygon_area(np.array(clipped)) if len(clipped) >= 3 else 0.0
    area_a = a.l * a.w
    area_b = b.l * b.w
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def _match_detections(
    dets: Sequence[Detection], gts: Sequence[RotatedBox3D], iou_thr: float
) -> np.ndarray:
    """Greedy score-descending matching, one detection per ground-truth box.

    Returns a bool array, True where the detection (in score order) is a true
    positive. Ties in score break by detection index."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou_bev(dets[i].box, gt)
            if iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0 and best_iou >= iou_thr:
            taken[best_j] = True
            tp[rank] = True
    return tp


def _ap_from_counts(tp: np.ndarray, num_gt: int, interpolation: str) -> float:
    tp_cum = np.cumsum(tp.astype(float))
    fp_cum = np.cumsum((~tp).astype(float))
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    if interpolation == "all":
        mrec = np.concatenate(([0.0], recall, [1.0]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        for i in range(mpre.shape[0] - 2, -1, -1):
            mpre[i] = max(mpre[i], mpre[i + 1])
        changed = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))
    if interpolation == "11point":
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r - 1e-12
            total += float(precision[mask].max()) if mask.any() else 0.0
        return total / 11.0
    raise ValueError(f"unknown interpolation {interpolation!r}")


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[RotatedBox3D],
    iou_thr: float,
    interpolation: str = "all",
) -> float:
    """Average precision at one IoU threshold for a single frame.

    Empty ground truth scores 1.0 with no detections (nothing to find,
    nothing hallucinated) and 0.0 otherwise."""
    if len(gts) == 0:
        return 1.0 if len(dets) == 0 else 0.0
    if len(dets) == 0:
        return 0.0
    tp = _match_detections(dets, gts, iou_thr)
    return _ap_from_counts(tp, len(gts), interpolation)


def pooled_average_precision(
    frames: Sequence[tuple[Sequence[Detection], Sequence[RotatedBox3D]]],
    iou_thr: float,
    interpolation: str = "all",
) -> float:
    """Average precision pooled over frames: matching stays within each frame,
    the precision-recall curve is built over all detections jointly."""
    scores: list[float] = []
    flags: list[bool] = []
    num_gt = 0
    any_det = False
    for dets, gts in frames:
        num_gt += len(gts)
        if len(dets) == 0:
            continue
        any_det = True
        tp = _match_detections(dets, gts, iou_thr)
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        scores.extend(dets[i].score for i in order)
        flags.extend(bool(v) for v in tp)
    if num_gt == 0:
        return 1.0 if not any_det else 0.0
    if not flags:
        return 0.0
    pooled = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp_sorted = np.array([flags[i] for i in pooled], dtype=bool)
    return _ap_from_counts(tp_sorted, num_gt, interpolation)


def _peak_mask(values: np.ndarray) -> np.ndarray:
    """Cells that win their 3x3 neighborhood, one winner per local window.

    Ties on the value fall back to the 3x3 neighborhood sum so a flat
    plateau resolves to an interior cell rather than its first corner, and
    remaining ties go to the lower scan index. Fully deterministic."""
    h, w = values.shape
    idx = np.arange(h * w).reshape(h, w)
    vpad = np.full((h + 2, w + 2), -np.inf)
    vpad[1:-1, 1:-1] = values
    spad = np.zeros((h + 2, w + 2))
    spad[1:-1, 1:-1] = values
    nbsum = np.zeros((h, w))
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            nbsum += spad[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
    fpad = np.full((h + 2, w + 2), -np.inf)
    fpad[1:-1, 1:-1] = nbsum
    ipad = np.full((h + 2, w + 2), h * w, dtype=np.int64)
    ipad[1:-1, 1:-1] = idx
    peak = np.ones((h, w), dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nv = vpad[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
            ns = fpad[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
            ni = ipad[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
            beats = (nv > values) | (
                (nv == values) & ((ns > nbsum) | ((ns == nbsum) & (ni < idx)))
            )
            peak &= ~beats
    return peak


def decode_head(
    fused: BevGrid, params: HeadParams, cfg: EvalConfig, nms_iou: float = 0.5,
    peak_pick: bool = True, center_refine: bool = True,
) -> list[Detection]:
    """Decode per-cell boxes from a fused grid with a linear head.

    Objectness is the clipped linear response in [0, 1]; cells above
    cfg.score_threshold emit one box with center offset (dx, dy) from the cell
    center, absolute z, exp-decoded extents, and a yaw. With peak_pick each
    candidate must also be a 3x3 local maximum of the raw objectness, which
    collapses an extended object footprint to one box; center_refine then
    shifts the box center to the score-weighted centroid of the peak's 3x3
    window, recovering sub-cell localization from the response shape. Greedy
    NMS finally drops any box whose BEV IoU with a kept higher-scoring box
    exceeds nms_iou."""
    if params.weight.shape[1] != fused.data.shape[0]:
        raise ValueError("head weight channel count must match the grid")
    raw = np.einsum("kc,chw->khw", params.weight, fused.data) + params.bias[:, None, None]
    scores = np.clip(raw[0], 0.0, 1.0)
    keep_mask = scores > cfg.score_threshold
    if peak_pick:
        keep_mask &= _peak_mask(raw[0])
    rows, cols = np.nonzero(keep_mask)
    spec = fused.spec
    height, width = scores.shape
    candidates: list[Detection] = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        vec = raw[:, r, c]
        cx = spec.origin[0] + c * spec.resolution + vec[1]
        cy = spec.origin[1] + r * spec.resolution + vec[2]
        if center_refine:
            acc_w = acc_x = acc_y = 0.0
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < height and 0 <= cc < width:
                        v = float(scores[rr, cc])
                        acc_w += v
                        acc_x += v * dc
                        acc_y += v * dr
            if acc_w > 0.0:
                cx += spec.resolution * acc_x / acc_w
                cy += spec.resolution * acc_y / acc_w
        box = RotatedBox3D(
            x=cx,
            y=cy,
            z=vec[3],
            h=math.exp(vec[4]),
            w=math.exp(vec[5]),
            l=math.exp(vec[6]),
            theta=vec[7],
        )
        candidates.append(Detection(box=box, score=float(scores[r, c])))
    candidates.sort(key=lambda d: -d.score)
    kept: list[Detection] = []
    for det in candidates:
        if all(rotated_iou_bev(det.box, k.box) <= nms_iou for k in kept):
            kept.append(det)
    return kept


def detections_to_json(dets: Sequence[Detection]) -> str:
    payload = [{"box": d.box.as_list(), "score": d.score} for d in dets]
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def boxes_to_json(boxes: Sequence[RotatedBox3D]) -> str:
    return json.dumps([b.as_list() for b in boxes], separators=(",", ":"))
