"""Peak decoding, IoU, counting errors and VOC-style average precision."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .targets import Box, TargetMaps


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    score: float
    class_id: int = 0
    image_id: int = 0

    def as_box(self) -> Box:
        return Box(self.cx, self.cy, self.w, self.h, self.class_id)


@dataclass
class EvalReport:
    mae: float
    rmse: float
    ap: float
    pred_counts: list[int] = field(default_factory=list)
    gt_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "ap": self.ap,
            "num_images": len(self.gt_counts),
            "pred_counts": list(self.pred_counts),
            "gt_counts": list(self.gt_counts),
        }


def local_peaks(heat: np.ndarray) -> np.ndarray:
    """Boolean mask of 3x3 local maxima per channel of a (C,H,W) map.

    A cell is a peak iff it is strictly greater than every neighbour earlier in
    raster order and at least as large as every later neighbour, so plateaus
    yield exactly one peak.
    """
    c, h, w = heat.shape
    padded = np.full((c, h + 2, w + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = heat
    peak = np.ones(heat.shape, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[:, 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            peak &= (heat > nb) if earlier else (heat >= nb)
    return peak


def decode(maps, stride: int, score_threshold: float = 0.25, top_k: int = 256, image_id: int = 0) -> list[Detection]:
    """Detections from one image's prediction maps (heat (C,H,W), size/offset (2,H,W)).

    Accepts :class:`TargetMaps` too, which makes decode the inverse of target generation.
    """
    if isinstance(maps, TargetMaps):
        heat, size, offset = maps.heatmap, maps.size_map, maps.offset_map
    else:
        heat, size, offset = (np.asarray(a) for a in (maps.heat, maps.size, maps.offset))
    if not (heat.shape[1:] == size.shape[1:] == offset.shape[1:]):
        raise ValueError(f"decode: map extents differ {heat.shape}, {size.shape}, {offset.shape}")
    cls, ys, xs = np.nonzero(local_peaks(heat) & (heat >= score_threshold))
    scores = heat[cls, ys, xs]
    # descending score; ties broken by channel then raster order (nonzero order)
    order = np.argsort(-scores, kind="stable")[:top_k]
    dets = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        dets.append(
            Detection(
                cx=(x + float(offset[0, y, x])) * stride,
                cy=(y + float(offset[1, y, x])) * stride,
                w=float(size[0, y, x]),
                h=float(size[1, y, x]),
                score=float(scores[i]),
                class_id=int(cls[i]),
                image_id=image_id,
            )
        )
    return dets


def iou(a, b) -> float:
    """IoU of two centre/size boxes (anything with cx, cy, w, h)."""
    ix = min(a.cx + a.w / 2, b.cx + b.w / 2) - max(a.cx - a.w / 2, b.cx - b.w / 2)
    iy = min(a.cy + a.h / 2, b.cy + b.h / 2) - max(a.cy - a.h / 2, b.cy - b.h / 2)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.w * a.h + b.w * b.h - inter)


def count_metrics(pred_counts: Sequence[float], gt_counts: Sequence[float]) -> tuple[float, float]:
    """(MAE, RMSE) of per-image counts."""
    p = np.asarray(pred_counts, dtype=np.float64)
    g = np.asarray(gt_counts, dtype=np.float64)
    if p.size == 0 or p.shape != g.shape:
        raise ValueError(f"count_metrics needs equal non-empty sequences, got {p.shape} and {g.shape}")
    d = p - g
    return float(np.mean(np.abs(d))), float(np.sqrt(np.mean(d * d)))


def _iou_matrix(dets: Sequence[Detection], gts: Sequence[Box]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    d = np.array([[x.cx, x.cy, x.w, x.h] for x in dets])
    g = np.array([[x.cx, x.cy, x.w, x.h] for x in gts])
    ix = np.minimum(d[:, None, 0] + d[:, None, 2] / 2, g[None, :, 0] + g[None, :, 2] / 2) - np.maximum(
        d[:, None, 0] - d[:, None, 2] / 2, g[None, :, 0] - g[None, :, 2] / 2
    )
    iy = np.minimum(d[:, None, 1] + d[:, None, 3] / 2, g[None, :, 1] + g[None, :, 3] / 2) - np.maximum(
        d[:, None, 1] - d[:, None, 3] / 2, g[None, :, 1] - g[None, :, 3] / 2
    )
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = (d[:, 2] * d[:, 3])[:, None] + (g[:, 2] * g[:, 3])[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def average_precision(
    dets: Sequence[Detection],
    gts: dict[int, Sequence[Box]] | Sequence[Sequence[Box]],
    iou_threshold: float = 0.5,
) -> float:
    """All-point interpolated AP with greedy highest-IoU matching.

    ``gts`` maps image id to that image's ground-truth boxes (a list is indexed by
    position). Detections are matched in descending score order to unmatched
    boxes of the same image and class.
    """
    gt_map = dict(gts) if isinstance(gts, dict) else dict(enumerate(gts))
    total = sum(len(v) for v in gt_map.values())
    if total == 0:
        raise ValueError("average_precision: no ground-truth boxes, recall is undefined")
    order = np.argsort(-np.array([d.score for d in dets], dtype=np.float64), kind="stable")
    by_image: dict[int, list[int]] = {}
    for i, d in enumerate(dets):
        by_image.setdefault(d.image_id, []).append(i)
    ious: dict[int, np.ndarray] = {}
    local: dict[int, int] = {}
    for img, idx in by_image.items():
        ious[img] = _iou_matrix([dets[i] for i in idx], list(gt_map.get(img, [])))
        for j, i in enumerate(idx):
            local[i] = j
    used = {img: np.zeros(len(gt_map.get(img, [])), dtype=bool) for img in by_image}

    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        gt_list = gt_map.get(d.image_id, [])
        if not gt_list:
            continue
        row = ious[d.image_id][local[i]].copy()
        cls_ok = np.array([g.class_id == d.class_id for g in gt_list])
        row[used[d.image_id] | ~cls_ok | (row < iou_threshold)] = -1.0
        j = int(np.argmax(row))
        if row[j] >= iou_threshold:
            used[d.image_id][j] = True
            tp[rank] = 1.0

    ctp = np.cumsum(tp)
    recall = ctp / total
    precision = ctp / np.arange(1, len(dets) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_detections(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[Sequence[Box]],
    iou_threshold: float = 0.5,
) -> EvalReport:
    pred_counts = [len(d) for d in dets_per_image]
    gt_counts = [len(g) for g in gts_per_image]
    mae, rmse = count_metrics(pred_counts, gt_counts)
    flat = [Detection(d.cx, d.cy, d.w, d.h, d.score, d.class_id, i) for i, ds in enumerate(dets_per_image) for d in ds]
    ap = average_precision(flat, list(gts_per_image), iou_threshold) if sum(gt_counts) else math.nan
    return EvalReport(mae, rmse, ap, pred_counts, gt_counts)
