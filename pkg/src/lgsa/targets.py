"""Ground-truth heatmap, size and offset maps from box annotations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in input-image pixels (centre and size)."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def validate(self, width: int, height: int) -> None:
        if not (self.w > 0 and self.h > 0):
            raise AnnotationError(f"box size must be positive, got w={self.w} h={self.h}")
        if not (0 <= self.cx < width and 0 <= self.cy < height):
            raise AnnotationError(f"box centre ({self.cx}, {self.cy}) outside {width}x{height} image")
        if self.class_id < 0:
            raise AnnotationError(f"negative class id {self.class_id}")

    def flipped(self, width: int) -> "Box":
        return Box(width - 1 - self.cx, self.cy, self.w, self.h, self.class_id)

    def as_list(self) -> list:
        return [self.cx, self.cy, self.w, self.h, self.class_id]


@dataclass
class Annotation:
    width: int
    height: int
    boxes: list[Box] = field(default_factory=list)

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"image extents must be positive, got {self.width}x{self.height}")
        for b in self.boxes:
            b.validate(self.width, self.height)

    def flipped(self) -> "Annotation":
        return Annotation(self.width, self.height, [b.flipped(self.width) for b in self.boxes])

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int
    class_id: int
    box: Box


@dataclass
class TargetMaps:
    """Stride-R targets for one image, laid out channels x rows x columns."""

    stride: int
    heatmap: np.ndarray  # (C, Hc, Wc)
    size_map: np.ndarray  # (2, Hc, Wc): w, h in input pixels
    offset_map: np.ndarray  # (2, Hc, Wc): sub-cell x, y offsets
    keypoints: list[Keypoint]

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.heatmap.shape[1:])
        for k in self.keypoints:
            m[k.y, k.x] = 1.0
        return m


@dataclass
class TargetBatch:
    heatmap: np.ndarray  # (B, C, H, W)
    size_map: np.ndarray  # (B, 2, H, W)
    offset_map: np.ndarray  # (B, 2, H, W)
    mask: np.ndarray  # (B, 1, H, W)

    @property
    def num_keypoints(self) -> int:
        return int(self.mask.sum())


def stack_targets(targets: Sequence[TargetMaps] | TargetMaps | TargetBatch) -> TargetBatch:
    if isinstance(targets, TargetBatch):
        return targets
    if isinstance(targets, TargetMaps):
        targets = [targets]
    return TargetBatch(
        heatmap=np.stack([t.heatmap for t in targets]),
        size_map=np.stack([t.size_map for t in targets]),
        offset_map=np.stack([t.offset_map for t in targets]),
        mask=np.stack([t.mask[None] for t in targets]),
    )


def grid_shape(ann: Annotation, stride: int) -> tuple[int, int]:
    """Low-resolution extents (rows, cols); non-divisible images count as zero-padded."""
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    return math.ceil(ann.height / stride), math.ceil(ann.width / stride)


def default_sigma(box: Box, stride: int) -> float:
    return max(1.0, 0.15 * min(box.w, box.h) / stride)


def _check(ann: Annotation, num_classes: int) -> None:
    ann.validate()
    for b in ann.boxes:
        if b.class_id >= num_classes:
            raise AnnotationError(f"class id {b.class_id} not below num_classes={num_classes}")


def _cell(box: Box, stride: int) -> tuple[int, int]:
    return math.floor(box.cx / stride), math.floor(box.cy / stride)


def make_dot_map(ann: Annotation, stride: int, num_classes: int) -> np.ndarray:
    """Binary (C, Hc, Wc) map with a one at each box's centre cell."""
    _check(ann, num_classes)
    hc, wc = grid_shape(ann, stride)
    dots = np.zeros((num_classes, hc, wc))
    for b in ann.boxes:
        x, y = _cell(b, stride)
        dots[b.class_id, y, x] = 1.0
    return dots


def gaussian_splat(
    ann: Annotation,
    stride: int,
    num_classes: int,
    sigma_rule: Callable[[Box, int], float] = default_sigma,
) -> np.ndarray:
    """Peak-one Gaussians at each centre cell, overlaps combined by maximum."""
    _check(ann, num_classes)
    hc, wc = grid_shape(ann, stride)
    heat = np.zeros((num_classes, hc, wc))
    ys = np.arange(hc)[:, None]
    xs = np.arange(wc)[None, :]
    for b in ann.boxes:
        sigma = sigma_rule(b, stride)
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        x, y = _cell(b, stride)
        g = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma * sigma))
        np.maximum(heat[b.class_id], g, out=heat[b.class_id])
    return heat


def _resolve_keypoints(ann: Annotation, stride: int, warn: bool = True) -> list[Keypoint]:
    chosen: dict[tuple[int, int], Box] = {}
    for b in ann.boxes:
        cell = _cell(b, stride)
        prev = chosen.get(cell)
        if prev is None:
            chosen[cell] = b
            continue
        if warn:
            logger.warning("boxes %s and %s share cell %s; keeping the larger one", prev, b, cell)
        if b.w * b.h > prev.w * prev.h:
            chosen[cell] = b
    return [Keypoint(x, y, b.class_id, b) for (x, y), b in chosen.items()]


def _fill_size_offset(ann: Annotation, stride: int, keypoints: list[Keypoint]):
    hc, wc = grid_shape(ann, stride)
    size = np.zeros((2, hc, wc))
    offset = np.zeros((2, hc, wc))
    for k in keypoints:
        b = k.box
        size[:, k.y, k.x] = (b.w, b.h)
        offset[:, k.y, k.x] = (b.cx / stride - k.x, b.cy / stride - k.y)
    return size, offset


def make_size_offset_maps(ann: Annotation, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Box size (input pixels) and sub-cell centre offset at each keypoint cell, zero elsewhere."""
    ann.validate()
    return _fill_size_offset(ann, stride, _resolve_keypoints(ann, stride))


def make_targets(
    ann: Annotation,
    stride: int,
    num_classes: int = 1,
    sigma_rule: Callable[[Box, int], float] = default_sigma,
    warn_collisions: bool = True,
) -> TargetMaps:
    """Heatmap, size and offset targets for one annotation.

    Boxes that land in the same cell keep only the larger box; pass
    ``warn_collisions=False`` to skip the per-collision warning (training
    rebuilds the same targets every epoch).
    """
    heat = gaussian_splat(ann, stride, num_classes, sigma_rule)
    keypoints = _resolve_keypoints(ann, stride, warn_collisions)
    size, offset = _fill_size_offset(ann, stride, keypoints)
    return TargetMaps(stride, heat, size, offset, keypoints)
