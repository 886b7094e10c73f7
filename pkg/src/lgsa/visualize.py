"""Render prediction maps, pixel-attention output, similarity matrices and box overlays."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .metrics import decode
from .network import LGSANet, preprocess
from .pnm import to_gray8, write_pgm, write_ppm
from .targets import Annotation

PRED_COLOR = (255, 40, 40)
GT_COLOR = (40, 220, 40)


@dataclass
class VisualizationResult:
    files: list[Path] = field(default_factory=list)
    contrast_raw: float = float("nan")  # max - min of the LR heatmap
    contrast_pam: float = float("nan")  # max - min of the heat channels after pixel attention
    sim_shapes: list[tuple[int, int]] = field(default_factory=list)
    num_detections: int = 0
    num_ground_truth: int | None = None


def contrast(values: np.ndarray) -> float:
    return float(np.max(values) - np.min(values))


def stretch(values: np.ndarray, low_pct: float = 1.0, high_pct: float = 99.0) -> np.ndarray:
    """Percentile contrast stretch to 8 bits; used for the similarity matrices."""
    lo, hi = np.percentile(values, [low_pct, high_pct])
    if hi <= lo:
        lo, hi = float(values.min()), float(values.max())
    return to_gray8(values, lo, hi)


def draw_box(img: np.ndarray, cx, cy, w, h, color) -> None:
    """One-pixel rectangle outline, clipped to the image, drawn in place."""
    H, W = img.shape[:2]
    x0, x1 = int(round(cx - (w - 1) / 2)), int(round(cx + (w - 1) / 2))
    y0, y1 = int(round(cy - (h - 1) / 2)), int(round(cy + (h - 1) / 2))
    xs0, xs1 = max(x0, 0), min(x1, W - 1)
    ys0, ys1 = max(y0, 0), min(y1, H - 1)
    if xs0 > xs1 or ys0 > ys1:
        return
    for y in (y0, y1):
        if 0 <= y < H:
            img[y, xs0 : xs1 + 1] = color
    for x in (x0, x1):
        if 0 <= x < W:
            img[ys0 : ys1 + 1, x] = color


def visualize(
    net: LGSANet,
    cfg: TrainConfig,
    image: np.ndarray,
    out_dir,
    annotation: Annotation | None = None,
    prefix: str = "",
) -> VisualizationResult:
    """Write PGM/PPM renderings for one uint8 (H,W,3) image into ``out_dir``.

    Files: ``lr_{heat,size_w,size_h,offset_x,offset_y}_{raw,pam}.pgm`` (before and
    after pixel attention, lgsa mode only for ``_pam``), ``pam_weight.pgm``,
    ``sim_<level>.pgm`` per fused skip point (rows: HR tokens, columns: LR
    tokens), ``overlay.ppm`` and ``counts.txt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = VisualizationResult()
    C = cfg.num_classes

    def emit(name: str, arr: np.ndarray, color: bool = False) -> None:
        path = out / f"{prefix}{name}"
        (write_ppm if color else write_pgm)(path, arr)
        res.files.append(path)

    with T.no_grad():
        lr, hr, diag = net(preprocess(image))
    lr_maps = lr.numpy(0)
    raw = np.concatenate([lr_maps.heat, lr_maps.size, lr_maps.offset])
    names = [f"heat{c}" if C > 1 else "heat" for c in range(C)] + ["size_w", "size_h", "offset_x", "offset_y"]
    res.contrast_raw = contrast(lr_maps.heat)
    pam = diag.learnable_map[0] if diag.learnable_map is not None else None
    for i, name in enumerate(names):
        # before/after pairs share one intensity scale so they are comparable
        pair = raw[i] if pam is None else np.stack([raw[i], pam[i]])
        lo, hi = float(pair.min()), float(pair.max())
        emit(f"lr_{name}_raw.pgm", to_gray8(raw[i], lo, hi))
        if pam is not None:
            emit(f"lr_{name}_pam.pgm", to_gray8(pam[i], lo, hi))
    if pam is not None:
        res.contrast_pam = contrast(pam[:C])
        emit("pam_weight.pgm", to_gray8(diag.weighting[0, 0], 0.0, 1.0))

    levels = [lvl for lvl in reversed(range(cfg.num_stages)) if lvl in net.cfg.skip_levels]
    for lvl, sim in zip(levels, diag.sims):
        s = sim[0]
        res.sim_shapes.append(tuple(s.shape))
        emit(f"sim_{lvl}.pgm", stretch(s))

    hr_maps = hr.numpy(0)
    dets = decode(hr_maps, cfg.stride, cfg.score_threshold, cfg.top_k)
    res.num_detections = len(dets)
    canvas = np.array(image, dtype=np.uint8, copy=True)
    if annotation is not None:
        res.num_ground_truth = len(annotation)
        for b in annotation.boxes:
            draw_box(canvas, b.cx, b.cy, b.w, b.h, GT_COLOR)
    for d in dets:
        draw_box(canvas, d.cx, d.cy, d.w, d.h, PRED_COLOR)
    emit("overlay.ppm", canvas, color=True)

    counts = out / f"{prefix}counts.txt"
    lines = [f"predicted {res.num_detections}"]
    if res.num_ground_truth is not None:
        lines.append(f"ground_truth {res.num_ground_truth}")
    lines += [f"contrast_raw {res.contrast_raw:.6f}", f"contrast_pam {res.contrast_pam:.6f}"]
    counts.write_text("\n".join(lines) + "\n")
    res.files.append(counts)
    return res
