"""Deterministic synthetic trap images: elongated blobs on a cluttered board.

Each object is a rotated ellipse with a striped, shaded body. Boxes are the
tight extents of the ellipse's own pixel support, so ground truth is exact
even where later objects paint over earlier ones.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pnm import read_pnm, write_ppm
from .targets import Annotation, AnnotationError, Box

logger = logging.getLogger(__name__)

DISTRIBUTIONS = ("uniform", "nonuniform")
SPLITS = ("train", "test")
MANIFEST_FORMAT = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    count: int = 10
    occlusion: float = 0.3  # max pairwise box IoU accepted at placement
    pose_jitter: float = 0.5
    appearance_similarity: float = 0.7
    rng_seed: int = 0
    retries: int = 400

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        for name in ("occlusion", "pose_jitter", "appearance_similarity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class SceneInfo:
    requested: int
    placed: int
    max_overlap: float = 0.0
    forced: int = 0  # objects accepted above the IoU cap after the retry budget

    @property
    def shortfall(self) -> int:
        return self.requested - self.placed


def box_iou(a: tuple, b: tuple) -> float:
    """IoU of (x0, y0, x1, y1) boxes with inclusive pixel extents."""
    ix = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iy = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array([222.0, 212.0, 168.0]) + rng.uniform(-12, 12, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    gx, gy = rng.uniform(-18, 18, size=2)
    light = gx * (xx - 0.5) + gy * (yy - 0.5)
    # coarse blotches upsampled by repetition then smoothed with a box filter
    coarse = rng.normal(0, 7, size=(size // 16 + 2, size // 16 + 2))
    blot = np.kron(coarse, np.ones((16, 16)))[:size, :size]
    k = 9
    pad = np.pad(blot, k // 2, mode="edge")
    csum = pad.cumsum(0).cumsum(1)
    csum = np.pad(csum, ((1, 0), (1, 0)))
    blot = (csum[k:, k:] - csum[:-k, k:] - csum[k:, :-k] + csum[:-k, :-k]) / (k * k)
    img = base[None, None, :] + (light + blot)[..., None] + rng.normal(0, 4, size=(size, size, 3))

    # clutter: dark specks and short debris strokes
    for _ in range(size * size // 900):
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(0.6, 1.6)
        m = (xx * size - cx) ** 2 + (yy * size - cy) ** 2 <= r * r
        img[m] *= rng.uniform(0.45, 0.8)
    for _ in range(size * size // 3000):
        x0, y0 = rng.uniform(0, size, size=2)
        ang = rng.uniform(0, math.pi)
        length = rng.uniform(4, 14)
        t = np.linspace(0, length, int(length * 2) + 1)
        px = np.clip(np.rint(x0 + t * math.cos(ang)), 0, size - 1).astype(int)
        py = np.clip(np.rint(y0 + t * math.sin(ang)), 0, size - 1).astype(int)
        img[py, px] *= rng.uniform(0.55, 0.85)
    return img


def _ellipse(size: int, ex: float, ey: float, a: float, b: float, theta: float):
    """Pixel mask of an ellipse inside its bounding window, plus local coordinates."""
    r = int(math.ceil(max(a, b))) + 1
    x0, x1 = max(0, int(math.floor(ex)) - r), min(size - 1, int(math.ceil(ex)) + r)
    y0, y1 = max(0, int(math.floor(ey)) - r), min(size - 1, int(math.ceil(ey)) + r)
    if x0 > x1 or y0 > y1:
        return None
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    dx, dy = xs - ex, ys - ey
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    rho = (u / a) ** 2 + (v / b) ** 2
    mask = rho <= 1.0
    if not mask.any():
        return None
    return (y0, x0), mask, u / a, rho


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, Annotation, SceneInfo]:
    """Render one scene; returns the uint8 image, its annotation and placement info."""
    rng = np.random.default_rng(spec.rng_seed)
    size = spec.image_size
    img = _background(rng, size)
    info = SceneInfo(requested=spec.count, placed=0)
    placed: list[tuple] = []  # inclusive pixel boxes
    objects = []
    hard_cap = max(spec.occlusion, 0.5)

    for _ in range(spec.count):
        best = None
        for _attempt in range(spec.retries):
            a = rng.uniform(0.04, 0.065) * size
            aspect = 0.55 + 0.2 * spec.pose_jitter * rng.uniform(-1, 1)
            theta = 0.6 + spec.pose_jitter * rng.uniform(-math.pi / 2, math.pi / 2)
            ex, ey = rng.uniform(2, size - 3, size=2)
            ell = _ellipse(size, ex, ey, a, a * aspect, theta)
            if ell is None:
                continue
            (oy, ox), mask, _, _ = ell
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            pbox = (ox + cols[0], oy + rows[0], ox + cols[-1], oy + rows[-1])
            if pbox[2] - pbox[0] < 2 or pbox[3] - pbox[1] < 2:
                continue
            overlap = max((box_iou(pbox, q) for q in placed), default=0.0)
            cand = (overlap, pbox, (ex, ey, a, aspect, theta), ell)
            if best is None or overlap < best[0]:
                best = cand
            if overlap <= spec.occlusion:
                break
        if best is None or best[0] > hard_cap:
            continue
        if best[0] > spec.occlusion:
            info.forced += 1
        info.max_overlap = max(info.max_overlap, best[0])
        placed.append(best[1])
        objects.append(best)

    boxes = []
    for _overlap, pbox, (ex, ey, a, aspect, theta), ell in objects:
        (oy, ox), mask, along, rho = ell
        spread = 1.0 - spec.appearance_similarity
        colour = np.array([118.0, 78.0, 42.0]) + spread * rng.uniform(-70, 70, size=3)
        colour = colour + rng.uniform(-10, 10)
        period = rng.uniform(0.35, 0.6)
        stripes = 1.0 + 0.14 * np.sin(2 * math.pi * along / period + rng.uniform(0, 2 * math.pi))
        head = 1.0 - 0.25 * np.clip(along, 0, 1)
        rim = np.where(rho > 0.7, 0.72, 1.0)
        shade = stripes * head * rim
        body = colour[None, :] * shade[mask][:, None] + rng.normal(0, 5, size=(int(mask.sum()), 3))
        ys, xs = np.nonzero(mask)
        img[oy + ys, ox + xs] = body
        x0, y0, x1, y1 = pbox
        boxes.append(Box(float(x0 + x1) / 2.0, float(y0 + y1) / 2.0, float(x1 - x0 + 1), float(y1 - y0 + 1), 0))

    info.placed = len(boxes)
    if info.shortfall:
        logger.warning("scene seed %d: placed %d of %d objects", spec.rng_seed, info.placed, spec.count)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    ann = Annotation(size, size, boxes)
    return image, ann, info


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetEntry:
    image_file: str  # relative to the dataset root
    annotation: Annotation
    split: str
    image: np.ndarray | None = None

    def load_image(self, root) -> np.ndarray:
        if self.image is None:
            self.image = read_pnm(Path(root) / self.image_file)
        return self.image


@dataclass
class DatasetManifest:
    entries: list[DatasetEntry] = field(default_factory=list)
    distribution: str = "uniform"
    seed: int = 0
    generator: dict = field(default_factory=dict)
    root: Path | None = None

    def split(self, name: str) -> list[DatasetEntry]:
        if name == "all":
            return list(self.entries)
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class DatasetConfig:
    distribution: str = "uniform"
    n_images: int = 100
    count_range: tuple[int, int] = (5, 60)
    low_band: tuple[int, int] = (1, 35)
    low_fraction: float = 0.8
    image_size: int = 128
    occlusion: float = 0.3
    pose_jitter: float = 0.5
    appearance_similarity: float = 0.7
    train_fraction: float = 0.7
    seed: int = 0


def draw_counts(cfg: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.count_range
    if cfg.distribution == "uniform":
        return rng.integers(lo, hi + 1, size=cfg.n_images)
    if cfg.distribution != "nonuniform":
        raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
    blo, bhi = cfg.low_band
    blo, bhi = max(blo, lo), min(bhi, hi)
    low = rng.random(cfg.n_images) < cfg.low_fraction
    low_counts = rng.integers(blo, bhi + 1, size=cfg.n_images)
    # long tail above the band: geometric-like decay toward hi
    tail = bhi + 1 + np.floor(rng.exponential(scale=max((hi - bhi) / 3.0, 1.0), size=cfg.n_images))
    tail = np.minimum(tail, hi).astype(int)
    return np.where(low, low_counts, tail) if bhi < hi else low_counts


def generate_dataset(
    distribution: str = "uniform",
    n_images: int = 100,
    count_range: tuple[int, int] | None = None,
    seed: int = 0,
    **kwargs,
) -> DatasetManifest:
    """Scenes with per-image seeds ``seed + index`` and a leading 70/30 train/test split."""
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    if count_range is None:
        count_range = (5, 60) if distribution == "uniform" else (1, 100)
    cfg = DatasetConfig(distribution=distribution, n_images=n_images, count_range=tuple(count_range), seed=seed, **kwargs)
    counts = draw_counts(cfg, np.random.default_rng(seed))
    n_train = int(round(cfg.train_fraction * n_images))
    entries = []
    for i, count in enumerate(counts):
        spec = SceneSpec(
            image_size=cfg.image_size,
            count=int(count),
            occlusion=cfg.occlusion,
            pose_jitter=cfg.pose_jitter,
            appearance_similarity=cfg.appearance_similarity,
            rng_seed=seed + i,
        )
        image, ann, _ = generate_scene(spec)
        split = "train" if i < n_train else "test"
        entries.append(DatasetEntry(f"images/{i:05d}.ppm", ann, split, image))
    gen = asdict(cfg)
    gen["count_range"] = list(cfg.count_range)
    gen["low_band"] = list(cfg.low_band)
    return DatasetManifest(entries, distribution, seed, gen)


def annotation_record(entry: DatasetEntry) -> dict:
    ann = entry.annotation
    return {
        "image": entry.image_file,
        "width": ann.width,
        "height": ann.height,
        "boxes": [b.as_list() for b in ann.boxes],
    }


def save_dataset(manifest: DatasetManifest, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for e in manifest.entries:
        if e.image is None:
            if manifest.root is None:
                raise DatasetError(f"{e.image_file}: no image data to save")
            e.load_image(manifest.root)
        write_ppm(root / e.image_file, e.image)
        lines.append(json.dumps(annotation_record(e)))
    (root / "annotations.jsonl").write_text("".join(line + "\n" for line in lines))
    meta = {
        "format": MANIFEST_FORMAT,
        "distribution": manifest.distribution,
        "seed": manifest.seed,
        "generator": manifest.generator,
        "splits": {s: [e.image_file for e in manifest.entries if e.split == s] for s in SPLITS},
    }
    (root / "manifest.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    manifest.root = root
    return root


def _parse_record(line: str, lineno: int) -> tuple[str, Annotation]:
    try:
        rec = json.loads(line)
        boxes = []
        for raw in rec["boxes"]:
            if len(raw) != 5:
                raise ValueError(f"box needs 5 values, got {raw!r}")
            cx, cy, w, h, cls = raw
            if int(cls) != cls:
                raise ValueError(f"class id must be an integer, got {cls!r}")
            boxes.append(Box(float(cx), float(cy), float(w), float(h), int(cls)))
        ann = Annotation(int(rec["width"]), int(rec["height"]), boxes)
        ann.validate()
        return str(rec["image"]), ann
    except (ValueError, KeyError, TypeError, AnnotationError) as exc:
        raise DatasetError(f"annotations.jsonl line {lineno}: {exc}") from exc


def load_dataset(root) -> DatasetManifest:
    """Read a dataset directory; a missing or empty directory yields an empty manifest."""
    root = Path(root)
    ann_path = root / "annotations.jsonl"
    if not ann_path.exists():
        return DatasetManifest(root=root)
    meta = {}
    if (root / "manifest.json").exists():
        meta = json.loads((root / "manifest.json").read_text())
    split_of = {f: s for s, files in meta.get("splits", {}).items() for f in files}
    entries = []
    for lineno, line in enumerate(ann_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        image_file, ann = _parse_record(line, lineno)
        if not (root / image_file).is_file():
            raise DatasetError(f"annotations.jsonl line {lineno}: image {image_file} not found")
        entries.append(DatasetEntry(image_file, ann, split_of.get(image_file, "train")))
    return DatasetManifest(
        entries,
        meta.get("distribution", "uniform"),
        meta.get("seed", 0),
        meta.get("generator", {}),
        root,
    )
