import itertools

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from lgsa.synth import (
    DatasetConfig,
    DatasetError,
    SceneSpec,
    box_iou,
    draw_counts,
    generate_dataset,
    generate_scene,
    load_dataset,
    save_dataset,
)


def pixel_box(b):
    return (b.cx - (b.w - 1) / 2, b.cy - (b.h - 1) / 2, b.cx + (b.w - 1) / 2, b.cy + (b.h - 1) / 2)


class TestScene:
    def test_deterministic(self):
        spec = SceneSpec(count=15, rng_seed=7)
        a_img, a_ann, _ = generate_scene(spec)
        b_img, b_ann, _ = generate_scene(spec)
        assert_array_equal(a_img, b_img)
        assert a_ann == b_ann

    def test_empty_scene(self):
        img, ann, info = generate_scene(SceneSpec(count=0, rng_seed=3))
        assert img.shape == (128, 128, 3) and img.dtype == np.uint8
        assert ann.boxes == [] and info.shortfall == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_zero_occlusion_has_disjoint_boxes(self, seed):
        _, ann, info = generate_scene(SceneSpec(count=10, occlusion=0.0, rng_seed=seed))
        assert len(ann.boxes) == 10 and info.forced == 0
        for a, b in itertools.combinations(ann.boxes, 2):
            assert box_iou(pixel_box(a), pixel_box(b)) == 0.0

    @pytest.mark.parametrize("seed", range(8))
    def test_box_is_tight(self, seed):
        # the background is drawn first, so the single object's support is
        # exactly where the two renders differ
        bg, _, _ = generate_scene(SceneSpec(count=0, rng_seed=seed))
        img, ann, _ = generate_scene(SceneSpec(count=1, rng_seed=seed))
        ys, xs = np.nonzero(np.any(bg != img, axis=2))
        x0, y0, x1, y1 = pixel_box(ann.boxes[0])
        assert abs(xs.min() - x0) <= 1 and abs(xs.max() - x1) <= 1
        assert abs(ys.min() - y0) <= 1 and abs(ys.max() - y1) <= 1

    def test_counts_match_annotations(self):
        for seed in range(5):
            _, ann, info = generate_scene(SceneSpec(count=40, rng_seed=seed))
            assert len(ann.boxes) == info.placed == 40

    def test_crowded_scene_records_shortfall(self, caplog):
        _, ann, info = generate_scene(SceneSpec(image_size=32, count=200, occlusion=0.0, retries=20, rng_seed=0))
        assert info.placed == len(ann.boxes) < 200
        assert info.shortfall == 200 - info.placed
        assert "placed" in caplog.text

    @pytest.mark.parametrize("kw", [dict(count=-1), dict(occlusion=1.5), dict(pose_jitter=-0.1), dict(image_size=8)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SceneSpec(**kw)


class TestCounts:
    def test_uniform_deciles(self):
        counts = draw_counts(DatasetConfig(n_images=1000, count_range=(5, 60)), np.random.default_rng(0))
        assert counts.min() >= 5 and counts.max() <= 60
        edges = np.linspace(5, 61, 11)
        hist, _ = np.histogram(counts, bins=edges)
        assert np.all(np.abs(hist / 1000 - 0.1) <= 0.03), hist

    def test_nonuniform_low_band(self):
        cfg = DatasetConfig(distribution="nonuniform", n_images=1000, count_range=(1, 100))
        counts = draw_counts(cfg, np.random.default_rng(0))
        lo, hi = cfg.low_band
        assert np.mean((counts >= lo) & (counts <= hi)) >= 0.75
        assert counts.max() > hi and counts.max() <= 100

    def test_unknown_distribution(self):
        with pytest.raises(ValueError):
            draw_counts(DatasetConfig(distribution="bimodal"), np.random.default_rng(0))


class TestDataset:
    def test_split_sizes(self):
        m = generate_dataset("uniform", 1000, count_range=(0, 0), image_size=16)
        assert len(m.split("train")) == 700 and len(m.split("test")) == 300

    def test_per_image_seeds(self):
        m = generate_dataset("uniform", 3, count_range=(4, 4), seed=11)
        img, ann, _ = generate_scene(SceneSpec(count=4, rng_seed=13))
        assert_array_equal(m.entries[2].image, img)
        assert m.entries[2].annotation == ann

    def test_save_load_roundtrip(self, tmp_path):
        m = generate_dataset("uniform", 5, count_range=(3, 8), seed=2, image_size=64)
        save_dataset(m, tmp_path)
        back = load_dataset(tmp_path)
        assert len(back) == 5
        for a, b in zip(m.entries, back.entries):
            assert a.annotation == b.annotation
            assert a.split == b.split
            assert_array_equal(a.image, b.load_image(tmp_path))
        assert back.distribution == "uniform" and back.seed == 2

    def test_regeneration_is_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            save_dataset(generate_dataset("nonuniform", 4, seed=5, image_size=64), tmp_path / d)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_truncated_line_names_line(self, tmp_path):
        save_dataset(generate_dataset("uniform", 3, count_range=(2, 2), image_size=32), tmp_path)
        path = tmp_path / "annotations.jsonl"
        lines = path.read_text().splitlines()
        lines[1] = lines[1][: len(lines[1]) // 2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetError, match="line 2"):
            load_dataset(tmp_path)

    def test_missing_image(self, tmp_path):
        save_dataset(generate_dataset("uniform", 2, count_range=(1, 1), image_size=32), tmp_path)
        (tmp_path / "images" / "00001.ppm").unlink()
        with pytest.raises(DatasetError, match="not found"):
            load_dataset(tmp_path)

    def test_empty_directory(self, tmp_path):
        m = load_dataset(tmp_path)
        assert len(m) == 0 and m.split("train") == []

    def test_bad_split_name(self):
        with pytest.raises(ValueError):
            generate_dataset("uniform", 1, count_range=(0, 0), image_size=16).split("val")
