import filecmp
import json

import numpy as np
import pytest

from demask.errors import DatasetError, TemplateError
from demask.imaging import BinaryMask, ImageTensor, compose, save_image
from demask.landmarks import LandmarkSet, save_landmarks
from demask.segmentation import PolygonAnnotation, polygon_to_mask
from demask.synthdata import (
    DEFAULT_TEMPLATES,
    Manifest,
    ManifestEntry,
    MaskTemplate,
    SyntheticPair,
    apply_mask_template,
    generate_dataset,
    load_entry,
    load_manifest,
    save_manifest,
    split_by_gender,
    template_draws,
)

from conftest import face_landmarks, synthetic_face


def square_anchor_landmarks(size=64):
    """Landmarks whose first four points trace an axis-aligned square."""
    pts = np.full((98, 2), 0.5)
    pts[0] = (0.25, 0.25)
    pts[1] = (0.75, 0.25)
    pts[2] = (0.75, 0.75)
    pts[3] = (0.25, 0.75)
    return LandmarkSet(pts)


def make_corpus(tmp_path, rng, count=10, size=64, labels=None):
    img_dir = tmp_path / "faces"
    lm_dir = tmp_path / "landmarks"
    img_dir.mkdir()
    lm_dir.mkdir()
    lm = LandmarkSet(face_landmarks(size))
    for i in range(count):
        face = synthetic_face(rng, size)
        save_image(face, img_dir / f"face{i:03d}.png")
        save_landmarks(lm, lm_dir / f"face{i:03d}.txt")
    return img_dir, lm_dir


class TestTemplates:
    def test_defaults_are_valid(self):
        assert len(DEFAULT_TEMPLATES) == 5
        names = {t.name for t in DEFAULT_TEMPLATES}
        assert len(names) == 5

    def test_too_few_anchors(self):
        with pytest.raises(TemplateError):
            MaskTemplate("bad", anchor_indices=(0, 1, 2))

    def test_bad_fill(self):
        with pytest.raises(TemplateError):
            MaskTemplate("bad", fill=(1.5, 0.0, 0.0))
        with pytest.raises(TemplateError):
            MaskTemplate("bad", fill="no_such_texture")


class TestApplyMaskTemplate:
    def test_zero_jitter_matches_polygon_raster(self, rng):
        size = 64
        clean = synthetic_face(rng, size)
        lm = square_anchor_landmarks(size)
        tpl = MaskTemplate("square", anchor_indices=(0, 1, 2, 3),
                           fill=(0.1, 0.2, 0.3), jitter=0.0)
        pair = apply_mask_template(clean, lm, tpl, seed=7)
        expected = polygon_to_mask(
            PolygonAnnotation(lm.points[:4] * size, size), size)
        assert np.array_equal(pair.segmap.data, expected.data)

    def test_same_seed_bit_identical(self, rng):
        clean = synthetic_face(rng, 64)
        lm = LandmarkSet(face_landmarks(64))
        tpl = DEFAULT_TEMPLATES[0]
        a = apply_mask_template(clean, lm, tpl, seed=42)
        b = apply_mask_template(clean, lm, tpl, seed=42)
        assert np.array_equal(a.masked.data, b.masked.data)
        assert np.array_equal(a.segmap.data, b.segmap.data)

    def test_different_seed_differs(self, rng):
        clean = synthetic_face(rng, 64)
        lm = LandmarkSet(face_landmarks(64))
        tpl = DEFAULT_TEMPLATES[0]
        a = apply_mask_template(clean, lm, tpl, seed=1)
        b = apply_mask_template(clean, lm, tpl, seed=2)
        assert not np.array_equal(a.segmap.data, b.segmap.data)

    def test_outside_mask_preserved_exactly(self, rng):
        for trial in range(10):
            clean = synthetic_face(rng, 48)
            lm = LandmarkSet(face_landmarks(48))
            tpl = DEFAULT_TEMPLATES[trial % len(DEFAULT_TEMPLATES)]
            pair = apply_mask_template(clean, lm, tpl, seed=trial)
            inverse = BinaryMask(1.0 - pair.segmap.data)
            lhs = compose(pair.masked, inverse)
            rhs = compose(pair.clean, inverse)
            assert np.array_equal(lhs.data, rhs.data)

    def test_mask_area_fraction_bounds(self, rng):
        clean = synthetic_face(rng, 64)
        lm = LandmarkSet(face_landmarks(64))
        for i, tpl in enumerate(DEFAULT_TEMPLATES):
            pair = apply_mask_template(clean, lm, tpl, seed=i)
            frac = pair.segmap.mask_pixel_count / (64 * 64)
            assert 0.0 < frac < 0.6

    def test_degenerate_anchors(self, rng):
        clean = synthetic_face(rng, 64)
        pts = np.full((98, 2), 0.5)  # all anchors coincide
        tpl = MaskTemplate("degenerate", anchor_indices=(0, 1, 2, 3), jitter=0.0)
        with pytest.raises(TemplateError):
            apply_mask_template(clean, LandmarkSet(pts), tpl, seed=0)

    def test_invariant_enforced_on_construction(self, rng):
        clean = synthetic_face(rng, 32)
        bad = ImageTensor(np.clip(clean.data + 0.1, 0, 1))
        seg = BinaryMask(np.zeros((32, 32)))
        with pytest.raises(DatasetError):
            SyntheticPair(clean, bad, seg, LandmarkSet(face_landmarks()))


class TestGenerateDataset:
    def test_ten_inputs_three_templates(self, tmp_path, rng):
        img_dir, lm_dir = make_corpus(tmp_path, rng, count=10)
        manifest = generate_dataset(img_dir, lm_dir, DEFAULT_TEMPLATES[:3],
                                    seed=11, out_dir=tmp_path / "out", image_size=64)
        assert len(manifest.entries) == 10
        for e in manifest.entries:
            pair = load_entry(e, 64)  # invariant re-validated on load
            assert pair.segmap.mask_pixel_count > 0

    def test_reproducible_template_assignment(self, tmp_path, rng):
        draws_a = template_draws(seed=11, count=10, num_templates=3)
        draws_b = template_draws(seed=11, count=10, num_templates=3)
        assert np.array_equal(draws_a, draws_b)

    def test_regeneration_byte_identical(self, tmp_path, rng):
        img_dir, lm_dir = make_corpus(tmp_path, rng, count=4)
        m1 = generate_dataset(img_dir, lm_dir, DEFAULT_TEMPLATES, seed=3,
                              out_dir=tmp_path / "a", image_size=64)
        m2 = generate_dataset(img_dir, lm_dir, DEFAULT_TEMPLATES, seed=3,
                              out_dir=tmp_path / "b", image_size=64)
        for e1, e2 in zip(m1.entries, m2.entries):
            for f1, f2 in ((e1.clean, e2.clean), (e1.masked, e2.masked),
                           (e1.segmap, e2.segmap), (e1.landmarks, e2.landmarks)):
                assert filecmp.cmp(f1, f2, shallow=False)

    def test_empty_dir_raises(self, tmp_path):
        (tmp_path / "empty").mkdir()
        (tmp_path / "lm").mkdir()
        with pytest.raises(DatasetError):
            generate_dataset(tmp_path / "empty", tmp_path / "lm",
                             DEFAULT_TEMPLATES, 0, tmp_path / "out", 64)

    def test_missing_landmarks_skipped_with_warning(self, tmp_path, rng):
        img_dir, lm_dir = make_corpus(tmp_path, rng, count=3)
        (lm_dir / "face001.txt").unlink()
        manifest = generate_dataset(img_dir, lm_dir, DEFAULT_TEMPLATES, 0,
                                    tmp_path / "out", 64)
        assert len(manifest.entries) == 2
        assert any("face001" in w for w in manifest.warnings)

    def test_labels_recorded(self, tmp_path, rng):
        img_dir, lm_dir = make_corpus(tmp_path, rng, count=2)
        labels = {"face000": "male", "face001": "female"}
        manifest = generate_dataset(img_dir, lm_dir, DEFAULT_TEMPLATES, 0,
                                    tmp_path / "out", 64, labels=labels)
        assert [e.gender for e in manifest.entries] == ["male", "female"]

    def test_template_histogram_uniform(self):
        k, n = 3, 1000
        draws = template_draws(seed=5, count=n, num_templates=k)
        counts = np.bincount(draws, minlength=k)
        expected = n / k
        sigma = np.sqrt(n * (1 / k) * (1 - 1 / k))
        assert np.all(np.abs(counts - expected) <= 4 * sigma)

    def test_manifest_round_trip(self, tmp_path):
        m = Manifest([ManifestEntry("a.png", "b.png", "c.png", "d.txt", "male")],
                     seed=9, warnings=["w1"])
        p = tmp_path / "m.jsonl"
        save_manifest(m, p)
        back = load_manifest(p)
        assert back.seed == 9
        assert back.warnings == ["w1"]
        assert back.entries == m.entries
        # every line parses as standalone JSON
        for line in p.read_text().splitlines():
            json.loads(line)


class TestSplitByGender:
    def entries(self, genders):
        return Manifest([ManifestEntry(f"c{i}.png", f"m{i}.png", f"s{i}.png",
                                       f"l{i}.txt", g)
                         for i, g in enumerate(genders)], seed=0)

    def test_all_male_labels(self):
        m, f = split_by_gender(self.entries(["male"] * 4))
        assert len(m.entries) == 4 and len(f.entries) == 0

    def test_partition_property(self):
        manifest = self.entries(["male", "female", "male", "female", "female"])
        m, f = split_by_gender(manifest)
        assert len(m.entries) + len(f.entries) == 5
        masked_m = {e.masked for e in m.entries}
        masked_f = {e.masked for e in f.entries}
        assert not masked_m & masked_f

    def test_classifier_stub_routes_all_male(self):
        manifest = self.entries([None, None, None])
        m, f = split_by_gender(manifest, classifier=lambda path: 0.9)
        assert len(m.entries) == 3 and len(f.entries) == 0
        assert all(e.gender == "male" for e in m.entries)

    def test_labels_win_over_classifier(self):
        manifest = self.entries(["female", None])
        m, f = split_by_gender(manifest, classifier=lambda path: 0.9)
        assert len(f.entries) == 1 and len(m.entries) == 1

    def test_unlabeled_without_classifier(self):
        with pytest.raises(DatasetError):
            split_by_gender(self.entries([None]))
