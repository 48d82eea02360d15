import json
import math

import numpy as np
import pytest
import torch

from demask.errors import AnnotationError, ConfigError, ParameterError, ShapeMismatchError
from demask.imaging import BinaryMask
from demask.segmentation import (
    MaskSegmenter,
    PolygonAnnotation,
    SegmenterConfig,
    classify_proposals,
    dilate_mask,
    iou,
    labelme_to_mask,
    load_labelme,
    polygon_to_mask,
    predict_mask,
    segmentation_loss,
)

from conftest import random_image, random_mask
from gradcheck import autograd_gradient, central_difference_gradient, relative_gradient_error


def rect_mask(size, r0, r1, c0, c1):
    m = np.zeros((size, size), dtype=np.float32)
    m[r0:r1, c0:c1] = 1.0
    return BinaryMask(m)


class TestIou:
    def test_self_is_one(self, rng):
        m = random_mask(rng, 16)
        assert iou(m, m) == 1.0

    def test_disjoint_is_zero(self):
        a = rect_mask(8, 0, 2, 0, 2)
        b = rect_mask(8, 4, 6, 4, 6)
        assert iou(a, b) == 0.0

    def test_overlapping_rectangles_one_third(self):
        # 2x4 rectangles sharing a 2x2 block: 4 / (8 + 8 - 4) = 1/3
        a = rect_mask(8, 0, 2, 0, 4)
        b = rect_mask(8, 0, 2, 2, 6)
        assert iou(a, b) == pytest.approx(1.0 / 3.0)

    def test_both_empty_is_one(self):
        z = BinaryMask(np.zeros((4, 4)))
        assert iou(z, z) == 1.0

    def test_symmetric(self, rng):
        a, b = random_mask(rng, 16), random_mask(rng, 16)
        assert iou(a, b) == iou(b, a)

    def test_one_iff_equal_nonempty(self, rng):
        a = random_mask(rng, 16, p=0.4)
        b = BinaryMask(np.abs(a.data - rect_mask(16, 0, 1, 0, 1).data))
        assert iou(a, b) < 1.0

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            iou(random_mask(rng, 8), random_mask(rng, 9))


class TestClassifyProposals:
    def test_identical_positive(self):
        g = rect_mask(8, 0, 4, 0, 4)
        assert classify_proposals([g], g, 0.5) == [True]

    def test_exactly_half_is_positive(self):
        # proposal covers half the ground region: IoU = 2/4 = 0.5 exactly
        ground = rect_mask(8, 0, 2, 0, 2)
        prop = rect_mask(8, 0, 1, 0, 2)
        assert iou(prop, ground) == 0.5
        assert classify_proposals([prop], ground, 0.5) == [True]

    def test_one_third_is_negative(self):
        a = rect_mask(8, 0, 2, 0, 4)
        b = rect_mask(8, 0, 2, 2, 6)
        assert classify_proposals([a], b, 0.5) == [False]

    def test_threshold_validation(self):
        g = rect_mask(8, 0, 2, 0, 2)
        with pytest.raises(ParameterError):
            classify_proposals([g], g, 0.0)


class TestPolygonToMask:
    def test_square_pixel_count(self):
        ann = PolygonAnnotation([(2, 2), (6, 2), (6, 6), (2, 6)], image_size=8)
        m = polygon_to_mask(ann, 8)
        assert m.mask_pixel_count == 16
        assert m.data[2:6, 2:6].sum() == 16

    def test_triangle_area_within_perimeter(self):
        verts = np.array([(10, 10), (90, 20), (40, 80)], dtype=float)
        ann = PolygonAnnotation(verts, image_size=100)
        m = polygon_to_mask(ann, 100)
        perimeter = sum(np.linalg.norm(verts[i] - verts[(i + 1) % 3]) for i in range(3))
        assert abs(m.mask_pixel_count - ann.area()) <= perimeter

    def test_full_frame_rectangle(self):
        ann = PolygonAnnotation([(0, 0), (16, 0), (16, 16), (0, 16)], image_size=16)
        assert polygon_to_mask(ann, 16).mask_pixel_count == 16 * 16

    def test_degenerate_polygon(self):
        with pytest.raises(AnnotationError):
            polygon_to_mask(PolygonAnnotation([(1, 1), (5, 5), (3, 3)], 8), 8)

    def test_rescaling(self):
        ann = PolygonAnnotation([(32, 32), (96, 32), (96, 96), (32, 96)], image_size=128)
        m = polygon_to_mask(ann, 64)
        # scaled square spans pixels 16..47 in each axis
        assert m.mask_pixel_count == 32 * 32

    @pytest.mark.parametrize("unit_verts", [
        np.array([[0.123, 0.234], [0.87, 0.41], [0.31, 0.9]]),
        np.array([[0.5 + 0.4 * math.cos(a + 0.3), 0.5 + 0.4 * math.sin(a + 0.3)]
                  for a in np.linspace(0, 2 * math.pi, 5, endpoint=False)]),
    ], ids=["triangle", "pentagon"])
    def test_area_converges_with_resolution(self, unit_verts):
        base = 1024
        shifts = np.array([[0.0, 0.0], [0.013, 0.007], [0.0063, 0.0189],
                           [0.021, 0.011], [0.004, 0.023]])
        mean_errs = []
        for size in (32, 64, 128, 256):
            errs = []
            for sh in shifts:
                v = unit_verts * 0.9 + 0.03 + sh
                ann = PolygonAnnotation(v * base, base)
                frac = polygon_to_mask(ann, size).mask_pixel_count / size ** 2
                errs.append(abs(frac - ann.area() / base ** 2))
            mean_errs.append(np.mean(errs))
        for coarse, fine in zip(mean_errs, mean_errs[1:]):
            assert fine <= 0.6 * coarse


class TestLabelme:
    def test_parse_and_union(self, tmp_path):
        doc = {
            "version": "5.0.1",
            "imagePath": "face.png",
            "imageHeight": 64,
            "imageWidth": 64,
            "flags": {"ignored": True},
            "shapes": [
                {"label": "mask", "points": [[8, 8], [24, 8], [24, 24], [8, 24]],
                 "shape_type": "polygon"},
                {"label": "mask", "points": [[40, 40], [56, 40], [56, 56], [40, 56]]},
            ],
        }
        p = tmp_path / "ann.json"
        p.write_text(json.dumps(doc))
        anns = load_labelme(p)
        assert len(anns) == 2
        m = labelme_to_mask(p, 64)
        assert m.mask_pixel_count == 16 * 16 * 2

    def test_missing_fields(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"shapes": []}))
        with pytest.raises(AnnotationError):
            load_labelme(p)


class TestDilate:
    def test_radius_zero_identity(self, rng):
        m = random_mask(rng, 16)
        assert np.array_equal(dilate_mask(m, 0).data, m.data)

    def test_single_pixel_radius_one_plus_shape(self):
        m = np.zeros((7, 7), dtype=np.float32)
        m[3, 3] = 1.0
        out = dilate_mask(BinaryMask(m), 1)
        expected = np.zeros((7, 7))
        for dr in range(-1, 2):
            for dc in range(-1, 2):
                if math.hypot(dr, dc) <= 1.0:
                    expected[3 + dr, 3 + dc] = 1.0
        assert np.array_equal(out.data, expected)
        assert out.mask_pixel_count == 5

    def test_monotone_growth(self, rng):
        m = random_mask(rng, 24, p=0.05)
        once = dilate_mask(m, 1)
        twice = dilate_mask(once, 1)
        assert np.all(twice.data >= once.data)
        assert np.all(once.data >= m.data)

    def test_empty_mask(self):
        z = BinaryMask(np.zeros((8, 8)))
        assert dilate_mask(z, 3).mask_pixel_count == 0


class TestSegmentationLoss:
    def test_half_probability_is_ln2(self, rng):
        probs = torch.full((16, 16), 0.5, dtype=torch.float64)
        ground = random_mask(rng, 16)
        assert float(segmentation_loss(probs, ground)) == pytest.approx(math.log(2), abs=1e-12)

    def test_near_perfect_prediction(self, rng):
        ground = random_mask(rng, 16)
        probs = torch.as_tensor(ground.data, dtype=torch.float64)
        val = float(segmentation_loss(probs, ground))
        assert val <= -math.log1p(-1e-7) + 1e-12

    def test_gradient_matches_central_differences(self, rng):
        ground = (rng.uniform(size=(6, 6)) < 0.5).astype(np.float64)
        probs = rng.uniform(0.05, 0.95, size=(6, 6))

        def f_np(x):
            return float(segmentation_loss(torch.tensor(x), torch.tensor(ground)))

        def f_torch(t):
            return segmentation_loss(t, torch.tensor(ground))

        g_fd = central_difference_gradient(f_np, probs)
        g_auto = autograd_gradient(f_torch, probs)
        assert relative_gradient_error(g_fd, g_auto) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            segmentation_loss(torch.zeros(4, 4), torch.zeros(5, 5))


class TestSegmenter:
    def test_shape_and_binarization(self, rng):
        cfg = SegmenterConfig(input_size=32, base_channels=8, depth=3)
        model = MaskSegmenter(cfg)
        out = predict_mask(model, random_image(rng, 32), 0.5)
        assert out.data.shape == (32, 32)
        assert np.isin(out.data, (0.0, 1.0)).all()

    def test_size_mismatch(self, rng):
        model = MaskSegmenter(SegmenterConfig(input_size=64, base_channels=8, depth=3))
        with pytest.raises(ShapeMismatchError):
            predict_mask(model, random_image(rng, 32))

    def test_threshold_validation(self, rng):
        model = MaskSegmenter(SegmenterConfig(input_size=32, base_channels=8, depth=3))
        with pytest.raises(ParameterError):
            predict_mask(model, random_image(rng, 32), 1.0)

    def test_config_divisibility(self):
        with pytest.raises(ConfigError):
            SegmenterConfig(input_size=100, depth=4)
