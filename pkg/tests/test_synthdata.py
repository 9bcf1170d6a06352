"""Tests for the shape generator and elastic-warp pairs."""

import numpy as np
import pytest

import gradicon.synthdata as synthdata
from gradicon.autodiff import Tensor
from gradicon.geometry import FieldMap, fold_fraction, resample_image
from gradicon.synthdata import (
    ElasticWarpSpec,
    LandmarkSet,
    ShapeSpec,
    WarpGenerationError,
    gen_elastic_pairs,
    gen_shapes,
    random_warp,
    render_shape,
)


class TestShapes:
    """Hollow circles and triangles."""

    def test_centred_circle(self):
        image, mask = render_shape(ShapeSpec("circle", (0.5, 0.5), 0.25), 64)
        assert image.max() == 1.0
        assert image[32, 32] == 0.0 and mask[32, 32] == 1.0
        assert mask[0, 0] == 0.0

    def test_triangle(self):
        image, mask = render_shape(ShapeSpec("triangle", (0.5, 0.5), 0.3, rotation=0.4), 64)
        assert image.max() == 1.0 and mask[32, 32] == 1.0 and image[32, 32] == 0.0

    def test_deterministic(self):
        first, second = gen_shapes(5, 32, seed=7), gen_shapes(5, 32, seed=7)
        assert all(a[0].tobytes() == b[0].tobytes() and a[2] == b[2] for a, b in zip(first, second))
        assert gen_shapes(1, 32, seed=8)[0][0].tobytes() != first[0][0].tobytes()

    def test_margin_and_ranges(self):
        size = 128
        for image, mask, spec in gen_shapes(40, size, seed=1):
            rows, cols = np.nonzero(image)
            lo, hi = 0.05 * size, 0.95 * size
            assert rows.min() >= lo - 1 and rows.max() <= hi and cols.min() >= lo - 1 and cols.max() <= hi
            assert image.min() >= 0.0 and image.max() <= 1.0
            assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_both_kinds_appear(self):
        kinds = {spec.kind for _, _, spec in gen_shapes(30, 16, seed=0)}
        assert kinds == {"circle", "triangle"}

    def test_corpus_shape(self):
        shapes = gen_shapes(2000, 128, seed=0)
        assert len(shapes) == 2000 and shapes[0][0].shape == (128, 128)

    def test_errors(self):
        with pytest.raises(ValueError):
            ShapeSpec("square", (0.5, 0.5), 0.2)
        with pytest.raises(ValueError):
            gen_shapes(0)
        with pytest.raises(ValueError):
            gen_shapes(1, size=8)


class TestElasticPairs:
    """Fold-free warps with landmark truth."""

    def mask(self, size=32):
        return gen_shapes(1, size, seed=3)[0][1]

    def test_zero_std_identity(self):
        m = self.mask()
        pair = gen_elastic_pairs(m, 1, ElasticWarpSpec(std=0.0))[0]
        assert np.array_equal(pair.target, pair.source)
        assert np.array_equal(pair.landmarks.points_a, pair.landmarks.points_b)

    def test_constant_shift(self, monkeypatch):
        c = np.array([0.03, -0.02])
        shift = FieldMap(np.broadcast_to(c.reshape(1, 2, 1, 1), (1, 2, 32, 32)).copy())
        monkeypatch.setattr(synthdata, "random_warp", lambda shape, spec, rng: shift)
        pair = gen_elastic_pairs(self.mask(), 1, ElasticWarpSpec(landmarks=30))[0]
        lm = pair.landmarks
        assert np.abs(lm.points_a - lm.points_b - c).max() < 1e-15

    def test_construction_exact(self):
        pair = gen_elastic_pairs(self.mask(), 2, ElasticWarpSpec(std=0.03), seed=4)[1]
        again = resample_image(Tensor(pair.source), pair.truth).data
        assert again.tobytes() == pair.target.tobytes()

    def test_fold_free_and_deterministic(self):
        first = gen_elastic_pairs(self.mask(), 3, seed=5)
        second = gen_elastic_pairs(self.mask(), 3, seed=5)
        for p, q in zip(first, second):
            assert fold_fraction(p.truth, (32, 32)).fraction_negative == 0.0
            assert p.target.tobytes() == q.target.tobytes()
            assert np.all((p.target_mask == 0) | (p.target_mask == 1))

    def test_landmarks_on_target_foreground(self):
        pair = gen_elastic_pairs(self.mask(), 1, seed=6)[0]
        pts = pair.landmarks.points_b
        idx = np.floor(pts * 32).astype(int)
        assert np.all(pair.target_mask[0, 0, idx[:, 0], idx[:, 1]] == 1)
        assert np.all((pair.landmarks.points_a >= 0) & (pair.landmarks.points_a <= 1))

    def test_image_is_warped_with_mask(self):
        image, mask, _ = gen_shapes(1, 32, seed=3)[0]
        pair = gen_elastic_pairs(mask, 1, seed=2, image=image)[0]
        assert np.array_equal(pair.source[0, 0], image)

    def test_rejection_exhaustion(self):
        with pytest.raises(WarpGenerationError):
            gen_elastic_pairs(self.mask(), 1, ElasticWarpSpec(std=5.0, max_tries=2))

    def test_errors(self):
        with pytest.raises(ValueError):
            gen_elastic_pairs(np.full((8, 8), 0.5), 1)
        with pytest.raises(ValueError):
            ElasticWarpSpec(std=-1.0)
        with pytest.raises(ValueError):
            LandmarkSet(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_random_warp_shape(self):
        warp = random_warp((16, 16), ElasticWarpSpec(), np.random.default_rng(0))
        assert warp.displacement.shape == (1, 2, 16, 16)
