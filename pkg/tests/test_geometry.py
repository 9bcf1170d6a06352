"""Tests for transform maps, composition, FD Jacobians, fold statistics and resampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradicon.autodiff import Tensor, backward, grid_sample
from gradicon.geometry import (
    AffineMap,
    BatchPermuted,
    FieldMap,
    Identity,
    JacobianProbe,
    Stacked,
    compose,
    eval_map,
    export_field,
    fold_fraction,
    identity_grid,
    jacobian_determinant,
    jacobian_fd,
    resample_image,
    resample_nearest,
)


def const_field(c, shape=(8, 8)):
    c = np.asarray(c, dtype=np.float64)
    return FieldMap(np.broadcast_to(c.reshape(1, -1, *([1] * len(shape))), (1, len(c)) + shape).copy())


def smooth_field(rng, shape=(16, 16), amp=0.03, batch=1):
    grid = identity_grid(shape, batch)
    x, y = grid[:, 0], grid[:, 1]
    a = rng.uniform(-1, 1, size=4)
    u = amp * np.stack([np.sin(2 * np.pi * (a[0] * x + a[1] * y)), np.cos(2 * np.pi * (a[2] * x - a[3] * y))], axis=1)
    return FieldMap(u)


class TestEvalMap:
    """Map evaluation with clipped interpolation."""

    def test_zero_field_is_identity(self):
        out = eval_map(const_field([0.0, 0.0]), np.array([[[0.5], [0.5]]]))
        np.testing.assert_allclose(out.data[0, :, 0], [0.5, 0.5])

    def test_constant_shift(self):
        out = eval_map(const_field([0.1, 0.0]), np.array([[[0.5], [0.5]]]))
        np.testing.assert_allclose(out.data[0, :, 0], [0.6, 0.5], atol=1e-15)

    def test_clipped_query_outside_domain(self):
        out = eval_map(const_field([0.1, 0.0]), np.array([[[1.2], [0.5]]]))
        np.testing.assert_allclose(out.data[0, :, 0], [1.3, 0.5], atol=1e-15)

    def test_identity_grid_pixel_centres(self):
        g = identity_grid((4, 2))
        np.testing.assert_allclose(g[0, 0, :, 0], [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(g[0, 1, 0], [0.25, 0.75])

    def test_field_map_definition(self):
        rng = np.random.default_rng(0)
        disp = rng.normal(0, 0.05, (1, 2, 6, 6))
        pts = rng.uniform(-0.3, 1.3, (1, 2, 20))
        ref = pts + grid_sample(Tensor(disp), np.clip(pts, 0, 1)).data
        np.testing.assert_allclose(FieldMap(disp)(pts).data, ref, atol=1e-15)

    def test_pure(self):
        phi = smooth_field(np.random.default_rng(1))
        pts = np.random.default_rng(2).random((1, 2, 9))
        assert np.array_equal(phi(pts).data, phi(pts).data)

    def test_gradient_through_field_and_points(self):
        disp = Tensor(np.random.default_rng(3).normal(0, 0.05, (1, 2, 5, 5)), requires_grad=True)
        pts = Tensor(np.array([[[0.41], [0.53]]]), requires_grad=True)
        backward(FieldMap(disp)(pts).sum())
        assert np.any(disp.grad != 0) and np.all(np.isfinite(pts.grad))


class TestAffineAndStacking:
    """Affine maps, stacked batches and batch permutations."""

    def test_affine(self):
        m = np.array([[1.1, 0.2, 0.05], [-0.1, 0.9, 0.0]])
        pts = np.random.default_rng(0).random((2, 2, 5))
        ref = np.einsum("ij,njp->nip", m[:, :2], pts) + m[:, 2:]
        np.testing.assert_allclose(AffineMap(m)(pts).data, ref, atol=1e-15)

    def test_stacked_routes_slices(self):
        a, b = const_field([0.1, 0.0]), const_field([0.0, -0.2])
        pts = np.full((2, 2, 3), 0.5)
        out = Stacked([a, b], [1, 1])(pts).data
        np.testing.assert_allclose(out[0, :, 0], [0.6, 0.5])
        np.testing.assert_allclose(out[1, :, 0], [0.5, 0.3])

    def test_batch_permuted(self):
        disp = np.zeros((2, 2, 4, 4))
        disp[0, 0] = 0.1
        phi = FieldMap(disp)
        pts = np.full((2, 2, 1), 0.5)
        out = BatchPermuted(phi, [1, 0])(pts).data
        np.testing.assert_allclose(out[:, 0, 0], [0.5, 0.6])

    def test_batch_permuted_requires_involution(self):
        with pytest.raises(ValueError):
            BatchPermuted(Identity(), [1, 2, 0])


class TestCompose:
    """Lazy composition semantics."""

    def test_identity_outer(self):
        psi = smooth_field(np.random.default_rng(0))
        pts = np.random.default_rng(1).random((1, 2, 30))
        np.testing.assert_array_equal(compose(Identity(), psi)(pts).data, psi(pts).data)

    def test_constant_shifts_add(self):
        a, b = const_field([0.05, -0.02]), const_field([0.03, 0.04])
        pts = np.random.default_rng(2).uniform(0.2, 0.8, (1, 2, 10))
        np.testing.assert_allclose(compose(a, b)(pts).data, pts + np.array([0.08, 0.02])[None, :, None], atol=1e-15)

    def test_pointwise_definition(self):
        rng = np.random.default_rng(3)
        phi, psi = smooth_field(rng), smooth_field(rng)
        pts = rng.random((1, 2, 25))
        np.testing.assert_allclose(compose(phi, psi)(pts).data, phi(psi(pts)).data, atol=1e-12)

    def test_associative(self):
        rng = np.random.default_rng(4)
        f, g, h = smooth_field(rng), smooth_field(rng), smooth_field(rng)
        pts = rng.random((1, 2, 40))
        lhs = compose(compose(f, g), h)(pts).data
        rhs = compose(f, compose(g, h))(pts).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_warped_image_equivalence(self):
        rng = np.random.default_rng(5)
        n = 32
        grid = identity_grid((n, n))
        img = 0.5 + 0.4 * np.sin(2 * np.pi * grid[:, :1]) * np.cos(2 * np.pi * grid[:, 1:])
        phi, psi = smooth_field(rng, (n, n), 0.02), smooth_field(rng, (n, n), 0.02)
        two_step = resample_image(resample_image(img, phi), psi).data
        direct = resample_image(img, compose(phi, psi)).data
        assert np.mean(np.abs(two_step - direct)) < 2e-2


class TestJacobian:
    """Forward-difference Jacobians."""

    def test_identity(self):
        pts = np.random.default_rng(0).uniform(0.1, 0.9, (2, 2, 7))
        jac = jacobian_fd(Identity(), pts).data
        np.testing.assert_allclose(jac, np.broadcast_to(np.eye(2)[None, :, :, None], jac.shape), atol=1e-12)

    def test_affine_exact(self):
        m = np.array([[1.2, -0.3, 0.1], [0.4, 0.8, -0.05]])
        pts = np.random.default_rng(1).random((1, 2, 6))
        jac = jacobian_fd(AffineMap(m), pts).data
        np.testing.assert_allclose(jac[0].transpose(2, 0, 1), np.broadcast_to(m[:, :2], (6, 2, 2)), atol=1e-9)

    def test_analytic_sinusoid(self):
        # the bilinear interpolant has slope error ~ |f''| h / 2, so the grid must be fine
        n = 256
        grid = identity_grid((n, n))
        disp = np.zeros((1, 2, n, n))
        disp[0, 0] = 0.01 * np.sin(2 * np.pi * grid[0, 1])
        pts = np.random.default_rng(2).uniform(0.2, 0.8, (1, 2, 30))
        jac = jacobian_fd(FieldMap(disp), pts, JacobianProbe(1e-3)).data
        analytic = 0.02 * np.pi * np.cos(2 * np.pi * pts[0, 1])
        assert np.max(np.abs(jac[0, 0, 1] - analytic)) < 1e-3

    def test_chain_rule(self):
        rng = np.random.default_rng(3)
        phi, psi = smooth_field(rng, (64, 64), 0.01), smooth_field(rng, (64, 64), 0.01)
        pts = rng.uniform(0.2, 0.8, (1, 2, 40))
        jc = jacobian_fd(compose(phi, psi), pts).data[0]
        jphi = jacobian_fd(phi, psi(pts).data).data[0]
        jpsi = jacobian_fd(psi, pts).data[0]
        chain = np.einsum("ikp,kjp->ijp", jphi, jpsi)
        assert np.max(np.sqrt(np.sum((jc - chain) ** 2, axis=(0, 1)))) < 5e-3

    def test_probe_validation(self):
        with pytest.raises(ValueError):
            JacobianProbe(0.0)
        with pytest.raises(ValueError):
            jacobian_fd(Identity(), np.zeros((1, 2, 1)), -1.0)

    def test_determinant_3d(self):
        jac = np.random.default_rng(4).normal(size=(2, 3, 3, 5))
        ref = np.linalg.det(np.moveaxis(jac, (1, 2), (-2, -1)))
        np.testing.assert_allclose(jacobian_determinant(jac), ref, atol=1e-12)


class TestFoldFraction:
    """Counting grid points with non-positive Jacobian determinant."""

    def test_identity(self):
        assert fold_fraction(Identity(), (16, 16)).fraction_negative == 0.0

    def test_reflection(self):
        n = 16
        grid = identity_grid((n, n))
        disp = np.zeros((1, 2, n, n))
        disp[0, 0] = 1.0 - 2.0 * grid[0, 0]
        report = fold_fraction(FieldMap(disp), (n, n))
        assert report.fraction_negative == 1.0
        assert report.percent == 100.0

    def test_matches_dense_scan(self):
        n = 32
        grid = identity_grid((n, n))
        disp = np.zeros((1, 2, n, n))
        disp[0, 0] = 0.1 * np.sin(6 * np.pi * grid[0, 0]) * np.cos(4 * np.pi * grid[0, 1])
        phi = FieldMap(disp)
        report = fold_fraction(phi, (n, n))
        margin = 2.0 / n
        c = (np.arange(n) + 0.5) / n
        c = c[(c >= margin) & (c <= 1 - margin)]
        pts = np.stack(np.meshgrid(c, c, indexing="ij")).reshape(1, 2, -1)
        det = jacobian_determinant(jacobian_fd(phi, pts).data)
        assert 0.0 < report.fraction_negative < 1.0
        assert report.fraction_negative == float(np.mean(det <= 0))
        # a 4x denser scan of the same map sees a similar folded area
        fine = (np.arange(4 * n) + 0.5) / (4 * n)
        fine = fine[(fine >= margin) & (fine <= 1 - margin)]
        pts_f = np.stack(np.meshgrid(fine, fine, indexing="ij")).reshape(1, 2, -1)
        dense = float(np.mean(jacobian_determinant(jacobian_fd(phi, pts_f).data) <= 0))
        assert abs(dense - report.fraction_negative) < 0.05

    def test_small_lipschitz_perturbation_has_no_folds(self):
        phi = smooth_field(np.random.default_rng(5), (32, 32), 0.02)
        assert fold_fraction(phi, (32, 32)).fraction_negative == 0.0

    def test_margin_rules(self):
        with pytest.raises(ValueError):
            fold_fraction(Identity(), (8, 8), margin=1e-4)
        with pytest.raises(ValueError):
            fold_fraction(Identity(), (8, 8), margin=0.49)

    def test_default_margin(self):
        report = fold_fraction(Identity(), (64, 64))
        assert report.sample_margin == pytest.approx(2 / 64)
        assert report.grid_shape == (64, 64)


class TestResample:
    """Image warping."""

    def test_identity_exact(self):
        img = np.random.default_rng(0).random((2, 1, 8, 8))
        np.testing.assert_array_equal(resample_image(img, Identity()).data, img)

    def test_ramp_shift(self):
        n = 16
        grid = identity_grid((n, n))
        img = (0.2 + 0.5 * grid[:, :1])
        out = resample_image(img, const_field([0.1, 0.0], (n, n))).data
        inner = (slice(None), slice(None), slice(2, n - 4), slice(None))
        np.testing.assert_allclose(out[inner], img[inner] + 0.05, atol=1e-12)

    def test_pointwise_oracle(self):
        rng = np.random.default_rng(1)
        img = rng.random((1, 1, 12, 12))
        phi = smooth_field(rng, (12, 12), 0.05)
        out = resample_image(img, phi).data
        pts = phi(identity_grid((12, 12))).data
        for i, j in [(0, 0), (3, 7), (11, 5)]:
            u = np.clip(pts[0, :, i, j], 0, 1) * 12 - 0.5
            u = np.clip(u, 0, 11)
            lo = np.minimum(np.floor(u).astype(int), 10)
            t = u - lo
            v = ((1 - t[0]) * (1 - t[1]) * img[0, 0, lo[0], lo[1]] + t[0] * (1 - t[1]) * img[0, 0, lo[0] + 1, lo[1]]
                 + (1 - t[0]) * t[1] * img[0, 0, lo[0], lo[1] + 1] + t[0] * t[1] * img[0, 0, lo[0] + 1, lo[1] + 1])
            assert abs(out[0, 0, i, j] - v) < 1e-12

    def test_nearest_keeps_labels(self):
        rng = np.random.default_rng(2)
        mask = (rng.random((1, 1, 10, 10)) > 0.5).astype(float)
        out = resample_nearest(mask, smooth_field(rng, (10, 10), 0.05))
        assert set(np.unique(out)) <= {0.0, 1.0}
        np.testing.assert_array_equal(resample_nearest(mask, Identity()), mask)

    def test_export_field(self):
        disp = np.random.default_rng(3).normal(0, 0.02, (1, 2, 6, 6))
        np.testing.assert_allclose(export_field(FieldMap(disp), (6, 6)), disp, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
def test_property_shifts_compose_additively(seed, cx, cy):
    """Constant shifts add under composition away from the clipped shell."""
    a = const_field([cx, cy])
    b = const_field([-0.5 * cy, 0.5 * cx])
    pts = np.random.default_rng(seed).uniform(0.35, 0.65, (1, 2, 8))
    expected = pts + np.array([cx - 0.5 * cy, cy + 0.5 * cx])[None, :, None]
    np.testing.assert_allclose(compose(a, b)(pts).data, expected, atol=1e-12)
