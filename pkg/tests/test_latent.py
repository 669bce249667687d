import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from laddernat import tensor as T
from laddernat.blocks import Linear
from laddernat.latent import (GaussianSeq, fuse_gaussians, gaussian_head, kl_gaussian,
                              length_transform, make_sharing_mask, reparameterize)

means = arrays(np.float64, (3, 4), elements=st.floats(-10, 10))
variances = arrays(np.float64, (3, 4), elements=st.floats(1e-3, 1e3))


def g(mu, var):
    return GaussianSeq(np.asarray(mu, float), np.asarray(var, float))


class TestFusion:
    def test_equal_precision(self):
        q = fuse_gaussians(g([1.0], [1.0]), g([3.0], [1.0]))
        assert abs(q.mean.item() - 2.0) < 1e-9
        assert abs(q.var.item() - 0.5) < 1e-9

    def test_unequal_precision(self):
        q = fuse_gaussians(g([0.0], [0.5]), g([3.0], [1.0]))
        assert abs(q.mean.item() - 1.0) < 1e-12
        assert abs(q.var.item() - 1 / 3) < 1e-12

    def test_self_fusion_halves_variance(self, rng):
        mu, var = rng.normal(size=(4, 3)), rng.uniform(0.1, 2, size=(4, 3))
        q = fuse_gaussians(g(mu, var), g(mu, var))
        np.testing.assert_allclose(q.mean.data, mu, atol=1e-12)
        np.testing.assert_allclose(q.var.data, var / 2, atol=1e-12)

    @settings(max_examples=1000, deadline=None)
    @given(means, variances, means, variances)
    def test_commutes(self, mx, vx, my, vy):
        a = fuse_gaussians(g(mx, vx), g(my, vy))
        b = fuse_gaussians(g(my, vy), g(mx, vx))
        np.testing.assert_allclose(a.mean.data, b.mean.data, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a.var.data, b.var.data, rtol=1e-12)

    @settings(max_examples=1000, deadline=None)
    @given(means, means)
    def test_precision_dominance(self, mx, my):
        q = fuse_gaussians(g(mx, np.ones_like(mx)), g(my, np.full_like(my, 1e6)))
        assert np.all(np.abs(q.mean.data - mx) < 1e-3)

    @settings(max_examples=300, deadline=None)
    @given(means, variances, means, variances)
    def test_convex_and_shrinking(self, mx, vx, my, vy):
        q = fuse_gaussians(g(mx, vx), g(my, vy))
        lo, hi = np.minimum(mx, my), np.maximum(mx, my)
        assert np.all(q.mean.data >= lo - 1e-9) and np.all(q.mean.data <= hi + 1e-9)
        assert np.all(q.var.data <= np.minimum(vx, vy) * (1 + 1e-12))

    def test_partial_sharing_keeps_side(self, rng):
        mask = make_sharing_mask(4, 0.5)
        qx = g(rng.normal(size=(2, 4)), rng.uniform(0.5, 1, size=(2, 4)))
        qy = g(rng.normal(size=(2, 4)), rng.uniform(0.5, 1, size=(2, 4)))
        full = fuse_gaussians(qx, qy)
        for keep, side in (("x", qx), ("y", qy)):
            q = fuse_gaussians(qx, qy, mask, keep)
            np.testing.assert_array_equal(q.mean.data[:, 2:], side.mean.data[:, 2:])
            np.testing.assert_array_equal(q.var.data[:, 2:], side.var.data[:, 2:])
            np.testing.assert_array_equal(q.mean.data[:, :2], full.mean.data[:, :2])

    def test_rho_zero_is_copy(self, rng):
        qx, qy = g(rng.normal(size=(2, 3)), np.ones((2, 3))), g(rng.normal(size=(2, 3)), np.ones((2, 3)))
        q = fuse_gaussians(qx, qy, make_sharing_mask(3, 0.0), "y")
        np.testing.assert_array_equal(q.mean.data, qy.mean.data)

    def test_errors(self):
        with pytest.raises(T.ShapeError):
            fuse_gaussians(g([1.0], [1.0]), g([1.0, 2.0], [1.0, 1.0]))
        with pytest.raises(ValueError):
            fuse_gaussians(g([1.0], [0.0]), g([1.0], [1.0]))


class TestKL:
    def test_identical(self, rng):
        q = g(rng.normal(size=(3, 2)), rng.uniform(0.1, 3, size=(3, 2)))
        np.testing.assert_allclose(kl_gaussian(q, q).data, 0.0, atol=1e-15)

    def test_mean_shift(self):
        assert abs(kl_gaussian(g([0.0], [1.0]), g([1.0], [1.0])).item() - 0.5) < 1e-9

    def test_wide_vs_unit(self):
        expected = 2.0 - 0.5 + math.log(0.5)
        assert abs(kl_gaussian(g([0.0], [4.0]), g([0.0], [1.0])).item() - expected) < 1e-9
        assert abs(expected - 0.8069) < 1e-4

    def test_self_fusion_against_prior(self, rng):
        mu, var = rng.normal(size=(5,)), rng.uniform(0.2, 3, size=(5,))
        q = fuse_gaussians(g(mu, var), g(mu, var))
        np.testing.assert_allclose(kl_gaussian(q, g(mu, var)).data, math.log(2) / 2 - 0.25, atol=1e-12)
        assert abs(math.log(2) / 2 - 0.25 - 0.0966) < 1e-4

    @settings(max_examples=1000, deadline=None)
    @given(means, variances, means, variances)
    def test_non_negative(self, mq, vq, mp, vp):
        assert np.all(kl_gaussian(g(mq, vq), g(mp, vp)).data >= -1e-12)


class TestKLMinimum:
    """Fused-posterior KL against the y head is stationary and convex at mu_x = mu_y."""

    @staticmethod
    def objective(mx, vx, my, vy):
        return kl_gaussian(fuse_gaussians(g(mx, vx), g(my, vy)), g(my, vy)).data.sum()

    def test_zero_gradient_and_curvature(self, rng):
        my = rng.normal(size=(3, 4))
        vx, vy = rng.uniform(0.2, 2, size=(3, 4)), rng.uniform(0.2, 2, size=(3, 4))
        eps = 1e-5
        grad = np.zeros_like(my)
        for idx in np.ndindex(my.shape):
            up, dn = my.copy(), my.copy()
            up[idx] += eps
            dn[idx] -= eps
            grad[idx] = (self.objective(up, vx, my, vy) - self.objective(dn, vx, my, vy)) / (2 * eps)
        assert np.abs(grad).max() < 1e-6
        base = self.objective(my, vx, my, vy)
        for delta in (0.1, 1.0):
            assert self.objective(my + delta, vx, my, vy) > base
            assert self.objective(my - delta, vx, my, vy) > base


class TestLengthTransform:
    def test_identity(self, rng):
        s = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(length_transform(s, 5).data, s)

    def test_midpoint(self):
        a, b = np.array([1.0, -2.0]), np.array([3.0, 4.0])
        out = length_transform(np.stack([a, b]), 3).data
        np.testing.assert_allclose(out, [a, (a + b) / 2, b], atol=1e-15)

    def test_single_output_is_mean(self, rng):
        s = rng.normal(size=(4, 2))
        np.testing.assert_allclose(length_transform(s, 1).data[0], s.mean(0), atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 20), st.floats(-5, 5))
    def test_constant_fixed_point(self, t, l, c):
        np.testing.assert_allclose(length_transform(np.full((t, 2), c), l).data, c, atol=1e-12)

    def test_batched_respects_lengths(self, rng):
        s = rng.normal(size=(2, 6, 3))
        out = length_transform(s, [4, 2], src_lengths=[6, 3]).data
        np.testing.assert_allclose(out[0], length_transform(s[0], 4).data, atol=1e-12)
        np.testing.assert_allclose(out[1, :2], length_transform(s[1, :3], 2).data, atol=1e-12)
        assert np.all(out[1, 2:] == 0)

    def test_bad_length(self):
        with pytest.raises(ValueError):
            length_transform(np.ones((3, 2)), 0)


class TestHeadAndSampling:
    def test_zero_head(self, rng):
        lin_m, lin_v = Linear(4, 3, rng), Linear(4, 3, rng)
        for lin in (lin_m, lin_v):
            lin.weight.data[:] = 0
        h = T.Tensor(rng.normal(size=(7, 4)))
        q = gaussian_head(h, lin_m, lin_v, 5)
        assert q.shape == (5, 3)
        np.testing.assert_allclose(q.mean.data, 0)
        np.testing.assert_allclose(q.var.data, math.log(2), atol=1e-12)

    def test_head_variance_gradient(self, rng):
        lin_m, lin_v = Linear(4, 3, rng), Linear(4, 3, rng)
        h = T.Tensor(rng.normal(size=(6, 4)))
        rep = T.grad_check(lambda: gaussian_head(h, lin_m, lin_v, 3).var.sum(),
                           lin_v.parameters(), eps=1e-6)
        assert rep["max_rel_error"] < 1e-6

    def test_reparameterize(self, rng):
        mu = T.parameter(rng.normal(size=(2, 3)))
        var = T.parameter(rng.uniform(0.5, 1, size=(2, 3)))
        q = GaussianSeq(mu, var)
        np.testing.assert_array_equal(reparameterize(q, np.zeros((2, 3))).data, mu.data)
        z = reparameterize(q, rng.normal(size=(2, 3)))
        z.sum().backward()
        np.testing.assert_array_equal(mu.grad, np.ones((2, 3)))
        assert var.grad is not None
        tiny = GaussianSeq(mu.data, np.full((2, 3), 1e-30))
        np.testing.assert_allclose(reparameterize(tiny, np.full((2, 3), 3.0)).data, mu.data, atol=1e-12)
        with pytest.raises(T.ShapeError):
            reparameterize(q, np.zeros(3))


class TestSharingMask:
    @pytest.mark.parametrize("d, rho, n", [(32, 1.0, 32), (32, 0.5, 16), (32, 0.75, 24), (16, 0.0, 0)])
    def test_counts(self, d, rho, n):
        m = make_sharing_mask(d, rho)
        assert m.shared_dims == n == m.mask.sum()
        assert m.mask[:n].all()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            make_sharing_mask(8, 1.5)
