import numpy as np
import pytest

import oracles
from deltawkv import tensor_core as tc


class TestMatmul:
    def test_identity(self, rng):
        """A @ I returns A unchanged."""
        a = rng.standard_normal((5, 5))
        assert np.array_equal(tc.matmul(a, np.eye(5)), a)

    def test_small_known(self):
        """Row-times-column sums on a hand-checkable case."""
        a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        b = np.ones((3, 1))
        assert np.array_equal(tc.matmul(a, b), [[6.0], [15.0]])

    def test_against_triple_loop(self, rng):
        """Random rectangular products match the loop oracle."""
        for _ in range(5):
            n, k, m = rng.integers(1, 7, size=3)
            a = rng.standard_normal((n, k))
            b = rng.standard_normal((k, m))
            assert np.allclose(tc.matmul(a, b), oracles.matmul3(a, b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        """The error message carries both operand shapes."""
        with pytest.raises(tc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_nonfinite_raises(self):
        a = np.array([[np.inf]])
        with pytest.raises(tc.NonFiniteError):
            tc.matmul(a, np.ones((1, 1)))

    def test_backward_matches_fd(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        d_out = rng.standard_normal((3, 2))
        d_a, d_b = tc.matmul_backward(d_out, a, b)
        fa = oracles.fd_grad(lambda x: float((tc.matmul(x, b) * d_out).sum()), a)
        fb = oracles.fd_grad(lambda x: float((tc.matmul(a, x) * d_out).sum()), b)
        assert oracles.rel_err(d_a, fa) < 1e-6
        assert oracles.rel_err(d_b, fb) < 1e-6


class TestActivations:
    def test_known_values(self):
        assert tc.sigmoid(np.array(0.0)) == 0.5
        assert np.isclose(tc.tanh(np.array(1.0)), np.tanh(1.0))
        assert tc.squared_relu(np.array(-2.0)) == 0.0
        assert tc.squared_relu(np.array(3.0)) == 9.0

    def test_sigmoid_extremes_stay_finite(self):
        out = tc.sigmoid(np.array([-1e4, 1e4]))
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0

    @pytest.mark.parametrize("name", ["sigmoid", "tanh", "squared_relu"])
    def test_backward_matches_fd(self, name, rng):
        """Every activation derivative agrees with central differences."""
        x = rng.standard_normal(16)
        d_out = rng.standard_normal(16)
        if name == "sigmoid":
            grad = tc.sigmoid_backward(d_out, tc.sigmoid(x))
            f = lambda z: float((tc.sigmoid(z) * d_out).sum())
        elif name == "tanh":
            grad = tc.tanh_backward(d_out, tc.tanh(x))
            f = lambda z: float((tc.tanh(z) * d_out).sum())
        else:
            x = x + np.sign(x) * 0.01  # keep away from the relu kink
            grad = tc.squared_relu_backward(d_out, x)
            f = lambda z: float((tc.squared_relu(z) * d_out).sum())
        assert oracles.rel_err(grad, oracles.fd_grad(f, x)) < 1e-6


class TestLayerNorm:
    def test_zero_variance_returns_beta(self):
        """A constant row normalizes to zero, so the affine leaves beta."""
        x = np.full((3, 4), 2.5)
        beta = np.array([1.0, 2.0, 3.0, 4.0])
        out, _ = tc.layer_norm(x, np.ones(4), beta)
        assert np.allclose(out, np.tile(beta, (3, 1)))

    def test_unit_pair_eps_zero(self):
        """[1, -1] has mean 0 and variance 1, so it is its own normalization."""
        out, _ = tc.layer_norm(np.array([[1.0, -1.0]]), eps=0.0)
        assert np.allclose(out, [[1.0, -1.0]])

    def test_against_explicit_stats(self, rng):
        x = rng.standard_normal((6, 9))
        gamma = rng.standard_normal(9)
        beta = rng.standard_normal(9)
        out, _ = tc.layer_norm(x, gamma, beta)
        assert np.allclose(out, oracles.layer_norm_ref(x, gamma, beta), atol=1e-10)

    def test_input_affine_invariance(self, rng):
        """Pre-affine output is invariant to per-row shift and positive scale."""
        x = rng.standard_normal((4, 8))
        base, _ = tc.layer_norm(x, eps=1e-12)
        shifted, _ = tc.layer_norm(3.0 * x + 7.0, eps=1e-12)
        assert np.allclose(base, shifted, atol=1e-6)

    def test_empty_axis_rejected(self):
        with pytest.raises(tc.ShapeError):
            tc.layer_norm(np.zeros((2, 0)))

    def test_backward_matches_fd(self, rng):
        x = rng.standard_normal((3, 5))
        gamma = rng.standard_normal(5)
        beta = rng.standard_normal(5)
        d_out = rng.standard_normal((3, 5))

        out, cache = tc.layer_norm(x, gamma, beta)
        d_x, d_gamma, d_beta = tc.layer_norm_backward(d_out, cache)

        fx = oracles.fd_grad(
            lambda z: float((tc.layer_norm(z, gamma, beta)[0] * d_out).sum()), x
        )
        fg = oracles.fd_grad(
            lambda z: float((tc.layer_norm(x, z, beta)[0] * d_out).sum()), gamma
        )
        fb = oracles.fd_grad(
            lambda z: float((tc.layer_norm(x, gamma, z)[0] * d_out).sum()), beta
        )
        assert oracles.rel_err(d_x, fx) < 1e-5
        assert oracles.rel_err(d_gamma, fg) < 1e-5
        assert oracles.rel_err(d_beta, fb) < 1e-5


class TestConv2d:
    def test_identity_kernel(self, rng):
        """A delta at the kernel center reproduces the input per channel."""
        x = rng.standard_normal((2, 5, 6))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        assert np.allclose(tc.conv2d(x, w), x)

    def test_ones_kernel_interior(self):
        """All-ones kernel on a constant image sums 9 in the interior."""
        x = np.full((1, 5, 5), 2.0)
        w = np.ones((1, 1, 3, 3))
        out = tc.conv2d(x, w)
        assert np.allclose(out[0, 1:-1, 1:-1], 18.0)
        assert np.isclose(out[0, 0, 0], 8.0)  # corner sees a 2x2 patch

    def test_against_sliding_window(self, rng):
        for _ in range(3):
            c_in, c_out = rng.integers(1, 4, size=2)
            x = rng.standard_normal((c_in, 4, 5))
            w = rng.standard_normal((c_out, c_in, 3, 3))
            b = rng.standard_normal(c_out)
            assert np.allclose(
                tc.conv2d(x, w, b), oracles.conv2d_ref(x, w, b), atol=1e-12
            )

    def test_channel_mismatch_rejected(self):
        with pytest.raises(tc.ShapeError):
            tc.conv2d(np.zeros((3, 4, 4)), np.zeros((1, 2, 3, 3)))

    def test_backward_matches_fd(self, rng):
        x = rng.standard_normal((2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        d_out = rng.standard_normal((3, 4, 4))
        d_x, d_w, d_b = tc.conv2d_backward(d_out, x, w)
        fx = oracles.fd_grad(lambda z: float((tc.conv2d(z, w, b) * d_out).sum()), x)
        fw = oracles.fd_grad(lambda z: float((tc.conv2d(x, z, b) * d_out).sum()), w)
        fb = oracles.fd_grad(lambda z: float((tc.conv2d(x, w, z) * d_out).sum()), b)
        assert oracles.rel_err(d_x, fx) < 1e-6
        assert oracles.rel_err(d_w, fw) < 1e-6
        assert oracles.rel_err(d_b, fb) < 1e-6


class TestPixelShuffle:
    def test_four_channels_to_quad(self):
        """Channels [a, b, c, d] land as [[a, b], [c, d]] in the 2x2 output."""
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1)
        out = tc.pixel_shuffle(x, 2)
        assert np.array_equal(out, [[[1.0, 2.0], [3.0, 4.0]]])

    def test_roundtrip(self, rng):
        x = rng.standard_normal((8, 3, 5))
        assert np.array_equal(tc.pixel_unshuffle(tc.pixel_shuffle(x, 2), 2), x)
        y = rng.standard_normal((2, 6, 9))
        assert np.array_equal(tc.pixel_shuffle(tc.pixel_unshuffle(y, 3), 3), y)

    def test_preserves_values(self, rng):
        """Shuffle is a permutation: same multiset of values, same sum."""
        x = rng.standard_normal((12, 2, 2))
        out = tc.pixel_shuffle(x, 2)
        assert out.shape == (3, 4, 4)
        assert np.isclose(out.sum(), x.sum())
        assert np.array_equal(np.sort(out.ravel()), np.sort(x.ravel()))

    def test_bad_channel_count_rejected(self):
        with pytest.raises(tc.ShapeError):
            tc.pixel_shuffle(np.zeros((3, 2, 2)), 2)

    def test_backward_is_inverse_permutation(self, rng):
        x = rng.standard_normal((4, 2, 3))
        d_out = rng.standard_normal((1, 4, 6))
        d_x = tc.pixel_shuffle_backward(d_out, 2)
        fx = oracles.fd_grad(
            lambda z: float((tc.pixel_shuffle(z, 2) * d_out).sum()), x
        )
        assert oracles.rel_err(d_x, fx) < 1e-6


class TestGradPair:
    def test_zero_initialized(self):
        p = tc.GradPair(np.ones((2, 3)))
        assert p.grad.shape == (2, 3)
        assert np.all(p.grad == 0.0)

    def test_shape_invariant_enforced(self):
        with pytest.raises(tc.ShapeError):
            tc.GradPair(np.ones(3), grad=np.zeros(4))

    def test_zero_grad_resets(self):
        p = tc.GradPair(np.ones(3))
        p.grad += 5.0
        p.zero_grad()
        assert np.all(p.grad == 0.0)
