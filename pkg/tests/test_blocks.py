import numpy as np
import pytest

from tmmf import blocks, tensor as tt
from tmmf.blocks import ChannelNorm, DilatedResidualBlock, temporal_conv_in
from tmmf.errors import DimensionError

from test_tensor import conv1d_loop_reference


def channel_norm_reference(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    return gain * (x - mu) / np.sqrt(var + eps) + bias


class TestDilatedResidualBlock:
    def test_zero_branch_is_identity(self):
        block = DilatedResidualBlock(4, dilation=2, rng=np.random.default_rng(0))
        block.dilated_kernel.data[:] = 0.0
        block.pointwise_kernel.data[:] = 0.0
        block.norm.gain.data[:] = 0.0
        x = tt.Tensor(np.random.default_rng(1).normal(size=(9, 4)))
        np.testing.assert_array_equal(block(x).data, x.data)

    def test_single_frame_finite(self):
        block = DilatedResidualBlock(4, dilation=1, rng=np.random.default_rng(2))
        out = block(tt.Tensor(np.random.default_rng(3).normal(size=(1, 4))))
        assert out.shape == (1, 4)
        assert np.all(np.isfinite(out.data))

    def test_matches_straight_line_composition(self):
        """Block output equals composing the primitive loop oracles directly."""
        rng = np.random.default_rng(4)
        block = DilatedResidualBlock(4, dilation=2, rng=rng)
        x = rng.normal(size=(9, 4))

        h = conv1d_loop_reference(x, block.dilated_kernel.data, None, dilation=2)
        h = np.maximum(h, 0.0)
        h = conv1d_loop_reference(h, block.pointwise_kernel.data, None, dilation=1)
        h = channel_norm_reference(h, block.norm.gain.data, block.norm.bias.data)
        expected = x + np.maximum(h, 0.0)

        np.testing.assert_allclose(block(tt.Tensor(x)).data, expected, atol=1e-12)

    def test_channel_mismatch(self):
        block = DilatedResidualBlock(4, dilation=1, rng=np.random.default_rng(5))
        with pytest.raises(DimensionError):
            block(tt.Tensor(np.zeros((5, 3))))

    def test_zero_branch_jacobian_is_identity(self):
        """With the branch zeroed, d(output)/d(input) is exactly identity."""
        block = DilatedResidualBlock(3, dilation=1, rng=np.random.default_rng(6))
        block.dilated_kernel.data[:] = 0.0
        block.pointwise_kernel.data[:] = 0.0
        block.norm.gain.data[:] = 0.0
        x = tt.Tensor(np.random.default_rng(7).normal(size=(6, 3)), requires_grad=True)
        probe = tt.Tensor(np.random.default_rng(8).normal(size=(6, 3)))
        tt.backward(tt.mul(block(x), probe).sum())
        np.testing.assert_array_equal(x.grad, probe.data)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        block = DilatedResidualBlock(3, dilation=2, rng=rng)
        x = tt.Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        params = [x] + block.parameters()
        err = tt.finite_difference_check(lambda: tt.mul(block(x), block(x)).sum(), params)
        assert err < 1e-4


def run_stack_frozen_stats(stack, x, stats=None):
    """Straight-line stack evaluation with each norm's statistics pinned.

    When ``stats`` is None the statistics are computed from this pass and
    returned, so a perturbed input can be re-run against the base pass's
    statistics. Removing the statistics' dependence on x isolates the
    convolutional pathway, which is what the receptive-field formula
    describes; the live norm couples all frames through mu/var (see the
    leakage test below).
    """
    capture = stats is None
    if capture:
        stats = []
    h = np.asarray(x, dtype=float)
    for i, block in enumerate(stack):
        b = conv1d_loop_reference(h, block.dilated_kernel.data, None, block.dilation)
        b = np.maximum(b, 0.0)
        b = conv1d_loop_reference(b, block.pointwise_kernel.data, None, 1)
        if capture:
            stats.append((b.mean(axis=0), np.sqrt(b.var(axis=0) + blocks.NORM_EPS)))
        mu, sigma = stats[i]
        b = block.norm.gain.data * (b - mu) / sigma + block.norm.bias.data
        h = h + np.maximum(b, 0.0)
    return h, stats


class TestReceptiveField:
    @pytest.mark.parametrize("layers", [1, 2, 3])
    def test_impulse_confined_under_frozen_statistics(self, layers):
        rng = np.random.default_rng(10)
        stack = [DilatedResidualBlock(3, 2 ** l, rng) for l in range(layers)]
        t_len, center = 40, 20
        base = rng.normal(size=(t_len, 3))
        bumped = base.copy()
        bumped[center] += 1.0
        out_base, stats = run_stack_frozen_stats(stack, base)
        out_bumped, _ = run_stack_frozen_stats(stack, bumped, stats)
        changed = np.where(np.any(out_base != out_bumped, axis=1))[0]
        radius = blocks.receptive_radius(layers)
        assert changed.size > 0
        assert changed.min() >= center - radius
        assert changed.max() <= center + radius

    def test_live_norm_leakage_shrinks_with_length(self):
        """Per-sequence statistics leak outside the field, but only at O(1/T)."""
        rng = np.random.default_rng(11)
        stack = [DilatedResidualBlock(3, 2 ** l, rng) for l in range(2)]
        radius = blocks.receptive_radius(2)

        def response(t_len):
            base = np.random.default_rng(12).normal(size=(t_len, 3))
            bumped = base.copy()
            center = t_len // 2
            bumped[center] += 1.0
            h_a, h_b = tt.Tensor(base), tt.Tensor(bumped)
            for block in stack:
                h_a, h_b = block(h_a), block(h_b)
            delta = np.abs(h_a.data - h_b.data).max(axis=1)
            inside = delta[center - radius:center + radius + 1].max()
            outside = np.concatenate(
                [delta[:center - radius], delta[center + radius + 1:]]).max()
            return inside, outside

        inside_small, outside_small = response(64)
        inside_big, outside_big = response(256)
        assert outside_small < 0.1 * inside_small
        assert outside_big < outside_small / 2.0
        assert inside_big > 0.2 * inside_small

    def test_radius_formula(self):
        # dilations 1, 2, 4 with K=3 reach 1+2+4 = 7 frames per side
        assert blocks.receptive_radius(3) == 7
        assert blocks.receptive_radius(1) == 1


class TestEntryProjection:
    def test_identity_kernel(self):
        x = np.random.default_rng(11).normal(size=(5, 4))
        out = temporal_conv_in(tt.Tensor(x), tt.Tensor(np.eye(4).reshape(4, 4, 1)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernel(self):
        out = temporal_conv_in(tt.Tensor(np.ones((5, 4))), tt.Tensor(np.zeros((2, 4, 1))))
        np.testing.assert_array_equal(out.data, np.zeros((5, 2)))

    def test_matches_per_frame_matmul(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(6, 3))
        kernel = rng.normal(size=(5, 3, 1))
        out = temporal_conv_in(tt.Tensor(x), tt.Tensor(kernel))
        expected = np.stack([kernel[:, :, 0] @ frame for frame in x])
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_rejects_wide_kernel(self):
        with pytest.raises(DimensionError):
            temporal_conv_in(tt.Tensor(np.zeros((5, 3))), tt.Tensor(np.zeros((2, 3, 3))))


class TestChannelNormLayer:
    def test_pre_affine_statistics(self):
        norm = ChannelNorm(3)
        x = tt.Tensor(np.random.default_rng(13).normal(loc=5.0, size=(64, 3)))
        out = norm(x)
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.data.std(axis=0), 1.0, atol=1e-3)
