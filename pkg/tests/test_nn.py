"""Core NN engine: layout, forward, exact gradients, dropout, SGD."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim import nn
from fedsim.rng import stream


def central_diff_grad(fn, x, h=1e-5):
    """Independent gradient oracle: central finite differences, coordinatewise."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def make_batch(rng, n, dim, classes):
    return nn.Batch(
        inputs=rng.normal(size=(n, dim)),
        labels=rng.integers(0, classes, size=n),
    )


class TestLayout:
    def test_param_count(self):
        arch = nn.MlpArch((784, 256, 10))
        assert nn.param_count(arch) == 784 * 256 + 256 + 256 * 10 + 10 == 203530

    def test_head_mask_sizes(self):
        assert nn.head_freeze_mask(nn.MlpArch((2, 3, 4))).sum() == 3 * 4 + 4 == 16
        assert nn.head_freeze_mask(nn.MlpArch((784, 256, 10))).sum() == 2570

    def test_head_body_partition(self):
        arch = nn.MlpArch((5, 7, 3))
        head = nn.head_freeze_mask(arch)
        assert head.size == nn.param_count(arch)
        assert head.sum() + (~head).sum() == nn.param_count(arch)

    def test_column_blocks_are_contiguous(self):
        # group i of a layer = out_dim consecutive entries for input column i
        arch = nn.MlpArch((3, 2, 2))
        params = np.arange(nn.param_count(arch), dtype=np.float64)
        (W0, b0), (W1, b1) = list(nn.weight_views(params, arch))
        assert W0[1].tolist() == [2.0, 3.0]  # second input column's block
        assert b0.tolist() == [6.0, 7.0]
        assert W1[0].tolist() == [8.0, 9.0]
        assert b1.tolist() == [12.0, 13.0]

    def test_arch_validation(self):
        with pytest.raises(ValueError):
            nn.MlpArch((5,))
        with pytest.raises(ValueError):
            nn.MlpArch((5, 0, 2))

    def test_init_bounds_and_determinism(self):
        arch = nn.MlpArch((100, 20, 5))
        p1 = nn.init_params(arch, stream(7, "init"))
        p2 = nn.init_params(arch, stream(7, "init"))
        assert np.array_equal(p1, p2)
        spans = nn.layer_spans(arch)
        w0 = p1[spans[0][0]]
        assert np.abs(w0).max() <= 1 / np.sqrt(100)
        w1 = p1[spans[1][0]]
        assert np.abs(w1).max() <= 1 / np.sqrt(20)
        assert np.abs(w1).max() > 1 / np.sqrt(100)  # wider bound actually used


class TestForward:
    def test_zero_params_zero_logits(self):
        arch = nn.MlpArch((4, 3, 2))
        params = np.zeros(nn.param_count(arch))
        batch = make_batch(np.random.default_rng(0), 5, 4, 2)
        assert np.array_equal(nn.forward(params, arch, batch), np.zeros((5, 2)))

    def test_hand_computed_logits(self):
        # weights all one, bias zero, input [1,1]: hidden relu([2,2]) -> logits [4,4]
        arch = nn.MlpArch((2, 2, 2))
        params = np.zeros(nn.param_count(arch))
        spans = nn.layer_spans(arch)
        params[spans[0][0]] = 1.0
        params[spans[1][0]] = 1.0
        batch = nn.Batch(inputs=np.array([[1.0, 1.0]]), labels=np.array([0]))
        assert nn.forward(params, arch, batch).tolist() == [[4.0, 4.0]]

    def test_mask_all_dropped_equals_bias_path(self):
        arch = nn.MlpArch((4, 3, 2))
        rng = np.random.default_rng(1)
        params = nn.init_params(arch, rng)
        batch = make_batch(rng, 6, 4, 2)
        mask = nn.DropoutMask(keep=tuple(np.zeros(s, dtype=bool) for s in (4, 3)))
        got = nn.forward(params, arch, batch, mask)
        zeroed = nn.apply_mask(params, arch, mask)
        assert np.array_equal(got, nn.forward(zeroed, arch, batch))
        # bias-only: logits identical across inputs
        assert np.allclose(got, got[0])

    def test_mask_linearity_bitwise(self):
        arch = nn.MlpArch((6, 5, 4, 3))
        rng = np.random.default_rng(2)
        params = nn.init_params(arch, rng)
        batch = make_batch(rng, 7, 6, 3)
        mask = nn.sample_dropout_mask(0.6, arch, stream(3, "mask"))
        via_mask = nn.forward(params, arch, batch, mask)
        via_apply = nn.forward(nn.apply_mask(params, arch, mask), arch, batch)
        assert np.array_equal(via_mask, via_apply)

    def test_dimension_errors(self):
        arch = nn.MlpArch((4, 3, 2))
        batch = make_batch(np.random.default_rng(0), 2, 4, 2)
        with pytest.raises(nn.DimensionMismatch):
            nn.forward(np.zeros(5), arch, batch)
        bad_batch = make_batch(np.random.default_rng(0), 2, 3, 2)
        with pytest.raises(nn.DimensionMismatch):
            nn.forward(np.zeros(nn.param_count(arch)), arch, bad_batch)
        bad_mask = nn.DropoutMask(keep=(np.ones(4, dtype=bool),))
        with pytest.raises(nn.DimensionMismatch):
            nn.forward(np.zeros(nn.param_count(arch)), arch, batch, bad_mask)


class TestLossAndGrad:
    def test_uniform_logits_loss_is_ln_c(self):
        for classes in (2, 5, 10):
            arch = nn.MlpArch((3, 4, classes))
            params = np.zeros(nn.param_count(arch))
            batch = make_batch(np.random.default_rng(0), 8, 3, classes)
            loss, _ = nn.loss_and_grad(params, arch, batch)
            assert loss == pytest.approx(np.log(classes), abs=1e-12)

    def test_softmax_gradient_identity(self):
        # zero params, single sample: d loss / d final bias = softmax - one-hot
        classes, k = 4, 2
        arch = nn.MlpArch((3, 2, classes))
        params = np.zeros(nn.param_count(arch))
        batch = nn.Batch(inputs=np.array([[0.3, -0.2, 0.5]]), labels=np.array([k]))
        _, grad = nn.loss_and_grad(params, arch, batch)
        b_span = nn.layer_spans(arch)[-1][1]
        expect = np.full(classes, 1.0 / classes)
        expect[k] -= 1.0
        assert np.allclose(grad[b_span], expect, atol=1e-12)

    @pytest.mark.parametrize("sizes", [(4, 5, 3), (6, 8, 8, 4), (2, 3, 2)])
    def test_gradient_matches_finite_differences(self, sizes):
        arch = nn.MlpArch(sizes)
        rng = np.random.default_rng(hash(sizes) % 2**32)
        params = nn.init_params(arch, np.random.default_rng(5))
        batch = make_batch(rng, 6, sizes[0], sizes[-1])
        _, grad = nn.loss_and_grad(params, arch, batch)
        fd = central_diff_grad(
            lambda p: nn.loss_and_grad(p, arch, batch)[0], params
        )
        err = rel_err(grad, fd)
        assert err.max() < 1e-6

    def test_gradient_with_mask_matches_fd_and_zeroes_dropped(self):
        arch = nn.MlpArch((5, 6, 3))
        params = nn.init_params(arch, np.random.default_rng(9))
        batch = make_batch(np.random.default_rng(10), 4, 5, 3)
        mask = nn.sample_dropout_mask(0.5, arch, stream(11, "mask"))
        _, grad = nn.loss_and_grad(params, arch, batch, mask)
        fd = central_diff_grad(
            lambda p: nn.loss_and_grad(p, arch, batch, mask)[0], params
        )
        assert rel_err(grad, fd).max() < 1e-6
        for l, (W, b) in enumerate(nn.weight_views(grad, arch)):
            dropped = ~mask.keep[l]
            assert np.array_equal(W[dropped], np.zeros_like(W[dropped]))

    def test_non_finite_loss_reports_batch_index(self):
        arch = nn.MlpArch((2, 2, 2))
        params = np.full(nn.param_count(arch), np.nan)
        batch = nn.Batch(inputs=np.ones((3, 2)), labels=np.array([0, 1, 0]))
        with pytest.raises(nn.NonFiniteLoss) as exc:
            nn.loss_and_grad(params, arch, batch)
        assert exc.value.batch_index == 0

    def test_label_range_checked(self):
        arch = nn.MlpArch((2, 2, 2))
        params = np.zeros(nn.param_count(arch))
        batch = nn.Batch(inputs=np.ones((1, 2)), labels=np.array([2]))
        with pytest.raises(ValueError):
            nn.loss_and_grad(params, arch, batch)

    def test_loss_nonnegative(self):
        arch = nn.MlpArch((3, 4, 5))
        rng = np.random.default_rng(12)
        for _ in range(20):
            params = nn.init_params(arch, rng)
            batch = make_batch(rng, 5, 3, 5)
            loss, _ = nn.loss_and_grad(params, arch, batch)
            assert loss >= 0.0


class TestDropoutSampling:
    def test_p_one_keeps_all(self):
        arch = nn.MlpArch((10, 8, 4))
        mask = nn.sample_dropout_mask(1.0, arch, stream(0, "m"))
        assert all(k.all() for k in mask.keep)

    def test_p_zero_drops_all_weight_groups(self):
        arch = nn.MlpArch((10, 8, 4))
        mask = nn.sample_dropout_mask(0.0, arch, stream(0, "m"))
        assert not any(k.any() for k in mask.keep)
        # bias groups have no keep entry: they are always applied
        batch = make_batch(np.random.default_rng(1), 3, 10, 4)
        params = nn.init_params(arch, np.random.default_rng(2))
        out = nn.forward(params, arch, batch, mask)
        b_last = params[nn.layer_spans(arch)[-1][1]]
        assert np.allclose(out, np.broadcast_to(b_last, (3, 4)))

    def test_keep_rate_monte_carlo(self):
        # 10,000 group draws; empirical keep rate within 3 SE of 0.9
        arch = nn.MlpArch((100, 100))
        p = 0.9
        draws = 100
        rng = stream(42, "mc")
        total = np.sum([
            nn.sample_dropout_mask(p, arch, rng).keep[0].sum() for _ in range(draws)
        ])
        n = 100 * draws
        se = np.sqrt(p * (1 - p) / n)
        assert abs(total / n - p) < 3 * se

    def test_mask_determinism(self):
        arch = nn.MlpArch((30, 20, 5))
        m1 = nn.sample_dropout_mask(0.7, arch, stream(5, "mask", 3))
        m2 = nn.sample_dropout_mask(0.7, arch, stream(5, "mask", 3))
        assert all(np.array_equal(a, b) for a, b in zip(m1.keep, m2.keep))

    def test_p_out_of_range(self):
        with pytest.raises(ValueError):
            nn.sample_dropout_mask(1.5, nn.MlpArch((2, 2)), stream(0))


class TestSgd:
    def test_zero_grad_identity(self):
        p = np.array([1.0, -2.0, 3.0])
        assert np.array_equal(nn.sgd_step(p, np.zeros(3), 0.1), p)

    def test_arithmetic(self):
        assert nn.sgd_step(np.array([1.0]), np.array([2.0]), 0.5).tolist() == [0.0]

    def test_quadratic_convergence(self):
        # minimize (x - 3)^2 / 2; gradient = x - 3
        x = np.array([10.0])
        for _ in range(200):
            x = nn.sgd_step(x, x - 3.0, 0.2)
        assert abs(x[0] - 3.0) < 1e-8

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(ValueError):
            nn.sgd_step(np.zeros(2), np.zeros(2), 0.0)

    def test_non_finite_result_rejected(self):
        with pytest.raises(nn.NonFiniteUpdate):
            nn.sgd_step(np.array([1e308]), np.array([-1e308]), 10.0)


@settings(max_examples=25, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 6), min_size=2, max_size=4),
    seed=st.integers(0, 2**16),
)
def test_mask_linearity_property(sizes, seed):
    arch = nn.MlpArch(tuple(sizes))
    rng = np.random.default_rng(seed)
    params = nn.init_params(arch, rng)
    batch = nn.Batch(
        inputs=rng.normal(size=(3, sizes[0])),
        labels=rng.integers(0, sizes[-1], size=3),
    )
    mask = nn.sample_dropout_mask(0.5, arch, stream(seed, "m"))
    assert np.array_equal(
        nn.forward(params, arch, batch, mask),
        nn.forward(nn.apply_mask(params, arch, mask), arch, batch),
    )
