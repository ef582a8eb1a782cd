import numpy as np
import pytest

from djpq import autodiff as ad
from djpq.autodiff import Tensor
from djpq.errors import ConfigError, ContractError, DataError, DimensionError

from oracles import check_gradients, conv2d_direct, grad_rel_error, maxpool2d_direct, numeric_grad


@pytest.fixture(autouse=True)
def clean_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()


def rng(seed=0):
    return np.random.default_rng(seed)


class TestTensor:
    def test_rejects_nonfinite(self):
        with pytest.raises(DataError):
            Tensor([1.0, np.nan])
        with pytest.raises(DataError):
            Tensor([np.inf])

    def test_float32_storage(self):
        t = Tensor(np.arange(4, dtype=np.float64))
        assert t.data.dtype == np.float32

    def test_no_tape_growth_without_grad(self):
        x = Tensor(rng().standard_normal((2, 3)))
        y = (x * 2.0 + 1.0).sum()
        assert ad.tape_size() == 0
        assert not y.requires_grad

    def test_no_grad_context(self):
        x = Tensor(rng().standard_normal(3), requires_grad=True)
        with ad.no_grad():
            (x * x).sum()
        assert ad.tape_size() == 0


class TestBackward:
    def test_sum_gradient_is_ones(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ad.backward(w.sum())
        assert np.array_equal(w.grad, [1.0, 1.0, 1.0])

    def test_polynomial_gradient(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward((w * w).sum())
        assert np.allclose(w.grad, [2.0, 4.0])

    def test_fanout_sums_path_gradients(self):
        x = Tensor([3.0], requires_grad=True)
        y = x + x
        ad.backward(y.sum())
        assert np.allclose(x.grad, [2.0])

    def test_nonscalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        y = w * 2.0
        with pytest.raises(ContractError):
            ad.backward(y)

    def test_empty_tape_rejected(self):
        with pytest.raises(ContractError):
            ad.backward(Tensor(0.0))

    def test_composite_graph_gradients(self):
        # conv -> relu -> pool -> dense -> cross-entropy, every parameter
        # checked against central finite differences
        r = rng(7)
        x = Tensor(r.standard_normal((2, 2, 6, 6)) * 0.5)
        w = Tensor(r.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        wd = Tensor(r.standard_normal((3 * 2 * 2, 4)) * 0.5, requires_grad=True)
        bd = Tensor(np.zeros(4), requires_grad=True)
        labels = np.array([1, 3])

        def loss():
            h = ad.relu(ad.conv2d(x, w, b, stride=1, padding=0))
            h = ad.maxpool2d(h, 2, 2)
            h = ad.flatten(h)
            h = ad.dense(h, wd, bd)
            return ad.softmax_cross_entropy(h, labels)

        check_gradients(loss, [w, b, wd, bd], h=1e-2, tol=1e-3)


class TestSgd:
    def test_step(self):
        w = Tensor([1.0], requires_grad=True)
        w.grad = np.array([2.0], dtype=np.float32)
        ad.sgd_step(w, lr=0.1)
        assert np.allclose(w.data, [0.8])
        assert w.grad is None

    def test_lr_scale_multiplies_step(self):
        w1 = Tensor([1.0], requires_grad=True)
        w1.grad = np.array([2.0], dtype=np.float32)
        w2 = Tensor([1.0], requires_grad=True)
        w2.grad = np.array([2.0], dtype=np.float32)
        ad.sgd_step(w1, lr=0.01, lr_scale=1.0)
        ad.sgd_step(w2, lr=0.01, lr_scale=5.0)
        assert np.allclose(1.0 - w2.data, 5.0 * (1.0 - w1.data))

    def test_steps_compose_additively(self):
        w = Tensor([1.0], requires_grad=True)
        for _ in range(2):
            w.grad = np.array([3.0], dtype=np.float32)
            ad.sgd_step(w, lr=0.1)
        assert np.allclose(w.data, [1.0 - 2 * 0.3])

    def test_missing_grad_rejected(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            ad.sgd_step(w, lr=0.1)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(rng().standard_normal((2, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        y = ad.conv2d(x, w, b)
        assert np.allclose(y.data, x.data)

    def test_constant_input_ones_kernel(self):
        c = 0.7
        x = Tensor(np.full((1, 1, 5, 5), c))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        y = ad.conv2d(x, w, b, padding=0)
        assert np.allclose(y.data, 9 * c, atol=1e-6)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_direct_summation(self, stride, padding):
        r = rng(3)
        x = r.standard_normal((2, 3, 7, 6)).astype(np.float32)
        w = r.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = r.standard_normal(4).astype(np.float32)
        y = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        ref = conv2d_direct(x, w, b, stride, padding)
        assert np.allclose(y.data, ref, atol=1e-4)

    def test_gradients_match_finite_differences(self):
        r = rng(5)
        x = Tensor(r.standard_normal((2, 2, 5, 5)), requires_grad=True)
        w = Tensor(r.standard_normal((3, 2, 3, 3)), requires_grad=True)
        b = Tensor(r.standard_normal(3), requires_grad=True)
        weights = Tensor(r.standard_normal((2, 3, 5, 5)))

        def loss():
            return (ad.conv2d(x, w, b, stride=1, padding=1) * weights).sum()

        # bilinear in (x, w), so central differences are exact per coordinate;
        # the larger step just suppresses float32 roundoff
        check_gradients(loss, [x, w, b], h=1e-2, tol=1e-3)

    def test_shape_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(DimensionError) as e:
            ad.conv2d(x, w, Tensor(np.zeros(1)))
        assert "(1, 2, 4, 4)" in str(e.value) and "(1, 3, 3, 3)" in str(e.value)


class TestDense:
    def test_identity(self):
        x = Tensor(rng().standard_normal((3, 4)))
        y = ad.dense(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.allclose(y.data, x.data)

    def test_hand_arithmetic(self):
        y = ad.dense(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
        assert np.allclose(y.data, [[3.0]])

    def test_gradients_match_finite_differences(self):
        r = rng(11)
        x = Tensor(r.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(r.standard_normal((4, 2)), requires_grad=True)
        b = Tensor(r.standard_normal(2), requires_grad=True)
        weights = Tensor(r.standard_normal((3, 2)))

        def loss():
            return (ad.dense(x, w, b) * weights).sum()

        # dense is linear, so a larger step keeps float32 FD noise far
        # below the 1e-4 bar without truncation error
        check_gradients(loss, [x, w, b], h=1e-2, tol=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))),
                     Tensor(np.zeros(2)))


class TestBatchNorm:
    def test_normalized_input_is_fixed_point(self):
        # alternating +/-1 per channel: exactly zero mean, unit variance
        x = np.ones((8, 3, 4, 4), dtype=np.float32)
        x[::2] = -1.0
        y = ad.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                           np.zeros(3, np.float32), np.ones(3, np.float32),
                           mode="train")
        assert np.abs(y.data - x).max() <= 1e-5

    def test_restandardized_random_input_near_fixed_point(self):
        r = rng(2)
        x = r.uniform(-1.7, 1.7, (8, 3, 4, 4)).astype(np.float32)
        x -= x.mean(axis=(0, 2, 3), keepdims=True)
        x /= x.std(axis=(0, 2, 3), keepdims=True)
        y = ad.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                           np.zeros(3, np.float32), np.ones(3, np.float32),
                           mode="train")
        assert np.abs(y.data - x).max() <= 2e-5

    def test_constant_input_gives_beta(self):
        x = Tensor(np.full((2, 2, 3, 3), 5.0))
        beta = np.array([0.3, -0.7], dtype=np.float32)
        y = ad.batchnorm2d(x, Tensor(np.ones(2)), Tensor(beta),
                           np.zeros(2, np.float32), np.ones(2, np.float32),
                           mode="train")
        assert np.allclose(y.data, beta[None, :, None, None], atol=1e-6)

    def test_running_stats_updated_and_used_in_eval(self):
        r = rng(4)
        x = r.standard_normal((16, 2, 3, 3)).astype(np.float32) * 2.0 + 1.0
        rm = np.zeros(2, np.float32)
        rv = np.ones(2, np.float32)
        ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       rm, rv, mode="train", momentum=1.0)
        assert np.allclose(rm, x.mean(axis=(0, 2, 3)), atol=1e-5)
        y = ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                           rm, rv, mode="eval")
        ref = (x - rm[None, :, None, None]) / np.sqrt(rv + 1e-5)[None, :, None, None]
        assert np.allclose(y.data, ref, atol=1e-5)

    def test_parameter_gradients_match_finite_differences(self):
        r = rng(6)
        x = Tensor(r.standard_normal((4, 3, 3, 3)))
        gamma = Tensor(r.standard_normal(3) * 0.5 + 1.0, requires_grad=True)
        beta = Tensor(r.standard_normal(3) * 0.1, requires_grad=True)
        weights = Tensor(r.standard_normal((4, 3, 3, 3)))

        def loss():
            y = ad.batchnorm2d(x, gamma, beta, np.zeros(3, np.float32),
                               np.ones(3, np.float32), mode="train")
            return (y * weights).sum()

        check_gradients(loss, [gamma, beta], h=1e-3, tol=1e-3)

    def test_input_gradient_matches_finite_differences(self):
        r = rng(8)
        x = Tensor(r.standard_normal((4, 2, 3, 3)), requires_grad=True)
        gamma = Tensor(np.ones(2) * 1.3)
        beta = Tensor(np.zeros(2))
        weights = Tensor(r.standard_normal((4, 2, 3, 3)))

        def loss():
            y = ad.batchnorm2d(x, gamma, beta, np.zeros(2, np.float32),
                               np.ones(2, np.float32), mode="train")
            return (y * weights).sum()

        check_gradients(loss, [x], h=1e-3, tol=1e-3)

    def test_bad_epsilon_rejected(self):
        with pytest.raises(ConfigError):
            ad.batchnorm2d(Tensor(np.zeros((2, 1, 2, 2))), Tensor(np.ones(1)),
                           Tensor(np.zeros(1)), np.zeros(1, np.float32),
                           np.ones(1, np.float32), mode="train", epsilon=0.0)


class TestReluPool:
    def test_relu_definition(self):
        y = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(y.data, [0.0, 0.0, 2.0])

    def test_relu_backward_zero_at_negative(self):
        x = Tensor([-1.0, 0.5], requires_grad=True)
        ad.backward(ad.relu(x).sum())
        assert np.array_equal(x.grad, [0.0, 1.0])

    def test_maxpool_definition(self):
        y = ad.maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
        assert y.data.shape == (1, 1, 1, 1)
        assert y.data[0, 0, 0, 0] == 4.0

    def test_maxpool_matches_direct(self):
        r = rng(9)
        x = r.standard_normal((2, 3, 6, 6)).astype(np.float32)
        y = ad.maxpool2d(Tensor(x), 2, 2)
        assert np.array_equal(y.data, maxpool2d_direct(x, 2, 2))

    def test_maxpool_truncates_ragged_edge(self):
        x = rng(1).standard_normal((1, 1, 7, 7)).astype(np.float32)
        y = ad.maxpool2d(Tensor(x), 2, 2)
        assert y.data.shape == (1, 1, 3, 3)
        assert np.array_equal(y.data[0, 0], maxpool2d_direct(x, 2, 2)[0, 0])

    def test_maxpool_backward_routes_to_first_max(self):
        x = Tensor([[[[1.0, 1.0], [1.0, 1.0]]]], requires_grad=True)
        ad.backward(ad.maxpool2d(x, 2, 2).sum())
        assert np.array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_maxpool_gradient_matches_finite_differences(self):
        r = rng(10)
        # well-separated values so the argmax never flips under the FD step
        x = Tensor(np.arange(36, dtype=np.float32).reshape(1, 1, 6, 6)
                   + r.standard_normal((1, 1, 6, 6)) * 0.1, requires_grad=True)
        weights = Tensor(r.standard_normal((1, 1, 3, 3)))

        def loss():
            return (ad.maxpool2d(x, 2, 2) * weights).sum()

        check_gradients(loss, [x], h=1e-3, tol=1e-3)

    def test_global_avgpool(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
        y = ad.global_avgpool2d(x)
        assert np.allclose(y.data, [[1.5, 5.5]])


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((4, 10))),
                                        np.array([0, 3, 5, 9]))
        assert abs(loss.item() - np.log(10)) <= 1e-6

    def test_saturated_logits(self):
        logits = np.zeros((2, 5), dtype=np.float32)
        logits[0, 2] = 1e4
        logits[1, 4] = 1e4
        loss = ad.softmax_cross_entropy(Tensor(logits), np.array([2, 4]))
        assert loss.item() <= 1e-6

    def test_gradient_matches_finite_differences(self):
        r = rng(12)
        logits = Tensor(r.standard_normal((4, 5)), requires_grad=True)
        labels = np.array([0, 2, 4, 1])

        def loss():
            return ad.softmax_cross_entropy(logits, labels)

        check_gradients(loss, [logits], h=1e-2, tol=1e-4)

    def test_out_of_range_label(self):
        with pytest.raises(DataError):
            ad.softmax_cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


class TestElementwiseGradients:
    @pytest.mark.parametrize("name,fn", [
        ("mul", lambda a, b: (a * b).sum()),
        ("div", lambda a, b: (a / (b * b + 1.0)).sum()),
        ("sub", lambda a, b: (a - b).sum()),
        ("sigmoid", lambda a, b: (ad.sigmoid(a * b)).sum()),
        ("log", lambda a, b: ad.log(a * a + b * b + 1.0).sum()),
        ("exp", lambda a, b: ad.exp(a * 0.3 + b * 0.1).sum()),
        ("pow", lambda a, b: ((a * a + 1.0) ** 1.5 + b).sum()),
    ])
    def test_matches_finite_differences(self, name, fn):
        r = rng(abs(hash(name)) % 2**31)
        a = Tensor(r.standard_normal(7), requires_grad=True)
        b = Tensor(r.standard_normal(7), requires_grad=True)
        check_gradients(lambda: fn(a, b), [a, b], h=1e-2, tol=1e-3)

    def test_broadcast_gradients(self):
        r = rng(13)
        a = Tensor(r.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(r.standard_normal(4), requires_grad=True)
        check_gradients(lambda: ((a + b) * (a * b)).sum(), [a, b], h=1e-3, tol=1e-3)


def test_determinism_bit_identical():
    def run():
        r = rng(42)
        x = Tensor(r.standard_normal((2, 2, 6, 6)))
        w = Tensor(r.standard_normal((3, 2, 3, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        y = ad.relu(ad.conv2d(x, w, b, padding=1))
        loss = ad.softmax_cross_entropy(ad.dense(
            ad.flatten(ad.maxpool2d(y, 2, 2)), Tensor(
                rng(1).standard_normal((3 * 3 * 3, 2)), requires_grad=True),
            Tensor(np.zeros(2), requires_grad=True)), np.array([0, 1]))
        ad.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()
