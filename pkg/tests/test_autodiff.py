import math

import numpy as np
import pytest

from tpmtl import autodiff as ad
from tpmtl.gradcheck import run_primitive_suite


def test_add_elementwise():
    out = ad.add(ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_mul_by_zero_scalar():
    out = ad.mul(ad.Tensor([2.0, 3.0]), 0.0)
    np.testing.assert_array_equal(out.data, [0.0, 0.0])


def test_elementwise_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError) as exc:
        ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((3, 2))))
    assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_backward_of_sum_x_squared():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape():
        loss = ad.tensor_sum(ad.mul(x, x))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_matmul_identity():
    eye = ad.Tensor(np.eye(2))
    m = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(eye, m).data, m.data)


def test_matmul_dot_product():
    out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.Tensor(np.zeros((3, 4))), ad.Tensor(np.zeros((3, 2))))


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.standard_normal((2, 5, 5)))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    out = ad.conv2d_3x3(x, ad.Tensor(w), ad.Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, x.data, atol=1e-14)


def test_conv_zero_input_gives_bias():
    w = ad.Tensor(np.ones((3, 2, 3, 3)))
    b = ad.Tensor([1.0, -2.0, 0.5])
    out = ad.conv2d_3x3(ad.Tensor(np.zeros((2, 4, 4))), w, b)
    for c, val in enumerate([1.0, -2.0, 0.5]):
        np.testing.assert_allclose(out.data[c], val)


def test_conv_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.conv2d_3x3(ad.Tensor(np.zeros((2, 4, 4))),
                      ad.Tensor(np.zeros((3, 5, 3, 3))), ad.Tensor(np.zeros(3)))


def test_leaky_relu_values_and_gradient():
    out = ad.leaky_relu(ad.Tensor([-1.0, 3.0]), 0.2)
    np.testing.assert_allclose(out.data, [-0.2, 3.0])
    x = ad.Tensor([-2.0], requires_grad=True)
    with ad.Tape():
        y = ad.tensor_sum(ad.leaky_relu(x, 0.2))
    ad.backward(y)
    np.testing.assert_allclose(x.grad, [0.2])


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ValueError):
        ad.leaky_relu(ad.Tensor([1.0]), 1.5)


def test_softmax_symmetry():
    out = ad.softmax_lastdim(ad.Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    out = ad.softmax_lastdim(ad.Tensor(rng.standard_normal((20, 7)) * 10))
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_softplus_closed_form_and_tails():
    assert ad.softplus(ad.Tensor([0.0])).data[0] == pytest.approx(math.log(2.0))
    assert ad.softplus(ad.Tensor([-40.0])).data[0] < 1e-15
    assert ad.softplus(ad.Tensor([40.0])).data[0] == pytest.approx(40.0, abs=1e-12)
    # overflow-safe branch
    assert np.isfinite(ad.softplus(ad.Tensor([1e4])).data[0])


def test_l2_normalize_unit_vector():
    out = ad.l2_normalize_lastdim(ad.Tensor([3.0, 4.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.6, 0.8, 0.0])


def test_l2_normalize_zero_row_stays_zero():
    out = ad.l2_normalize_lastdim(ad.Tensor([[0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(out.data[0], [0.0, 0.0])
    np.testing.assert_allclose(out.data[1], [1.0, 0.0])


def test_l2_normalize_unit_norm_property():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((50, 3)) + 0.1
    out = ad.l2_normalize_lastdim(ad.Tensor(x))
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1), 1.0, atol=1e-12)


def test_batchnorm_constant_channel_is_zeroed():
    x = ad.Tensor(np.full((1, 1, 4, 4), 7.0))
    out = ad.batchnorm2d(x, ad.Tensor([1.0]), ad.Tensor([0.0]),
                         ad.BatchNormStats(1), "train")
    np.testing.assert_allclose(out.data, 0.0, atol=1e-9)


def test_batchnorm_affine_shift():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 1, 8, 8))
    x = (x - x.mean()) / x.std()
    out = ad.batchnorm2d(ad.Tensor(x), ad.Tensor([1.0]), ad.Tensor([5.0]),
                         ad.BatchNormStats(1), "train")
    assert out.data.mean() == pytest.approx(5.0, abs=1e-9)


def test_batchnorm_eval_before_train_uses_init_stats():
    x = ad.Tensor(np.full((1, 1, 2, 2), 3.0))
    out = ad.batchnorm2d(x, ad.Tensor([1.0]), ad.Tensor([0.0]),
                         ad.BatchNormStats(1), "eval")
    # mean 0, var 1 initialization
    np.testing.assert_allclose(out.data, 3.0 / math.sqrt(1.0 + 1e-5), rtol=1e-12)


def test_batchnorm_running_stats_momentum():
    stats = ad.BatchNormStats(1)
    x = np.full((1, 1, 2, 2), 10.0)
    ad.batchnorm2d(ad.Tensor(x), ad.Tensor([1.0]), ad.Tensor([0.0]), stats, "train")
    assert stats.mean[0] == pytest.approx(1.0)  # 0.9 * 0 + 0.1 * 10


def test_dropout_rate_zero_and_eval_are_identity():
    rng = np.random.default_rng(6)
    x = ad.Tensor(rng.standard_normal((5, 5)))
    assert ad.dropout(x, 0.0, rng, "train") is x
    assert ad.dropout(x, 0.15, rng, "eval") is x


def test_dropout_zero_fraction_monte_carlo():
    rng = np.random.default_rng(7)
    x = ad.Tensor(np.ones(100_000))
    out = ad.dropout(x, 0.15, rng, "train")
    frac = float((out.data == 0.0).mean())
    assert abs(frac - 0.15) < 0.01


def test_dropout_survivor_scaling():
    rng = np.random.default_rng(8)
    out = ad.dropout(ad.Tensor(np.ones(1000)), 0.25, rng, "train")
    survivors = out.data[out.data != 0.0]
    np.testing.assert_allclose(survivors, 1.0 / 0.75)


def test_bilinear_midpoint_of_cell():
    plane = np.array([[[0.0], [1.0]], [[1.0], [2.0]]])  # rows=v, cols=u
    out = ad.bilinear_sample_2d(ad.Tensor(plane), ad.Tensor([[0.0, 0.0]]))
    assert out.data[0, 0] == pytest.approx(1.0)


def test_bilinear_reproduces_grid_nodes():
    rng = np.random.default_rng(9)
    r = 5
    plane = rng.standard_normal((r, r, 3))
    vs, us = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
    uv = np.stack([us.ravel(), vs.ravel()], axis=1) / (r - 1) * 2.0 - 1.0
    out = ad.bilinear_sample_2d(ad.Tensor(plane), ad.Tensor(uv))
    np.testing.assert_allclose(out.data, plane.reshape(-1, 3), atol=1e-12)


def test_bilinear_matches_four_corner_formula():
    rng = np.random.default_rng(10)
    r, c, n = 8, 4, 64
    plane = rng.standard_normal((r, r, c))
    uv = rng.uniform(-1, 1, size=(n, 2))
    out = ad.bilinear_sample_2d(ad.Tensor(plane), ad.Tensor(uv))

    # independent brute-force evaluation
    expect = np.zeros((n, c))
    for i in range(n):
        pu = (uv[i, 0] + 1) / 2 * (r - 1)
        pv = (uv[i, 1] + 1) / 2 * (r - 1)
        u0, v0 = min(int(np.floor(pu)), r - 2), min(int(np.floor(pv)), r - 2)
        fu, fv = pu - u0, pv - v0
        expect[i] = ((1 - fv) * (1 - fu) * plane[v0, u0]
                     + (1 - fv) * fu * plane[v0, u0 + 1]
                     + fv * (1 - fu) * plane[v0 + 1, u0]
                     + fv * fu * plane[v0 + 1, u0 + 1])
    assert np.abs(out.data - expect).max() < 1e-12


def test_bilinear_border_clamp():
    plane = np.arange(4.0).reshape(2, 2, 1)
    out = ad.bilinear_sample_2d(ad.Tensor(plane), ad.Tensor([[-5.0, -5.0], [5.0, 5.0]]))
    assert out.data[0, 0] == plane[0, 0, 0]
    assert out.data[1, 0] == plane[1, 1, 0]


def test_bilinear_linear_along_axis():
    plane = np.zeros((3, 3, 1))
    plane[:, 2, 0] = 1.0  # ramp in u
    us = np.linspace(-1, 1, 9)
    uv = np.stack([us, np.zeros_like(us)], axis=1)
    out = ad.bilinear_sample_2d(ad.Tensor(plane), ad.Tensor(uv))
    np.testing.assert_allclose(out.data[:, 0], np.maximum(0.0, us), atol=1e-12)


def test_backward_requires_scalar_loss():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape():
        y = ad.mul(x, x)
    with pytest.raises(ad.TapeError):
        ad.backward(y)


def test_backward_twice_rejected():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape():
        loss = ad.tensor_sum(ad.mul(x, x))
    ad.backward(loss)
    with pytest.raises(ad.TapeError):
        ad.backward(loss)


def test_cross_tape_mixing_rejected():
    x = ad.Tensor([1.0], requires_grad=True)
    with ad.Tape():
        y = ad.mul(x, x)
    with ad.Tape():
        with pytest.raises(ad.TapeError):
            ad.add(y, y)


def test_no_tape_means_no_recording():
    x = ad.Tensor([1.0], requires_grad=True)
    y = ad.mul(x, x)
    assert y.tape is None and not y.requires_grad


def test_gradients_accumulate_for_reused_leaf():
    x = ad.Tensor([3.0], requires_grad=True)
    with ad.Tape():
        loss = ad.add(ad.tensor_sum(ad.mul(x, x)), ad.tensor_sum(x))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [7.0])  # 2x + 1


def test_separate_tapes_are_independent():
    x = ad.Tensor([2.0], requires_grad=True)
    with ad.Tape():
        l1 = ad.tensor_sum(ad.mul(x, x))
    with ad.Tape():
        l2 = ad.tensor_sum(ad.scale(x, 3.0))
    ad.backward(l1)
    ad.backward(l2)
    np.testing.assert_allclose(x.grad, [7.0])  # 4 from x^2, 3 from 3x


def test_cumsum_exclusive_definition():
    out = ad.cumsum_exclusive_lastdim(ad.Tensor([[1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(out.data, [[0.0, 1.0, 3.0]])


def test_primitive_gradient_suite_quick():
    """Every primitive matches central finite differences (3-seed smoke run).

    The 20-seed run required for acceptance lives in test_acceptance.py.
    """
    errs = run_primitive_suite(seeds=3)
    bad = {k: v for k, v in errs.items() if v >= 1e-4}
    assert not bad, f"finite-difference failures: {bad}"


def test_batchnorm_gradcheck_tighter_tolerance():
    from tpmtl.gradcheck import check_op
    rng = np.random.default_rng(11)
    err = check_op(
        lambda x, g, b: ad.batchnorm2d(x, g, b, ad.BatchNormStats(2), "train"),
        [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2) * 0.2 + 1.0,
         rng.standard_normal(2)], [0, 1, 2], rng)
    assert err < 1e-5
