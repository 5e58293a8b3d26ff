import math

import numpy as np
import pytest

from cabp.compression import CompressedActivation, compress, inflate
from cabp.nn import kernels as K
from cabp.nn.kernels import Conv2dSpec, SavePolicy

from oracles import conv2d_loops, conv2d_weight_grad_loops


def test_spec_output_size_and_weight_shape():
    spec = Conv2dSpec(3, 64, 7, 2, 3)
    assert spec.output_hw(224, 224) == (112, 112)
    assert spec.weight_shape == (64, 3, 7, 7)
    with pytest.raises(ValueError):
        Conv2dSpec(1, 1, 5, 1, 0).output_hw(3, 3)


def test_save_policy_validation():
    assert SavePolicy.full().is_full
    assert SavePolicy.pooled(2, 3).k == (2, 3)
    with pytest.raises(ValueError):
        SavePolicy((0, 2))


def test_identity_1x1_conv():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(K.conv2d_forward(x, w, np.zeros(3), Conv2dSpec(3, 3, 1)), x)


def test_all_ones_gives_nines():
    y = K.conv2d_forward(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), None, Conv2dSpec(1, 1, 3))
    np.testing.assert_array_equal(y, np.full((1, 1, 2, 2), 9.0))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_forward_matches_nested_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    spec = Conv2dSpec(3, 4, 3, stride, pad, has_bias=True)
    np.testing.assert_allclose(K.conv2d_forward(x, w, b, spec), conv2d_loops(x, w, b, (stride,) * 2, (pad,) * 2),
                               rtol=1e-12, atol=1e-12)


def test_backward_input_1x1_scales_dy():
    dy = np.random.default_rng(1).standard_normal((2, 1, 3, 3))
    dx = K.conv2d_backward_input(dy, np.full((1, 1, 1, 1), 2.5), Conv2dSpec(1, 1, 1), (3, 3))
    np.testing.assert_array_equal(dx, 2.5 * dy)


def test_zero_dy_gives_zero_grads():
    spec = Conv2dSpec(2, 3, 3, 1, 1)
    dy = np.zeros((1, 3, 5, 5))
    assert not K.conv2d_backward_input(dy, np.ones(spec.weight_shape), spec, (5, 5)).any()
    assert not K.conv2d_backward_bias(dy).any()


def test_bias_gradient_of_ones():
    np.testing.assert_array_equal(K.conv2d_backward_bias(np.ones((2, 3, 2, 2))), [8.0, 8.0, 8.0])


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 1), (2, 3, 7)])
def test_weight_gradient_matches_loops(stride, pad, k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 2, 9, 9))
    spec = Conv2dSpec(2, 3, k, stride, pad)
    dy = rng.standard_normal((2, 3, *spec.output_hw(9, 9)))
    np.testing.assert_allclose(K.conv2d_backward_weight(x, dy, spec), conv2d_weight_grad_loops(x, dy, (k, k), (stride,) * 2,
                               (pad,) * 2), rtol=1e-12, atol=1e-12)


def test_pooled_1x1_bit_identical_to_full():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    spec = Conv2dSpec(3, 4, 3, 1, 1)
    dy = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    full = K.conv2d_backward_weight(x, dy, spec, SavePolicy.full())
    pooled = K.conv2d_backward_weight(compress(x, 1), dy, spec, SavePolicy.pooled(1))
    assert full.tobytes() == pooled.tobytes()


def test_constant_input_pooled_dw_equals_full():
    x = np.full((2, 3, 8, 8), 0.3, dtype=np.float32)
    spec = Conv2dSpec(3, 4, 3, 1, 1)
    dy = np.random.default_rng(4).standard_normal((2, 4, 8, 8)).astype(np.float32)
    full = K.conv2d_backward_weight(x, dy, spec)
    pooled = K.conv2d_backward_weight(compress(x, 2), dy, spec, SavePolicy.pooled(2))
    assert full.tobytes() == pooled.tobytes()


def test_pooled_dw_equals_oracle_on_inflated():
    rng = np.random.default_rng(5)
    # dyadic values keep every partial sum exact, so both sides must agree bit for bit
    x = rng.integers(-8, 8, (1, 1, 4, 4)) / 4.0
    dy = rng.integers(-8, 8, (1, 1, 2, 2)) / 4.0
    spec = Conv2dSpec(1, 1, 3)
    c = compress(x, 2)
    got = K.conv2d_backward_weight(c, dy, spec, SavePolicy.pooled(2))
    assert got.tobytes() == conv2d_weight_grad_loops(inflate(c), dy, (3, 3)).tobytes()


def test_kernel_mismatch_rejected():
    c = compress(np.ones((1, 1, 4, 4)), 2)
    with pytest.raises(ValueError):
        K.conv2d_backward_weight(c, np.ones((1, 1, 2, 2)), Conv2dSpec(1, 1, 3), SavePolicy.pooled(4))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        K.conv2d_forward(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), None, Conv2dSpec(3, 1, 3))


# -- other layers ------------------------------------------------------------
def test_relu_values():
    y, mask = K.relu_forward(np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(y, [0.0, 2.0])
    assert mask.dtype == np.bool_


def test_uniform_logits_loss_is_ln_c():
    for c in (2, 10, 1000):
        loss, _ = K.softmax_cross_entropy(np.zeros((3, c)), np.array([0, 1, c - 1]))
        assert math.isclose(float(loss), math.log(c), rel_tol=1e-12)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        K.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_maxpool_indices_are_compact():
    x = np.random.default_rng(6).standard_normal((2, 3, 8, 8)).astype(np.float32)
    y, idx = K.maxpool2d_forward(x, 3, 2, 1)
    assert y.shape == (2, 3, 4, 4) and idx.dtype == np.uint8


def test_batchnorm_normalises():
    x = np.random.default_rng(7).standard_normal((4, 2, 3, 3)) * 3 + 1
    y, mean, var, inv_std = K.batchnorm2d_forward(x, np.ones(2), np.zeros(2))
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_global_avgpool_and_linear_shapes():
    x = np.ones((2, 5, 3, 3))
    np.testing.assert_array_equal(K.global_avgpool_forward(x), np.ones((2, 5)))
    assert K.linear_forward(np.ones((2, 5)), np.ones((7, 5)), np.zeros(7)).shape == (2, 7)


def test_compressed_activation_holds_only_shape_and_k():
    c = compress(np.ones((1, 1, 4, 4)), 2)
    assert isinstance(c, CompressedActivation)
    assert set(c.__dataclass_fields__) == {"z", "original_shape", "k"}
