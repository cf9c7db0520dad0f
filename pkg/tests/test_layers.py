"""Test layers module."""
import math

import numpy as np
import pytest
from lts_qat.common import ConfigError, DataValidationError, DimensionError  # type: ignore
from lts_qat.layers import (  # type: ignore
    BatchNorm,
    Flatten,
    MaxPool2d,
    Parameter,
    QuantLinear,
    QuantOptions,
    batchnorm_backward,
    batchnorm_forward,
    cross_entropy_fwd_bwd,
    layer_backward,
    quant_conv_forward,
    quant_linear_forward,
)
from lts_qat.models import (  # type: ignore
    BatchNormSpec,
    ConvSpec,
    FlattenSpec,
    LinearSpec,
    MaxPoolSpec,
    ModelSpec,
    ReluSpec,
    build_model,
)
from lts_qat.quantizer import QuantConfig, fake_quant_forward, init_bounds  # type: ignore
from lts_qat.sparse_backward import (  # type: ignore
    backward_flops_accounting,
    weight_grad_dense,
    weight_grad_skipped,
)

FD_STEP = 1e-6


def test_parameter_freeze_is_sticky():
    """freeze() only adds positions and zeroes their momentum."""
    p = Parameter(name="w", value=np.ones(4), frozen_mask=np.zeros(4, dtype=bool))
    p.velocity[:] = 2.0
    assert p.freeze(np.array([True, False, True, False])) == 2
    assert p.freeze(np.array([True, True, False, False])) == 1
    assert p.frozen_mask.tolist() == [True, True, True, False]
    assert p.velocity.tolist() == [0.0, 0.0, 0.0, 2.0]
    assert p.frozen_count == 3


def test_parameter_without_mask_cannot_freeze():
    """Biases carry no mask."""
    p = Parameter(name="b", value=np.zeros(3))
    with pytest.raises(ConfigError):
        p.freeze(np.ones(3, dtype=bool))
    assert p.frozen_count == 0


def test_bound_parameter_clamp():
    """Bounds are lifted to u >= l + eps."""
    p = Parameter(name="bounds", value=np.array([0.5, 0.1]), is_bounds=True)
    p.clamp()
    assert p.value[1] > p.value[0]


def test_linear_zero_weight_gives_bias():
    """W = 0 and no quantization: y = b for every row."""
    x = np.random.default_rng(0).standard_normal((3, 4))
    b = np.array([1.0, -2.0])
    y, _ = quant_linear_forward(x, np.zeros((2, 4)), b, None, None)
    assert np.array_equal(y, np.tile(b, (3, 1)))


def test_linear_input_mismatch():
    """Input features must match the weight."""
    with pytest.raises(DimensionError):
        quant_linear_forward(np.ones((2, 3)), np.ones((2, 4)), np.zeros(2), None, None)


def test_one_by_one_conv_equals_linear():
    """A 1x1 convolution on a 1x1 image is a linear layer."""
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((2, 5))
    b = rng.standard_normal(2)
    y_lin, _ = quant_linear_forward(x, w, b, None, None)
    y_conv, _ = quant_conv_forward(x.reshape(3, 5, 1, 1), w.reshape(2, 5, 1, 1), b,
                                   None, None)
    np.testing.assert_allclose(y_conv.reshape(3, 2), y_lin, rtol=1e-12, atol=1e-12)


def test_quantized_conv_matches_direct_convolution():
    """4-bit conv equals a direct convolution of the pre-quantized operands."""
    rng = np.random.default_rng(12)
    x = rng.standard_normal((1, 1, 3, 3))
    w = rng.standard_normal((1, 1, 2, 2))
    b = rng.standard_normal(1)
    cfg_w = QuantConfig(bit_width=4, kind="weight")
    cfg_a = QuantConfig(bit_width=4, kind="activation")
    bounds_w, bounds_a = init_bounds(w, "weight"), init_bounds(x, "activation")
    y, _ = quant_conv_forward(x, w, b, bounds_w, bounds_a, cfg_w, cfg_a)

    w_bar, _ = fake_quant_forward(w, bounds_w, cfg_w)
    x_bar, _ = fake_quant_forward(x, bounds_a, cfg_a)
    expected = np.zeros((1, 1, 2, 2))
    for i in range(2):
        for j in range(2):
            expected[0, 0, i, j] = np.sum(w_bar[0, 0] * x_bar[0, 0, i:i + 2, j:j + 2]) + b[0]
    assert y.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(y, expected, rtol=1e-5, atol=1e-12)


def test_conv_non_exact_geometry_is_config_error():
    """A stride that does not tile the input is rejected before any work."""
    with pytest.raises(ConfigError, match="non-exact"):
        quant_conv_forward(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 2, 2)), np.zeros(1),
                           None, None, stride=2)


def test_backward_zero_upstream():
    """g_out = 0 gives zero gradients everywhere."""
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4))
    _, cache = quant_linear_forward(x, rng.standard_normal((2, 4)), np.zeros(2), None, None)
    grads = layer_backward(np.zeros((3, 2)), cache)
    assert not grads.g_x.any()
    assert not grads.g_weight.any()
    assert not grads.g_bias.any()


def test_backward_unfrozen_matches_dense():
    """Without frozen weights the weight gradient is the dense GEMM, bit for bit."""
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 4))
    g_out = rng.standard_normal((6, 3))
    _, cache = quant_linear_forward(x, rng.standard_normal((3, 4)), np.zeros(3), None, None,
                                    frozen_mask=np.zeros((3, 4), dtype=bool))
    grads = layer_backward(g_out, cache)
    assert np.array_equal(grads.g_weight, weight_grad_dense(x.T.copy(), g_out.T.copy()))
    assert grads.report.macs_skipped == 0


def _quant_linear(frozen_bound_grad=True):
    rng = np.random.default_rng(4)
    layer = QuantLinear("fc", rng.standard_normal((3, 5)), np.zeros(3), 4,
                        QuantOptions(frozen_bound_grad=frozen_bound_grad))
    layer.init_weight_bounds()
    x = np.abs(rng.standard_normal((8, 5)))
    layer.init_act_bounds(x)
    return layer, x, rng.standard_normal((8, 3))


def test_all_frozen_backward():
    """Every weight frozen: g_W = 0, g_x and bound gradients unchanged."""
    layer, x, g_out = _quant_linear()
    layer.forward(x)
    g_x_open = layer.backward(g_out)
    bounds_open = layer.weight_bounds.grad.copy()
    layer.weight.freeze(np.ones((3, 5), dtype=bool))
    layer.forward(x)
    g_x_frozen = layer.backward(g_out)
    assert not layer.weight.grad.any()
    assert np.array_equal(g_x_frozen, g_x_open)
    assert np.array_equal(layer.weight_bounds.grad, bounds_open)
    assert layer.last_report.macs_performed == 0


def test_frozen_bound_grad_off():
    """With the complementary pass disabled, frozen weights drop out of the bound gradient."""
    layer, x, g_out = _quant_linear(frozen_bound_grad=False)
    layer.weight.freeze(np.ones((3, 5), dtype=bool))
    layer.forward(x)
    layer.backward(g_out)
    assert not layer.weight_bounds.grad.any()


def test_float32_bounds_stay_ordered_far_from_zero():
    """A constant float32 calibration batch at 40 still yields u > l and a usable layer."""
    layer = QuantLinear("fc", np.ones((2, 3), dtype=np.float32), np.zeros(2, dtype=np.float32),
                        2, QuantOptions())
    layer.init_weight_bounds()
    x = np.full((4, 3), 40.0, dtype=np.float32)
    layer.init_act_bounds(x)
    lower, upper = layer.act_bounds.value
    assert upper > lower
    _, bounds_a = layer.bounds()
    assert bounds_a.upper > bounds_a.lower
    assert np.all(np.isfinite(layer.forward(x)))


def test_float32_bound_clamp_after_collapse():
    """Bounds pushed together in float32 are separated by at least one ulp."""
    p = Parameter(name="bounds", value=np.array([100.0, 50.0], dtype=np.float32),
                  is_bounds=True)
    p.clamp()
    assert p.value.dtype == np.float32
    assert p.value[0] == np.float32(100.0)
    assert p.value[1] > p.value[0]


def _half_frozen_linear(frozen_bound_grad):
    rng = np.random.default_rng(11)
    layer = QuantLinear("fc", rng.standard_normal((4, 6)), np.zeros(4), 4,
                        QuantOptions(frozen_bound_grad=frozen_bound_grad))
    layer.init_weight_bounds()
    x = np.abs(rng.standard_normal((5, 6)))
    layer.init_act_bounds(x)
    layer.weight.freeze(np.arange(24).reshape(4, 6) % 2 == 0)
    return layer, x, rng.standard_normal((5, 4))


def test_bound_grad_pass_macs_are_reported(monkeypatch):
    """MACs spent on frozen positions for the bound gradient show up in the report."""
    performed = []

    def counting(act_cols, g_out, frozen_mask):
        out, report = weight_grad_skipped(act_cols, g_out, frozen_mask)
        performed.append(report.macs_performed)
        return out, report

    monkeypatch.setattr("lts_qat.layers.weight_grad_skipped", counting)
    layer, x, g_out = _half_frozen_linear(frozen_bound_grad=True)
    layer.forward(x)
    layer.backward(g_out)
    report = layer.last_report
    assert sum(performed) == 120
    assert report.macs_performed == 60 and report.macs_skipped == 60
    assert report.macs_performed + report.macs_bound_grad == sum(performed)
    done, baseline, reduction = backward_flops_accounting([report])
    assert (done, baseline, reduction) == (240, 240, 0.0)


def test_bound_grad_pass_off_saves_frozen_macs():
    """Without the complementary pass the frozen half is really skipped."""
    layer, x, g_out = _half_frozen_linear(frozen_bound_grad=False)
    layer.forward(x)
    layer.backward(g_out)
    report = layer.last_report
    assert report.macs_bound_grad == 0
    done, baseline, reduction = backward_flops_accounting([report])
    assert (done, baseline) == (180, 240)
    assert reduction == pytest.approx(0.25)


def test_batchnorm_constant_input():
    """Constant input normalizes to zero, so y = beta."""
    x = np.full((4, 3, 2, 2), 2.0)
    gamma = np.array([1.0, 2.0, 3.0])
    beta = np.array([0.5, -0.5, 0.0])
    y, _ = batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), training=True)
    np.testing.assert_allclose(y, np.broadcast_to(beta.reshape(1, 3, 1, 1), x.shape))


def test_batchnorm_running_stats():
    """Training updates the running buffers with momentum 0.9."""
    bn = BatchNorm("bn", 2, dtype=np.float64)
    x = np.zeros((2, 2, 1, 1))
    x[:, 1] = 4.0
    bn.forward(x)
    np.testing.assert_allclose(bn.running_mean, [0.0, 0.4])
    np.testing.assert_allclose(bn.running_var, [0.9, 0.9])
    assert set(bn.buffers()) == {"bn.running_mean", "bn.running_var"}


def test_batchnorm_gradients_match_finite_differences():
    """Analytic BN gradients equal central differences."""
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 3, 2, 2))
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    r = rng.standard_normal(x.shape)

    def loss(xv, gv, bv):
        y, _ = batchnorm_forward(xv, gv, bv, np.zeros(3), np.ones(3), training=True)
        return float(np.sum(y * r))

    _, cache = batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), training=True)
    g_x, g_gamma, g_beta = batchnorm_backward(r, cache)
    for idx in [(0, 0, 0, 0), (1, 2, 1, 0), (3, 1, 1, 1)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += FD_STEP
        xm[idx] -= FD_STEP
        fd = (loss(xp, gamma, beta) - loss(xm, gamma, beta)) / (2 * FD_STEP)
        assert g_x[idx] == pytest.approx(fd, rel=1e-5, abs=1e-7)
    for c in range(3):
        e = np.zeros(3)
        e[c] = FD_STEP
        fd_g = (loss(x, gamma + e, beta) - loss(x, gamma - e, beta)) / (2 * FD_STEP)
        fd_b = (loss(x, gamma, beta + e) - loss(x, gamma, beta - e)) / (2 * FD_STEP)
        assert g_gamma[c] == pytest.approx(fd_g, rel=1e-5, abs=1e-7)
        assert g_beta[c] == pytest.approx(fd_b, rel=1e-5, abs=1e-7)


def test_cross_entropy_uniform_logits():
    """Equal logits give ln C and gradient (1/C - onehot) / N."""
    loss, grad = cross_entropy_fwd_bwd(np.zeros((2, 4)), np.array([0, 3]))
    assert loss == pytest.approx(math.log(4))
    np.testing.assert_allclose(grad[0], [-0.375, 0.125, 0.125, 0.125])


def test_cross_entropy_label_out_of_range():
    """Labels must index a logit column."""
    with pytest.raises(DataValidationError):
        cross_entropy_fwd_bwd(np.zeros((2, 3)), np.array([0, 3]))


def test_maxpool_ties_go_to_first():
    """Gradient flows to the first maximal element of a window."""
    pool = MaxPool2d(size=2)
    x = np.array([[[[1.0, 1.0], [0.0, 0.0]]]])
    y = pool.forward(x)
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 1.0
    g = pool.backward(np.ones((1, 1, 1, 1)))
    assert g[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_rejects_odd_extent():
    """Spatial extents must divide by the pool size."""
    with pytest.raises(ConfigError):
        MaxPool2d(size=2).forward(np.zeros((1, 1, 3, 3)))


def test_flatten_restores_shape():
    """Backward reshapes to the forward input."""
    layer = Flatten()
    x = np.arange(24.0).reshape(2, 3, 2, 2)
    assert layer.forward(x).shape == (2, 12)
    assert layer.backward(np.ones((2, 12))).shape == x.shape


def _fd_check(model, x, labels, rng, per_param=3):
    def loss():
        return cross_entropy_fwd_bwd(model.forward(x, training=True), labels)[0]

    model.loss_and_backward(x, labels)
    analytic = {p.name: p.grad.copy() for p in model.parameters()}
    for p in model.parameters():
        flat = p.value.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            saved = flat[i]
            flat[i] = saved + FD_STEP
            up = loss()
            flat[i] = saved - FD_STEP
            down = loss()
            flat[i] = saved
            fd = (up - down) / (2 * FD_STEP)
            assert analytic[p.name].reshape(-1)[i] == pytest.approx(fd, rel=1e-4, abs=1e-6), p.name


def test_full_precision_mlp_gradients():
    """End-to-end gradients of a small full-precision MLP."""
    spec = ModelSpec(name="tiny", input_shape=(4,), num_classes=3,
                     layers=[LinearSpec(name="fc1", in_features=4, out_features=5, quantize=False),
                             ReluSpec(name="relu"),
                             LinearSpec(name="fc2", in_features=5, out_features=3,
                                        quantize=False)])
    model = build_model(spec, seed=0, precision=64)
    rng = np.random.default_rng(6)
    _fd_check(model, rng.standard_normal((6, 4)), np.array([0, 1, 2, 0, 1, 2]), rng)


def test_full_precision_convnet_gradients():
    """End-to-end gradients through conv, batch norm, pooling and a linear head."""
    spec = ModelSpec(name="tiny-conv", input_shape=(1, 4, 4), num_classes=3,
                     layers=[ConvSpec(name="conv", in_channels=1, out_channels=2,
                                      quantize=False),
                             BatchNormSpec(name="bn", channels=2),
                             ReluSpec(name="relu"),
                             MaxPoolSpec(name="pool"),
                             FlattenSpec(),
                             LinearSpec(name="fc", in_features=8, out_features=3,
                                        quantize=False)])
    model = build_model(spec, seed=1, precision=64)
    rng = np.random.default_rng(7)
    _fd_check(model, rng.standard_normal((4, 1, 4, 4)), np.array([0, 1, 2, 1]), rng)


def test_quantized_network_gradients_match_surrogate(monkeypatch):
    """With rounding replaced by identity, STE gradients are exact for every parameter."""
    monkeypatch.setattr("lts_qat.quantizer.quantize_levels",
                        lambda x_n, bit_width: x_n * x_n.dtype.type(2 ** bit_width - 1))
    spec = ModelSpec(name="tiny-q", input_shape=(4,), num_classes=3, bit_width=4,
                     layers=[LinearSpec(name="fc1", in_features=4, out_features=5),
                             BatchNormSpec(name="bn", channels=5),
                             ReluSpec(name="relu"),
                             LinearSpec(name="fc2", in_features=5, out_features=3)])
    model = build_model(spec, seed=2, precision=64)
    rng = np.random.default_rng(8)
    fc1, bn, _, fc2 = model.layers
    for layer in (fc1, fc2):
        # every weight stays inside its bounds
        reach = float(np.abs(layer.weight.value).max()) + 0.5
        layer.weight_bounds.value[:] = (-reach, reach)
        layer.bias.value[:] = rng.uniform(-0.5, 0.5, layer.bias.value.shape)
    fc1.act_bounds.value[:] = (-1.5, 1.5)
    fc2.act_bounds.value[:] = (-0.5, 5.0)
    bn.gamma.value[:] = rng.uniform(0.5, 1.5, 5)
    bn.beta.value[:] = rng.uniform(-0.5, 0.5, 5)
    names = {p.name for p in model.parameters()}
    assert {"fc1.weight_bounds", "fc1.act_bounds", "bn.gamma", "bn.beta"} <= names
    _fd_check(model, rng.uniform(-1.0, 1.0, (6, 4)), np.array([0, 1, 2, 0, 1, 2]), rng)
