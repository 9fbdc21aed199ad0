import math

import numpy as np
import pytest

from core.numerics import (
    DimensionError,
    NonFiniteError,
    Parameter,
    SGD,
    affine,
    affine_backward,
    assign_checkpoint,
    check_gradients,
    finite_diff_grad,
    load_checkpoint,
    relative_error,
    relu,
    relu_backward,
    save_checkpoint,
    sgd_step,
    sigmoid,
    sigmoid_grad,
    softmax,
    softmax_cross_entropy,
)


def test_affine_identity():
    np.testing.assert_array_equal(affine(np.array([3.0, -1.0]), np.eye(2), np.zeros(2)), [3.0, -1.0])


def test_affine_zero_map():
    out = affine(np.array([5.0, -7.0]), np.zeros((2, 2)), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(out, [1.0, 2.0])


def test_affine_hand_product():
    out = affine(np.array([1.0, 1.0]), np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2))
    np.testing.assert_array_equal(out, [3.0, 7.0])


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        affine(np.ones(3), np.ones((2, 2)), np.zeros(2))


def test_affine_backward_matches_finite_differences(rng):
    x = Parameter("x", rng.normal(size=(4, 3)))
    W = Parameter("W", rng.normal(size=(2, 3)))
    b = Parameter("b", rng.normal(size=2))
    g = rng.normal(size=(4, 2))

    def loss():
        return float(np.sum(affine(x.value, W.value, b.value) * g))

    gx, gW, gb = affine_backward(x.value, W.value, g)
    numeric = finite_diff_grad(loss, [x, W, b])
    np.testing.assert_allclose(gx, numeric["x"], atol=1e-8)
    np.testing.assert_allclose(gW, numeric["W"], atol=1e-8)
    np.testing.assert_allclose(gb, numeric["b"], atol=1e-8)


def test_sigmoid_values():
    assert abs(sigmoid(0.0) - 0.5) < 1e-15
    assert abs(sigmoid(40.0) - 1.0) < 1e-15
    assert abs(sigmoid(1.0) - 0.7310585786) < 1e-10
    assert sigmoid(-800.0) >= 0.0


def test_sigmoid_saturates_only_for_large_inputs():
    assert sigmoid(40.0) == 1.0
    z = np.linspace(-30.0, 30.0, 121)
    s = sigmoid(z)
    assert np.all(s > 0.0) and np.all(s < 1.0)


def test_sigmoid_grad_from_output():
    assert abs(sigmoid_grad(sigmoid(1.0)) - 0.19661193) < 1e-8


def test_relu_and_backward():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(x), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu_backward(x, np.ones(3)), [0.0, 0.0, 1.0])


def test_softmax_is_shift_invariant_and_normalised():
    p = softmax(np.array([1000.0, 1001.0, 1002.0]))
    np.testing.assert_allclose(p, softmax(np.array([0.0, 1.0, 2.0])), atol=1e-15)
    assert abs(p.sum() - 1.0) < 1e-15


def test_cross_entropy_uniform():
    loss, _ = softmax_cross_entropy(np.zeros(4), 2)
    assert abs(loss - math.log(4)) < 1e-12


def test_cross_entropy_saturated_correct_class():
    loss, _ = softmax_cross_entropy(np.array([100.0, 0.0]), 0)
    assert abs(loss) < 1e-12


def test_cross_entropy_golden():
    loss, grad = softmax_cross_entropy(np.array([1.0, 2.0, 3.0]), 2)
    assert abs(loss - 0.40760596) < 1e-8
    assert abs(grad.sum()) < 1e-12


def test_cross_entropy_batch_is_per_sample():
    logits = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    loss, grad = softmax_cross_entropy(logits, np.array([2, 1]))
    assert loss.shape == (2,)
    assert abs(loss[1] - math.log(3)) < 1e-12
    assert grad.shape == (2, 3)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), -1)


def test_sgd_plain_step():
    p = Parameter("p", np.array([1.0]))
    p.grad[:] = 2.0
    sgd_step([p], lr=0.1, momentum=0.0, velocity={})
    assert abs(p.value[0] - 0.8) < 1e-15


def test_sgd_zero_gradient_is_fixed_point():
    p = Parameter("p", np.array([1.0, -2.0]))
    velocity = {}
    for _ in range(3):
        sgd_step([p], lr=0.1, momentum=0.9, velocity=velocity)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_sgd_momentum_recursion():
    p = Parameter("p", np.array([0.0]))
    optimizer = SGD([p], lr=0.1, momentum=0.9)
    p.grad[:] = 1.0
    optimizer.step()
    assert abs(p.value[0] + 0.1) < 1e-15
    optimizer.step()
    assert abs(p.value[0] + 0.29) < 1e-15


def test_sgd_rejects_non_finite_gradient_without_touching_values():
    a = Parameter("a", np.array([1.0]))
    b = Parameter("b", np.array([1.0]))
    a.grad[:] = 1.0
    b.grad[:] = np.nan
    with pytest.raises(NonFiniteError, match="b"):
        sgd_step([a, b], lr=0.1, momentum=0.9, velocity={})
    assert a.value[0] == 1.0


def test_sgd_rejects_duplicate_names():
    with pytest.raises(ValueError):
        SGD([Parameter("w", np.zeros(1)), Parameter("w", np.zeros(1))])


def test_finite_differences_quadratic():
    p = Parameter("p", np.array([3.0]))
    numeric = finite_diff_grad(lambda: float(p.value[0] ** 2), [p], epsilon=1e-5)
    assert abs(numeric["p"][0] - 6.0) < 1e-8
    assert p.value[0] == 3.0


def test_finite_differences_constant():
    p = Parameter("p", np.array([1.0, 2.0, 3.0]))
    numeric = finite_diff_grad(lambda: 4.2, [p])
    assert np.all(np.abs(numeric["p"]) < 1e-9)


def test_finite_differences_sigmoid():
    p = Parameter("p", np.array([1.0]))
    numeric = finite_diff_grad(lambda: float(sigmoid(p.value[0])), [p])
    assert abs(numeric["p"][0] - 0.19661193) < 1e-7


def test_relative_error_rules():
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-6])) < 1e-5
    assert relative_error(np.array([1.0]), np.array([1.1])) > 1e-2
    # tiny entries are judged on absolute difference
    assert relative_error(np.array([1e-9]), np.array([2e-9])) < 1e-4
    assert relative_error(np.array([0.0]), np.array([1e-6])) >= 1e-4


def test_check_gradients_flags_wrong_gradient():
    p = Parameter("p", np.array([2.0]))
    p.grad[:] = 4.0
    assert all(c.passed for c in check_gradients(lambda: float(p.value[0] ** 2), [p]))
    p.grad[:] = 5.0
    assert not any(c.passed for c in check_gradients(lambda: float(p.value[0] ** 2), [p]))


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    params = [
        Parameter("q0", rng.normal(size=5)),
        Parameter("classifier.W", rng.normal(size=(3, 10))),
        Parameter("scalar", np.array(np.pi)),
    ]
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, params)
    arrays = load_checkpoint(path)
    assert list(arrays) == ["q0", "classifier.W", "scalar"]
    for param in params:
        assert arrays[param.name].shape == param.shape
        assert arrays[param.name].tobytes() == param.value.tobytes()


def test_checkpoint_layout(tmp_path):
    path = str(tmp_path / "one.ckpt")
    save_checkpoint(path, [Parameter("ab", np.array([1.0, 2.0]))])
    blob = open(path, "rb").read()
    assert blob[:8] == b"RANCKPT1"
    assert blob[8:12] == (1).to_bytes(4, "little")
    assert blob[12:14] == (2).to_bytes(2, "little")
    assert blob[14:16] == b"ab"
    assert blob[16] == 1
    assert len(blob) == 8 + 4 + 2 + 2 + 1 + 4 + 16


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 4)
    with pytest.raises(ValueError):
        load_checkpoint(str(bad))
    path = str(tmp_path / "ok.ckpt")
    save_checkpoint(path, [Parameter("w", np.zeros(2))])
    with open(path, "ab") as f:
        f.write(b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(path)


def test_assign_checkpoint_checks_shapes(tmp_path):
    path = str(tmp_path / "w.ckpt")
    save_checkpoint(path, [Parameter("w", np.ones(3))])
    target = Parameter("w", np.zeros(3))
    assert assign_checkpoint([target], load_checkpoint(path)) == ["w"]
    np.testing.assert_array_equal(target.value, np.ones(3))
    with pytest.raises(DimensionError):
        assign_checkpoint([Parameter("w", np.zeros(4))], load_checkpoint(path))
    with pytest.raises(KeyError):
        assign_checkpoint([Parameter("missing", np.zeros(1))], load_checkpoint(path))
