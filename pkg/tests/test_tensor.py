"""Graph mechanics: backward order, accumulation, broadcasting, dump format."""

import numpy as np
import pytest

from cellsearch.tensor import ShapeError, Tensor, dump_tensor, matmul


def test_sum_backward_is_ones():
    x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (x + x).backward()


def test_two_backward_calls_double_grads():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2.0 * first)


def test_shared_node_gradient_fan_in():
    # y = x*x + x used twice; dy/dx = 2x + 1
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_broadcast_add_unbroadcasts_grad():
    x = Tensor(np.zeros((4, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    (x + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(3, 4.0))
    np.testing.assert_array_equal(x.grad, np.ones((4, 3)))


def test_matmul_grads():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


def test_no_grad_graph_is_light():
    x = Tensor(np.ones((2, 2)))
    y = x * 2.0 + 1.0
    assert not y.requires_grad and y._backward is None


def test_dtype_preserved_through_ops():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = (x * 2.0 + x).sum()
    assert y.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32


def test_integer_input_promotes_to_float64():
    assert Tensor([1, 2, 3]).dtype == np.float64


def test_dump_tensor_round_trip(tmp_path):
    x = Tensor(np.array([[1.5, -2.25], [0.0, 3.125]]))
    path = tmp_path / "t.txt"
    dump_tensor(x, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "2 2"
    values = np.array([float(v) for v in lines[1:]]).reshape(2, 2)
    np.testing.assert_array_equal(values, x.data)
