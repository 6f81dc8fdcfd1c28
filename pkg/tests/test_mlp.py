import numpy as np
import pytest

from mechlearn.ad import mlp_init, mlp_forward, mlp_flatten, mlp_unflatten
from mechlearn.errors import InvalidArchitectureError, ShapeError


def test_param_count_tiny():
    p = mlp_init([1, 1], seed=0)
    assert p.n_params == 2
    assert np.all(p.biases[0] == 0.0)


def test_param_count_formula():
    p = mlp_init([3, 16, 2], seed=0)
    assert p.n_params == (3 + 1) * 16 + (16 + 1) * 2 == 98
    assert mlp_flatten(p).size == 98


def test_init_deterministic():
    a = mlp_init([4, 8, 2], seed=42)
    b = mlp_init([4, 8, 2], seed=42)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    c = mlp_init([4, 8, 2], seed=43)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_init_scale_is_fan_based():
    p = mlp_init([100, 50], seed=1)
    bound = np.sqrt(6.0 / 150)
    assert np.max(np.abs(p.weights[0])) <= bound
    assert np.max(np.abs(p.weights[0])) > 0.5 * bound


def test_zero_net_outputs_zero():
    p = mlp_init([3, 5, 2], seed=0)
    zeroed = mlp_unflatten(p.layer_sizes, p.activation, np.zeros(p.n_params))
    out = mlp_forward(zeroed, np.ones((4, 3)))
    assert np.array_equal(out, np.zeros((4, 2)))


def test_single_linear_layer_identity():
    p = mlp_unflatten([3, 3], "tanh", np.concatenate([np.eye(3).ravel(), np.zeros(3)]))
    x = np.array([[0.3, -1.2, 4.0]])
    assert np.array_equal(mlp_forward(p, x), x)


def test_invalid_architectures():
    with pytest.raises(InvalidArchitectureError):
        mlp_init([], seed=0)
    with pytest.raises(InvalidArchitectureError):
        mlp_init([4], seed=0)
    with pytest.raises(InvalidArchitectureError):
        mlp_init([4, 0, 2], seed=0)
    with pytest.raises(InvalidArchitectureError):
        mlp_init([4, 2], activation="gelu", seed=0)


def test_forward_shape_error():
    p = mlp_init([3, 2], seed=0)
    with pytest.raises(ShapeError):
        mlp_forward(p, np.ones((5, 4)))


def test_flatten_roundtrip():
    p = mlp_init([2, 7, 3], activation="softplus", seed=9)
    q = mlp_unflatten(p.layer_sizes, p.activation, mlp_flatten(p))
    for wa, wb in zip(p.weights, q.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(p.biases, q.biases):
        assert np.array_equal(ba, bb)
