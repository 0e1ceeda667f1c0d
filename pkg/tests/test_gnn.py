import numpy as np
import pytest
from compyute.tensors import ShapeError
from numpy.testing import assert_allclose

from graphtune.errors import CacheError, DivergenceError
from graphtune.gnn import GnnParams, gnn_backward, gnn_forward, init_gnn_params
from graphtune.graph import normalize


def _path_graph(n: int = 4) -> np.ndarray:
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1.0
    return normalize(a)


def test_identity_layer_on_isolated_nodes_returns_features():
    x = np.random.default_rng(0).normal(size=(5, 3))
    params = GnnParams((np.eye(3),), activation="identity")
    h, _ = gnn_forward(np.eye(5), x, params)
    assert_allclose(h.matrix, x)


def test_forward_matches_closed_form():
    rng = np.random.default_rng(1)
    a, x = _path_graph(), rng.normal(size=(4, 3))
    params = init_gnn_params(3, (5, 2), "relu", rng)
    w1, w2 = params.layer_weights
    expected = np.maximum(a @ np.maximum(a @ x @ w1, 0.0) @ w2, 0.0)
    h, _ = gnn_forward(a, x, params)
    assert h.matrix.shape == (4, 2)
    assert_allclose(h.matrix, expected)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    a, x = _path_graph(5), rng.normal(size=(5, 3))
    params = init_gnn_params(3, (4, 2), "tanh", rng)
    upstream = rng.normal(size=(5, 2))

    def objective(weights):
        h, _ = gnn_forward(a, x, GnnParams(weights, "tanh"))
        return float(np.sum(h.matrix * upstream))

    _, cache = gnn_forward(a, x, params)
    grads = gnn_backward(cache, upstream)
    step = 1e-6
    for l, w in enumerate(params.layer_weights):
        numeric = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            plus, minus = [np.array(v) for v in params.layer_weights], [np.array(v) for v in params.layer_weights]
            plus[l][idx] += step
            minus[l][idx] -= step
            numeric[idx] = (objective(tuple(plus)) - objective(tuple(minus))) / (2 * step)
        assert_allclose(grads[l], numeric, rtol=1e-5, atol=1e-8)


def test_isolated_node_has_no_neighbour_gradient():
    rng = np.random.default_rng(3)
    a = normalize(np.zeros((3, 3)))
    x = rng.normal(size=(3, 2))
    params = GnnParams((rng.normal(size=(2, 2)),), activation="identity")
    _, cache = gnn_forward(a, x, params)
    upstream = np.zeros((3, 2))
    upstream[0] = 1.0
    (dw,) = gnn_backward(cache, upstream)
    assert_allclose(dw, np.outer(x[0], np.ones(2)))


def test_cache_is_consumed_once():
    params = init_gnn_params(2, (2,))
    _, cache = gnn_forward(np.eye(3), np.ones((3, 2)), params)
    gnn_backward(cache, np.ones((3, 2)))
    with pytest.raises(CacheError, match="stale"):
        gnn_backward(cache, np.ones((3, 2)))


def test_cache_shape_mismatch():
    params = init_gnn_params(2, (2,))
    _, cache = gnn_forward(np.eye(3), np.ones((3, 2)), params)
    with pytest.raises(CacheError, match="mismatched"):
        gnn_backward(cache, np.ones((4, 2)))


def test_shape_errors():
    params = init_gnn_params(2, (2,))
    with pytest.raises(ShapeError):
        gnn_forward(np.eye(4), np.ones((3, 2)), params)
    with pytest.raises(ShapeError):
        gnn_forward(np.eye(3), np.ones((3, 5)), params)
    with pytest.raises(ShapeError):
        GnnParams((np.ones((2, 3)), np.ones((4, 2))))


def test_non_finite_features():
    x = np.ones((3, 2))
    x[1, 1] = np.nan
    with pytest.raises(DivergenceError):
        gnn_forward(np.eye(3), x, init_gnn_params(2, (2,)))


def test_unknown_activation():
    with pytest.raises(ValueError):
        GnnParams((np.eye(2),), activation="swish")
