import numpy as np
import pytest
from numpy.testing import assert_allclose

from graphtune.optimizers import Optimizer, get_optimizer


def test_sgd_step():
    params = {"w": np.array([1.0, 2.0])}
    updated = get_optimizer("sgd", 0.5).step(params, {"w": np.array([2.0, -2.0])})
    assert_allclose(updated["w"], [0.0, 3.0])
    assert_allclose(params["w"], [1.0, 2.0])


def test_sgd_uses_the_incoming_values():
    optim = get_optimizer("sgd", 1.0)
    optim.step({"w": np.array([1.0])}, {"w": np.array([1.0])})
    updated = optim.step({"w": np.array([5.0])}, {"w": np.array([1.0])})
    assert_allclose(updated["w"], [4.0])
    assert optim.t == 2


def test_adam_first_step_moves_by_learning_rate():
    params = {"a": np.array([0.0, 0.0]), "b": np.array([1.0])}
    grads = {"a": np.array([3.0, -0.1]), "b": np.array([1e-3])}
    updated = get_optimizer("adam", 0.1).step(params, grads)
    assert_allclose(updated["a"], [-0.1, 0.1], rtol=1e-5)
    assert_allclose(updated["b"], [0.9], rtol=1e-4)
    assert list(updated) == ["a", "b"]


def test_adam_state_round_trip():
    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=3), "b": rng.normal(size=1)}
    first, second = get_optimizer("adam", 0.01), get_optimizer("adam", 0.01)
    for _ in range(3):
        params = first.step(params, {"w": rng.normal(size=3), "b": rng.normal(size=1)})
    state = first.get_state_dict()
    assert state["t"] == 3 and state["names"] == ["b", "w"]
    second.load_state_dict(state)
    grad = {"w": rng.normal(size=3), "b": rng.normal(size=1)}
    expected = first.step(params, grad)
    restored = second.step(params, grad)
    for name in expected:
        assert_allclose(restored[name], expected[name], rtol=1e-12)


def test_fresh_adam_differs_from_restored():
    rng = np.random.default_rng(1)
    params = {"w": rng.normal(size=3)}
    trained = get_optimizer("adam", 0.01)
    for _ in range(3):
        params = trained.step(params, {"w": rng.normal(size=3)})
    grad = {"w": rng.normal(size=3)}
    assert not np.allclose(trained.step(params, grad)["w"], get_optimizer("adam", 0.01).step(params, grad)["w"])


def test_missing_gradient():
    with pytest.raises(KeyError):
        get_optimizer("sgd", 0.1).step({"w": np.zeros(2), "v": np.zeros(1)}, {"w": np.zeros(2)})


def test_changed_parameter_names():
    optim = get_optimizer("sgd", 0.1)
    optim.step({"w": np.zeros(2)}, {"w": np.zeros(2)})
    with pytest.raises(KeyError):
        optim.step({"v": np.zeros(2)}, {"v": np.zeros(2)})


def test_load_state_of_other_optimizer():
    with pytest.raises(ValueError):
        get_optimizer("adam", 0.1).load_state_dict(get_optimizer("sgd", 0.1).get_state_dict())


def test_get_optimizer():
    adam = get_optimizer("adam", 0.1, beta1=0.5)
    assert isinstance(adam, Optimizer)
    assert adam.name == "adam" and adam.kwargs == {"beta1": 0.5}
    with pytest.raises(ValueError):
        get_optimizer("rmsprop", 0.1)
    with pytest.raises(ValueError):
        get_optimizer("sgd", 0.0)
