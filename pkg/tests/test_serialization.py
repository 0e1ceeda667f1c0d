import numpy as np

from graphtune.serialization import array_from_json, array_to_json, content_digest, dump_json


def test_array_json_is_exact():
    a = np.random.default_rng(0).normal(size=(3, 2)) * 1e-7
    b = array_from_json(array_to_json(a))
    assert b.shape == (3, 2)
    assert np.array_equal(a, b)


def test_content_digest():
    a = {"x": np.arange(4.0), "y": np.ones((2, 2))}
    assert content_digest(a) == content_digest({"y": np.ones((2, 2)), "x": np.arange(4.0)})
    assert content_digest(a) != content_digest({**a, "x": np.arange(4.0) + 1e-12})
    assert content_digest(a) != content_digest({**a, "y": np.ones(4)})
    assert content_digest(a) != content_digest(a, extra={"k": 1})


def test_dump_json_is_canonical():
    assert dump_json({"b": 1, "a": [1.5, None]}) == '{"a":[1.5,null],"b":1}'
