import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from graphtune.errors import GraphFormatError, SplitError
from graphtune.graph import (
    TextAttributedGraph,
    edge_density,
    graph_from_dict,
    label_names,
    load_graph,
    make_synthetic_graph,
    normalize,
    normalize_adjacency,
    save_graph,
    split_nodes,
    synthetic_word_pools,
)


def _doc(**overrides):
    doc = {
        "directed": False,
        "label_space": ["A", "B"],
        "nodes": [
            {"id": 0, "text": "x y", "features": [1.0, 0.0], "label": "A"},
            {"id": 1, "text": "z", "features": [0.0, 1.0], "label": "B"},
            {"id": 2, "text": "", "features": [0.0, 0.0], "label": None},
        ],
        "edges": [[0, 1], [1, 2]],
    }
    doc.update(overrides)
    return doc


def test_load_graph_roundtrip(tmp_path, tiny_graph):
    path = tmp_path / "graph.json"
    save_graph(tiny_graph, path)
    assert load_graph(path) == tiny_graph


def test_load_graph_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_graph(tmp_path / "missing.json")


def test_graph_from_dict_unlabeled_node():
    graph = graph_from_dict(_doc())
    assert graph.node_count == 3
    assert graph.label_of(2) is None
    assert graph.labels == {0: 0, 1: 1}


def test_graph_from_dict_mirrored_edges_are_merged():
    graph = graph_from_dict(_doc(edges=[[0, 1], [1, 0], [1, 2], [2, 1]]))
    assert graph.edges == frozenset({(0, 1), (1, 2)})


def test_graph_from_dict_asymmetric_edges():
    with pytest.raises(GraphFormatError, match="asymmetric edge list"):
        graph_from_dict(_doc(edges=[[0, 1], [1, 0], [1, 2]]))


def test_graph_from_dict_self_loop():
    with pytest.raises(GraphFormatError, match="self-loop in input at node 1"):
        graph_from_dict(_doc(edges=[[1, 1]]))


def test_graph_from_dict_unknown_label():
    doc = _doc()
    doc["nodes"][0]["label"] = "C"
    with pytest.raises(GraphFormatError, match="node 0"):
        graph_from_dict(doc)


def test_graph_from_dict_ragged_features():
    doc = _doc()
    doc["nodes"][1]["features"] = [1.0]
    with pytest.raises(GraphFormatError):
        graph_from_dict(doc)


def test_graph_from_dict_directed_rejected():
    with pytest.raises(GraphFormatError):
        graph_from_dict(_doc(directed=True))


def test_save_graph_sorted_keys(tmp_path, tiny_graph):
    path = tmp_path / "graph.json"
    save_graph(tiny_graph, path)
    text = path.read_text()
    assert text == json.dumps(json.loads(text), sort_keys=True)


def test_graph_is_read_only(tiny_graph):
    with pytest.raises(ValueError):
        tiny_graph.features[0, 0] = 5.0


def test_neighbors_sorted(tiny_graph):
    assert tiny_graph.neighbors(1) == [0, 2]
    assert tiny_graph.neighbors(3) == [2]


def test_normalize_self_loop():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert_array_equal(normalize(a, "self_loop"), np.ones((2, 2)))


def test_normalize_symmetric_path():
    a = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    d = np.array([2.0, 3.0, 2.0])
    expected = (a + np.eye(3)) / np.sqrt(d[:, None] * d[None, :])
    assert_allclose(normalize(a, "symmetric"), expected)


def test_normalize_isolated_node_is_identity():
    assert_allclose(normalize(np.zeros((3, 3))), np.eye(3))


def test_normalize_unknown_mode():
    with pytest.raises(ValueError):
        normalize(np.zeros((2, 2)), "row")


def test_normalize_adjacency_symmetric(small_graph):
    a = normalize_adjacency(small_graph)
    assert_allclose(a, a.T)


def test_synthetic_graph_deterministic():
    g1 = make_synthetic_graph(60, 3, 0.2, 0.02, 5, seed=4)
    g2 = make_synthetic_graph(60, 3, 0.2, 0.02, 5, seed=4)
    assert g1 == g2
    assert g1 != make_synthetic_graph(60, 3, 0.2, 0.02, 5, seed=5)


def test_synthetic_graph_structure():
    graph = make_synthetic_graph(90, 3, 0.2, 0.02, 5, seed=1, text_len=6)
    assert graph.label_space == label_names(3)
    assert sorted(graph.labels) == list(range(90))
    assert np.bincount(list(graph.labels.values())).tolist() == [30, 30, 30]
    assert all(len(t.split()) == 6 for t in graph.texts)
    assert_array_equal(graph.features.sum(axis=1), np.full(90, 6.0))


def test_synthetic_graph_class_bias_one_uses_class_words_only():
    graph = make_synthetic_graph(30, 2, 0.3, 0.0, 4, seed=0, class_bias=1.0)
    pools, _ = synthetic_word_pools(2, 4)
    for v, text in enumerate(graph.texts):
        assert set(text.split()) <= set(pools[graph.labels[v]])


def test_synthetic_graph_zero_p_out_has_no_cross_edges():
    graph = make_synthetic_graph(40, 2, 0.5, 0.0, 4, seed=2)
    assert all(graph.labels[i] == graph.labels[j] for i, j in graph.edges)


def test_synthetic_graph_rejects_bad_probabilities():
    with pytest.raises(ValueError):
        make_synthetic_graph(30, 3, 0.1, 0.2, 5, seed=0)


def test_edge_density_matches_block_model():
    graph = make_synthetic_graph(300, 3, 0.1, 0.01, 20, seed=0)
    intra, inter = edge_density(graph)
    assert abs(intra - 0.1) < 0.02
    assert abs(inter - 0.01) < 0.005


def test_split_ratio_and_cover(small_graph):
    split = split_nodes(small_graph, 0.5, seed=1)
    assert len(split.labeled) == 10
    assert split.ratio == 0.5
    assert split.labeled.isdisjoint(split.unlabeled)
    assert split.labeled | split.unlabeled == frozenset(range(30))
    assert {small_graph.labels[v] for v in split.labeled} == {0, 1, 2}


def test_split_one_percent_of_three_hundred():
    graph = make_synthetic_graph(300, 3, 0.1, 0.01, 20, seed=0)
    split = split_nodes(graph, 0.01, seed=3)
    assert len(split.labeled) == 3
    assert len(split.unlabeled) == 297


def test_split_deterministic(small_graph):
    assert split_nodes(small_graph, 0.5, 7) == split_nodes(small_graph, 0.5, 7)


def test_split_ratio_too_small(small_graph):
    with pytest.raises(SplitError, match="ratio too small to cover all classes"):
        split_nodes(small_graph, 0.01, seed=0)


def test_split_needs_labeled_candidates():
    graph = TextAttributedGraph(
        features=np.eye(4), texts=("a", "b", "c", "d"), edges=frozenset(), label_space=("x", "y"),
        labels={0: 0, 1: 1},
    )
    with pytest.raises(SplitError):
        split_nodes(graph, 3.0, seed=0)


def test_split_rejects_nonpositive_ratio(small_graph):
    with pytest.raises(ValueError):
        split_nodes(small_graph, 0.0, seed=0)
