import csv
import json
import math

import numpy as np
import pytest

from graphtune.confidence import score_response
from graphtune.errors import InvariantViolationError
from graphtune.graph import DataSplit, make_synthetic_graph, split_nodes
from graphtune.selftrain import (
    PipelineState,
    SelfTrainConfig,
    TaskContext,
    augment,
    check_invariants,
    generate_pseudo_set,
    initial_state,
    pseudo_label_precision,
    rescore_accepted,
    restore_state,
    run_self_training,
    write_history,
)
from graphtune.training import TrainConfig, init_parameter_set, parameter_digest, save_checkpoint

QUICK = TrainConfig(epochs=2, learning_rate=1e-2)


def _config(**kwargs) -> SelfTrainConfig:
    return SelfTrainConfig(train=kwargs.pop("train", QUICK), **kwargs)


def _setup(graph, decoder, ratio=0.5, seed=0):
    task = TaskContext.build(graph, decoder.vocab)
    params = init_parameter_set(graph.feature_dim, decoder, seed, gnn_hidden=(6,), projector_hidden=6)
    split = split_nodes(graph, ratio, seed)
    return task, split, initial_state(task, split, params)


def _accept(task, node, label):
    vocab = task.vocab
    tokens = [vocab.id_of(vocab.label_words[label]), vocab.eos_id]
    return score_response(node, tokens, [-0.01, 0.0], terminated=True, parsed_label=label)


def test_oracle_labels_everything_in_one_round(small_graph, oracle_decoder):
    split = split_nodes(small_graph, 0.5, seed=0)
    rounds = []
    result = run_self_training(
        small_graph, split, _config(threshold=0.5), 0, oracle_decoder,
        on_round=lambda state, record: rounds.append(record),
    )  # fmt: skip
    state = result.state
    assert len(rounds) == 1 and state.history == tuple(rounds)
    assert rounds[0].n_selected == len(split.unlabeled) == 20
    assert rounds[0].pseudo_precision == 1.0
    assert state.unlabeled == frozenset()
    assert sorted(state.labeled_nodes) == list(range(30))
    assert pseudo_label_precision(state, small_graph) == 1.0
    assert state.pseudo_labels == {v: small_graph.labels[v] for v in split.unlabeled}
    assert [ex.provenance for ex in state.labeled_dataset[:10]] == ["ground-truth"] * 10
    assert len(result.final_losses) == QUICK.epochs


def test_confidence_filter_keeps_wrong_labels_out(small_graph, noisy_decoder):
    split = split_nodes(small_graph, 0.5, seed=1)
    result = run_self_training(small_graph, split, _config(threshold=0.7, max_rounds=2), 0, noisy_decoder)
    state = result.state
    assert state.round == 2
    assert [r.n_selected for r in state.history][1] == 0
    assert pseudo_label_precision(state, small_graph) == 1.0
    assert state.unlabeled == frozenset(v for v in split.unlabeled if v % 5 == 0)


def test_without_filter_wrong_labels_get_in(small_graph, noisy_decoder):
    split = split_nodes(small_graph, 0.5, seed=1)
    result = run_self_training(small_graph, split, _config(threshold=-math.inf, max_rounds=1), 0, noisy_decoder)
    assert result.state.unlabeled == frozenset()
    assert pseudo_label_precision(result.state, small_graph) < 1.0


def test_zero_rounds_is_supervised_only(small_graph, oracle_decoder):
    split = split_nodes(small_graph, 0.5, seed=2)
    result = run_self_training(small_graph, split, _config(max_rounds=0), 0, oracle_decoder)
    assert result.state.history == ()
    assert result.state.round == 0
    assert frozenset(result.state.labeled_nodes) == split.labeled
    assert len(result.final_losses) == QUICK.epochs


def test_threshold_above_one_selects_nothing(small_graph, oracle_decoder):
    split = split_nodes(small_graph, 0.5, seed=0)
    config = _config(threshold=1.0, max_rounds=2, final_fit=False)
    result = run_self_training(small_graph, split, config, 0, oracle_decoder)
    assert [r.n_selected for r in result.state.history] == [0, 0]
    assert result.state.unlabeled == split.unlabeled
    assert result.final_losses == ()


def test_invariants_hold_under_random_settings(scripted_decoder):
    rng = np.random.default_rng(0)
    classes = 3
    for run in range(100):
        n = int(rng.integers(12, 51))
        graph = make_synthetic_graph(n, classes, 0.3, 0.05, 4, seed=run, text_len=3, shared_words=3)
        answers = {}
        for v in range(graph.node_count):
            if rng.random() < 0.1:
                answers[v] = None
            else:
                answers[v] = (int(rng.integers(classes)), float(rng.uniform(-3.0, 0.0)))
        decoder = scripted_decoder(graph, answers.get, f"fuzz-{run}")
        split = split_nodes(graph, float(rng.choice([0.3, 0.5, 1.0])), run)
        config = _config(
            threshold=float(rng.uniform(-1.0, 1.2)),
            max_rounds=int(rng.integers(0, 6)),
            warm_start=bool(rng.integers(2)),
            final_fit=False,
            train=TrainConfig(epochs=1),
        )
        seen = []
        result = run_self_training(
            graph, split, config, run, decoder, on_round=lambda s, r: seen.append(s)
        )
        state = result.state
        assert state.round <= config.max_rounds
        assert len(state.labeled_nodes) + len(state.unlabeled) == graph.node_count
        assert set(state.labeled_nodes).isdisjoint(state.unlabeled)
        assert frozenset(state.labeled_nodes[: len(split.labeled)]) == split.labeled
        for v, label in state.pseudo_labels.items():
            assert v in split.unlabeled
            assert answers[v] is not None and answers[v][0] == label
            assert answers[v][1] / 2 > config.threshold - 1.0
        sizes = [len(s.labeled_dataset) for s in seen]
        assert sizes == sorted(sizes)


def test_generation_is_independent_of_workers(small_graph, noisy_decoder):
    task, _, state = _setup(small_graph, noisy_decoder)
    single = generate_pseudo_set(state, task, workers=1)
    threaded = generate_pseudo_set(state, task, workers=4)
    assert single == threaded
    assert [r.node_id for r in single] == sorted(state.unlabeled)


def test_augment_moves_nodes(small_graph, oracle_decoder):
    task, split, state = _setup(small_graph, oracle_decoder)
    v = min(split.unlabeled)
    after = augment(state, [_accept(task, v, 2)], task)
    assert after.round == 1
    assert after.selected_last_round == {v}
    assert v not in after.unlabeled
    assert after.labeled_dataset[-1].node_id == v
    assert after.labeled_dataset[-1].provenance == "pseudo"
    assert after.labeled_dataset[: len(state.labeled_dataset)] == state.labeled_dataset
    check_invariants(after, state, small_graph.node_count, state.labeled_dataset, 3, oracle_decoder.digest)


def test_augment_rejects_bad_selections(small_graph, oracle_decoder):
    task, split, state = _setup(small_graph, oracle_decoder)
    labeled, unlabeled = min(split.labeled), min(split.unlabeled)
    with pytest.raises(InvariantViolationError, match="not unlabeled"):
        augment(state, [_accept(task, labeled, 0)], task)
    with pytest.raises(InvariantViolationError, match="twice"):
        augment(state, [_accept(task, unlabeled, 0), _accept(task, unlabeled, 1)], task)
    unparsed = score_response(unlabeled, [1], [0.0], terminated=True, parsed_label=None)
    with pytest.raises(InvariantViolationError) as info:
        augment(state, [unparsed], task)
    assert info.value.state["round"] == 0


def test_check_invariants_detects_overlap(small_graph, oracle_decoder):
    task, split, state = _setup(small_graph, oracle_decoder)
    broken = PipelineState(
        state.labeled_dataset, state.unlabeled | {min(split.labeled)}, frozenset(), 1, state.params
    )
    with pytest.raises(InvariantViolationError, match="overlap"):
        check_invariants(broken, state, small_graph.node_count, state.labeled_dataset, 3, oracle_decoder.digest)


def test_check_invariants_detects_overwritten_ground_truth(small_graph, oracle_decoder):
    task, split, state = _setup(small_graph, oracle_decoder)
    first = state.labeled_dataset[0]
    wrong = (small_graph.labels[first.node_id] + 1) % 3
    dataset = (task.target_example(first.node_id, wrong, "ground-truth"),) + state.labeled_dataset[1:]
    broken = PipelineState(dataset, state.unlabeled, frozenset(), 1, state.params)
    with pytest.raises(InvariantViolationError, match="ground-truth"):
        check_invariants(broken, state, small_graph.node_count, state.labeled_dataset, 3, oracle_decoder.digest)


def test_rescore_relabels_pseudo_targets(small_graph, oracle_decoder):
    task, split, state = _setup(small_graph, oracle_decoder)
    v = min(split.unlabeled)
    wrong = (small_graph.labels[v] + 1) % 3
    state = augment(state, [_accept(task, v, wrong)], task)
    assert state.pseudo_labels[v] == wrong

    rescored, changed = rescore_accepted(state, task, threshold=0.5)
    assert changed == 1
    assert rescored.pseudo_labels[v] == small_graph.labels[v]
    assert rescored.labeled_dataset[-1] == task.target_example(v, small_graph.labels[v], "pseudo")
    assert rescored.labeled_dataset[:-1] == state.labeled_dataset[:-1]


def test_config_validation():
    with pytest.raises(ValueError):
        SelfTrainConfig(max_rounds=-1)
    with pytest.raises(ValueError):
        SelfTrainConfig(threshold=math.nan)


def test_initial_state_requires_ground_truth(tiny_graph, scripted_decoder):
    graph = type(tiny_graph)(tiny_graph.features, tiny_graph.texts, tiny_graph.edges, tiny_graph.label_space, {0: 0})
    decoder = scripted_decoder(graph, lambda v: None)
    task = TaskContext.build(graph, decoder.vocab)
    params = init_parameter_set(graph.feature_dim, decoder, 0, gnn_hidden=(2,), projector_hidden=2)
    with pytest.raises(ValueError, match="no ground-truth"):
        initial_state(task, DataSplit(frozenset({0, 1}), frozenset({2, 3})), params)


def test_write_history(tmp_path, small_graph, noisy_decoder):
    split = split_nodes(small_graph, 0.5, seed=1)
    config = _config(max_rounds=2, final_fit=False)
    history = run_self_training(small_graph, split, config, 0, noisy_decoder).state.history

    write_history(tmp_path / "rounds.csv", history)
    with open(tmp_path / "rounds.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["round"]) for r in rows] == [1, 2]
    assert rows[1]["pseudo_precision"] == ""

    write_history(tmp_path / "rounds.json", history)
    doc = json.loads((tmp_path / "rounds.json").read_text())
    assert doc[0]["n_selected"] == history[0].n_selected


def test_constant_response_labels_everything_as_first_class(small_graph, constant_decoder):
    split = split_nodes(small_graph, 0.5, seed=0)
    result = run_self_training(small_graph, split, _config(threshold=0.5, final_fit=False), 0, constant_decoder)
    state = result.state
    assert set(state.pseudo_labels.values()) == {0}
    expected = sum(small_graph.labels[v] == 0 for v in split.unlabeled) / len(split.unlabeled)
    assert pseudo_label_precision(state, small_graph) == pytest.approx(expected)


def test_scores_are_written_per_round(tmp_path, small_graph, noisy_decoder):
    split = split_nodes(small_graph, 0.5, seed=1)
    config = _config(threshold=0.7, max_rounds=2, final_fit=False, scores_dir=str(tmp_path / "scores"))
    run_self_training(small_graph, split, config, 0, noisy_decoder)
    with open(tmp_path / "scores" / "round_1.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert sorted(int(r["node_id"]) for r in rows) == sorted(split.unlabeled)
    selected = {int(r["node_id"]) for r in rows if r["selected"] == "1"}
    assert selected == {v for v in split.unlabeled if v % 5 != 0}
    assert (tmp_path / "scores" / "round_2.csv").exists()


def test_resumed_run_matches_uninterrupted_run(tmp_path, small_graph, noisy_decoder):
    split = split_nodes(small_graph, 0.5, seed=1)
    path = tmp_path / "state.cp"
    straight = run_self_training(small_graph, split, _config(threshold=0.7, max_rounds=2), 0, noisy_decoder)

    first = run_self_training(
        small_graph, split, _config(threshold=0.7, max_rounds=1, final_fit=False), 0, noisy_decoder, checkpoint=path
    )
    assert first.state.round == 1
    restored, final = restore_state(path, TaskContext.build(small_graph, noisy_decoder.vocab), noisy_decoder)
    assert not final
    assert restored.labeled_dataset == first.state.labeled_dataset
    assert restored.pseudo_responses == first.state.pseudo_responses
    assert parameter_digest(restored.params) == parameter_digest(first.params)

    resumed = run_self_training(
        small_graph, split, _config(threshold=0.7, max_rounds=2), 0, noisy_decoder, resume_from=path
    )
    assert resumed.state.history == straight.state.history
    assert resumed.state.labeled_dataset == straight.state.labeled_dataset
    assert resumed.state.unlabeled == straight.state.unlabeled
    assert resumed.final_losses == straight.final_losses
    assert parameter_digest(resumed.params) == parameter_digest(straight.params)


def test_final_checkpoint_is_flagged(tmp_path, small_graph, oracle_decoder):
    split = split_nodes(small_graph, 0.5, seed=0)
    path = tmp_path / "state.cp"
    result = run_self_training(small_graph, split, _config(threshold=0.5), 0, oracle_decoder, checkpoint=path)
    restored, final = restore_state(path, TaskContext.build(small_graph, oracle_decoder.vocab), oracle_decoder)
    assert final
    assert restored.round == 1
    assert parameter_digest(restored.params) == parameter_digest(result.params)
    assert restored.pseudo_labels == result.state.pseudo_labels


def test_restore_requires_pipeline_state(tmp_path, small_graph, oracle_decoder):
    task, _, state = _setup(small_graph, oracle_decoder)
    path = tmp_path / "params.cp"
    save_checkpoint(path, state.params, None, 0)
    with pytest.raises(ValueError, match="self-training state"):
        restore_state(path, task, oracle_decoder)
