import csv

import pytest

from graphtune.cli import build_parser, main, resolve_spec
from graphtune.graph import load_graph
from graphtune.harness import DEFAULT_RATIOS

SMALL = [
    "--nodes", "30",
    "--words-per-class", "4",
    "--shared-words", "3",
    "--text-len", "4",
    "--max-text-len", "4",
    "--embed-dim", "8",
    "--blocks", "1",
    "--max-len", "40",
    "--mlp-ratio", "2",
    "--corpus-examples", "16",
    "--pretrain-steps", "2",
    "--pretrain-batch-size", "8",
    "--epochs", "2",
    "--gnn-hidden", "4",
    "--projector-hidden", "4",
]  # fmt: skip


def test_gen_data(tmp_path, capsys):
    output = tmp_path / "graph.json"
    assert main(["gen-data", "--nodes", "30", "--output", str(output)]) == 0
    graph = load_graph(output)
    assert graph.node_count == 30
    assert "30 nodes" in capsys.readouterr().out


def test_unknown_flag_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen-data", "--bogus", "1"])
    assert info.value.code == 2
    assert "bogus" in capsys.readouterr().err


def test_invalid_value_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["sweep", "--ratio", "0"])
    assert info.value.code == 2
    assert "ratios must be positive" in capsys.readouterr().err


def test_argument_file_and_flags(tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("# synthetic graph\nnodes = 45\ngraph_seed = 3\n\nrescore = true\nno-final-fit = false\n")
    output = tmp_path / "graph.json"
    main(["gen-data", f"@{config}", "--nodes", "36", "--output", str(output)])
    assert load_graph(output).node_count == 36

    spec = resolve_spec(build_parser().parse_args(["selftrain", f"@{config}"]))
    assert spec.synthetic.n == 45 and spec.synthetic.seed == 3
    assert spec.selftrain.rescore_accepted
    assert spec.selftrain.final_fit


def test_malformed_argument_file(tmp_path, capsys):
    config = tmp_path / "run.conf"
    config.write_text("nodes 45\n")
    with pytest.raises(SystemExit):
        main(["gen-data", f"@{config}"])
    assert "key = value" in capsys.readouterr().err


def test_flags_fill_nested_fields():
    args = build_parser().parse_args(
        ["sweep", "--embed-dim", "12", "--heads", "3", "--lr", "0.01", "--optimizer", "adamw", "--no-warm-start"]
    )
    spec = resolve_spec(args)
    assert (spec.decoder.embed_dim, spec.decoder.n_heads) == (12, 3)
    assert spec.selftrain.train.learning_rate == 0.01
    assert spec.selftrain.train.optimizer == "adamw"
    assert not spec.selftrain.warm_start
    assert spec.selftrain.threshold == 0.7


def test_selftrain_is_deterministic(tmp_path, capsys):
    decoder = tmp_path / "decoder.json"
    main(["pretrain-decoder", *SMALL, "--output", str(decoder)])
    assert "decoder digest" in capsys.readouterr().out

    outputs = []
    for run in ("a", "b"):
        history, checkpoint = tmp_path / run / "rounds.csv", tmp_path / run / "state.cp"
        argv = ["selftrain", *SMALL, "--decoder", str(decoder), "--seed", "1", "--ratio", "0.5"]
        argv += ["--threshold", "-0.5", "--rounds", "2", "--history", str(history), "--checkpoint", str(checkpoint)]
        main(argv)
        assert checkpoint.exists()
        outputs.append((history.read_bytes(), capsys.readouterr().out))
    assert outputs[0] == outputs[1]
    assert outputs[0][0].startswith(b"round,")
    assert "accuracy" in outputs[0][1]

    argv = ["eval", *SMALL, "--decoder", str(decoder), "--seed", "1", "--ratio", "0.5"]
    main(argv + ["--checkpoint", str(checkpoint)])
    assert "on 20 nodes" in capsys.readouterr().out


def test_selftrain_resume(tmp_path, capsys):
    decoder = tmp_path / "decoder.json"
    main(["pretrain-decoder", *SMALL, "--output", str(decoder)])
    base = ["selftrain", *SMALL, "--decoder", str(decoder), "--seed", "1", "--ratio", "0.5", "--threshold", "0.2"]
    capsys.readouterr()

    main([*base, "--rounds", "2"])
    straight = capsys.readouterr().out

    checkpoint = tmp_path / "state.cp"
    main([*base, "--rounds", "1", "--no-final-fit", "--checkpoint", str(checkpoint)])
    capsys.readouterr()
    main([*base, "--rounds", "2", "--resume", str(checkpoint)])
    assert capsys.readouterr().out == straight


def test_resume_from_missing_checkpoint(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["selftrain", "--resume", str(tmp_path / "missing.cp")])
    assert info.value.code == 2
    assert "does not exist" in capsys.readouterr().err


def test_ablate_prints_reference(tmp_path, capsys):
    argv = ["ablate", *SMALL, "--rounds", "1", "--seed", "1", "--ratio", "0.5"]
    argv += ["--output", str(tmp_path / "ablation.csv"), "--manifest", str(tmp_path / "manifest.json")]
    main(argv)
    out = capsys.readouterr().out
    assert "reference" in out.splitlines()[0]
    assert "0.8415" in out
    assert (tmp_path / "ablation.csv").exists()
    assert (tmp_path / "manifest.json").exists()


def test_threshold_sweep_writes_csv(tmp_path, capsys):
    output = tmp_path / "thresholds.csv"
    argv = ["threshold-sweep", *SMALL, "--rounds", "1", "--seed", "1", "--ratio", "0.5", "--variants", "full"]
    argv += ["--thresholds", "0.9", "-1.5", "--output", str(output), "--manifest", str(tmp_path / "manifest.json")]
    main(argv)
    out = capsys.readouterr().out
    assert out.splitlines()[0].split()[0] == "threshold"
    with open(output, newline="") as f:
        rows = list(csv.DictReader(f))
    finals = [r for r in rows if r["round"] == "final"]
    assert [r["threshold"] for r in finals] == ["-1.5", "0.9"]
    assert all(r["variant"] == "full" for r in finals)
    assert (tmp_path / "manifest.json").exists()


def test_flag_precedence(tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("ratio = 0.2\nthreshold = 0.9\n")
    args = build_parser().parse_args(["sweep", f"@{config}", "--threshold", "0.6", "--seed", "4"])
    spec = resolve_spec(args)
    assert spec.ratios == (0.2,)
    assert spec.selftrain.threshold == 0.6
    assert spec.seeds == (4,)

    assert resolve_spec(build_parser().parse_args(["sweep", "--grid"])).ratios == DEFAULT_RATIOS
    assert resolve_spec(build_parser().parse_args(["sweep", "--seeds", "1", "2"])).seeds == (1, 2)
