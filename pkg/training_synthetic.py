import logging
from dataclasses import replace
from datetime import datetime
from pathlib import Path

from graphtune.decoder import DecoderConfig, FrozenDecoder, save_decoder
from graphtune.graph import split_nodes
from graphtune.harness import SyntheticGraphSpec, evaluate_accuracy, relative_improvement
from graphtune.instructions import PromptTemplate
from graphtune.pretraining import PretrainConfig, pretrain_decoder
from graphtune.selftrain import SelfTrainConfig, TaskContext, run_self_training, write_history
from graphtune.training import TrainConfig, init_parameter_set


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    # hyperparameters
    seed = 1
    ratio = 0.01
    embed_dim = 32
    n_heads = 2
    n_blocks = 2
    gnn_hidden = (32, 32)
    projector_hidden = 64

    # training parameters
    label = "selftrain_synthetic"
    pretrain_steps = 400
    epochs = 200
    threshold = 0.7
    max_rounds = 3
    resume = False  # continue the full pipeline from its last checkpoint

    timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
    logdir = f"./runs/{label}_{timestamp}/"

    # create data
    synthetic = SyntheticGraphSpec(n=300, classes=3, p_in=0.1, p_out=0.01)
    graph = synthetic.build()
    split = split_nodes(graph, ratio, seed)
    template = PromptTemplate()

    # pretrain and freeze the decoder
    corpus = synthetic.corpus_spec(template, n_examples=384, seed=0)
    decoder_config = DecoderConfig(embed_dim=embed_dim, n_heads=n_heads, n_blocks=n_blocks)
    decoder_params = pretrain_decoder(corpus, decoder_config, PretrainConfig(steps=pretrain_steps, log_dir=logdir), 0)
    save_decoder(decoder_params, f"checkpoints/{label}_decoder.json")
    decoder = FrozenDecoder(decoder_params)

    # self-training and the supervised-only baseline
    config = SelfTrainConfig(
        threshold=threshold, max_rounds=max_rounds, train=TrainConfig(epochs=epochs, log_dir=logdir)
    )
    task = TaskContext.build(graph, decoder.vocab, template)
    accuracies = {}
    for variant, rounds in (("supervised-only", 0), ("full", max_rounds)):
        params = init_parameter_set(
            graph.feature_dim, decoder, seed, gnn_hidden=gnn_hidden, projector_hidden=projector_hidden
        )
        checkpoint = Path(f"checkpoints/{label}_{variant}.cp")
        result = run_self_training(
            graph,
            split,
            replace(config, max_rounds=rounds),
            seed,
            decoder,
            template,
            params,
            checkpoint=checkpoint,
            resume_from=checkpoint if resume and variant == "full" and checkpoint.exists() else None,
        )
        accuracies[variant] = evaluate_accuracy(result.params, graph, split.unlabeled, task=task)
        if result.state.history:
            write_history(f"runs/{label}_{timestamp}/rounds.csv", result.state.history)

    for variant, accuracy in accuracies.items():
        print(f"{variant:<16} {accuracy:.4f}")
    if accuracies["supervised-only"] > 0:
        gain = relative_improvement(accuracies["supervised-only"], accuracies["full"])
        print(f"relative improvement {gain:.1f}%")


if __name__ == "__main__":
    main()
