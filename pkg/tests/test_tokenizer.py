import pytest

from graphtune.tokenizer import (
    BOS,
    EOS,
    GRAPH,
    UNK,
    Vocabulary,
    build_vocabulary,
    detokenize,
    split_words,
    tokenize,
)


def test_build_vocabulary_order():
    vocab = build_vocabulary(("Cats", "Dogs"), ["zebra", "apple", "apple"], ["node", ":", "answer"])
    assert vocab.tokens == (BOS, EOS, UNK, GRAPH, "node", ":", "answer", "cats", "dogs", "apple", "zebra")
    assert vocab.label_words == ("cats", "dogs")


def test_build_vocabulary_skips_duplicates():
    vocab = build_vocabulary(("a",), ["a", "node"], ["node"])
    assert vocab.tokens.count("a") == 1
    assert vocab.tokens.count("node") == 1


def test_split_words():
    assert split_words("Graph tokens, for ALL!") == ["graph", "tokens", ",", "for", "all", "!"]


def test_tokenize_unknown_words():
    vocab = build_vocabulary(("x",), ["known"])
    assert tokenize("known Unknown", vocab) == [vocab.id_of("known"), vocab.unk_id]


def test_detokenize():
    vocab = build_vocabulary(("x",), ["hello", "world"])
    assert detokenize(tokenize("hello world", vocab), vocab) == "hello world"


def test_special_ids_are_fixed():
    vocab = build_vocabulary(("x",), [])
    assert (vocab.bos_id, vocab.eos_id, vocab.unk_id, vocab.graph_id) == (0, 1, 2, 3)
    assert GRAPH in vocab
    assert len(vocab) == 5


def test_vocabulary_validation():
    with pytest.raises(ValueError, match="special token"):
        Vocabulary((BOS, EOS, UNK))
    with pytest.raises(ValueError, match="duplicate"):
        Vocabulary((BOS, EOS, UNK, GRAPH, "a", "a"))
    with pytest.raises(ValueError, match="single vocabulary token"):
        Vocabulary((BOS, EOS, UNK, GRAPH), label_words=("label",))
