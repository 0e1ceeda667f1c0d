"""word-level tokenizer"""

import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from types import MappingProxyType

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
GRAPH = "<graph>"
SPECIAL_TOKENS = (BOS, EOS, UNK, GRAPH)

_WORD_PATTERN = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token inventory with contiguous ids.

    Parameters
    ----------
    tokens : tuple[str, ...]
        Tokens in id order; must contain every special token exactly once.
    label_words : tuple[str, ...]
        Class names of the label space, each of which must be a single token.
    """

    tokens: tuple[str, ...]
    label_words: tuple[str, ...] = ()
    index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        tokens = tuple(self.tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("Vocabulary contains duplicate tokens.")
        for special in SPECIAL_TOKENS:
            if special not in tokens:
                raise ValueError(f"Vocabulary lacks the special token {special}.")
        for word in self.label_words:
            if word not in tokens:
                raise ValueError(f"Label word {word!r} is not a single vocabulary token.")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "label_words", tuple(self.label_words))
        object.__setattr__(self, "index", MappingProxyType({t: i for i, t in enumerate(tokens)}))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        """Returns the id of ``token`` or of ``<unk>`` when it is unknown."""
        return self.index.get(token, self.index[UNK])

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def graph_id(self) -> int:
        return self.index[GRAPH]


def split_words(text: str) -> list[str]:
    """Lowercases and splits on whitespace; punctuation marks become separate words."""
    return _WORD_PATTERN.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Converts text into token ids. Unknown words map to ``<unk>``.

    Parameters
    ----------
    text : str
        Raw text.
    vocab : Vocabulary
        Vocabulary.

    Returns
    -------
    list[int]
        Token ids.
    """
    return [vocab.id_of(w) for w in split_words(text)]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Converts token ids back into space-joined words."""
    return " ".join(vocab.tokens[i] for i in ids)


def build_vocabulary(
    label_space: Sequence[str], words: Iterable[str], template_tokens: Iterable[str] = ()
) -> Vocabulary:
    """Builds a vocabulary: special tokens, template tokens, label words, then sorted words.

    Parameters
    ----------
    label_space : Sequence[str]
        Class names; each becomes one token.
    words : Iterable[str]
        Text words.
    template_tokens : Iterable[str], optional
        Fixed tokens of the prompt template. Defaults to ``()``.

    Returns
    -------
    Vocabulary
        Vocabulary with label words registered.
    """
    tokens: list[str] = list(SPECIAL_TOKENS)
    seen = set(tokens)
    for group in (list(template_tokens), [w.lower() for w in label_space], sorted(set(words))):
        for token in group:
            if token not in seen:
                tokens.append(token)
                seen.add(token)
    return Vocabulary(tuple(tokens), tuple(w.lower() for w in label_space))
