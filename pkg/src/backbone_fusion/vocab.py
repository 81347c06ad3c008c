"""Closed-world vocabulary and whitespace tokenizer."""
from __future__ import annotations

from importlib import resources

VOCAB_FILE = "vocab.txt"


class DataError(ValueError):
    """Input data is malformed or outside the closed world."""


def load_words() -> list[str]:
    text = resources.files(__package__).joinpath(VOCAB_FILE).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line]


class Vocab:
    """Bijective word <-> id map; line number in the vocab file is the id."""

    def __init__(self, words: list[str]):
        if len(set(words)) != len(words):
            raise DataError("vocab words must be unique")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise DataError(f"out-of-vocabulary word {word!r}") from None

    def tokenize(self, s: str) -> list[int]:
        return [BOS_ID] + [self.id(w) for w in s.split()] + [EOS_ID]

    def detokenize(self, ids) -> str:
        return " ".join(self.words[i] for i in ids if i not in SPECIAL_IDS)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


PAD_ID, BOS_ID, EOS_ID, MASK_ID = 0, 1, 2, 3
SPECIAL_IDS = frozenset((PAD_ID, BOS_ID, EOS_ID, MASK_ID))
VOCAB = Vocab(load_words())
VOCAB_SIZE = len(VOCAB)
assert VOCAB.words[:4] == ["[pad]", "[bos]", "[eos]", "[mask]"]


def tokenize(s: str) -> list[int]:
    return VOCAB.tokenize(s)


def detokenize(ids) -> str:
    return VOCAB.detokenize(ids)
