"""LaTeX tokenization and the token vocabulary."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
RESERVED = (PAD, SOS, EOS, UNK)

_TOKEN_RE = re.compile(r"\\[A-Za-z]+|\\.|\S")

DIGITS = [str(d) for d in range(10)]
LETTERS = ["a", "b", "c", "n", "x", "y", "z"]
GREEK = [r"\alpha", r"\beta", r"\pi"]
OPERATORS = ["+", "-", "=", r"\times", "(", ")"]
FUNCTIONS = [r"\sin", r"\cos"]
STRUCTURE = [r"\frac", r"\sqrt", "^", "_", "{", "}"]
SYMBOLS = DIGITS + LETTERS + GREEK + OPERATORS + FUNCTIONS + STRUCTURE


def split_latex(label: str) -> list[str]:
    """Split a LaTeX string into symbol strings; whitespace only separates."""
    return _TOKEN_RE.findall(label)


@dataclass
class Vocabulary:
    symbols: list[str] = field(default_factory=lambda: list(SYMBOLS))
    unknown_count: int = 0

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        self.itos = list(RESERVED) + [s for s in self.symbols if s not in RESERVED]
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    pad_id = property(lambda self: self.stoi[PAD])
    sos_id = property(lambda self: self.stoi[SOS])
    eos_id = property(lambda self: self.stoi[EOS])
    unk_id = property(lambda self: self.stoi[UNK])

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, symbols: list[str]) -> list[int]:
        ids = []
        for s in symbols:
            i = self.stoi.get(s)
            if i is None:
                self.unknown_count += 1
                i = self.unk_id
            ids.append(i)
        return ids

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids if self.itos[i] not in (SOS, EOS, PAD)]


def tokenize_latex(label: str, vocab: Vocabulary) -> list[int]:
    """Token ids framed by start and end markers; unknown symbols map to the unknown id."""
    if not label.strip():
        raise ValueError("cannot tokenize an empty label")
    return [vocab.sos_id] + vocab.encode(split_latex(label)) + [vocab.eos_id]


def detokenize(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.decode(ids))


def canonical(label: str) -> str:
    return " ".join(split_latex(label))
