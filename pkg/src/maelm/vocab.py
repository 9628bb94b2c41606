"""Vocabulary with reserved special ids and char/word tokenisation."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD_ID, CLS_ID, MASK_ID = 0, 1, 2
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[MASK]")
SPECIAL_IDS = (PAD_ID, CLS_ID, MASK_ID)
NUM_SPECIAL = len(SPECIAL_TOKENS)
MODES = ("char", "word")

_ESCAPES = {"\\": "\\\\", "\n": "\\n", "\r": "\\r", "\t": "\\t"}
_UNESCAPES = {v: k for k, v in _ESCAPES.items()}


class DataError(ValueError):
    pass


class EmptyCorpusError(DataError):
    pass


class CorpusEncodingError(DataError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"corpus is not valid UTF-8 at byte offset {offset}: {reason}")
        self.offset = offset


def read_corpus(path) -> str:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusEncodingError(exc.start, exc.reason) from None
    if not text:
        raise EmptyCorpusError(f"corpus {path} is empty")
    return text


def tokenize(text: str, mode: str) -> list[str]:
    if mode == "char":
        return list(text)
    if mode == "word":
        return text.split()
    raise DataError(f"unknown tokenizer mode {mode!r}; expected one of {MODES}")


def _escape(tok: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in tok)


def _unescape(line: str) -> str:
    out, i = [], 0
    while i < len(line):
        pair = line[i : i + 2]
        if pair in _UNESCAPES:
            out.append(_UNESCAPES[pair])
            i += 2
        else:
            out.append(line[i])
            i += 1
    return "".join(out)


@dataclass
class Vocab:
    tokens: list[str]
    mode: str = "char"
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise DataError("the first vocabulary entries must be the reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        """Token ids for ``text``. Out-of-vocabulary tokens (word mode only) are dropped."""
        ids = []
        for tok in tokenize(text, self.mode):
            i = self.index.get(tok)
            if i is not None and i >= NUM_SPECIAL:
                ids.append(i)
        return ids

    def decode(self, ids) -> str:
        sep = "" if self.mode == "char" else " "
        return sep.join(self.tokens[int(i)] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("".join(_escape(t) + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path, mode: str = "char") -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls([_unescape(line) for line in lines], mode)


def build_vocab(corpus_path, mode: str = "char", min_freq: int = 1) -> Vocab:
    """Frequency-ordered vocabulary (ties broken lexicographically).

    ``min_freq`` applies in word mode only; char mode keeps every character.
    """
    text = read_corpus(corpus_path)
    counts = Counter(tokenize(text, mode))
    counts = {t: c for t, c in counts.items() if t not in SPECIAL_TOKENS}
    if mode == "word":
        counts = {t: c for t, c in counts.items() if c >= min_freq}
    if not counts:
        raise EmptyCorpusError(f"no tokens survive in {corpus_path}")
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIAL_TOKENS) + ordered, mode)
