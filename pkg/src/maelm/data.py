"""Corpus chunking, deterministic batching, and synthetic text sources."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .masking import round_half_up
from .vocab import CLS_ID, NUM_SPECIAL, DataError, Vocab, read_corpus

VALID_FRACTION = 0.05


class InsufficientDataError(DataError):
    pass


@dataclass
class Batch:
    tokens: np.ndarray  # [batch, seq_len + 1], column 0 is [CLS]
    pad_mask: np.ndarray  # True where a real token sits
    lengths: np.ndarray

    @classmethod
    def from_chunks(cls, chunks: np.ndarray) -> Batch:
        chunks = np.asarray(chunks, dtype=np.int64)
        pad = chunks != 0
        return cls(chunks, pad, pad.sum(axis=1))


def chunk_ids(ids, seq_len: int) -> np.ndarray:
    """Non-overlapping ``seq_len`` chunks with ``[CLS]`` prepended; the tail remainder is dropped."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.size // seq_len
    if n == 0:
        raise InsufficientDataError(f"{ids.size} tokens cannot fill one chunk of {seq_len}")
    body = ids[: n * seq_len].reshape(n, seq_len)
    return np.concatenate([np.full((n, 1), CLS_ID, dtype=np.int64), body], axis=1)


class BatchStream:
    """Seeded stream of training batches plus a fixed validation tail.

    The last 5% of chunks (at least one when there are two or more) form the
    validation split and are never shuffled into training. Training order is
    reshuffled at the start of every epoch; incomplete final batches are
    dropped.
    """

    def __init__(self, chunks: np.ndarray, batch_size: int, rng_seed):
        n = len(chunks)
        n_valid = 0 if n < 2 else min(n - 1, max(1, round_half_up(VALID_FRACTION * n)))
        self.train = chunks[: n - n_valid]
        self.valid = chunks[n - n_valid :]
        if len(self.train) < batch_size:
            raise InsufficientDataError(
                f"{len(self.train)} training chunks cannot fill a batch of {batch_size}"
            )
        self.batch_size = batch_size
        self.rng = np.random.default_rng(rng_seed)
        self.epoch = -1
        self.cursor = 0
        self._epoch_state: dict | None = None
        self._order = np.arange(0)

    @property
    def batches_per_epoch(self) -> int:
        return len(self.train) // self.batch_size

    def _start_epoch(self) -> None:
        self._epoch_state = self.rng.bit_generator.state
        self._order = self.rng.permutation(len(self.train))
        self.epoch += 1
        self.cursor = 0

    def next_batch(self) -> Batch:
        if self.epoch < 0 or self.cursor >= self.batches_per_epoch:
            self._start_epoch()
        idx = self._order[self.cursor * self.batch_size : (self.cursor + 1) * self.batch_size]
        self.cursor += 1
        return Batch.from_chunks(self.train[idx])

    def __iter__(self):
        while True:
            yield self.next_batch()

    def valid_batches(self, batch_size: int | None = None):
        bs = batch_size or self.batch_size
        for i in range(0, len(self.valid), bs):
            yield Batch.from_chunks(self.valid[i : i + bs])

    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "cursor": self.cursor,
            "epoch_state": self._epoch_state,
            "rng_state": self.rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        self.epoch = state["epoch"]
        self.cursor = state["cursor"]
        self._epoch_state = state["epoch_state"]
        if self._epoch_state is not None:
            self.rng.bit_generator.state = self._epoch_state
            self._order = self.rng.permutation(len(self.train))
        self.rng.bit_generator.state = state["rng_state"]


def encode_batches(
    corpus,
    vocab: Vocab,
    seq_len: int,
    batch_size: int,
    rng_seed,
    max_len: int | None = None,
    *,
    text: str | None = None,
) -> BatchStream:
    """Encode a corpus file (or ``text`` directly) into a :class:`BatchStream`."""
    if max_len is not None and seq_len > max_len - 1:
        raise DataError(f"seq_len {seq_len} leaves no room for [CLS] within max_len {max_len}")
    if text is None:
        text = read_corpus(corpus)
    return BatchStream(chunk_ids(vocab.encode(text), seq_len), batch_size, rng_seed)


# --------------------------------------------------------------------------
# synthetic sources
# --------------------------------------------------------------------------

_DETS = "the a every some my our this that one no".split()
_ADJS = (
    "old young quiet bright small large green red silver heavy gentle bitter "
    "sudden distant narrow hollow golden frozen wild calm ancient crooked "
    "pale warm empty busy lonely proud clever tired curious honest brave "
    "shallow rapid dusty humble eager"
).split()
_TOPICS = {
    "sea": "ship harbor sailor wave anchor island gull storm captain net tide shore lighthouse fisher boat",
    "farm": "farmer field barn goat horse plough orchard apple fence tractor hen wheat meadow cow well",
    "city": "street tower market merchant tram bridge clerk window lamp crowd office cafe square train banker",
    "forest": "wolf tree owl hunter path river fox cabin moss stone deer branch spring hill bear",
    "school": "teacher student book lesson pencil desk window bell letter garden map clock pupil chalk library",
}
_VERBS = (
    "watched found carried followed painted greeted crossed opened remembered "
    "built visited chased lifted pushed repaired hid sold counted answered "
    "noticed borrowed dropped cleaned measured guarded"
).split()
_ADVS = "slowly quickly softly early later twice often rarely together again".split()
_PREPS = "near behind under above beside across toward inside beyond along".split()


def synthetic_corpus(n_chars: int = 1_000_000, seed: int = 0) -> str:
    """Deterministic English-like text from a small topical grammar.

    Each paragraph draws its nouns from one topic, so distant context
    carries information about masked words.
    """
    rng = np.random.default_rng(seed)
    topics = {k: v.split() for k, v in _TOPICS.items()}
    names = sorted(topics)
    parts: list[str] = []
    size = 0

    def pick(words):
        return words[int(rng.integers(len(words)))]

    def phrase(nouns):
        words = [pick(_DETS)]
        if rng.random() < 0.5:
            words.append(pick(_ADJS))
        words.append(pick(nouns))
        return " ".join(words)

    while size < n_chars:
        nouns = topics[names[int(rng.integers(len(names)))]]
        sentences = []
        for _ in range(int(rng.integers(3, 8))):
            s = f"{phrase(nouns)} {pick(_VERBS)} {phrase(nouns)}"
            r = rng.random()
            if r < 0.35:
                s += f" {pick(_PREPS)} {phrase(nouns)}"
            elif r < 0.55:
                s += f" {pick(_ADVS)}"
            if rng.random() < 0.25:
                s += f", and {phrase(nouns)} {pick(_VERBS)} {phrase(nouns)}"
            sentences.append(s + ".")
        para = " ".join(sentences) + "\n"
        parts.append(para)
        size += len(para)
    return "".join(parts)[:n_chars]


def write_synthetic_corpus(path, n_chars: int = 1_000_000, seed: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(synthetic_corpus(n_chars, seed), encoding="utf-8")
    return path


def probe_task(vocab: Vocab | int, n: int, length: int, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """Two-class sequences labelled by which half of the vocabulary dominates.

    Non-special ids are split into two sets by parity. Each sequence leans
    70/30 towards one set; the label is 1 when set-B tokens outnumber set-A
    tokens (odd ``length`` rules out ties), so token counts separate the
    classes exactly. Sequences start with ``[CLS]`` and never contain ``[MASK]``.
    """
    if length % 2 == 0:
        raise DataError("probe sequence length must be odd")
    rng = np.random.default_rng(rng_seed)
    ids = np.arange(NUM_SPECIAL, vocab if isinstance(vocab, int) else len(vocab))
    set_a, set_b = ids[ids % 2 == 0], ids[ids % 2 == 1]
    seqs = np.empty((n, length + 1), dtype=np.int64)
    seqs[:, 0] = CLS_ID
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        lean_b = rng.random() < 0.5
        from_b = rng.random(length) < (0.7 if lean_b else 0.3)
        seqs[i, 1:] = np.where(from_b, rng.choice(set_b, length), rng.choice(set_a, length))
        labels[i] = int(from_b.sum() > length - from_b.sum())
    return seqs, labels
