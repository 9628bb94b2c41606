"""Masked training views of token sequences.

Masks use an exact count, ``max(1, round(rate * n))`` over the maskable
positions, so every sequence of a given length yields the same encoder input
length. Rounding is half-up throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .vocab import MASK_ID, NUM_SPECIAL, SPECIAL_IDS

KEPT_MASK = "mask"
KEPT_ORIGINAL = "original"
REPLACED_RANDOM = "random"


class MaskingError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    """Masked positions of one sequence and how each is corrupted.

    ``encoder_visible`` and ``decoder_only`` partition ``positions``: the
    former are shown to the encoder as (corrupted) tokens, the latter are
    withheld from it entirely in exclude mode.
    """

    length: int
    positions: tuple[int, ...]
    originals: tuple[int, ...]
    corruption: tuple[str, ...]
    replacements: tuple[int, ...]  # replacement token per position, -1 if unused
    encoder_visible: tuple[int, ...]
    decoder_only: tuple[int, ...]

    def __post_init__(self):
        m = set(self.positions)
        ev, do = set(self.encoder_visible), set(self.decoder_only)
        if ev & do or (ev | do) != m:
            raise MaskingError("encoder_visible and decoder_only must partition the masked set")
        if list(self.positions) != sorted(m):
            raise MaskingError("masked positions must be sorted and unique")

    @property
    def size(self) -> int:
        return len(self.positions)

    def corrupted_tokens(self, tokens) -> np.ndarray:
        """Sequence as an MLM encoder would see it (``[MASK]`` / original / random)."""
        out = np.array(tokens, dtype=np.int64).copy()
        for pos, kind, rep in zip(self.positions, self.corruption, self.replacements):
            if kind == KEPT_MASK:
                out[pos] = MASK_ID
            elif kind == REPLACED_RANDOM:
                out[pos] = rep
        return out

    def corruption_counts(self) -> tuple[int, int, int]:
        return (
            self.corruption.count(KEPT_MASK),
            self.corruption.count(KEPT_ORIGINAL),
            self.corruption.count(REPLACED_RANDOM),
        )


def _eligible(tokens: np.ndarray) -> np.ndarray:
    return np.flatnonzero(~np.isin(tokens, SPECIAL_IDS))


def _check_rate(rate: float) -> None:
    if not 0.0 < rate < 1.0:
        raise MaskingError(f"mask rate must lie in (0, 1), got {rate}")


def mask_count(n: int, rate: float) -> int:
    return max(1, round_half_up(rate * n))


def _choose(tokens, rate, rng) -> tuple[np.ndarray, np.ndarray]:
    _check_rate(rate)
    tokens = np.asarray(tokens, dtype=np.int64)
    elig = _eligible(tokens)
    if elig.size == 0:
        raise MaskingError("sequence has no maskable positions")
    k = min(mask_count(elig.size, rate), elig.size)
    chosen = np.sort(rng.choice(elig, size=k, replace=False))
    return tokens, chosen


def uniform_mask(tokens, rate: float, rng_seed) -> MaskPlan:
    """Pick ``max(1, round(rate*n))`` maskable positions uniformly; all become ``[MASK]``."""
    rng = np.random.default_rng(rng_seed)
    tokens, pos = _choose(tokens, rate, rng)
    k = pos.size
    return MaskPlan(
        length=len(tokens),
        positions=tuple(int(p) for p in pos),
        originals=tuple(int(t) for t in tokens[pos]),
        corruption=(KEPT_MASK,) * k,
        replacements=(-1,) * k,
        encoder_visible=(),
        decoder_only=tuple(int(p) for p in pos),
    )


def split_counts(total: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, ...]:
    """Largest-remainder rounding; ties go to the earlier category."""
    quotas = [total * f for f in fractions]
    counts = [int(math.floor(q)) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return tuple(counts)


def bert_mask(tokens, rate: float, rng_seed, vocab) -> MaskPlan:
    """80/10/10 corruption: ``[MASK]`` / unchanged / random non-special token."""
    rng = np.random.default_rng(rng_seed)
    vocab_size = vocab if isinstance(vocab, int) else len(vocab)
    if vocab_size <= NUM_SPECIAL:
        raise MaskingError("vocabulary has no non-special tokens to sample")
    tokens, pos = _choose(tokens, rate, rng)
    n_mask, n_orig, n_rand = split_counts(pos.size)
    kinds = np.array([KEPT_MASK] * n_mask + [KEPT_ORIGINAL] * n_orig + [REPLACED_RANDOM] * n_rand)
    kinds = rng.permutation(kinds)
    reps = np.full(pos.size, -1, dtype=np.int64)
    rand = kinds == REPLACED_RANDOM
    reps[rand] = rng.integers(NUM_SPECIAL, vocab_size, size=int(rand.sum()))
    return MaskPlan(
        length=len(tokens),
        positions=tuple(int(p) for p in pos),
        originals=tuple(int(t) for t in tokens[pos]),
        corruption=tuple(str(k) for k in kinds),
        replacements=tuple(int(r) for r in reps),
        encoder_visible=(),
        decoder_only=tuple(int(p) for p in pos),
    )


def delta_split(plan: MaskPlan, delta: float, rng_seed) -> MaskPlan:
    """Show ``round(delta*|M|)`` masked positions to the encoder; the rest go decoder-only."""
    if not 0.0 <= delta <= 1.0:
        raise MaskingError(f"delta must lie in [0, 1], got {delta}")
    rng = np.random.default_rng(rng_seed)
    k = round_half_up(delta * plan.size)
    pos = np.array(plan.positions, dtype=np.int64)
    visible = set(int(p) for p in rng.choice(pos, size=k, replace=False)) if k else set()
    return replace(
        plan,
        encoder_visible=tuple(p for p in plan.positions if p in visible),
        decoder_only=tuple(p for p in plan.positions if p not in visible),
    )
