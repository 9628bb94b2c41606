"""Transformer building blocks on top of :mod:`maelm.tensor`.

Activations are batched ``[B, n, d]``; 2-D ``[n, d]`` inputs are promoted to a
batch of one and returned as 2-D again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    TensorError,
    add,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax_rows,
    transpose,
)

LN_EPS = 1e-5
NEG_INF = -1e9


# --------------------------------------------------------------------------
# relative position buckets
# --------------------------------------------------------------------------


def relative_bucket(rel: int, num_buckets: int, max_distance: int) -> int:
    """Bucket index in ``[0, num_buckets)`` for a signed key-minus-query distance."""
    return int(relative_buckets(np.array([rel]), num_buckets, max_distance)[0])


def relative_buckets(rel: np.ndarray, num_buckets: int, max_distance: int) -> np.ndarray:
    if num_buckets % 2 or max_distance <= num_buckets // 4:
        raise ValueError("need an even bucket count and max_distance > num_buckets / 4")
    half = num_buckets // 2
    exact = num_buckets // 4
    rel = np.asarray(rel, dtype=np.int64)
    base = np.where(rel >= 0, half, 0)
    a = np.abs(rel)
    with np.errstate(divide="ignore"):
        log_part = exact + np.floor(
            np.log(np.maximum(a, 1) / exact) / math.log(max_distance / exact) * (half - exact)
        ).astype(np.int64)
    idx = np.where(a < exact, a, np.minimum(half - 1, log_part))
    return base + idx


def locality_prior(num_buckets: int, max_distance: int, heads: int) -> np.ndarray:
    """Bias table ``[num_buckets, heads]`` that decays with distance.

    Head ``h`` scores a bucket ``-|r| / 2**h`` where ``r`` is the smallest
    distance landing in it, so every head starts out preferring nearby keys
    at a different range.
    """
    rel = np.arange(-max_distance, max_distance + 1)
    buckets = relative_buckets(rel, num_buckets, max_distance)
    nearest = np.full(num_buckets, float(max_distance))
    np.minimum.at(nearest, buckets, np.abs(rel).astype(float))
    slopes = 0.5 ** np.arange(heads)
    return -nearest[:, None] * slopes[None, :]


@dataclass
class RelativePositionBias:
    table: Tensor  # [num_buckets, heads]
    num_buckets: int = 32
    max_distance: int = 128

    def logits_bias(self, q_pos: np.ndarray, k_pos: np.ndarray) -> Tensor:
        """Additive attention bias ``[B, heads, n_q, n_k]`` from original indices."""
        q_pos = np.atleast_2d(q_pos)
        k_pos = np.atleast_2d(k_pos)
        rel = k_pos[:, None, :] - q_pos[:, :, None]
        buckets = relative_buckets(rel, self.num_buckets, self.max_distance)
        return transpose(embedding(self.table, buckets), (0, 3, 1, 2))


# --------------------------------------------------------------------------
# attention and feed-forward
# --------------------------------------------------------------------------


@dataclass
class AttentionWeights:
    """Per-head projections stored side by side: head ``h`` owns columns
    ``h*d_h:(h+1)*d_h`` of ``wq``, ``wk`` and ``wv``."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[1]
        if d % self.heads:
            raise DimensionError(f"{self.heads} heads do not divide width {d}")

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.heads


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def mhsa_forward(
    x: Tensor,
    w: AttentionWeights,
    bias: RelativePositionBias | Tensor | None = None,
    positions=None,
    *,
    memory: Tensor | None = None,
    memory_positions=None,
    attn_mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Multi-head attention of ``x`` over itself, or over ``memory`` if given.

    ``bias`` is either a :class:`RelativePositionBias` (looked up from
    ``positions``) or a precomputed ``[B, heads, n, m]`` logits tensor.
    ``attn_mask`` is a boolean array broadcastable to ``[B, 1, n, m]``; False
    entries are blocked.
    """
    x, squeeze = _batched(x)
    src = x if memory is None else _batched(memory)[0]
    n = x.shape[1]
    if positions is not None:
        positions = np.atleast_2d(np.asarray(positions))
        if positions.shape[-1] != n:
            raise TensorError(f"{positions.shape[-1]} positions for {n} rows")
    q = _split_heads(matmul(x, w.wq), w.heads)
    k = _split_heads(matmul(src, w.wk), w.heads)
    v = _split_heads(matmul(src, w.wv), w.heads)
    scores = matmul(q, k.T) * (1.0 / math.sqrt(w.head_dim))
    if isinstance(bias, RelativePositionBias):
        if positions is None:
            raise TensorError("relative bias needs original positions")
        kpos = positions if memory is None else np.atleast_2d(memory_positions)
        scores = add(scores, bias.logits_bias(positions, kpos))
    elif bias is not None:
        scores = add(scores, bias)
    if attn_mask is not None:
        scores = add(scores, Tensor(np.where(attn_mask, 0.0, NEG_INF)))
    probs = dropout(softmax_rows(scores), dropout_p, rng)
    out = matmul(_merge_heads(matmul(probs, v)), w.wo)
    return reshape(out, out.shape[1:]) if squeeze else out


def ffn_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0] or w2.shape[1] != b2.shape[-1]:
        raise DimensionError(
            f"ffn shapes disagree: x {x.shape}, W1 {w1.shape}, W2 {w2.shape}, b2 {b2.shape}"
        )
    return add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2)


# --------------------------------------------------------------------------
# layers and stacks
# --------------------------------------------------------------------------


@dataclass
class TransformerLayer:
    """Pre-norm block. ``attn`` may be None (cross-attention-only decoder);
    ``cross`` is present only in decoder layers that read encoder outputs."""

    ln1_g: Tensor | None
    ln1_b: Tensor | None
    attn: AttentionWeights | None
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    lnx_g: Tensor | None = None
    lnx_b: Tensor | None = None
    cross: AttentionWeights | None = None

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str, heads: int) -> TransformerLayer:
        def attn(tag):
            if f"{prefix}{tag}.wq" not in params:
                return None
            return AttentionWeights(*(params[f"{prefix}{tag}.{k}"] for k in ("wq", "wk", "wv", "wo")), heads)

        return cls(
            ln1_g=params.get(prefix + "ln1.g"),
            ln1_b=params.get(prefix + "ln1.b"),
            attn=attn("attn"),
            ln2_g=params[prefix + "ln2.g"],
            ln2_b=params[prefix + "ln2.b"],
            w1=params[prefix + "ffn.w1"],
            b1=params[prefix + "ffn.b1"],
            w2=params[prefix + "ffn.w2"],
            b2=params[prefix + "ffn.b2"],
            lnx_g=params.get(prefix + "lnx.g"),
            lnx_b=params.get(prefix + "lnx.b"),
            cross=attn("cross"),
        )


def layer_forward(
    h: Tensor,
    layer: TransformerLayer,
    *,
    bias=None,
    positions=None,
    attn_mask=None,
    memory: Tensor | None = None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``H <- H + MHSA(LN(H))`` (then cross-attention if present), ``H <- H + FFN(LN(H))``."""
    if layer.attn is not None:
        a = mhsa_forward(
            layer_norm(h, layer.ln1_g, layer.ln1_b, LN_EPS),
            layer.attn,
            bias,
            positions,
            attn_mask=attn_mask,
            dropout_p=dropout_p,
            rng=rng,
        )
        h = add(h, a)
    if layer.cross is not None:
        if memory is None:
            raise TensorError("cross-attention layer called without encoder memory")
        c = mhsa_forward(layer_norm(h, layer.lnx_g, layer.lnx_b, LN_EPS), layer.cross, memory=memory)
        h = add(h, c)
    f = ffn_forward(layer_norm(h, layer.ln2_g, layer.ln2_b, LN_EPS), layer.w1, layer.b1, layer.w2, layer.b2)
    return add(h, dropout(f, dropout_p, rng))


def encoder_stack_forward(
    h0: Tensor,
    layers: list[TransformerLayer],
    positions=None,
    *,
    rel_bias: RelativePositionBias | None = None,
    attn_mask=None,
    memory: Tensor | None = None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[Tensor]:
    """Run the stack and return every activation ``[H^0, ..., H^L]``.

    The relative bias is looked up once and shared by all layers.
    """
    bias = None
    if rel_bias is not None and layers:
        if positions is None:
            raise TensorError("relative bias needs original positions")
        pos = np.atleast_2d(np.asarray(positions))
        bias = rel_bias.logits_bias(pos, pos)
    acts = [h0]
    h = h0
    for layer in layers:
        h = layer_forward(
            h,
            layer,
            bias=bias,
            positions=positions,
            attn_mask=attn_mask,
            memory=memory,
            dropout_p=dropout_p,
            rng=rng,
        )
        acts.append(h)
    return acts
