"""Vanilla MLM, MAE-LM, and their ablation variants.

Parameters live in an ordered ``dict[str, Tensor]``; the insertion order is
the checkpoint manifest order. Token embeddings are tied to the output
softmax: ``logits = LN(h) @ E^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .masking import MaskPlan, delta_split, uniform_mask
from .nn import RelativePositionBias, locality_prior, TransformerLayer, encoder_stack_forward
from .tensor import (
    Tensor,
    TensorError,
    add,
    concat,
    cross_entropy_masked,
    embedding,
    layer_norm,
    matmul,
    reshape,
    take_rows,
)
from .vocab import MASK_ID, NUM_SPECIAL

MASK_MODES = ("exclude", "include", "include-dec-resets", "random-replace")
DECODER_ATTN = ("bi-self", "bi-self+cross", "uni-self+cross", "cross-only")
LN_EPS = 1e-5
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


class PositionRangeError(TensorError):
    pass


class StructuralError(KeyError):
    """Raised when a component is referenced that the model does not have."""


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 4
    dec_layers: int | None = None  # None -> ceil(enc_layers / 3)
    dim: int = 128
    dec_dim: int | None = None  # None -> dim
    heads: int = 4
    ffn_dim: int | None = None  # None -> 4 * dim
    vocab_size: int = 32
    max_len: int = 128
    relative_bias: bool = True
    aligned_positions: bool = True
    delta: float = 0.0
    mask_mode: str = "exclude"
    decoder_attn: str = "bi-self"
    mask_rate: float = 0.15
    dropout: float = 0.1
    rel_buckets: int = 32
    rel_max_distance: int = 128
    tie_embeddings: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.dec_layers is None:
            object.__setattr__(self, "dec_layers", math.ceil(self.enc_layers / 3))
        if self.dec_dim is None:
            object.__setattr__(self, "dec_dim", self.dim)
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.dim)
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.decoder_attn not in DECODER_ATTN:
            raise ConfigError(f"decoder_attn must be one of {DECODER_ATTN}, got {self.decoder_attn!r}")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError(f"delta must lie in [0, 1], got {self.delta}")
        if self.dim % self.heads or self.dec_dim % self.heads:
            raise ConfigError(f"{self.heads} heads must divide dim {self.dim} and dec_dim {self.dec_dim}")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.vocab_size <= NUM_SPECIAL:
            raise ConfigError("vocab_size must exceed the reserved ids")

    @property
    def has_decoder(self) -> bool:
        return self.dec_layers > 0

    @property
    def projected(self) -> bool:
        return self.has_decoder and self.dec_dim != self.dim

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.init}

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls) if f.init}
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


def _layer_shapes(prefix: str, d: int, ffn: int, self_attn: bool, cross: bool) -> list[tuple[str, tuple]]:
    out = []
    if self_attn:
        out += [(prefix + "ln1.g", (d,)), (prefix + "ln1.b", (d,))]
        out += [(f"{prefix}attn.{k}", (d, d)) for k in ("wq", "wk", "wv", "wo")]
    if cross:
        out += [(prefix + "lnx.g", (d,)), (prefix + "lnx.b", (d,))]
        out += [(f"{prefix}cross.{k}", (d, d)) for k in ("wq", "wk", "wv", "wo")]
    out += [
        (prefix + "ln2.g", (d,)),
        (prefix + "ln2.b", (d,)),
        (prefix + "ffn.w1", (d, ffn)),
        (prefix + "ffn.b1", (ffn,)),
        (prefix + "ffn.w2", (ffn, d)),
        (prefix + "ffn.b2", (d,)),
    ]
    return out


def param_manifest(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Fixed (name, shape) order shared by initialisation and checkpoints."""
    d = cfg.dim
    out: list[tuple[str, tuple]] = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_len, d))]
    if cfg.relative_bias:
        out.append(("rel_bias", (cfg.rel_buckets, cfg.heads)))
    for layer in range(cfg.enc_layers):
        out += _layer_shapes(f"enc.{layer}.", d, cfg.ffn_dim, True, False)
    out += [("enc.ln_f.g", (d,)), ("enc.ln_f.b", (d,))]
    if cfg.has_decoder:
        dd = cfg.dec_dim
        dec_ffn = 4 * dd if cfg.projected else cfg.ffn_dim
        if cfg.projected:
            out += [("dec.in_proj", (d, dd)), ("dec.out_proj", (dd, d))]
        self_attn = cfg.decoder_attn != "cross-only"
        cross = cfg.decoder_attn != "bi-self"
        for layer in range(cfg.dec_layers):
            out += _layer_shapes(f"dec.{layer}.", dd, dec_ffn, self_attn, cross)
        out += [("dec.ln_f.g", (dd,)), ("dec.ln_f.b", (dd,))]
    return out


def init_params(cfg: ModelConfig, rng_seed, embed_std: float = 0.0) -> dict[str, Tensor]:
    """Seeded initialisation.

    Token embeddings start at ``embed_std`` (zero by default, so step-0
    predictions are uniform); the relative-bias table starts from a distance
    decay (see ``locality_prior``); other matrices are N(0, 0.02); gains are
    one and biases zero.
    """
    rng = np.random.default_rng(rng_seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_manifest(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name == "tok_emb":
            arr = rng.normal(0.0, embed_std, shape) if embed_std > 0 else np.zeros(shape)
        elif name == "rel_bias":
            arr = locality_prior(cfg.rel_buckets, cfg.rel_max_distance, cfg.heads)
        elif leaf in ("b", "b1", "b2"):
            arr = np.zeros(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------


@dataclass
class EncoderInputs:
    h0: Tensor  # [B, n', d]
    retained: np.ndarray  # [B, n'] original indices of encoder rows
    positions: np.ndarray  # [B, n'] indices used for position embeddings / relative bias


@dataclass
class ForwardOutput:
    logits: Tensor  # [B * |M|, |V|], rows in sorted-M order per sequence
    targets: np.ndarray
    encoder: list[Tensor]
    decoder: list[Tensor]
    enc_inputs: EncoderInputs
    decoder_handled: np.ndarray  # [B, k] positions fed to the decoder as [MASK]


def make_plans(tokens: np.ndarray, cfg: ModelConfig, rng: np.random.Generator) -> list[MaskPlan]:
    """Uniform masks plus the delta split, one plan per row."""
    return [delta_split(uniform_mask(row, cfg.mask_rate, rng), cfg.delta, rng) for row in np.atleast_2d(tokens)]


def _check_rows(plans: Sequence[MaskPlan], tokens: np.ndarray) -> None:
    if len(plans) != tokens.shape[0]:
        raise TensorError(f"{len(plans)} mask plans for {tokens.shape[0]} sequences")
    for plan in plans:
        if plan.length != tokens.shape[1]:
            raise TensorError(f"plan for length {plan.length} applied to length {tokens.shape[1]}")


def _uniform(rows: list[np.ndarray], what: str) -> np.ndarray:
    if len({len(r) for r in rows}) > 1:
        raise TensorError(f"{what} differ in length across the batch")
    return np.array(rows, dtype=np.int64).reshape(len(rows), -1)


def build_encoder_inputs(tokens, plans: Sequence[MaskPlan], params, cfg: ModelConfig, rng=None) -> EncoderInputs:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    _check_rows(plans, tokens)
    n = tokens.shape[1]
    ids_rows, keep_rows = [], []
    for row, plan in zip(tokens, plans):
        if cfg.mask_mode == "random-replace":
            ids = row.copy()
            if plan.size:
                gen = rng if rng is not None else np.random.default_rng(0)
                ids[list(plan.positions)] = gen.integers(NUM_SPECIAL, cfg.vocab_size, size=plan.size)
        else:
            ids = plan.corrupted_tokens(row)
        if cfg.mask_mode == "exclude":
            dropped = set(plan.decoder_only)
            keep = np.array([i for i in range(n) if i not in dropped], dtype=np.int64)
        else:
            keep = np.arange(n)
        ids_rows.append(ids[keep])
        keep_rows.append(keep)
    ids = _uniform(ids_rows, "encoder inputs")
    retained = _uniform(keep_rows, "encoder inputs")
    if cfg.aligned_positions:
        positions = retained
    else:
        positions = np.broadcast_to(np.arange(retained.shape[1]), retained.shape).copy()
    if positions.size and positions.max() >= cfg.max_len:
        raise PositionRangeError(f"position {positions.max()} outside max_len {cfg.max_len}")
    h0 = add(embedding(params["tok_emb"], ids), embedding(params["pos_emb"], positions))
    return EncoderInputs(h0, retained, positions)


def decoder_handled(plans: Sequence[MaskPlan], cfg: ModelConfig) -> np.ndarray:
    if cfg.mask_mode == "exclude":
        rows = [list(p.decoder_only) for p in plans]
    elif cfg.mask_mode == "include-dec-resets":
        rows = [list(p.positions) for p in plans]
    else:
        rows = [[] for _ in plans]
    return _uniform(rows, "decoder mask sets")


def build_decoder_inputs(h_enc: Tensor, retained, plans: Sequence[MaskPlan], params, cfg: ModelConfig) -> Tensor:
    """Scatter encoder rows and ``[MASK]`` rows back to full length, add positions.

    Row ``i`` is ``e_[MASK] + p_i`` when ``i`` is decoder-handled, otherwise
    ``h_i + p_i`` with ``h_i`` the encoder output at original index ``i``.
    """
    if h_enc.ndim == 2:
        h_enc = reshape(h_enc, (1,) + h_enc.shape)
    retained = np.atleast_2d(np.asarray(retained, dtype=np.int64))
    b, n_enc, _ = h_enc.shape
    if retained.shape != (b, n_enc):
        raise TensorError(f"retained index list {retained.shape} does not align with encoder rows {(b, n_enc)}")
    n = plans[0].length
    handled = decoder_handled(plans, cfg)
    k = handled.shape[1]
    gather = np.empty((b, n), dtype=np.int64)
    for r in range(b):
        slot = {int(i): j for j, i in enumerate(retained[r])}
        masked = {int(i): n_enc + j for j, i in enumerate(handled[r])}
        for i in range(n):
            if i in masked:
                gather[r, i] = masked[i]
            elif i in slot:
                gather[r, i] = slot[i]
            else:
                raise TensorError(f"position {i} is neither retained by the encoder nor decoder-handled")
    rows = h_enc
    if k:
        mask_rows = embedding(params["tok_emb"], np.full((b, k), MASK_ID))
        rows = concat([h_enc, mask_rows], axis=1)
    if n > cfg.max_len:
        raise PositionRangeError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    h = add(take_rows(rows, gather), embedding(params["pos_emb"], np.arange(n)))
    if cfg.projected:
        h = matmul(h, params["dec.in_proj"])
    return h


def _layers(params, cfg: ModelConfig, side: str) -> list[TransformerLayer]:
    count = cfg.enc_layers if side == "enc" else cfg.dec_layers
    heads = cfg.heads
    return [TransformerLayer.from_params(params, f"{side}.{i}.", heads) for i in range(count)]


def _rel_bias(params, cfg: ModelConfig) -> RelativePositionBias | None:
    if not cfg.relative_bias:
        return None
    return RelativePositionBias(params["rel_bias"], cfg.rel_buckets, cfg.rel_max_distance)


def encode(h0: Tensor, positions, params, cfg: ModelConfig, *, dropout_rng=None) -> list[Tensor]:
    """Encoder activations ``[H^0 .. H^L]``; dropout only when ``dropout_rng`` is given."""
    return encoder_stack_forward(
        h0,
        _layers(params, cfg, "enc"),
        positions,
        rel_bias=_rel_bias(params, cfg),
        dropout_p=cfg.dropout if dropout_rng is not None else 0.0,
        rng=dropout_rng,
    )


def encoder_output(h_last: Tensor, params) -> Tensor:
    return layer_norm(h_last, params["enc.ln_f.g"], params["enc.ln_f.b"], LN_EPS)


def encode_tokens(tokens, params, cfg: ModelConfig) -> list[Tensor]:
    """Encoder activations on unmasked tokens at their own positions."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    pos = np.broadcast_to(np.arange(tokens.shape[1]), tokens.shape)
    if tokens.shape[1] > cfg.max_len:
        raise PositionRangeError(f"sequence length {tokens.shape[1]} exceeds max_len {cfg.max_len}")
    h0 = add(embedding(params["tok_emb"], tokens), embedding(params["pos_emb"], pos))
    return encode(h0, pos, params, cfg)


def forward(tokens, plans: Sequence[MaskPlan], params, cfg: ModelConfig, *, rng=None, dropout_rng=None) -> ForwardOutput:
    """Logits at every masked position, plus encoder and decoder activations.

    ``rng`` drives random-replace sampling; ``dropout_rng`` enables encoder
    dropout (training only).
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    enc_in = build_encoder_inputs(tokens, plans, params, cfg, rng)
    enc_acts = encode(enc_in.h0, enc_in.positions, params, cfg, dropout_rng=dropout_rng)
    enc_out = encoder_output(enc_acts[-1], params)
    handled = decoder_handled(plans, cfg)
    dec_acts: list[Tensor] = []
    if cfg.has_decoder:
        h0 = build_decoder_inputs(enc_out, enc_in.retained, plans, params, cfg)
        memory = None
        if cfg.decoder_attn != "bi-self":
            memory = matmul(enc_out, params["dec.in_proj"]) if cfg.projected else enc_out
        causal = None
        if cfg.decoder_attn == "uni-self+cross":
            causal = np.tril(np.ones((h0.shape[1], h0.shape[1]), dtype=bool))
        dec_acts = encoder_stack_forward(h0, _layers(params, cfg, "dec"), attn_mask=causal, memory=memory)
        final = layer_norm(dec_acts[-1], params["dec.ln_f.g"], params["dec.ln_f.b"], LN_EPS)
        if cfg.projected:
            final = matmul(final, params["dec.out_proj"])
        masked = _uniform([list(p.positions) for p in plans], "masked sets")
        rows = take_rows(final, masked)
    else:
        if cfg.mask_mode == "exclude" and handled.size:
            raise TensorError("exclude mode withholds masked positions; it needs a decoder")
        masked = _uniform([list(p.positions) for p in plans], "masked sets")
        lookup = [{int(i): j for j, i in enumerate(row)} for row in enc_in.retained]
        gather = np.array([[lookup[r][int(i)] for i in row] for r, row in enumerate(masked)], dtype=np.int64)
        rows = take_rows(enc_out, gather)
    b, m, d = rows.shape
    logits = matmul(reshape(rows, (b * m, d)), params["tok_emb"].T)
    targets = np.array([t for p in plans for t in p.originals], dtype=np.int64)
    return ForwardOutput(logits, targets, enc_acts, dec_acts, enc_in, handled)


def mlm_loss(logits: Tensor, plans_or_targets) -> Tensor:
    """Mean cross-entropy over masked positions only."""
    if isinstance(plans_or_targets, MaskPlan):
        plans_or_targets = [plans_or_targets]
    if len(plans_or_targets) and isinstance(plans_or_targets[0], MaskPlan):
        targets = [t for p in plans_or_targets for t in p.originals]
    else:
        targets = plans_or_targets
    return cross_entropy_masked(logits, targets)


def encoder_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """The subset a fine-tuned encoder keeps; decoder weights are dropped."""
    return {k: v for k, v in params.items() if not k.startswith("dec.")}

