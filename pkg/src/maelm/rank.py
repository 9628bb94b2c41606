"""Effective rank, residual norms, and the per-layer rank experiments."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import ModelConfig, encode, build_encoder_inputs, encode_tokens, encoder_output, make_plans
from .svd import singular_values
from .tensor import Tensor
from .vocab import MASK_ID

RANK_TOL = 1e-12
CONFIG_LABELS = ("MLM w. [MASK]", "MLM w/o. [MASK]", "MAE-LM")


class UndefinedRankError(ValueError):
    pass


class InsufficientSampleError(ValueError):
    pass


def _array(h) -> np.ndarray:
    return np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)


def rank_from_spectrum(sigma: np.ndarray, tau: float) -> int:
    """Smallest ``k`` whose top-``k`` squared singular values reach fraction ``tau``.

    Ratios within ``RANK_TOL`` below ``tau`` count as reaching it, so exact
    ties such as ``I_10`` at 0.9 resolve to the arithmetic answer.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    energy = np.sort(np.asarray(sigma, dtype=np.float64) ** 2)[::-1]
    total = energy.sum()
    if not total > 0.0:
        raise UndefinedRankError("effective rank of a zero matrix is undefined")
    frac = np.cumsum(energy) / total
    return int(np.argmax(frac >= tau - RANK_TOL)) + 1


def effective_rank(h, tau: float) -> int:
    return rank_from_spectrum(singular_values(_array(h)), tau)


def norm_l1(a) -> float:
    """Maximum absolute column sum."""
    a = _array(a)
    return float(np.abs(a).sum(axis=0).max()) if a.size else 0.0


def norm_linf(a) -> float:
    """Maximum absolute row sum."""
    a = _array(a)
    return float(np.abs(a).sum(axis=1).max()) if a.size else 0.0


def norm_composite(a) -> float:
    """Geometric mean of the l1 and l-infinity norms."""
    return math.sqrt(norm_l1(a) * norm_linf(a))


@dataclass(frozen=True)
class ResidualDecomposition:
    r: np.ndarray
    h: np.ndarray
    l1: float
    linf: float
    composite: float

    @classmethod
    def of(cls, r: np.ndarray, h: np.ndarray) -> ResidualDecomposition:
        return cls(r, h, norm_l1(r), norm_linf(r), norm_composite(r))


def residual_decompose(h) -> ResidualDecomposition:
    """Split ``H`` into ``1 h^T + R`` with ``h`` the column mean."""
    h = _array(h)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValueError("residual_decompose needs a non-empty matrix")
    mean = h.mean(axis=0)
    return ResidualDecomposition.of(h - mean, mean)


# --------------------------------------------------------------------------
# rank experiments on trained models
# --------------------------------------------------------------------------


@dataclass
class RankRow:
    layer: int
    config: str
    tau: float
    rank: int
    tokens: int


@dataclass
class RankReport:
    rows: list[RankRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "config", "tau", "rank", "tokens"])
        for r in self.rows:
            w.writerow([r.layer, r.config, repr(r.tau), r.rank, r.tokens])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    def rank(self, layer: int, config: str) -> int:
        for r in self.rows:
            if r.layer == layer and r.config == config:
                return r.rank
        raise KeyError((layer, config))

    def layers(self, config: str) -> list[int]:
        return [r.rank for r in sorted(self.rows, key=lambda r: r.layer) if r.config == config]


def _pooled_rank(pool: list[np.ndarray], tau: float, what: str) -> tuple[int, int]:
    mat = np.concatenate(pool, axis=0)
    if mat.shape[0] < mat.shape[1]:
        raise InsufficientSampleError(f"{what}: {mat.shape[0]} pooled tokens for dimension {mat.shape[1]}")
    return effective_rank(mat, tau), mat.shape[0]


def _include_view(cfg: ModelConfig) -> ModelConfig:
    """The same weights read as a plain encoder that sees ``[MASK]`` in place."""
    return cfg.__class__.from_dict({**cfg.to_dict(), "mask_mode": "include", "delta": 0.0})


def layer_views(acts, params) -> list[np.ndarray]:
    """``[H^0 .. H^L]`` as analysed: the residual stream for ``l < L`` and the
    encoder output (after the final LayerNorm) for the last layer, since that
    is the representation the prediction head and fine-tuning read."""
    return [a.data for a in acts[:-1]] + [encoder_output(acts[-1], params).data]


def masked_activations(tokens, params, cfg: ModelConfig, rng, *, view: ModelConfig | None = None):
    """Per-layer encoder activations on masked inputs, flattened to rows, and the [MASK] row mask."""
    view = view or _include_view(cfg)
    plans = make_plans(tokens, view, rng)
    enc_in = build_encoder_inputs(tokens, plans, params, view, rng)
    acts = encode(enc_in.h0, enc_in.positions, params, view)
    d = acts[0].shape[-1]
    corrupted = np.stack([p.corrupted_tokens(row) for p, row in zip(plans, np.atleast_2d(tokens))])
    kept = np.take_along_axis(corrupted, enc_in.retained, axis=1)
    return [a.reshape(-1, d) for a in layer_views(acts, params)], (kept == MASK_ID).reshape(-1)


def clean_activations(tokens, params, cfg: ModelConfig) -> list[np.ndarray]:
    acts = encode_tokens(tokens, params, cfg)
    d = acts[0].shape[-1]
    return [a.reshape(-1, d) for a in layer_views(acts, params)]


def rank_gap_report(
    mlm: tuple[dict, ModelConfig],
    maelm: tuple[dict, ModelConfig] | None,
    batches: Iterable[np.ndarray],
    tau: float,
    mask_seed: int = 0,
) -> RankReport:
    """Per-layer ``rank_tau`` of pooled encoder activations.

    ``MLM w. [MASK]``: the MLM encoder on masked inputs (masks drawn from
    ``mask_seed``). ``MLM w/o. [MASK]``: the same inputs unmasked.
    ``MAE-LM``: the MAE-LM encoder on the unmasked inputs, as it would be
    used downstream.
    """
    mlm_params, mlm_cfg = mlm
    rng = np.random.default_rng(mask_seed)
    pools: dict[str, list[list[np.ndarray]]] = {c: [] for c in CONFIG_LABELS}
    for tokens in batches:
        with_mask, _ = masked_activations(tokens, mlm_params, mlm_cfg, rng)
        pools[CONFIG_LABELS[0]].append(with_mask)
        pools[CONFIG_LABELS[1]].append(clean_activations(tokens, mlm_params, mlm_cfg))
        if maelm is not None:
            pools[CONFIG_LABELS[2]].append(clean_activations(tokens, *maelm))
    rows: list[RankRow] = []
    for label in CONFIG_LABELS:
        per_batch = pools[label]
        if not per_batch:
            continue
        for layer in range(len(per_batch[0])):
            k, n = _pooled_rank([b[layer] for b in per_batch], tau, f"{label} layer {layer}")
            rows.append(RankRow(layer, label, tau, k, n))
    return RankReport(rows)


@dataclass
class Lemma1Report:
    tau: float
    ranks: list[int]  # rank_tau of [MASK]-row activations, layer 0..L
    numerical_rank_mask_input: int
    numerical_rank_positions: int
    tokens: int

    def input_bound_holds(self) -> bool:
        return self.numerical_rank_mask_input <= self.numerical_rank_positions + 1


def lemma1_report(mlm: tuple[dict, ModelConfig], batches: Iterable[np.ndarray], tau: float, mask_seed: int = 0) -> Lemma1Report:
    """Effective rank of the ``[MASK]`` rows at every layer of an MLM encoder.

    Also measures the numerical rank (``tau = 1``) of the layer-0 mask rows
    and of the position embeddings at the masked positions, whose relation
    ``rank(H_M^0) <= rank(P_M) + 1`` follows from ``H_M^0 = 1 e^T + P_M``.
    """
    params, cfg = mlm
    rng = np.random.default_rng(mask_seed)
    view = _include_view(cfg)
    pools: list[list[np.ndarray]] = []
    pos_rows: list[np.ndarray] = []
    for tokens in batches:
        tokens = np.atleast_2d(tokens)
        plans = make_plans(tokens, view, rng)
        enc_in = build_encoder_inputs(tokens, plans, params, view, rng)
        acts = encode(enc_in.h0, enc_in.positions, params, view)
        corrupted = np.stack([p.corrupted_tokens(row) for p, row in zip(plans, tokens)])
        is_mask = corrupted == MASK_ID
        pools.append([a[is_mask] for a in layer_views(acts, params)])
        pos_rows.append(params["pos_emb"].data[enc_in.positions[is_mask]])
    ranks = []
    for layer in range(len(pools[0])):
        k, n = _pooled_rank([p[layer] for p in pools], tau, f"[MASK] rows layer {layer}")
        ranks.append(k)
    h_m0 = np.concatenate([p[0] for p in pools])
    p_m = np.concatenate(pos_rows)
    pos_rank = effective_rank(p_m, 1.0) if np.any(p_m) else 0
    return Lemma1Report(tau, ranks, effective_rank(h_m0, 1.0), pos_rank, h_m0.shape[0])


def token_budget_batches(chunks: np.ndarray, budget: int, batch_size: int = 32) -> list[np.ndarray]:
    """Leading chunks covering about ``budget`` tokens, as batches."""
    per = chunks.shape[1]
    count = min(len(chunks), max(1, math.ceil(budget / per)))
    return [chunks[i : min(i + batch_size, count)] for i in range(0, count, batch_size)]


def ranks_by_layer(report: RankReport, labels: Sequence[str] = CONFIG_LABELS) -> dict[str, list[int]]:
    return {lab: report.layers(lab) for lab in labels if report.layers(lab)}
