"""Encoder-only fine-tuning on a separable two-class toy task."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import load_checkpoint
from .data import probe_task
from .model import ModelConfig, StructuralError, encode_tokens, encoder_output
from .tensor import Tensor, backward, cross_entropy_masked, graph_leaves, index, matmul, add, zero_grad
from .train import AdamState, adam_step, clip_global_norm
from .vocab import MASK_ID


class EncoderOnlyParams(dict):
    """Parameter map with the decoder removed; asking for a decoder weight is a structural error."""

    def __missing__(self, key):
        if isinstance(key, str) and key.startswith("dec."):
            raise StructuralError(f"decoder weight {key!r} is absent from the fine-tuning model")
        raise KeyError(key)


def encoder_view(params, cfg: ModelConfig) -> tuple[EncoderOnlyParams, ModelConfig]:
    """Drop the decoder: weights are discarded and the config loses its decoder."""
    enc = EncoderOnlyParams({k: v for k, v in params.items() if not k.startswith("dec.")})
    return enc, replace(cfg, dec_layers=0, mask_mode="include", delta=0.0, dropout=0.0)


def probe_logits(tokens, params, head_w: Tensor, head_b: Tensor, cfg: ModelConfig) -> Tensor:
    acts = encode_tokens(tokens, params, cfg)
    cls = index(encoder_output(acts[-1], params), (slice(None), 0))
    return add(matmul(cls, head_w), head_b)


@dataclass
class ProbeResult:
    accuracy: float
    chance_accuracy: float  # untrained head on the same held-out split
    steps: int
    leaf_names: list[str]

    @property
    def decoder_in_graph(self) -> bool:
        return any(n.startswith("dec.") for n in self.leaf_names)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "chance_accuracy": self.chance_accuracy,
            "steps": self.steps,
            "decoder_in_graph": self.decoder_in_graph,
        }


def _accuracy(tokens, labels, params, head_w, head_b, cfg, batch: int = 128) -> float:
    hits = 0
    for i in range(0, len(tokens), batch):
        logits = probe_logits(tokens[i : i + batch], params, head_w, head_b, cfg).data
        hits += int((logits.argmax(axis=1) == labels[i : i + batch]).sum())
    return hits / len(tokens)


def finetune_probe(
    source,
    *,
    steps: int = 300,
    length: int = 31,
    n_train: int = 2048,
    n_test: int = 512,
    batch: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> ProbeResult:
    """Fine-tune the encoder plus a linear head on the ``[CLS]`` output.

    ``source`` is a checkpoint path or a ``(params, config)`` pair. Decoder
    weights are never loaded. Returns held-out accuracy before and after
    training.
    """
    if isinstance(source, tuple):
        params, cfg = source
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items() if not k.startswith("dec.")}
    else:
        ck = load_checkpoint(source)
        params, cfg = ck.params(include_decoder=False), ck.config
    params, cfg = encoder_view(params, cfg)
    if length + 1 > cfg.max_len:
        raise ValueError(f"probe length {length} does not fit max_len {cfg.max_len}")
    rng = np.random.default_rng(seed)
    x_train, y_train = probe_task(cfg.vocab_size, n_train, length, rng)
    x_test, y_test = probe_task(cfg.vocab_size, n_test, length, rng)
    assert not np.any(x_train == MASK_ID) and not np.any(x_test == MASK_ID)
    d = params["tok_emb"].shape[1]
    head_w = Tensor(rng.normal(0.0, 0.02, (d, 2)), requires_grad=True, name="head.w")
    head_b = Tensor(np.zeros(2), requires_grad=True, name="head.b")
    chance = _accuracy(x_test, y_test, params, head_w, head_b, cfg)

    trainable = dict(params)
    trainable.update({"head.w": head_w, "head.b": head_b})
    state = AdamState.zeros_like(trainable)
    leaves: list[str] = []
    for step in range(steps):
        idx = rng.choice(n_train, size=batch, replace=False)
        logits = probe_logits(x_train[idx], params, head_w, head_b, cfg)
        loss = cross_entropy_masked(logits, y_train[idx])
        if step == 0:
            leaves = sorted(t.name for t in graph_leaves(loss) if t.name)
        zero_grad(trainable.values())
        backward(loss)
        grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
        adam_step(trainable, clip_global_norm(grads, 1.0), state, lr * (1.0 - step / steps))
    if not leaves:
        logits = probe_logits(x_train[:batch], params, head_w, head_b, cfg)
        leaves = sorted(t.name for t in graph_leaves(cross_entropy_masked(logits, y_train[:batch])) if t.name)
    zero_grad(trainable.values())
    acc = _accuracy(x_test, y_test, params, head_w, head_b, cfg)
    return ProbeResult(acc, chance, steps, leaves)
