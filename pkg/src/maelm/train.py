"""Pretraining loop: schedule, clipping, Adam with decoupled decay, metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .data import BatchStream
from .model import ModelConfig, forward, init_params, make_plans, mlm_loss
from .tensor import Tensor, TensorError, backward, zero_grad

BETAS = (0.9, 0.98)
ADAM_EPS = 1e-6
WEIGHT_DECAY = 0.01
VALID_SEED = 12345  # fixed masks for every validation pass
STREAMS = ("init", "data", "mask", "dropout")


class DivergedTrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainRunConfig:
    steps: int = 2000
    peak_lr: float = 1e-3
    warmup: int = 100
    batch: int = 8
    clip: float = 2.0
    seed: int = 0
    checkpoint_every: int = 250

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("train.steps must be positive")
        if not 0 <= self.warmup < self.steps:
            raise ValueError(f"train.warmup must lie in [0, steps), got {self.warmup}")
        if self.clip <= 0:
            raise ValueError("train.clip must be positive")
        if self.batch < 1 or self.checkpoint_every < 1:
            raise ValueError("train.batch and train.checkpoint_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_step(t: int, cfg: TrainRunConfig) -> float:
    """Linear warmup from 0 to the peak, then linear decay to 0 at ``cfg.steps``."""
    if not 0 <= t <= cfg.steps:
        raise ValueError(f"step {t} outside [0, {cfg.steps}]")
    if t <= cfg.warmup:
        return cfg.peak_lr * t / cfg.warmup if cfg.warmup else cfg.peak_lr
    return cfg.peak_lr * (cfg.steps - t) / (cfg.steps - cfg.warmup)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> AdamState:
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = WEIGHT_DECAY,
) -> AdamState:
    """Bias-corrected Adam with decay applied straight to the weights.

    Parameters are updated in place; the returned state is ``state`` itself.
    """
    b1, b2 = BETAS
    full = {k: grads[k] if grads.get(k) is not None else np.zeros_like(p.data) for k, p in params.items()}
    for k, p in params.items():
        shapes = {full[k].shape, state.m.get(k, p.data).shape, state.v.get(k, p.data).shape}
        if shapes != {p.shape}:
            raise TensorError(f"shape mismatch for {k}: param {p.shape}, others {sorted(shapes)}")
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = full[k]
        m = state.m[k] = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v.get(k, 0.0) + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data = p.data - lr * (update + weight_decay * p.data)
    return state


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per purpose, so changing one consumer leaves the others alone."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def evaluate(params, cfg: ModelConfig, stream: BatchStream, batch_size: int = 64) -> float:
    """Mean masked-token loss over the validation split with fixed masks and no dropout."""
    rng = np.random.default_rng(VALID_SEED)
    total, count = 0.0, 0
    for batch in stream.valid_batches(batch_size):
        plans = make_plans(batch.tokens, cfg, rng)
        out = forward(batch.tokens, plans, params, cfg, rng=rng)
        k = len(out.targets)
        total += mlm_loss(out.logits, out.targets).item() * k
        count += k
    if count == 0:
        raise ValueError("validation split is empty")
    return total / count


@dataclass
class TrainState:
    params: dict[str, Tensor]
    adam: AdamState
    rngs: dict[str, np.random.Generator]
    stream: BatchStream
    step: int = 0


def new_state(cfg: ModelConfig, run: TrainRunConfig, stream: BatchStream) -> TrainState:
    rngs = rng_streams(run.seed)
    params = init_params(cfg, rngs["init"])
    return TrainState(params, AdamState.zeros_like(params), rngs, stream)


def make_stream(chunks: np.ndarray, run: TrainRunConfig) -> BatchStream:
    data_seed = np.random.SeedSequence(run.seed).spawn(len(STREAMS))[STREAMS.index("data")]
    return BatchStream(chunks, run.batch, data_seed)


def _record(step: int, split: str, loss: float, lr: float, grad_norm) -> dict:
    return {"step": step, "split": split, "loss": loss, "lr": lr, "grad_norm": grad_norm}


def train_step(state: TrainState, cfg: ModelConfig, run: TrainRunConfig) -> dict:
    step = state.step + 1
    batch = state.stream.next_batch()
    plans = make_plans(batch.tokens, cfg, state.rngs["mask"])
    drop = state.rngs["dropout"] if cfg.dropout > 0 else None
    out = forward(batch.tokens, plans, state.params, cfg, rng=state.rngs["mask"], dropout_rng=drop)
    loss = mlm_loss(out.logits, out.targets)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergedTrainingError(step, value)
    zero_grad(state.params.values())
    backward(loss)
    grads = {k: p.grad for k, p in state.params.items() if p.grad is not None}
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise DivergedTrainingError(step, value)
    lr = lr_at_step(step, run)
    adam_step(state.params, clip_global_norm(grads, run.clip), state.adam, lr)
    zero_grad(state.params.values())
    state.step = step
    return _record(step, "train", value, lr, norm)


def train_mlm(
    cfg: ModelConfig,
    run: TrainRunConfig,
    stream: BatchStream,
    *,
    out_dir=None,
    resume_from=None,
    stop_after: int | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run pretraining and return the final state plus every metric record.

    With ``out_dir`` set, records are appended to ``metrics.jsonl`` and
    checkpoints land in ``checkpoints/step_XXXXXX.ckpt`` every
    ``checkpoint_every`` steps and at the end. ``resume_from`` restores a
    checkpoint and continues from the step after it. ``stop_after`` halts
    early (used to produce mid-run checkpoints).
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    state = new_state(cfg, run, stream)
    records: list[dict] = []
    metrics_path = ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        if resume_from is None:
            metrics_path.write_text("")

    def emit(rec: dict) -> None:
        records.append(rec)
        if metrics_path is not None:
            with metrics_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if on_record is not None:
            on_record(rec)

    def checkpoint() -> None:
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / f"step_{state.step:06d}.ckpt", state, cfg, run)

    if resume_from is not None:
        ck = load_checkpoint(resume_from, cfg)
        ck.restore(state)
    else:
        emit(_record(0, "valid", evaluate(state.params, cfg, stream), 0.0, None))

    last = run.steps if stop_after is None else min(stop_after, run.steps)
    while state.step < last:
        emit(train_step(state, cfg, run))
        if state.step % run.checkpoint_every == 0 or state.step == run.steps:
            emit(_record(state.step, "valid", evaluate(state.params, cfg, stream), lr_at_step(state.step, run), None))
            checkpoint()
    if stop_after is not None and state.step % run.checkpoint_every and state.step != run.steps:
        checkpoint()
    return state, records
