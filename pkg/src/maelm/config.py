"""Flat ``key = value`` run configuration files."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .model import ModelConfig
from .train import TrainRunConfig

SEED_ENV = "MAELM_SEED"
AUTO = "auto"

# key -> (default, type); the defaults are the shipped toy configuration
DEFAULTS: dict[str, tuple[object, type]] = {
    "model.enc_layers": (4, int),
    "model.dec_layers": (AUTO, int),
    "model.dim": (128, int),
    "model.dec_dim": (AUTO, int),
    "model.heads": (4, int),
    "model.ffn_dim": (AUTO, int),
    "model.max_len": (128, int),
    "model.relative_bias": (True, bool),
    "model.aligned_positions": (True, bool),
    "model.mask_mode": ("exclude", str),
    "model.decoder_attn": ("bi-self", str),
    "model.delta": (0.0, float),
    "train.steps": (2000, int),
    "train.peak_lr": (1e-3, float),
    "train.warmup": (100, int),
    "train.batch": (8, int),
    "train.clip": (2.0, float),
    "train.seed": (0, int),
    "train.checkpoint_every": (250, int),
    "data.corpus": (None, str),
    "data.tokenizer": ("char", str),
    "data.seq_len": (63, int),
    "data.min_freq": (1, int),
    "analysis.tau": (0.9, float),
    "analysis.tokens_budget": (50000, int),
}


class ConfigFileError(ValueError):
    """A malformed, unknown, or missing configuration entry."""


def _convert(key: str, raw: str):
    default, kind = DEFAULTS[key]
    raw = raw.strip()
    if default == AUTO and raw.lower() == AUTO:
        return AUTO
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigFileError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def format_value(v) -> str:
    if v is None:
        return "(required)"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_lines(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


@dataclass
class RunConfigFile:
    values: dict[str, object]
    base_dir: Path

    @classmethod
    def load(cls, path=None, overrides: list[str] | None = None) -> RunConfigFile:
        values = {k: d for k, (d, _) in DEFAULTS.items()}
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigFileError(f"cannot read config {path}: {exc.strerror}") from None
            values.update(parse_lines(text, str(path)))
            base = path.resolve().parent
        if overrides:
            values.update(parse_lines("\n".join(overrides), "--set"))
        env = os.environ.get(SEED_ENV)
        if env is not None and env.strip():
            values["train.seed"] = _convert("train.seed", env)
        return cls(values, base)

    def __getitem__(self, key: str):
        return self.values[key]

    def corpus_path(self) -> Path:
        raw = self.values["data.corpus"]
        if raw is None:
            raise ConfigFileError("data.corpus is not set")
        path = Path(str(raw))
        if not path.is_absolute():
            path = (self.base_dir / path).resolve()
        if not path.is_file():
            raise ConfigFileError(f"data.corpus: no such file {path}")
        return path

    def model_config(self, vocab_size: int) -> ModelConfig:
        v = self.values
        auto = lambda key: None if v[key] == AUTO else v[key]  # noqa: E731
        try:
            return ModelConfig(
                enc_layers=v["model.enc_layers"],
                dec_layers=auto("model.dec_layers"),
                dim=v["model.dim"],
                dec_dim=auto("model.dec_dim"),
                heads=v["model.heads"],
                ffn_dim=auto("model.ffn_dim"),
                vocab_size=vocab_size,
                max_len=v["model.max_len"],
                relative_bias=v["model.relative_bias"],
                aligned_positions=v["model.aligned_positions"],
                mask_mode=v["model.mask_mode"],
                decoder_attn=v["model.decoder_attn"],
                delta=v["model.delta"],
            )
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from None

    def run_config(self) -> TrainRunConfig:
        v = self.values
        try:
            return TrainRunConfig(
                steps=v["train.steps"],
                peak_lr=v["train.peak_lr"],
                warmup=v["train.warmup"],
                batch=v["train.batch"],
                clip=v["train.clip"],
                seed=v["train.seed"],
                checkpoint_every=v["train.checkpoint_every"],
            )
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from None

    def dump(self) -> str:
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in DEFAULTS)


def keys_help() -> str:
    width = max(len(k) for k in DEFAULTS)
    return "\n".join(f"  {k.ljust(width)}  {format_value(d)}" for k, (d, _) in DEFAULTS.items())
