"""Command-line entry point: ``maelm <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigFileError, RunConfigFile, keys_help
from .data import chunk_ids
from .model import ConfigError, StructuralError
from .probe import finetune_probe
from .rank import InsufficientSampleError, UndefinedRankError, lemma1_report, rank_gap_report, token_budget_batches
from .tensor import TensorError
from .theory import theorem_sweep
from .train import DivergedTrainingError, make_stream, train_mlm
from .vocab import DataError, Vocab, build_vocab

EXIT_OK, EXIT_CONTRACT, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3

CONTRACT_ERRORS = (
    ConfigFileError, ConfigError, DataError, CheckpointError, TensorError,
    InsufficientSampleError, UndefinedRankError, StructuralError, ValueError, OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_config(args) -> RunConfigFile:
    return RunConfigFile.load(args.config, args.set)


def _corpus(rc: RunConfigFile) -> tuple[Vocab, np.ndarray]:
    path = rc.corpus_path()
    vocab = build_vocab(path, rc["data.tokenizer"], rc["data.min_freq"])
    seq_len = rc["data.seq_len"]
    if seq_len > rc["model.max_len"] - 1:
        raise ConfigFileError(f"data.seq_len {seq_len} leaves no room for [CLS] within model.max_len")
    text = path.read_text(encoding="utf-8")
    return vocab, chunk_ids(vocab.encode(text), seq_len)


def _train(rc: RunConfigFile, out: Path, cfg=None, resume=None) -> dict:
    vocab, chunks = _corpus(rc)
    cfg = cfg or rc.model_config(len(vocab))
    run = rc.run_config()
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    (out / "config.txt").write_text(rc.dump(), encoding="utf-8")

    def progress(rec):
        if rec["split"] == "valid" or rec["step"] % 100 == 0:
            _log(f"step {rec['step']:>6} {rec['split']:<5} loss {rec['loss']:.4f}")

    _, records = train_mlm(cfg, run, make_stream(chunks, run), out_dir=out, resume_from=resume, on_record=progress)
    valid = [r for r in records if r["split"] == "valid"]
    return {"final_valid_loss": valid[-1]["loss"] if valid else None, "steps": run.steps}


def cmd_pretrain(args) -> int:
    rc = _load_config(args)
    summary = _train(rc, Path(args.out), resume=args.resume)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _final_checkpoint(path) -> Path:
    path = Path(path)
    if path.is_dir():
        found = sorted((path / "checkpoints").glob("step_*.ckpt")) or sorted(path.glob("step_*.ckpt"))
        if not found:
            raise ConfigFileError(f"no checkpoints under {path}")
        return found[-1]
    return path


def cmd_analyze_rank(args) -> int:
    rc = _load_config(args)
    _, chunks = _corpus(rc)
    mlm = load_checkpoint(_final_checkpoint(args.mlm))
    maelm = load_checkpoint(_final_checkpoint(args.maelm)) if args.maelm else None
    stream = make_stream(chunks, rc.run_config())
    batches = token_budget_batches(stream.valid, rc["analysis.tokens_budget"])
    tau = rc["analysis.tau"]
    mlm_pair = (mlm.params(), mlm.config)
    report = rank_gap_report(mlm_pair, (maelm.params(), maelm.config) if maelm else None, batches, tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "rank_report.csv")
    lemma = lemma1_report(mlm_pair, batches, tau)
    (out / "lemma1_report.json").write_text(
        json.dumps({
            "tau": tau, "mask_row_ranks": lemma.ranks, "tokens": lemma.tokens,
            "numerical_rank_mask_input": lemma.numerical_rank_mask_input,
            "numerical_rank_positions": lemma.numerical_rank_positions,
            "input_bound_holds": lemma.input_bound_holds(),
        }, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    summary, rows = theorem_sweep(args.seeds, args.chains)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        body = {"construction": "synthetic", "summary": summary.to_json(), "instances": rows}
        (out / "theorem_report.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(summary.line())
    print(f"{summary.out_of_regime} out-of-regime; elementwise sandwich failed on {summary.sandwich_fail} in-regime instances")
    if args.chains:
        print(f"{summary.depth_pass}/{summary.depth_total} depth chains pass")
    ok = summary.fail == 0 and summary.depth_pass == summary.depth_total
    return EXIT_OK if ok else EXIT_VERIFY


def _parse_list(raw: str | None, kind):
    if raw is None:
        return None
    try:
        return [kind(x.strip()) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {raw!r}") from None


def cmd_ablate(args) -> int:
    rc = _load_config(args)
    vocab, _ = _corpus(rc)
    base = rc.model_config(len(vocab))
    modes = _parse_list(args.mask_modes, str) or [base.mask_mode]
    attns = _parse_list(args.decoder_attn, str) or [base.decoder_attn]
    deltas = _parse_list(args.delta, float) or [base.delta]
    out = Path(args.out)
    cells = []
    for mode in modes:
        for attn in attns:
            for delta in deltas:
                cfg = replace(base, mask_mode=mode, decoder_attn=attn, delta=delta)
                name = f"{mode}__{attn}__delta{delta:g}"
                _log(f"cell {name}")
                summary = _train(rc, out / name, cfg)
                cells.append({"cell": name, "mask_mode": mode, "decoder_attn": attn, "delta": delta, **summary})
    (out / "ablation.json").write_text(json.dumps(cells, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for c in cells:
        print(f"{c['cell']}\t{c['final_valid_loss']:.4f}")
    return EXIT_OK


def cmd_finetune_probe(args) -> int:
    result = finetune_probe(_final_checkpoint(args.checkpoint), steps=args.steps, seed=args.seed)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"accuracy {result.accuracy:.4f} (untrained head {result.chance_accuracy:.4f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="maelm",
        description="Masked-autoencoder language model experiments at toy scale.",
        epilog="config keys (flat key = value file; defaults shown):\n" + keys_help()
        + "\n\nMAELM_SEED, when set, overrides train.seed.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.epilog = "config keys (defaults shown):\n" + keys_help()
        p.formatter_class = argparse.RawDescriptionHelpFormatter
        return p

    p = with_config(sub.add_parser("pretrain", help="train an MLM or MAE-LM model"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = with_config(sub.add_parser("analyze-rank", help="per-layer effective rank report"))
    p.add_argument("--mlm", required=True, help="MLM checkpoint or pretrain output directory")
    p.add_argument("--maelm", help="MAE-LM checkpoint or pretrain output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_rank)

    p = sub.add_parser("verify-theory", help="seeded residual-bound checks on synthetic instances")
    p.add_argument("--seeds", type=int, default=200)
    p.add_argument("--chains", type=int, default=50, help="number of 3-layer depth chains")
    p.add_argument("--out", help="directory for theorem_report.json")
    p.set_defaults(func=cmd_verify_theory)

    p = with_config(sub.add_parser("ablate", help="train one model per grid cell"))
    p.add_argument("--out", required=True)
    p.add_argument("--delta", help="comma-separated delta values")
    p.add_argument("--mask-modes", help="comma-separated mask modes")
    p.add_argument("--decoder-attn", help="comma-separated decoder attention modes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("finetune-probe", help="encoder-only fine-tuning on a toy task")
    p.add_argument("--checkpoint", required=True, help="checkpoint or pretrain output directory")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("maelm: a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        _log(str(exc))
        _log(parser.format_usage().rstrip())
        return EXIT_CONTRACT
    except DivergedTrainingError as exc:
        _log(f"error: {exc}")
        return EXIT_DIVERGED
    except CONTRACT_ERRORS as exc:
        _log(f"error: {exc}")
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
