"""Command-line entry point.

Every invocation owns one run directory (``--out``, defaulting to
``$STACKLM_OUT_ROOT/<command>`` or ``./runs/<command>``) and writes exactly
one ``manifest.json`` there: the command, every resolved option, the seed,
the toolkit version, SHA-256 hashes of the file inputs and start/end
timestamps.  A rerun with an equal manifest produces equal outputs.

The ``--toy`` profile scales the pretraining recipe down by documented
factors (depth -> min(depth, 2), width -> 64, heads -> 4, head width -> 16,
sequence length -> 64, batch -> 8, vocabulary target -> 512, peak rate
1e-3 with 30 warmup steps) while keeping every structural piece of the
recipe (packing, schedule shape, clipping, loss scaling, checkpointing)
intact, so the full procedure runs in minutes on a laptop.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

from . import __version__
from . import bpe
from . import data as datap
from .cost import (
    DEFAULT_PEAK_FLOPS,
    cost_table,
    load_cost_records,
    reference_model_configs,
    render_cost_csv,
    render_cost_report,
)
from .engine import EngineConfig, TrainEngine, save_engine_checkpoint, train_loop
from .evaluation import (
    FinetuneSettings,
    FinetunedModel,
    SweepError,
    depth_sweep,
    evaluate,
    finetune,
    load_tsv_dataset,
    make_synthetic_pair_task,
    render_sweep_csv,
)
from .model import (
    ModelConfig,
    ModelParams,
    build_model,
    count_params,
    load_checkpoint,
    load_config,
    save_checkpoint,
)
from .optim import BERT_PRETRAIN_SCHEDULE, GPT_PRETRAIN_SCHEDULE, TrainSchedule

TOY_PROFILE = {
    "d_layer": 64,
    "n_heads": 4,
    "d_head": 16,
    "max_seq_len": 64,
    "batch_size": 8,
    "vocab_target": 512,
    "peak_lr": 1e-3,
    "min_lr": 1e-4,
    "warmup_steps": 30,
    "max_depth": 2,
}


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunDirectory:
    """Owns one output directory and its manifest."""

    def __init__(self, command: str, out: Optional[str]):
        root = os.environ.get("STACKLM_OUT_ROOT", "runs")
        self.path = Path(out) if out else Path(root) / command
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.started = time.time()
        self.inputs: dict[str, str] = {}
        self.options: dict[str, object] = {}

    def record_input(self, role: str, path: Optional[str]) -> None:
        if path:
            self.inputs[role] = f"sha256:{_sha256(path)}"

    def file(self, name: str) -> str:
        return str(self.path / name)

    def finalize(self, seed: Optional[int]) -> None:
        manifest = {
            "command": self.command,
            "options": self.options,
            "seed": seed,
            "toolkit_version": __version__,
            "input_hashes": self.inputs,
            "started_unix": self.started,
            "finished_unix": time.time(),
        }
        with open(self.file("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _apply_toy_profile(cfg: ModelConfig) -> ModelConfig:
    return dataclasses.replace(
        cfg,
        n_layers=min(cfg.n_layers, TOY_PROFILE["max_depth"]),
        d_layer=TOY_PROFILE["d_layer"],
        n_heads=TOY_PROFILE["n_heads"],
        d_head=TOY_PROFILE["d_head"],
        max_seq_len=TOY_PROFILE["max_seq_len"],
    )


def _resolve_vocab(args, run: RunDirectory, corpus_docs: list[str], target: int) -> bpe.TokenizerVocab:
    if getattr(args, "vocab", None):
        run.record_input("vocab", args.vocab)
        return bpe.load_vocab(args.vocab)
    vocab = bpe.train_bpe(corpus_docs, target)
    bpe.save_vocab(vocab, run.file("vocab.txt"))
    return vocab


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_tokenize_train(args) -> int:
    run = RunDirectory("tokenize-train", args.out)
    run.record_input("corpus", args.corpus)
    run.options = {"corpus": args.corpus, "vocab_size": args.vocab_size}
    docs = datap.read_documents(args.corpus)
    vocab = bpe.train_bpe(docs, args.vocab_size)
    bpe.save_vocab(vocab, run.file("vocab.txt"))
    streams = datap.encode_corpus(docs, vocab)
    datap.write_token_cache(run.file("tokens"), streams)
    print(f"trained vocabulary of {vocab.size} tokens ({len(vocab.merges)} merges) -> {run.file('vocab.txt')}")
    run.finalize(args.seed)
    return 0


def _pretrain_schedule(family: str, steps: int, toy: bool) -> TrainSchedule:
    if toy:
        return TrainSchedule(
            TOY_PROFILE["peak_lr"], TOY_PROFILE["min_lr"],
            min(TOY_PROFILE["warmup_steps"], steps), steps,
            "linear" if family == "encoder-only" else "cosine",
        )
    base = BERT_PRETRAIN_SCHEDULE if family == "encoder-only" else GPT_PRETRAIN_SCHEDULE
    return base


def cmd_pretrain(args) -> int:
    run = RunDirectory("pretrain", args.out)
    run.record_input("config", args.config)
    run.record_input("corpus", args.corpus)
    cfg = load_config(args.config)
    if args.toy:
        cfg = _apply_toy_profile(cfg)
    docs = datap.read_documents(args.corpus)
    target = TOY_PROFILE["vocab_target"] if args.toy else cfg.vocab_size
    vocab = _resolve_vocab(args, run, docs, target)
    cfg = dataclasses.replace(cfg, vocab_size=vocab.size)

    batch_size = args.batch_size or (TOY_PROFILE["batch_size"] if args.toy else 8)
    run.options = {
        "config": args.config, "corpus": args.corpus, "steps": args.steps,
        "batch_size": batch_size, "toy": args.toy, "shards": args.shards,
        "recompute": args.recompute, "loss_scaler": not args.no_loss_scaler,
        "resolved_model_config": dataclasses.asdict(cfg),
    }

    streams = datap.encode_corpus(docs, vocab)
    packed = datap.pack_documents(streams, cfg.max_seq_len, vocab.eod_id, vocab.pad_id)
    if cfg.family == "encoder-only":
        policy = datap.MaskingPolicy()
        batch_fn = lambda k: datap.make_mlm_batch(packed, k, batch_size, policy, vocab, seed=args.seed)
    elif cfg.family == "encoder-decoder":
        batch_fn = lambda k: datap.make_seq2seq_batch(packed, k, batch_size, eod_id=vocab.eod_id)
    else:
        batch_fn = lambda k: datap.make_lm_batch(packed, k, batch_size)

    schedule = _pretrain_schedule(cfg.family, args.steps, args.toy)
    engine_cfg = EngineConfig(
        schedule=schedule,
        use_loss_scaler=not args.no_loss_scaler,
        recompute_activations=args.recompute,
        seed=args.seed,
    )
    params = build_model(cfg, seed=args.seed)
    engine = TrainEngine(params, cfg, engine_cfg)
    with open(run.file("metrics.jsonl"), "w", encoding="utf-8") as stream:
        history = train_loop(engine, batch_fn, args.steps, metrics_stream=stream, n_shards=args.shards)
    save_checkpoint(run.file("model.npz"), params, cfg, extra={"steps": args.steps, "seed": args.seed})
    save_engine_checkpoint(run.file("engine.npz"), engine)
    first, last = history[0].loss, history[-1].loss
    print(f"pretrained {cfg.family} ({cfg.n_layers} layers, d={cfg.d_layer}) for {args.steps} steps")
    print(f"loss {first:.4f} -> {last:.4f}; artifacts in {run.path}")
    run.finalize(args.seed)
    return 0


def cmd_finetune(args) -> int:
    run = RunDirectory("finetune", args.out)
    for role in ("checkpoint", "vocab", "train", "dev"):
        run.record_input(role, getattr(args, role, None))
    params, cfg, _ = load_checkpoint(args.checkpoint)
    vocab = bpe.load_vocab(args.vocab)
    train_set = load_tsv_dataset(args.train, "train")
    settings = FinetuneSettings(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        max_steps=args.steps, seed=args.seed,
    )
    run.options = {
        "checkpoint": args.checkpoint, "train": args.train, "dev": args.dev,
        "head": args.head, "settings": dataclasses.asdict(settings),
    }
    model = finetune(params, cfg, vocab, train_set, args.head, settings)
    save_checkpoint(
        run.file("finetuned.npz"), model.params, cfg,
        extra={"head": args.head, "label_vocab": model.label_vocab},
    )
    with open(run.file("metrics.jsonl"), "w", encoding="utf-8") as fh:
        for m in model.history:
            fh.write(m.to_json() + "\n")
    print(f"fine-tuned {len(model.history)} steps; head={args.head}; saved {run.file('finetuned.npz')}")
    if args.dev:
        dev = load_tsv_dataset(args.dev, "dev", label_vocab=model.label_vocab)
        metrics = evaluate(model, vocab, dev)
        print(_metrics_line(metrics))
        _write_metrics_json(run, metrics)
    run.finalize(args.seed)
    return 0


def _metrics_line(metrics) -> str:
    parts = [f"accuracy={metrics.accuracy:.4f}"]
    if metrics.precision is not None:
        parts = [
            f"precision={metrics.precision:.4f}",
            f"recall={metrics.recall:.4f}",
            f"f1={metrics.f1:.4f}",
        ] + parts
    return "  ".join(parts)


def _write_metrics_json(run: RunDirectory, metrics) -> None:
    payload = {
        "accuracy": metrics.accuracy,
        "precision": metrics.precision,
        "recall": metrics.recall,
        "f1": metrics.f1,
        "confusion": metrics.confusion,
    }
    with open(run.file("metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def cmd_eval(args) -> int:
    run = RunDirectory("eval", args.out)
    for role in ("checkpoint", "vocab", "data"):
        run.record_input(role, getattr(args, role))
    params, cfg, extra = load_checkpoint(args.checkpoint)
    vocab = bpe.load_vocab(args.vocab)
    label_vocab = extra.get("label_vocab")
    dataset = load_tsv_dataset(args.data, args.split, label_vocab=label_vocab)
    model = FinetunedModel(params, cfg, extra.get("head", "pair-classifier"), label_vocab or dataset.label_vocab, [])
    metrics = evaluate(model, vocab, dataset, positive_label=args.positive_label)
    run.options = {"checkpoint": args.checkpoint, "data": args.data, "split": args.split}
    print(_metrics_line(metrics))
    _write_metrics_json(run, metrics)
    run.finalize(args.seed)
    return 0


def cmd_sweep(args) -> int:
    run = RunDirectory("sweep", args.out)
    run.record_input("config", args.config)
    cfg = load_config(args.config)
    if args.toy:
        cfg = _apply_toy_profile(cfg)
    depths = [int(d) for d in args.depths.split(",")]
    if args.train:
        run.record_input("train", args.train)
        run.record_input("dev", args.dev)
        train_set = load_tsv_dataset(args.train, "train")
        dev_set = load_tsv_dataset(args.dev, "dev", label_vocab=train_set.label_vocab)
        vocab = bpe.load_vocab(args.vocab)
    else:
        # bundled synthetic task so the sweep procedure runs out of the box
        from .evaluation import synthetic_task_vocab

        train_set = make_synthetic_pair_task(args.task_examples, seed=args.seed, split="train")
        dev_set = make_synthetic_pair_task(max(8, args.task_examples // 4), seed=args.seed, split="dev")
        vocab = synthetic_task_vocab()
    cfg = dataclasses.replace(cfg, vocab_size=vocab.size)
    settings = FinetuneSettings(
        learning_rate=args.lr, max_steps=args.budget, batch_size=args.batch_size, seed=args.seed
    )
    run.options = {
        "config": args.config, "depths": depths, "budget": args.budget,
        "toy": args.toy, "settings": dataclasses.asdict(settings),
    }
    name = Path(args.config).stem
    try:
        result = depth_sweep(cfg, depths, vocab, train_set, dev_set, settings, build_seed=args.seed)
    except SweepError as exc:
        with open(run.file("sweep_partial.csv"), "w", encoding="utf-8") as fh:
            fh.write(render_sweep_csv(name, exc.partial))
        print(f"sweep aborted: {exc}", file=sys.stderr)
        print(f"partial results: {run.file('sweep_partial.csv')}", file=sys.stderr)
        run.finalize(args.seed)
        return 1
    csv_text = render_sweep_csv(name, result.rows)
    with open(run.file("sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    print(csv_text, end="")
    print(f"best depth by dev accuracy (ties to smaller): {result.best_depth}")
    run.finalize(args.seed)
    return 0


def cmd_cost(args) -> int:
    run = RunDirectory("cost", args.out)
    run.record_input("table", args.table)
    records = load_cost_records(args.table, peak_rate=args.peak_rate)
    configs = reference_model_configs()
    rows = cost_table(configs, records)
    report = render_cost_report(rows)
    print(report, end="")
    with open(run.file("cost_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report)
    with open(run.file("cost_report.csv"), "w", encoding="utf-8") as fh:
        fh.write(render_cost_csv(rows))
    run.options = {"table": args.table or "<bundled>", "peak_rate": args.peak_rate}
    run.finalize(args.seed)
    return 0


def cmd_count_params(args) -> int:
    run = RunDirectory("count-params", args.out)
    run.record_input("config", args.config)
    cfg = load_config(args.config)
    total = count_params(cfg)
    run.options = {"config": args.config, "count": total}
    print(f"{total} parameters ({total:.4g}) for {Path(args.config).stem}: "
          f"{cfg.family}, {cfg.n_layers} layers, d={cfg.d_layer}, vocab={cfg.vocab_size}")
    run.finalize(args.seed)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stacklm",
        description="Desk-scale pretraining, fine-tuning and depth sweeps for stacked transformer language models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
        p.add_argument("--out", help="run directory (default $STACKLM_OUT_ROOT/<command>)")

    p = sub.add_parser("tokenize-train", help="train a byte-level BPE vocabulary and cache the encoded corpus")
    p.add_argument("--corpus", required=True, help="plain-text corpus, blank-line separated documents")
    p.add_argument("--vocab-size", type=int, required=True)
    common(p)
    p.set_defaults(fn=cmd_tokenize_train)

    p = sub.add_parser("pretrain", help="pretrain a model from a config on a text corpus")
    p.add_argument("--config", required=True, help="model config file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", help="existing vocabulary file (default: train one)")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--shards", type=int, default=1, help="simulated data-parallel shards")
    p.add_argument("--toy", action="store_true", help="scale the config down to the toy profile")
    p.add_argument("--recompute", action="store_true", help="recompute activations during backward")
    p.add_argument("--no-loss-scaler", action="store_true", help="disable dynamic loss scaling")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune an encoder checkpoint for classification")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--train", required=True, help="TSV with text_a, text_b, label")
    p.add_argument("--dev", help="optional dev TSV, evaluated after training")
    p.add_argument("--head", choices=["pair-classifier", "single-classifier"], default="pair-classifier")
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--steps", type=int, help="hard step budget (overrides epochs)")
    p.add_argument("--batch-size", type=int, default=16)
    common(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="dev")
    p.add_argument("--positive-label")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="train the same model at several depths and report the best")
    p.add_argument("--config", required=True)
    p.add_argument("--depths", required=True, help="comma-separated layer counts")
    p.add_argument("--train", help="TSV train set (default: bundled synthetic task)")
    p.add_argument("--dev", help="TSV dev set")
    p.add_argument("--vocab", help="vocabulary file (required with --train)")
    p.add_argument("--budget", type=int, default=60, help="fine-tune steps per depth")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--task-examples", type=int, default=64)
    p.add_argument("--toy", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("cost", help="reproduce the published compute accounting")
    p.add_argument("--table", help="cost CSV (default: bundled reference table)")
    p.add_argument("--peak-rate", type=float, default=DEFAULT_PEAK_FLOPS, help="per-device flops/s")
    common(p)
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("count-params", help="analytic parameter count for a config")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(fn=cmd_count_params)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"stacklm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
