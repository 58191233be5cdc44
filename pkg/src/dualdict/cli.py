"""Command-line entry point.

Subcommands: train, eval, query, build-vocab, grad-check, ablate.
Configuration comes from a flat key=value file with dotted keys
(model.*, train.*); --set overrides win over file values. Every run
writes a manifest recording the fully resolved configuration so an
identical invocation reproduces identical artifacts.

Exit codes: 0 success, 2 usage/config, 3 data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import __version__
from .data import (
    DataFileError,
    EmbeddingTable,
    MissingWordError,
    load_dataset,
)
from .gradcheck import run_cases
from .inference import generate_definition, reverse_lookup
from .metrics import evaluate_defmod, gold_ranks, retrieval_report
from .model import ModelConfig, UnifiedModel
from .training import (
    DivergenceError,
    TrainConfig,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)
from .vocab import Vocabulary, build_whitespace_vocab, train_unigram_vocab

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

_MODEL_KEYS = {
    "model.d_tok": int,
    "model.depth": int,
    "model.heads": int,
    "model.d_ff": int,
    "model.dropout_transformer": float,
    "model.dropout_linear": float,
    "model.dropout_token": float,
    "model.tie_embeddings": bool,
}
_TRAIN_KEYS = {
    "train.lr": float,
    "train.batch_size": int,
    "train.max_epochs": int,
    "train.patience": int,
    "train.validate_every": int,
    "train.seed": int,
    "train.task_preset": str,
    "train.active_losses": str,
}
_ALL_KEYS = {**_MODEL_KEYS, **_TRAIN_KEYS}


def _coerce_value(key: str, raw: str):
    typ = _ALL_KEYS[key]
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise UsageError(f"bad value for config key {key!r}: {raw!r}") from None


def read_config_file(path) -> dict:
    out: dict = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _ALL_KEYS:
                raise UsageError(f"{path}:{line_no}: unknown config key {key!r}")
            out[key] = _coerce_value(key, raw)
    return out


def resolve_config(args) -> dict:
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in _ALL_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        merged[key] = _coerce_value(key, raw)
    return merged


def build_configs(merged: dict, d_w: int) -> tuple[ModelConfig, TrainConfig]:
    model_kwargs = {"d_w": d_w}
    for key in _MODEL_KEYS:
        if key in merged:
            model_kwargs[key.split(".", 1)[1]] = merged[key]
    train_kwargs = {}
    for key in _TRAIN_KEYS:
        if key in merged:
            field = key.split(".", 1)[1]
            value = merged[key]
            if field == "active_losses":
                value = tuple(s.strip() for s in value.split(",") if s.strip())
            train_kwargs[field] = value
    try:
        return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, model_cfg: ModelConfig, train_cfg: TrainConfig,
                   datasets: dict, outputs: dict) -> None:
    manifest = {
        "tool_version": __version__,
        "seed": train_cfg.seed,
        "config": {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        "datasets": {
            name: {"path": str(p), "sha256": _sha256_file(p)} for name, p in datasets.items()
        },
        "outputs": {name: str(p) for name, p in outputs.items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _load_vocab_or_build(args, entries) -> Vocabulary:
    if getattr(args, "vocab", None):
        return Vocabulary.load(args.vocab)
    return build_whitespace_vocab([e.definition_text() for e in entries])


def cmd_train(args) -> int:
    merged = resolve_config(args)
    train_entries = load_dataset(args.train)
    dev_entries = load_dataset(args.dev) if args.dev else train_entries
    d_w = train_entries[0].word_vector.shape[0]

    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "model.ckpt")
    hist_path = os.path.join(args.out, "history.tsv")
    vocab_path = os.path.join(args.out, "vocab.txt")
    manifest_path = os.path.join(args.out, "manifest.json")

    if args.resume:
        resume = load_checkpoint(args.resume)
        vocab = Vocabulary.from_text(resume.vocab_text)
        model_cfg = ModelConfig.from_dict(resume.model_config)
        train_cfg = TrainConfig.from_dict(resume.train_config)
        if "train.max_epochs" in merged:
            d = train_cfg.to_dict()
            d["max_epochs"] = merged["train.max_epochs"]
            train_cfg = TrainConfig.from_dict(d)
        model = UnifiedModel(model_cfg, len(vocab), seed=train_cfg.seed)
    else:
        resume = None
        vocab = _load_vocab_or_build(args, train_entries)
        model_cfg, train_cfg = build_configs(merged, d_w)
        model = UnifiedModel(model_cfg, len(vocab), seed=train_cfg.seed)

    result = train(model, train_entries, dev_entries, train_cfg, vocab, resume=resume)
    save_checkpoint(
        ckpt_path, result.model, result.optimizer, vocab, train_cfg,
        result.history, result.state,
    )
    from .report import save_history

    written = save_history(result.history, hist_path)
    vocab.save(vocab_path)
    datasets = {"train": args.train}
    if args.dev:
        datasets["dev"] = args.dev
    outputs = {"checkpoint": ckpt_path, "history": hist_path, "vocab": vocab_path}
    outputs.update({f"figure_{i}": p for i, p in enumerate(written) if p.endswith(".png")})
    write_manifest(manifest_path, model.cfg, train_cfg, datasets, outputs)

    last = result.history.records[-1]
    print(f"trained {last.epoch:g} epochs; best dev total "
          f"{result.state['best_monitored']:.6f} at epoch {result.state['best_epoch']:g}")
    print(f"wrote {ckpt_path}, {hist_path}, {manifest_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .report import save_generation_report, save_retrieval_report

    if args.mode == "revdic" and not args.table:
        raise UsageError("revdic mode needs --table with candidate embeddings")
    ckpt = load_checkpoint(args.checkpoint)
    _, best, vocab = ckpt.build_model()
    table = EmbeddingTable.load(args.table) if args.table else None
    entries = load_dataset(args.test, embeddings=table)

    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    if args.mode == "revdic":
        ranks = gold_ranks(best, entries, table, vocab)
        report = retrieval_report(ranks)
        written = save_retrieval_report(report, ranks, args.out)
        print(
            f"revdic: median rank {report.median_rank:g}, acc@1 {report.acc1:.3f}, "
            f"acc@10 {report.acc10:.3f}, acc@100 {report.acc100:.3f}"
        )
    else:
        report = evaluate_defmod(best, entries, vocab, args.beam_size, args.max_len)
        written = save_generation_report(report, args.out)
        print(f"defmod: BLEU {report.bleu:.4f}, ROUGE-L {report.rouge_l:.4f}")
    print("wrote " + ", ".join(written))
    return EXIT_OK


def cmd_query(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _, best, vocab = ckpt.build_model()
    table = EmbeddingTable.load(args.table)
    transcript = open(args.transcript, "a", encoding="utf-8") if args.transcript else None

    def emit(line: str) -> None:
        print(line)
        if transcript:
            transcript.write(line + "\n")

    interactive = sys.stdin.isatty()
    try:
        while True:
            if interactive:
                sys.stdout.write("> ")
                sys.stdout.flush()
            raw = sys.stdin.readline()
            if not raw:
                break
            line = raw.strip()
            if not line:
                continue
            if transcript:
                transcript.write(f"# {line}\n")
            if line == ":q":
                break
            if line.startswith(":w "):
                word = line[3:].strip()
                try:
                    text = generate_definition(
                        best, word, vocab, table=table,
                        beam_size=args.beam_size, max_len=args.max_len,
                    )
                    emit(f"{word}: {text}")
                except MissingWordError:
                    emit(f"no vector available for {word!r}")
            elif line.startswith(":d "):
                res = reverse_lookup(best, line[3:].strip(), table, vocab)
                for i, (w, dist) in enumerate(res.ranking[: args.top_k], start=1):
                    emit(f"{i:3d}. {w}  {dist:.6f}")
            else:
                emit("commands: ':w <word>' | ':d <definition text>' | ':q'")
    finally:
        if transcript:
            transcript.close()
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    if str(args.corpus).endswith(".jsonl"):
        entries = load_dataset(args.corpus)
        lines = [e.definition_text() for e in entries]
    else:
        with open(args.corpus, encoding="utf-8") as f:
            lines = [ln.strip() for ln in f if ln.strip()]
    if args.kind == "whitespace":
        if args.size is not None:
            print("warning: whitespace vocabularies are open; ignoring --size",
                  file=sys.stderr)
        vocab = build_whitespace_vocab(lines)
    else:
        if args.size is None:
            raise UsageError("unigram vocabularies need --size")
        try:
            vocab = train_unigram_vocab(lines, args.size)
        except ValueError as e:
            raise UsageError(str(e)) from None
    vocab.save(args.out)
    print(f"wrote {args.out} ({len(vocab)} tokens, kind {vocab.kind})")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_cases()
    failed = 0
    for name, err, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<22s} max rel err {err:.3e}")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} op(s) failed gradient check", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .report import save_ablation, save_history

    merged = resolve_config(args)
    train_entries = load_dataset(args.train)
    dev_entries = load_dataset(args.dev) if args.dev else train_entries
    d_w = train_entries[0].word_vector.shape[0]
    vocab = _load_vocab_or_build(args, train_entries)
    model_cfg, train_cfg = build_configs(merged, d_w)

    os.makedirs(args.out, exist_ok=True)
    presets = args.presets.split(",") if args.presets else None
    result = run_ablation(train_entries, dev_entries, vocab, model_cfg, train_cfg, presets)
    written = save_ablation(result, os.path.join(args.out, "ablation.tsv"))
    for preset, history in result.histories.items():
        written += save_history(history, os.path.join(args.out, f"history_{preset}.tsv"))
    for preset, zeros in result.excluded_grads_zero.items():
        untouched = sorted(g for g, z in zeros.items() if z)
        print(f"{preset}: zero-gradient groups: {', '.join(untouched) or '(none)'}")
    print("wrote " + ", ".join(written))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualdict",
        description="Two-way neural dictionary: train, evaluate, and query.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    add_config_flags(p)
    p.add_argument("--train", required=True, help="training dataset (JSON lines)")
    p.add_argument("--dev", help="validation dataset; defaults to the training set")
    p.add_argument("--vocab", help="existing vocabulary file")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True, help="test dataset (JSON lines)")
    p.add_argument("--mode", required=True, choices=("revdic", "defmod"))
    p.add_argument("--table", help="candidate embedding table (revdic)")
    p.add_argument("--out", default="report", help="output base path")
    p.add_argument("--beam-size", type=int, default=6)
    p.add_argument("--max-len", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("query", help="interactive two-way lookup")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table", required=True, help="candidate embedding table")
    p.add_argument("--transcript", help="append all queries and replies here")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--beam-size", type=int, default=6)
    p.add_argument("--max-len", type=int, default=32)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a corpus")
    p.add_argument("--corpus", required=True, help="text file or .jsonl dataset")
    p.add_argument("--kind", required=True, choices=("whitespace", "unigram"))
    p.add_argument("--size", type=int, help="target size (unigram only)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("grad-check", help="finite-difference check of every op")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="train task-subset presets from a shared seed")
    add_config_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--vocab")
    p.add_argument("--presets", help="comma-separated preset names (default: all)")
    p.add_argument("--out", default="ablation", help="output directory")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFileError, MissingWordError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main(argv=None))
