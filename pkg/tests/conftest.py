import json
import time

import numpy as np
import pytest

from dualdict.data import DictEntry, EmbeddingTable
from dualdict.model import ModelConfig, UnifiedModel
from dualdict.training import TrainConfig, train
from dualdict.vocab import build_whitespace_vocab


def build_corpus(n_words=50, d_w=16, content=56, max_def_len=8, seed=11):
    """Synthetic dictionary with distinct definitions and random targets."""
    rng = np.random.default_rng(seed)
    toks = [f"w{i:02d}" for i in range(content)]
    entries = []
    seen = set()
    for i in range(n_words):
        while True:
            length = int(rng.integers(3, max_def_len + 1))
            definition = tuple(rng.choice(toks, size=length))
            if definition not in seen:
                seen.add(definition)
                break
        entries.append(DictEntry(f"head{i:02d}", list(definition), rng.standard_normal(d_w)))
    return entries


def tiny_model_config(d_w=6, d_tok=8, **overrides):
    kwargs = dict(
        d_w=d_w, d_tok=d_tok, depth=1, heads=2, d_ff=16,
        dropout_transformer=0.0, dropout_linear=0.0, dropout_token=0.0,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def write_dataset(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps({
                "word": e.word,
                "definition": " ".join(e.definition),
                "word_vector": e.word_vector.tolist(),
            }) + "\n")


@pytest.fixture
def small_corpus():
    entries = build_corpus(n_words=12, d_w=6, content=10, max_def_len=5, seed=4)
    vocab = build_whitespace_vocab([" ".join(e.definition) for e in entries])
    return entries, vocab


@pytest.fixture(scope="session")
def overfit_run():
    """50-word memorization run shared by the slow end-to-end tests."""
    entries = build_corpus()
    vocab = build_whitespace_vocab([" ".join(e.definition) for e in entries])
    cfg = ModelConfig(
        d_w=16, d_tok=32, depth=2, heads=2, d_ff=64,
        dropout_transformer=0.0, dropout_linear=0.0,
    )
    tc = TrainConfig(lr=3e-3, batch_size=10, max_epochs=150, patience=10**9, seed=0)
    model = UnifiedModel(cfg, len(vocab), seed=0)
    t0 = time.perf_counter()
    result = train(model, entries, entries, tc, vocab)
    train_seconds = time.perf_counter() - t0
    table = EmbeddingTable.from_entries(entries)
    return entries, vocab, result, table, train_seconds


@pytest.fixture(scope="session")
def single_overfit(tmp_path_factory):
    """One-entry corpus memorized to verbatim reproduction, on disk."""
    rng = np.random.default_rng(2)
    entry = DictEntry("plum", "small round purple fruit".split(), rng.standard_normal(8))
    vocab = build_whitespace_vocab(["small round purple fruit"])
    cfg = tiny_model_config(d_w=8, d_tok=16, d_ff=32)
    tc = TrainConfig(lr=3e-3, batch_size=4, max_epochs=120, patience=10**9, seed=1)
    model = UnifiedModel(cfg, len(vocab), seed=1)
    result = train(model, [entry], [entry], tc, vocab)

    root = tmp_path_factory.mktemp("single_overfit")
    data_path = root / "data.jsonl"
    write_dataset(data_path, [entry])
    table = EmbeddingTable.from_entries([entry])
    table_path = root / "table.txt"
    table.save(table_path)

    from dualdict.training import save_checkpoint

    ckpt_path = root / "model.ckpt"
    save_checkpoint(ckpt_path, result.model, result.optimizer, vocab, tc,
                    result.history, result.state)
    return {
        "entry": entry,
        "vocab": vocab,
        "result": result,
        "table": table,
        "data_path": data_path,
        "table_path": table_path,
        "ckpt_path": ckpt_path,
    }
