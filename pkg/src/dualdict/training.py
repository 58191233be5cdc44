"""Multi-task training: loop, early stopping, ablations, checkpoints.

Reproducibility contract: shuffling draws from a generator seeded by
(seed, epoch) and dropout from (seed, epoch, step), so a run is a pure
function of seed and config. Resuming from a checkpoint at epoch k
replays epochs k+1.. with the same generators and therefore matches the
uninterrupted run bit for bit. Wall-clock times are kept on in-memory
records only and never serialized.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .autodiff import backward, zero_grads
from .data import DictEntry, make_batches
from .model import LOSS_NAMES, ModelConfig, UnifiedModel, forward_losses
from .optim import Adam
from .vocab import Vocabulary

__all__ = [
    "PRESETS",
    "TrainConfig",
    "ValidationRecord",
    "TrainHistory",
    "TrainResult",
    "DivergenceError",
    "resolve_active",
    "evaluate_losses",
    "train",
    "run_ablation",
    "AblationResult",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]

PRESETS: dict[str, tuple[str, ...]] = {
    "1-task-revdic": ("revdic",),
    "1-task-defmod": ("defmod",),
    "3-task": ("revdic", "defmod", "sim"),
    "5-task": LOSS_NAMES,
}

_TOKEN_LOSSES = ("defmod", "defAE")

_MAGIC = b"DDCKPT1\n"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    # 0 validates once per epoch; a positive value validates every that
    # many optimizer steps.
    validate_every: int = 0
    seed: int = 0
    task_preset: str = "5-task"
    active_losses: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.validate_every < 0:
            raise ValueError(f"validate_every must be >= 0, got {self.validate_every}")
        if self.task_preset != "custom" and self.task_preset not in PRESETS:
            raise ValueError(
                f"unknown task preset {self.task_preset!r}; "
                f"options: {sorted(PRESETS)} or 'custom'"
            )
        if self.active_losses is not None:
            self.active_losses = tuple(self.active_losses)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "validate_every": self.validate_every,
            "seed": self.seed,
            "task_preset": self.task_preset,
            "active_losses": list(self.active_losses) if self.active_losses else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("active_losses"):
            d["active_losses"] = tuple(d["active_losses"])
        return cls(**d)


def resolve_active(cfg: TrainConfig) -> tuple[str, ...]:
    if cfg.task_preset == "custom":
        chosen = cfg.active_losses or ()
    else:
        chosen = PRESETS[cfg.task_preset]
    bad = [n for n in chosen if n not in LOSS_NAMES]
    if bad:
        raise ValueError(f"unknown loss names: {bad}")
    if not chosen:
        raise ValueError("custom preset requires a non-empty active_losses set")
    return tuple(n for n in LOSS_NAMES if n in chosen)


@dataclass
class ValidationRecord:
    epoch: float
    global_step: int
    train_losses: dict[str, float]
    dev_losses: dict[str, float]
    # Informational only; never exported or serialized.
    wall_time: float = 0.0

    @property
    def monitored(self) -> float:
        return self.dev_losses["total"]


@dataclass
class TrainHistory:
    active: tuple[str, ...]
    records: list[ValidationRecord] = field(default_factory=list)

    def columns(self) -> list[str]:
        names = [n for n in LOSS_NAMES if n in self.active]
        cols = ["epoch"]
        cols += [f"train_{n}" for n in names] + ["train_total"]
        cols += [f"dev_{n}" for n in names] + ["dev_total"]
        return cols

    def to_table(self) -> tuple[list[str], list[list[float]]]:
        names = [n for n in LOSS_NAMES if n in self.active]
        rows = []
        for r in self.records:
            row = [r.epoch]
            row += [r.train_losses[n] for n in names] + [r.train_losses["total"]]
            row += [r.dev_losses[n] for n in names] + [r.dev_losses["total"]]
            rows.append(row)
        return self.columns(), rows

    def save_tsv(self, path) -> None:
        header, rows = self.to_table()
        with open(path, "w", encoding="utf-8") as f:
            f.write("\t".join(header) + "\n")
            for row in rows:
                f.write("\t".join(repr(float(x)) for x in row) + "\n")

    def to_dict(self) -> dict:
        return {
            "active": list(self.active),
            "records": [
                {
                    "epoch": r.epoch,
                    "global_step": r.global_step,
                    "train": r.train_losses,
                    "dev": r.dev_losses,
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        h = cls(tuple(d["active"]))
        for r in d["records"]:
            h.records.append(
                ValidationRecord(r["epoch"], r["global_step"], dict(r["train"]), dict(r["dev"]))
            )
        return h


def evaluate_losses(
    model: UnifiedModel,
    entries: list[DictEntry],
    vocab: Vocabulary,
    batch_size: int,
    active: tuple[str, ...],
) -> dict[str, float]:
    """Dropout-free loss means over a dataset, pooled by proper weights.

    Vector losses average per entry; token losses average per non-pad
    token, matching how a single huge batch would pool them.
    """
    was_training = model.training
    model.training = False
    model.rng = None
    try:
        totals = {n: 0.0 for n in active}
        entry_n = 0
        token_n = 0
        for batch in make_batches(entries, vocab, batch_size):
            bundle = forward_losses(model, batch, active)
            for n in active:
                v = float(bundle.components[n].data)
                if n in _TOKEN_LOSSES:
                    totals[n] += v * bundle.token_count
                else:
                    totals[n] += v * batch.size
            entry_n += batch.size
            token_n += bundle.token_count
        out = {}
        for n in active:
            denom = token_n if n in _TOKEN_LOSSES else entry_n
            out[n] = totals[n] / denom if denom else 0.0
        out["total"] = sum(out[n] for n in active)
        return out
    finally:
        model.training = was_training


@dataclass
class TrainResult:
    best_model: UnifiedModel
    model: UnifiedModel
    optimizer: Adam
    history: TrainHistory
    state: dict


def _snapshot(model: UnifiedModel) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _clone_with(model: UnifiedModel, arrays: list[np.ndarray]) -> UnifiedModel:
    clone = UnifiedModel(model.cfg, model.vocab_size, seed=0)
    for p, a in zip(clone.parameters(), arrays):
        p.data = a.copy()
    clone.training = False
    return clone


def train(
    model: UnifiedModel,
    train_set: list[DictEntry],
    dev_set: list[DictEntry],
    cfg: TrainConfig,
    vocab: Vocabulary,
    optimizer: Adam | None = None,
    resume: "Checkpoint | None" = None,
) -> TrainResult:
    """Optimize the model, returning the best validation state seen.

    The record at epoch 0 describes the untrained model and is kept for
    curve plotting only; stopping and best-model tracking consider
    validations from epoch 1 on.
    """
    active = resolve_active(cfg)
    params = model.parameters()
    if optimizer is None:
        optimizer = Adam(params, lr=cfg.lr)
    t0 = time.perf_counter()

    def run_validation(epoch: float, global_step: int) -> ValidationRecord:
        rec = ValidationRecord(
            epoch,
            global_step,
            evaluate_losses(model, train_set, vocab, cfg.batch_size, active),
            evaluate_losses(model, dev_set, vocab, cfg.batch_size, active),
            wall_time=time.perf_counter() - t0,
        )
        history.records.append(rec)
        return rec

    if resume is not None:
        if resume.model_config != model.cfg.to_dict():
            raise ValueError("checkpoint model config does not match this model")
        ours = {k: v for k, v in cfg.to_dict().items() if k != "max_epochs"}
        theirs = {k: v for k, v in resume.train_config.items() if k != "max_epochs"}
        if ours != theirs:
            raise ValueError("checkpoint training config does not match this run")
        for p, a in zip(params, resume.model_arrays):
            p.data = a.copy()
        optimizer.m = [a.copy() for a in resume.adam_m]
        optimizer.v = [a.copy() for a in resume.adam_v]
        optimizer.step_count = resume.adam_meta["step_count"]
        history = TrainHistory.from_dict(resume.history)
        state = dict(resume.train_state)
        best_arrays = [a.copy() for a in resume.best_arrays]
    else:
        history = TrainHistory(active)
        state = {
            "epoch": 0,
            "global_step": 0,
            "best_monitored": None,
            "best_epoch": 0,
            "bad_validations": 0,
        }
        best_arrays = _snapshot(model)
        run_validation(0.0, 0)

    steps_per_epoch = max(1, (len(train_set) + cfg.batch_size - 1) // cfg.batch_size)
    stop = False
    epoch = state["epoch"]

    def handle_record(rec: ValidationRecord) -> bool:
        """Update best/patience bookkeeping; True means stop now."""
        nonlocal best_arrays
        if state["best_monitored"] is None or rec.monitored < state["best_monitored"]:
            state["best_monitored"] = rec.monitored
            state["best_epoch"] = rec.epoch
            state["bad_validations"] = 0
            best_arrays = _snapshot(model)
            return False
        state["bad_validations"] += 1
        return state["bad_validations"] >= cfg.patience

    for epoch in range(state["epoch"] + 1, cfg.max_epochs + 1):
        batches = make_batches(
            train_set, vocab, cfg.batch_size, shuffle_seed=[cfg.seed, epoch]
        )
        for step, batch in enumerate(batches, start=1):
            model.training = True
            model.rng = np.random.default_rng([cfg.seed, epoch, step])
            bundle = forward_losses(model, batch, active)
            total = float(bundle.total.data)
            if not np.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss {total} at epoch {epoch} step {step}; "
                    f"components: {bundle.to_floats()}"
                )
            backward(bundle.total)
            optimizer.step()
            zero_grads(params)
            state["global_step"] += 1
            if cfg.validate_every > 0 and state["global_step"] % cfg.validate_every == 0:
                frac = epoch - 1 + step / steps_per_epoch
                if handle_record(run_validation(frac, state["global_step"])):
                    stop = True
                    break
        if stop:
            break
        if cfg.validate_every == 0:
            if handle_record(run_validation(float(epoch), state["global_step"])):
                break
    state["epoch"] = epoch

    model.training = False
    model.rng = None
    best_model = _clone_with(model, best_arrays)
    state["best_arrays"] = best_arrays
    return TrainResult(best_model, model, optimizer, history, state)


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    histories: dict[str, TrainHistory]
    excluded_grads_zero: dict[str, dict[str, bool]]
    table: tuple[list[str], list[list]]


def _grad_is_zero(params) -> bool:
    return all(p.grad is None or not np.any(p.grad) for p in params)


def probe_excluded_gradients(
    model: UnifiedModel,
    batch,
    active: tuple[str, ...],
) -> dict[str, bool]:
    """After one backward pass, which parameter groups saw zero gradient."""
    params = model.parameters()
    zero_grads(params)
    model.training = False
    model.rng = None
    bundle = forward_losses(model, batch, active)
    backward(bundle.total)
    out = {g: _grad_is_zero(ps) for g, ps in model.parameter_groups().items()}
    zero_grads(params)
    return out


def run_ablation(
    train_set: list[DictEntry],
    dev_set: list[DictEntry],
    vocab: Vocabulary,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    presets: list[str] | None = None,
) -> AblationResult:
    """Train one model per task preset from a shared initialization.

    Every preset constructs its model from the same seed, so epoch-0
    records coincide and the curves differ only through the active loss
    set. The combined long-format table has one row per (preset,
    validation, split, loss) for direct plotting.
    """
    presets = list(presets or PRESETS)
    histories: dict[str, TrainHistory] = {}
    zero_maps: dict[str, dict[str, bool]] = {}
    rows: list[list] = []
    for preset in presets:
        cfg_dict = train_cfg.to_dict()
        cfg_dict["task_preset"] = preset
        if preset != "custom":
            cfg_dict["active_losses"] = None
        cfg = TrainConfig.from_dict(cfg_dict)
        active = resolve_active(cfg)
        model = UnifiedModel(model_cfg, len(vocab), seed=cfg.seed)
        probe = make_batches(train_set[: min(4, len(train_set))], vocab, 4)[0]
        zero_maps[preset] = probe_excluded_gradients(model, probe, active)
        # Rebuild so the probe pass cannot perturb anything.
        model = UnifiedModel(model_cfg, len(vocab), seed=cfg.seed)
        result = train(model, train_set, dev_set, cfg, vocab)
        histories[preset] = result.history
        for rec in result.history.records:
            for split, losses in (("train", rec.train_losses), ("dev", rec.dev_losses)):
                for name, value in losses.items():
                    rows.append([preset, rec.epoch, split, name, value])
    header = ["preset", "epoch", "split", "loss", "value"]
    return AblationResult(histories, zero_maps, (header, rows))


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    vocab_text: str
    vocab_sha256: str
    adam_meta: dict
    train_state: dict
    history: dict
    model_arrays: list[np.ndarray]
    adam_m: list[np.ndarray]
    adam_v: list[np.ndarray]
    best_arrays: list[np.ndarray]

    def build_model(self) -> tuple[UnifiedModel, UnifiedModel, Vocabulary]:
        """Reconstruct (last model, best model, vocabulary)."""
        vocab = Vocabulary.from_text(self.vocab_text)
        cfg = ModelConfig.from_dict(self.model_config)
        last = UnifiedModel(cfg, len(vocab), seed=0)
        for p, a in zip(last.parameters(), self.model_arrays):
            p.data = a.copy()
        last.training = False
        best = UnifiedModel(cfg, len(vocab), seed=0)
        for p, a in zip(best.parameters(), self.best_arrays):
            p.data = a.copy()
        best.training = False
        return last, best, vocab


def save_checkpoint(
    path,
    model: UnifiedModel,
    optimizer: Adam,
    vocab: Vocabulary,
    train_cfg: TrainConfig,
    history: TrainHistory,
    train_state: dict,
    best_arrays: list[np.ndarray] | None = None,
) -> None:
    """Single-file binary checkpoint; identical state gives identical bytes."""
    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()
    if best_arrays is None:
        best_arrays = train_state.get("best_arrays") or _snapshot(model)
    state = {k: v for k, v in train_state.items() if k != "best_arrays"}

    tensors: list[tuple[str, str, np.ndarray]] = []
    for n, p in zip(names, params):
        tensors.append((n, "model", p.data))
    for n, m in zip(names, optimizer.m):
        tensors.append((n, "adam_m", m))
    for n, v in zip(names, optimizer.v):
        tensors.append((n, "adam_v", v))
    for n, b in zip(names, best_arrays):
        tensors.append((n, "best", b))

    header = {
        "format": "ddckpt",
        "version": 1,
        "tool_version": __version__,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "vocab_size": model.vocab_size,
        "vocab_sha256": vocab.content_hash(),
        "vocab_text": vocab.to_text(),
        "adam": {
            "step_count": optimizer.step_count,
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "epsilon": optimizer.epsilon,
            "weight_decay": optimizer.weight_decay,
        },
        "train_state": state,
        "history": history.to_dict(),
        "tensors": [
            {"name": n, "group": g, "shape": list(a.shape)} for n, g, a in tensors
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack(">I", len(blob)))
        f.write(blob)
        for _, _, a in tensors:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack(">I", f.read(4))
        header = json.loads(f.read(blob_len).decode("utf-8"))
        if header.get("format") != "ddckpt" or header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version")
        groups: dict[str, list[np.ndarray]] = {"model": [], "adam_m": [], "adam_v": [], "best": []}
        for desc in header["tensors"]:
            shape = tuple(desc["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated tensor payload for {desc['name']}")
            arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            groups[desc["group"]].append(arr)
        trailing = f.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after tensor payload")

    digest = hashlib.sha256(header["vocab_text"].encode("utf-8")).hexdigest()
    if digest != header["vocab_sha256"]:
        raise ValueError(f"{path}: embedded vocabulary does not match its hash")

    return Checkpoint(
        model_config=header["model_config"],
        train_config=header["train_config"],
        vocab_text=header["vocab_text"],
        vocab_sha256=header["vocab_sha256"],
        adam_meta=header["adam"],
        train_state=header["train_state"],
        history=header["history"],
        model_arrays=groups["model"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        best_arrays=groups["best"],
    )
