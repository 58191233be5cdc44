"""Shared-bottleneck model joining definition-to-vector and vector-to-text.

Both directions meet in one shared linear layer: definitions pass
through an encoder stack and pool into it, word vectors project into it,
and either resulting code can be read out as a word vector or decoded
into a definition. The decoder receives the code only as its position-0
input; there is no cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    cross_entropy_sum,
    dropout,
    embedding,
    layer_norm,
    matmul,
    mse_loss,
    relu,
    scale,
    slice_cols,
    slice_rows,
    softmax,
    transpose,
)
from .data import Batch
from .vocab import BOS_ID

__all__ = [
    "LOSS_NAMES",
    "ModelConfig",
    "UnifiedModel",
    "LossBundle",
    "forward_losses",
    "parameter_count",
]

LOSS_NAMES = ("revdic", "defmod", "wordAE", "defAE", "sim")

_NEG_INF = -1e30


@dataclass
class ModelConfig:
    d_w: int
    d_tok: int = 256
    d_share: int | None = None
    depth: int = 4
    heads: int = 4
    d_ff: int | None = None
    dropout_transformer: float = 0.3
    dropout_linear: float = 0.2
    dropout_token: float = 0.0
    tie_embeddings: bool = False
    active_losses: tuple[str, ...] = LOSS_NAMES

    def __post_init__(self):
        if self.d_share is None:
            self.d_share = self.d_tok
        if self.d_ff is None:
            self.d_ff = 4 * self.d_tok
        if self.d_w < 1 or self.d_tok < 1:
            raise ValueError("dimensions must be positive")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.d_tok % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide d_tok ({self.d_tok})")
        # The encoder pools straight into the shared layer and the shared
        # code is read back through a learned projection, so the shared
        # width is pinned to the token width.
        if self.d_share != self.d_tok:
            raise ValueError(
                f"d_share ({self.d_share}) must equal d_tok ({self.d_tok})"
            )
        bad = [n for n in self.active_losses if n not in LOSS_NAMES]
        if bad:
            raise ValueError(f"unknown loss names: {bad}")
        if not self.active_losses:
            raise ValueError("at least one loss must be active")
        self.active_losses = tuple(self.active_losses)

    def to_dict(self) -> dict:
        return {
            "d_w": self.d_w,
            "d_tok": self.d_tok,
            "d_share": self.d_share,
            "depth": self.depth,
            "heads": self.heads,
            "d_ff": self.d_ff,
            "dropout_transformer": self.dropout_transformer,
            "dropout_linear": self.dropout_linear,
            "dropout_token": self.dropout_token,
            "tie_embeddings": self.tie_embeddings,
            "active_losses": list(self.active_losses),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["active_losses"] = tuple(d.get("active_losses", LOSS_NAMES))
        return cls(**d)


@lru_cache(maxsize=64)
def _sinusoid_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def positional_encoding(length: int, dim: int) -> Tensor:
    return Tensor(_sinusoid_table(length, dim))


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_in)
        self.w = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class LayerNorm:
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]


class MultiHeadSelfAttention:
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.d_head = d // heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def __call__(self, x: Tensor, causal: bool) -> Tensor:
        t = x.shape[0]
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        mask = None
        if causal and t > 1:
            mask = Tensor(np.triu(np.full((t, t), _NEG_INF), k=1))
        outs = []
        for h in range(self.heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            qh = slice_cols(q, lo, hi)
            kh = slice_cols(k, lo, hi)
            vh = slice_cols(v, lo, hi)
            scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(self.d_head))
            if mask is not None:
                scores = add(scores, mask)
            outs.append(matmul(softmax(scores, axis=-1), vh))
        return self.wo(concat(outs, axis=1))

    def params(self) -> list[Tensor]:
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()


class TransformerBlock:
    """Post-norm block: LN(x + drop(attn)), then LN(x + drop(ffn))."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.attn = MultiHeadSelfAttention(d, heads, rng)
        self.ff1 = Linear(d, d_ff, rng)
        self.ff2 = Linear(d_ff, d, rng)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)

    def __call__(self, x: Tensor, causal: bool, drop) -> Tensor:
        x = self.ln1(add(x, drop(self.attn(x, causal))))
        x = self.ln2(add(x, drop(self.ff2(relu(self.ff1(x))))))
        return x

    def params(self) -> list[Tensor]:
        return (
            self.attn.params()
            + self.ff1.params()
            + self.ff2.params()
            + self.ln1.params()
            + self.ln2.params()
        )


class UnifiedModel:
    """Both directions of the dictionary around one shared linear layer."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int = 0):
        if vocab_size < 5:
            raise ValueError(f"vocabulary too small: {vocab_size}")
        self.cfg = cfg
        self.vocab_size = vocab_size
        rng = np.random.default_rng(seed)
        d, ds = cfg.d_tok, cfg.d_share

        self.l_in = Linear(cfg.d_w, ds, rng)
        self.l_share = Linear(ds, ds, rng)
        self.l_out = Linear(ds, cfg.d_w, rng)
        self.bottleneck = Linear(ds, d, rng)

        bound = 1.0 / np.sqrt(d)
        if cfg.tie_embeddings:
            self.tok_embed = Tensor(
                rng.uniform(-bound, bound, size=(vocab_size, d)), requires_grad=True
            )
            self.enc_embed = self.tok_embed
            self.dec_embed = self.tok_embed
            self.out_w = None
        else:
            self.enc_embed = Tensor(
                rng.uniform(-bound, bound, size=(vocab_size, d)), requires_grad=True
            )
            self.dec_embed = Tensor(
                rng.uniform(-bound, bound, size=(vocab_size, d)), requires_grad=True
            )
            self.out_w = Tensor(
                rng.uniform(-bound, bound, size=(d, vocab_size)), requires_grad=True
            )
            self.tok_embed = None
        self.out_b = Tensor(np.zeros(vocab_size), requires_grad=True)

        self.t_in = [TransformerBlock(d, cfg.heads, cfg.d_ff, rng) for _ in range(cfg.depth)]
        self.t_out = [TransformerBlock(d, cfg.heads, cfg.d_ff, rng) for _ in range(cfg.depth)]

        self.training = True
        self.rng: np.random.Generator | None = None

    # -- dropout helpers ---------------------------------------------------

    def _drop(self, x: Tensor, rate: float) -> Tensor:
        if not self.training:
            return x
        return dropout(x, rate, self.rng)

    def _drop_t(self, x: Tensor) -> Tensor:
        return self._drop(x, self.cfg.dropout_transformer)

    # -- forward paths -----------------------------------------------------

    def shared_layer(self, h: Tensor) -> Tensor:
        """Residual shared code: affine of h (with dropout) plus h."""
        return add(self._drop(self.l_share(h), self.cfg.dropout_linear), h)

    def encode_word(self, word_vectors: Tensor) -> Tensor:
        h = self._drop(self.l_in(word_vectors), self.cfg.dropout_linear)
        return self.shared_layer(h)

    def encode_definition(self, framed_ids: list[int]) -> Tensor:
        """Shared code [1 x d_share] for one framed definition."""
        if len(framed_ids) < 1:
            raise ValueError("cannot encode an empty id sequence")
        x = embedding(self.enc_embed, framed_ids)
        x = add(x, positional_encoding(len(framed_ids), self.cfg.d_tok))
        x = self._drop(x, self.cfg.dropout_token)
        for blk in self.t_in:
            x = blk(x, causal=False, drop=self._drop_t)
        pooled = scale(matmul(Tensor(np.ones((1, len(framed_ids)))), x), 1.0 / len(framed_ids))
        return self.shared_layer(pooled)

    def decode_word(self, shared: Tensor) -> Tensor:
        return self.l_out(shared)

    def decode_definition_logits(self, shared: Tensor, prefix_ids: list[int]) -> Tensor:
        """Next-token logits [T x V] given the code and a framed prefix.

        The code enters only at position 0, projected into token space;
        later positions are embeddings of the prefix from its second
        element on (the leading marker is displaced by the code).
        """
        if not prefix_ids or prefix_ids[0] != BOS_ID:
            raise ValueError("decoder prefix must start with the sequence-start id")
        pos0 = self._drop(self.bottleneck(shared), self.cfg.dropout_linear)
        if len(prefix_ids) > 1:
            tail = embedding(self.dec_embed, prefix_ids[1:])
            x = concat([pos0, tail], axis=0)
        else:
            x = pos0
        x = add(x, positional_encoding(len(prefix_ids), self.cfg.d_tok))
        x = self._drop(x, self.cfg.dropout_token)
        for blk in self.t_out:
            x = blk(x, causal=True, drop=self._drop_t)
        if self.cfg.tie_embeddings:
            return add(matmul(x, transpose(self.tok_embed)), self.out_b)
        return add(matmul(x, self.out_w), self.out_b)

    # -- parameter bookkeeping --------------------------------------------

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        if self.cfg.tie_embeddings:
            emb = {"enc_embed": [self.tok_embed], "dec_embed": [self.tok_embed],
                   "out_proj": [self.tok_embed, self.out_b]}
        else:
            emb = {"enc_embed": [self.enc_embed], "dec_embed": [self.dec_embed],
                   "out_proj": [self.out_w, self.out_b]}
        groups = {
            "l_in": self.l_in.params(),
            "l_share": self.l_share.params(),
            "l_out": self.l_out.params(),
            "bottleneck": self.bottleneck.params(),
            **emb,
            "t_in": [p for blk in self.t_in for p in blk.params()],
            "t_out": [p for blk in self.t_out for p in blk.params()],
        }
        return groups

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        seen: set[int] = set()
        for group, params in self.parameter_groups().items():
            for i, p in enumerate(params):
                if id(p) in seen:
                    continue
                seen.add(id(p))
                out.append((f"{group}.{i}", p))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def eval(self) -> "UnifiedModel":
        self.training = False
        return self

    def train(self) -> "UnifiedModel":
        self.training = True
        return self


def parameter_count(model: UnifiedModel) -> int:
    return sum(p.data.size for p in model.parameters())


@dataclass
class LossBundle:
    components: dict[str, Tensor]
    total: Tensor
    entry_count: int
    token_count: int

    def scalar(self, name: str) -> float:
        return float(self.components[name].data)

    def to_floats(self) -> dict[str, float]:
        out = {k: float(v.data) for k, v in self.components.items()}
        out["total"] = float(self.total.data)
        return out


def forward_losses(model: UnifiedModel, batch: Batch, active=None) -> LossBundle:
    """All requested losses for one batch, summed with equal weight.

    Definition encodings and decoder passes run one entry at a time at
    true length; token-level losses pool as total summed loss over total
    non-pad tokens across the batch.
    """
    if active is None:
        active = model.cfg.active_losses
    active = tuple(active)
    bad = [n for n in active if n not in LOSS_NAMES]
    if bad:
        raise ValueError(f"unknown loss names: {bad}")

    need_word = any(n in active for n in ("defmod", "wordAE", "sim"))
    need_def = any(n in active for n in ("revdic", "defAE", "sim"))

    w_enc = model.encode_word(batch.word_vectors) if need_word else None
    d_enc = None
    if need_def:
        rows = [model.encode_definition(batch.entry_ids(i)) for i in range(batch.size)]
        d_enc = concat(rows, axis=0) if len(rows) > 1 else rows[0]

    def token_loss(source: Tensor) -> tuple[Tensor, int]:
        sums, count = [], 0
        for i in range(batch.size):
            ids = batch.entry_ids(i)
            logits = model.decode_definition_logits(slice_rows(source, i, i + 1), ids[:-1])
            s, c = cross_entropy_sum(logits, ids[1:], pad_id=-1)
            sums.append(s)
            count += c
        total = sums[0]
        for s in sums[1:]:
            total = add(total, s)
        return (scale(total, 1.0 / count) if count else total), count

    components: dict[str, Tensor] = {}
    token_count = 0
    for name in LOSS_NAMES:
        if name not in active:
            continue
        if name == "revdic":
            components[name] = mse_loss(model.decode_word(d_enc), batch.word_vectors)
        elif name == "wordAE":
            components[name] = mse_loss(model.decode_word(w_enc), batch.word_vectors)
        elif name == "sim":
            components[name] = mse_loss(d_enc, w_enc)
        elif name == "defmod":
            components[name], token_count = token_loss(w_enc)
        elif name == "defAE":
            components[name], token_count = token_loss(d_enc)

    total = None
    for name in LOSS_NAMES:
        if name in components:
            total = components[name] if total is None else add(total, components[name])
    return LossBundle(components, total, batch.size, token_count)
