"""Deployment halves: ranked retrieval and beam-search generation.

Each direction uses only its half of the network: definitions encode to
the shared code and read out as vectors for nearest-neighbor ranking;
word vectors encode to the code and decode autoregressively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmbeddingTable, MissingWordError, aggregate_subword_vectors
from .model import UnifiedModel
from .autodiff import Tensor
from .vocab import BOS_ID, EOS_ID, Vocabulary

__all__ = [
    "BeamHypothesis",
    "RankedRetrieval",
    "beam_search",
    "greedy_decode",
    "reverse_lookup",
    "generate_definition",
]


@dataclass
class BeamHypothesis:
    """One decoder path: framed ids, cumulative log-prob, finished flag."""

    ids: list[int]
    log_prob: float
    finished: bool = False

    @property
    def generated(self) -> int:
        return len(self.ids) - 1

    @property
    def normalized(self) -> float:
        return self.log_prob / max(1, self.generated)


def _next_log_probs(model: UnifiedModel, shared: Tensor, prefix: list[int]) -> np.ndarray:
    logits = model.decode_definition_logits(shared, prefix).data[-1]
    m = logits.max()
    return (logits - m) - np.log(np.exp(logits - m).sum())


def _finished(hyp: BeamHypothesis, max_len: int) -> bool:
    return hyp.ids[-1] == EOS_ID or hyp.generated >= max_len


def greedy_decode(model: UnifiedModel, shared: Tensor, max_len: int) -> BeamHypothesis:
    hyp = BeamHypothesis([BOS_ID], 0.0)
    while not hyp.finished:
        lp = _next_log_probs(model, shared, hyp.ids)
        tok = int(lp.argmax())
        hyp = BeamHypothesis(hyp.ids + [tok], hyp.log_prob + float(lp[tok]))
        hyp.finished = _finished(hyp, max_len)
    return hyp


def beam_search(
    model: UnifiedModel,
    word_vector: np.ndarray,
    vocab: Vocabulary,
    beam_size: int = 6,
    max_len: int = 32,
) -> BeamHypothesis:
    """Best decoded sequence by length-normalized log probability.

    Finished hypotheses (end marker emitted, or ``max_len`` tokens
    generated) retire to a completed pool; the beam keeps the top
    ``beam_size`` running paths by normalized score. The greedy rollout
    joins the pool too, so the result can never score below it.
    """
    if beam_size < 1:
        raise ValueError(f"beam size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    was_training = model.training
    model.training = False
    model.rng = None
    try:
        vec = np.asarray(word_vector, dtype=np.float64).reshape(1, -1)
        shared = model.encode_word(Tensor(vec))
        v = len(vocab)

        running = [BeamHypothesis([BOS_ID], 0.0)]
        completed: list[BeamHypothesis] = []
        while running:
            candidates: list[BeamHypothesis] = []
            for hyp in running:
                lp = _next_log_probs(model, shared, hyp.ids)
                for tok in range(v):
                    candidates.append(
                        BeamHypothesis(hyp.ids + [tok], hyp.log_prob + float(lp[tok]))
                    )
            candidates.sort(key=lambda h: -h.normalized)
            running = []
            for hyp in candidates[:beam_size]:
                if _finished(hyp, max_len):
                    hyp.finished = True
                    completed.append(hyp)
                else:
                    running.append(hyp)
        if beam_size > 1:
            completed.append(greedy_decode(model, shared, max_len))
        return max(completed, key=lambda h: h.normalized)
    finally:
        model.training = was_training


@dataclass
class RankedRetrieval:
    """Candidates sorted by distance, with the gold word's 1-based rank."""

    ranking: list[tuple[str, float]]
    gold_rank: int | None
    table_size: int

    def hit_at(self, k: int) -> bool:
        return self.gold_rank is not None and self.gold_rank <= k

    @property
    def acc1(self) -> bool:
        return self.hit_at(1)

    @property
    def acc10(self) -> bool:
        return self.hit_at(10)

    @property
    def acc100(self) -> bool:
        return self.hit_at(100)


def reverse_lookup(
    model: UnifiedModel,
    definition_tokens: list[str] | str,
    table: EmbeddingTable,
    vocab: Vocabulary,
    gold_word: str | None = None,
) -> RankedRetrieval:
    """Rank every table word by squared distance to the decoded vector.

    A gold word absent from the table gets the sentinel rank
    ``table_size + 1`` so that aggregate metrics can still count it.
    """
    if len(table) == 0:
        raise ValueError("cannot rank against an empty candidate table")
    was_training = model.training
    model.training = False
    model.rng = None
    try:
        ids = [BOS_ID] + vocab.encode(definition_tokens) + [EOS_ID]
        pred = model.decode_word(model.encode_definition(ids)).data[0]
    finally:
        model.training = was_training
    diff = table.matrix - pred
    dists = np.einsum("ij,ij->i", diff, diff)
    order = sorted(range(len(table)), key=lambda i: (dists[i], table.words[i]))
    ranking = [(table.words[i], float(dists[i])) for i in order]
    gold_rank: int | None = None
    if gold_word is not None:
        if gold_word in table:
            pos = next(i for i, (w, _) in enumerate(ranking) if w == gold_word)
            gold_rank = pos + 1
        else:
            gold_rank = len(table) + 1
    return RankedRetrieval(ranking, gold_rank, len(table))


def generate_definition(
    model: UnifiedModel,
    word: str,
    vocab: Vocabulary,
    table: EmbeddingTable | None = None,
    context_subword_vectors: list[np.ndarray] | None = None,
    beam_size: int = 6,
    max_len: int = 32,
) -> str:
    """Decode a definition for a word given some source of its vector."""
    if context_subword_vectors is not None:
        vec = aggregate_subword_vectors(context_subword_vectors)
    elif table is not None:
        vec = table.get(word)
    else:
        raise MissingWordError(word)
    best = beam_search(model, vec, vocab, beam_size=beam_size, max_len=max_len)
    return vocab.decode(best.ids)
