"""Token vocabularies: whitespace word-level and unigram subword.

Both kinds share an id layout: four reserved specials at ids 0..3
followed by the learned pieces. The unigram kind keeps a log
probability per piece and segments text by Viterbi maximum likelihood
using the metaspace word-boundary convention.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter

import numpy as np

__all__ = [
    "PAD_ID",
    "BOS_ID",
    "EOS_ID",
    "UNK_ID",
    "SPECIAL_TOKENS",
    "WORD_BOUNDARY",
    "Vocabulary",
    "build_whitespace_vocab",
    "train_unigram_vocab",
    "viterbi_segment",
]

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

# Marks the start of a word in subword pieces, SentencePiece-style.
WORD_BOUNDARY = "▁"

_FORMAT_HEADER = "vocab-v1"
_UNK_PENALTY = -1e4


class Vocabulary:
    """Bijective token/id map, optionally with unigram piece scores."""

    def __init__(self, kind: str, pieces: list[str], log_probs: list[float] | None = None):
        if kind not in ("whitespace", "unigram"):
            raise ValueError(f"unknown vocabulary kind: {kind!r}")
        if kind == "unigram":
            if log_probs is None or len(log_probs) != len(pieces):
                raise ValueError("unigram vocabulary needs one log probability per piece")
        if len(set(pieces)) != len(pieces):
            raise ValueError("duplicate pieces in vocabulary")
        for p in pieces:
            if p in SPECIAL_TOKENS:
                raise ValueError(f"piece collides with a reserved token: {p!r}")
        self.kind = kind
        self.id_to_token = list(SPECIAL_TOKENS) + list(pieces)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.log_probs = None
        if kind == "unigram":
            self.log_probs = {p: float(lp) for p, lp in zip(pieces, log_probs)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pieces(self) -> list[str]:
        return self.id_to_token[len(SPECIAL_TOKENS):]

    def encode(self, text: str | list[str]) -> list[int]:
        """Map text to piece ids, without framing tokens."""
        if self.kind == "whitespace":
            tokens = text.split() if isinstance(text, str) else list(text)
            return [self.token_to_id.get(t, UNK_ID) for t in tokens]
        if isinstance(text, list):
            text = " ".join(text)
        pieces = viterbi_segment(_metaspace(text), self.log_probs)
        return [self.token_to_id.get(p, UNK_ID) for p in pieces]

    def decode(self, ids: list[int], strip_special: bool = True) -> str:
        toks = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise IndexError(f"token id out of range: {i}")
            t = self.id_to_token[i]
            if strip_special and i < len(SPECIAL_TOKENS):
                continue
            toks.append(t)
        if self.kind == "whitespace":
            return " ".join(toks)
        return "".join(toks).replace(WORD_BOUNDARY, " ").strip()

    def to_text(self) -> str:
        lines = [_FORMAT_HEADER, self.kind]
        for t in SPECIAL_TOKENS:
            lines.append(f"special\t{t}")
        for p in self.pieces:
            if self.kind == "unigram":
                lines.append(f"piece\t{p}\t{self.log_probs[p]!r}")
            else:
                lines.append(f"piece\t{p}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.splitlines()
        if not lines or lines[0] != _FORMAT_HEADER:
            raise ValueError("not a recognized vocabulary file")
        kind = lines[1]
        pieces: list[str] = []
        log_probs: list[float] = []
        specials: list[str] = []
        for ln in lines[2:]:
            if not ln:
                continue
            fields = ln.split("\t")
            if fields[0] == "special":
                specials.append(fields[1])
            elif fields[0] == "piece":
                pieces.append(fields[1])
                if kind == "unigram":
                    log_probs.append(float(fields[2]))
            else:
                raise ValueError(f"unrecognized vocabulary line: {ln!r}")
        if tuple(specials) != SPECIAL_TOKENS:
            raise ValueError("special token block does not match this version")
        return cls(kind, pieces, log_probs if kind == "unigram" else None)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


def build_whitespace_vocab(corpus: list[str]) -> Vocabulary:
    """Word-level vocabulary of every whitespace token, ids in sorted order."""
    seen = set()
    for line in corpus:
        seen.update(line.split())
    pieces = sorted(t for t in seen if t not in SPECIAL_TOKENS)
    return Vocabulary("whitespace", pieces)


# ---------------------------------------------------------------------------
# Unigram model
# ---------------------------------------------------------------------------


def _metaspace(text: str) -> str:
    return WORD_BOUNDARY + text.strip().replace(" ", WORD_BOUNDARY)


def viterbi_segment(text: str, log_probs: dict[str, float]) -> list[str]:
    """Most probable segmentation of ``text`` under piece log probabilities.

    Characters absent from the model are emitted as single-character
    pieces with a large penalty so that any input remains segmentable.
    Ties prefer the segmentation found last at equal score, which with
    left-to-right scanning of increasing end positions is deterministic.
    """
    if not text:
        return []
    n = len(text)
    max_piece = max((len(p) for p in log_probs), default=1)
    best = np.full(n + 1, -np.inf)
    best[0] = 0.0
    back = np.zeros(n + 1, dtype=np.int64)
    for end in range(1, n + 1):
        lo = max(0, end - max_piece)
        for start in range(lo, end):
            if best[start] == -np.inf:
                continue
            piece = text[start:end]
            lp = log_probs.get(piece)
            if lp is None:
                if end - start != 1:
                    continue
                lp = _UNK_PENALTY
            cand = best[start] + lp
            if cand > best[end]:
                best[end] = cand
                back[end] = start
    out: list[str] = []
    pos = n
    while pos > 0:
        start = int(back[pos])
        out.append(text[start:pos])
        pos = start
    out.reverse()
    return out


def segment_words(text: str, log_probs: dict[str, float]) -> list[str]:
    return viterbi_segment(_metaspace(text), log_probs)


def train_unigram_vocab(
    corpus: list[str],
    target_size: int,
    em_iters: int = 4,
    prune_frac: float = 0.2,
    max_piece_len: int = 16,
) -> Vocabulary:
    """Unigram piece inventory fit by EM with iterative pruning.

    Starting from all substrings up to ``max_piece_len``, each round runs
    ``em_iters`` rounds of Viterbi counting and probability re-estimation,
    then drops the ``prune_frac`` of multi-character pieces whose removal
    costs the least likelihood. Single characters are never pruned so
    every string stays representable. Stops once the inventory fits in
    ``target_size`` minus the reserved specials.
    """
    texts = [_metaspace(line) for line in corpus if line.strip()]
    if not texts:
        raise ValueError("cannot train a vocabulary on an empty corpus")
    charset = sorted({c for t in texts for c in t})
    keep_size = target_size - len(SPECIAL_TOKENS)
    if keep_size < len(charset):
        raise ValueError(
            f"target size {target_size} cannot cover {len(charset)} distinct "
            f"characters plus {len(SPECIAL_TOKENS)} reserved tokens"
        )

    counts: Counter[str] = Counter()
    for t in texts:
        n = len(t)
        for i in range(n):
            for j in range(i + 1, min(n, i + max_piece_len) + 1):
                counts[t[i:j]] += 1
    # Seed scores from raw substring frequency.
    total = sum(counts.values())
    log_probs = {p: math.log(c / total) for p, c in counts.items()}

    def em_round(model: dict[str, float]) -> dict[str, float]:
        for _ in range(em_iters):
            piece_counts: Counter[str] = Counter()
            for t in texts:
                for p in viterbi_segment(t, model):
                    piece_counts[p] += 1
            tot = sum(piece_counts.values())
            new = {}
            for p in model:
                c = piece_counts.get(p, 0)
                # Unused pieces keep a vanishing but finite score so the
                # prune step can still rank them.
                new[p] = math.log(c / tot) if c else math.log(0.5 / tot)
            model = new
        return model

    log_probs = em_round(log_probs)
    while len(log_probs) > keep_size:
        prunable = [p for p in log_probs if len(p) > 1]
        if not prunable:
            break
        # Cost of removing a piece: count times the score gap to its best
        # alternative segmentation.
        piece_counts: Counter[str] = Counter()
        for t in texts:
            for p in viterbi_segment(t, log_probs):
                piece_counts[p] += 1
        impact = {}
        for p in prunable:
            c = piece_counts.get(p, 0)
            if c == 0:
                impact[p] = 0.0
                continue
            without = dict(log_probs)
            del without[p]
            alt = sum(without.get(q, _UNK_PENALTY) for q in viterbi_segment(p, without))
            impact[p] = c * (log_probs[p] - alt)
        over = len(log_probs) - keep_size
        drop_n = min(max(1, int(len(prunable) * prune_frac)), over)
        for p in sorted(prunable, key=lambda q: (impact[q], q))[:drop_n]:
            del log_probs[p]
        log_probs = em_round(log_probs)

    for c in charset:
        if c not in log_probs:
            log_probs[c] = _UNK_PENALTY
    pieces = sorted(log_probs)
    return Vocabulary("unigram", pieces, [log_probs[p] for p in pieces])
