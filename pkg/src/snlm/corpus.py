"""Corpus ingestion: vocabulary with a unigram noise distribution,
contiguous-lane batch windows for truncated BPTT, and cloze-task parsing.

Corpus files are UTF-8 plain text, whitespace tokenized, one sentence (or
document line) per line; an end-of-sentence token is appended to every
line and participates in all counts and evaluations.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "UNK_TOKEN",
    "EOS_TOKEN",
    "GAP_TOKEN",
    "Vocabulary",
    "BatchStream",
    "CompletionItem",
    "CompletionParseError",
    "read_corpus",
    "build_vocab",
    "encode_lines",
    "batchify",
    "sample_noise",
    "load_completions",
]

UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"
GAP_TOKEN = "___"
_RESERVED = (UNK_TOKEN, EOS_TOKEN, GAP_TOKEN)

# Reserved tokens always occupy the first ids, in this order.
UNK_ID = 0
EOS_ID = 1
GAP_ID = 2

# Vanishing Laplace mass: keeps every vocabulary entry strictly positive
# (required by the noise distribution) while leaving observed frequencies
# unchanged to well below 1e-12.
UNIGRAM_FLOOR = 1e-12


class CompletionParseError(ValueError):
    """Malformed completion-task line; the message carries the line number."""


@dataclass
class Vocabulary:
    """Word/id mapping plus the unigram distribution used as NCE noise.

    Reserved entries occupy the first three ids: unknown, end of sentence,
    and the cloze gap marker. ``counts`` holds realized frequencies on the
    mapped corpus and is None for vocabularies restored from a checkpoint
    (the checkpoint format stores only words and unigram probabilities).
    """

    words: list[str]
    unigram: np.ndarray
    counts: np.ndarray | None = None
    id_of: dict[str, int] = field(init=False, repr=False)
    _cdf: np.ndarray | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        self.unigram = np.asarray(self.unigram, dtype=np.float64)
        self.id_of = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def unk_id(self) -> int:
        return self.id_of[UNK_TOKEN]

    @property
    def eos_id(self) -> int:
        return self.id_of[EOS_TOKEN]

    @property
    def gap_id(self) -> int:
        return self.id_of[GAP_TOKEN]

    def lookup(self, word: str) -> int:
        return self.id_of.get(word, self.id_of[UNK_TOKEN])

    def to_ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.lookup(t) for t in tokens], dtype=np.int64)

    def noise_cdf(self) -> np.ndarray:
        if self._cdf is None:
            self._cdf = np.cumsum(self.unigram)
        return self._cdf


def read_corpus(path, lowercase: bool = False) -> list[list[str]]:
    """Read a whitespace-tokenized corpus, one token list per non-empty line."""
    lines = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        toks = raw.split()
        if not toks:
            continue
        if lowercase:
            toks = [t.lower() for t in toks]
        lines.append(toks)
    return lines


def build_vocab(lines: Sequence[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary over tokenized lines.

    Words seen fewer than min_count times map to the unknown token. The
    unigram distribution is computed over the mapped corpus with one EOS
    appended per line, so reserved tokens carry their realized
    frequencies (plus the vanishing floor that keeps them positive).
    Ids are dense from 0: reserved tokens first, then words ordered by
    descending count with ties broken alphabetically.
    """
    if not lines:
        raise ValueError("empty corpus")
    counter = Counter(tok for line in lines for tok in line)
    kept = sorted(
        (w for w, c in counter.items() if c >= min_count and w not in _RESERVED),
        key=lambda w: (-counter[w], w),
    )
    words = list(_RESERVED) + kept
    index = {w: i for i, w in enumerate(words)}
    counts = np.zeros(len(words), dtype=np.int64)
    for w, c in counter.items():
        counts[index.get(w, 0)] += c  # below-threshold words fold into unknown
    counts[1] += len(lines)  # one EOS per line
    total = counts.sum()
    unigram = (counts + UNIGRAM_FLOOR) / (total + UNIGRAM_FLOOR * len(words))
    unigram /= unigram.sum()
    return Vocabulary(words=words, unigram=unigram, counts=counts)


def encode_lines(lines: Sequence[Sequence[str]], vocab: Vocabulary) -> np.ndarray:
    """Map lines to a flat id sequence with EOS appended to every line."""
    ids: list[int] = []
    eos = vocab.eos_id
    for line in lines:
        ids.extend(vocab.lookup(t) for t in line)
        ids.append(eos)
    return np.array(ids, dtype=np.int64)


@dataclass
class BatchStream:
    """Token ids split into contiguous lanes, windowed for truncated BPTT.

    The id sequence is cut into ``batch_size`` equal contiguous lanes
    (trailing remainder dropped) and iterated in (input, target) windows
    of ``bptt`` columns, targets being inputs shifted by one. Recurrent
    state is meant to carry across consecutive windows; ``carry_state``
    records that convention.
    """

    lanes: np.ndarray  # (batch_size, lane_len) int64
    bptt: int
    carry_state: bool = True

    @property
    def batch_size(self) -> int:
        return self.lanes.shape[0]

    @property
    def n_windows(self) -> int:
        return (self.lanes.shape[1] - 1) // self.bptt

    @property
    def n_tokens(self) -> int:
        return self.n_windows * self.batch_size * self.bptt

    def windows(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        t = self.bptt
        for j in range(self.n_windows):
            yield self.lanes[:, j * t : (j + 1) * t], self.lanes[:, j * t + 1 : (j + 1) * t + 1]


def batchify(ids: np.ndarray, batch_size: int, bptt: int) -> BatchStream:
    """Arrange a token-id sequence into a BatchStream.

    Emits exactly floor((len(ids)/batch_size - 1)/bptt) full prediction
    windows; a partial trailing window is never produced.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size < 1 or bptt < 1:
        raise ValueError("batch_size and bptt must be positive")
    if batch_size * bptt > len(ids):
        raise ValueError(
            f"need at least batch_size*bptt={batch_size * bptt} tokens, got {len(ids)}"
        )
    lane_len = len(ids) // batch_size
    lanes = ids[: batch_size * lane_len].reshape(batch_size, lane_len)
    return BatchStream(lanes=lanes, bptt=bptt)


def sample_noise(vocab: Vocabulary, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw k word ids i.i.d. from the unigram distribution.

    Inverse-CDF sampling via binary search; deterministic given the
    generator state.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cdf = vocab.noise_cdf()
    idx = np.searchsorted(cdf, rng.random(k), side="right")
    return np.minimum(idx, vocab.size - 1).astype(np.int64)


@dataclass
class CompletionItem:
    """A cloze sentence with one gap and exactly five candidate fillers."""

    token_ids: np.ndarray  # sentence ids with the gap id at gap_index
    gap_index: int
    candidate_ids: np.ndarray  # (5,)
    candidate_words: list[str]
    answer: int | None = None


def load_completions(path, vocab: Vocabulary, lowercase: bool = False) -> list[CompletionItem]:
    """Parse a completion task file.

    Line format: ``tok ... ___ ... tok | cand1 cand2 cand3 cand4 cand5 | answer``
    with the answer index optional. Out-of-vocabulary words (candidates
    included) map to the unknown id.
    """
    items = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) not in (2, 3):
            raise CompletionParseError(
                f"line {lineno}: expected 'sentence | five candidates [| answer]'"
            )
        tokens = parts[0].split()
        if lowercase:
            tokens = [t if t == GAP_TOKEN else t.lower() for t in tokens]
        gaps = [i for i, t in enumerate(tokens) if t == GAP_TOKEN]
        if len(gaps) != 1:
            raise CompletionParseError(f"line {lineno}: exactly one gap marker required")
        cands = parts[1].split()
        if lowercase:
            cands = [c.lower() for c in cands]
        if len(cands) != 5:
            raise CompletionParseError(f"line {lineno}: expected 5 candidates, got {len(cands)}")
        if len(set(cands)) != 5:
            raise CompletionParseError(f"line {lineno}: candidates must be distinct")
        answer = None
        if len(parts) == 3 and parts[2]:
            try:
                answer = int(parts[2])
            except ValueError:
                raise CompletionParseError(f"line {lineno}: answer index must be an integer")
            if not 0 <= answer <= 4:
                raise CompletionParseError(f"line {lineno}: answer index out of range")
        items.append(
            CompletionItem(
                token_ids=vocab.to_ids(tokens),
                gap_index=gaps[0],
                candidate_ids=vocab.to_ids(cands),
                candidate_words=cands,
                answer=answer,
            )
        )
    return items
