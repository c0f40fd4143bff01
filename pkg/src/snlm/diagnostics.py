"""Evaluation metrics: partition statistics (mu_z, sigma_z), normalized
and unnormalized perplexity, the shift correction, prediction entropy,
the entropy/log-partition correlation, and cloze-task scoring.

All functions accept either a LanguageModel or a ShiftedModel. Normalized
quantities are computed from raw scores (a uniform shift cancels in them
analytically, and computing them shift-free keeps the invariance exact in
floating point); the shift enters only unnormalized scores and partition
values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import EOS_ID, BatchStream, CompletionItem
from .model import EncoderState, LanguageModel, encode, flatten_targets, raw_scores
from .numerics import Tape, logsumexp, row_logsumexp

__all__ = [
    "DiagnosticsReport",
    "Histogram2D",
    "ShiftedModel",
    "UndefinedCorrelationError",
    "eval_diagnostics",
    "shift",
    "entropy",
    "pearson",
    "entropy_logz_correlation",
    "CompletionResult",
    "CompletionReport",
    "ItemChoice",
    "complete",
    "completion_report",
    "write_completions_csv",
    "diagnose",
]


class UndefinedCorrelationError(ValueError):
    """Pearson correlation is undefined when either coordinate is constant."""


@dataclass
class ShiftedModel:
    """A model whose every raw score is reduced by a measured constant.

    The shift centers log-partition values around zero; normalized
    probabilities are untouched by construction.
    """

    base: LanguageModel
    shift: float

    def score(self, context: np.ndarray, w: int) -> float:
        from .model import score as base_score

        return base_score(self.base, context, w) - self.shift

    def log_partition(self, context: np.ndarray) -> float:
        from .model import log_partition as base_log_partition

        return base_log_partition(self.base, context) - self.shift


def _unwrap(model) -> tuple[LanguageModel, float]:
    if isinstance(model, ShiftedModel):
        return model.base, model.shift
    return model, 0.0


@dataclass
class Histogram2D:
    """2-D histogram over (entropy, log partition) pairs with bin edges."""

    counts: np.ndarray  # (h_bins, z_bins)
    h_edges: np.ndarray
    z_edges: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["h_bin_lo", "h_bin_hi", "z_bin_lo", "z_bin_hi", "count"])
            for i in range(self.counts.shape[0]):
                for j in range(self.counts.shape[1]):
                    writer.writerow(
                        [
                            repr(float(self.h_edges[i])),
                            repr(float(self.h_edges[i + 1])),
                            repr(float(self.z_edges[j])),
                            repr(float(self.z_edges[j + 1])),
                            int(self.counts[i, j]),
                        ]
                    )


@dataclass
class DiagnosticsReport:
    """Partition statistics and perplexities over evaluated contexts."""

    mu_z: float
    sigma_z: float
    perp: float
    u_perp: float
    n_contexts: int
    pearson_r: float | None = None
    histogram: Histogram2D | None = None

    def write_csv(self, path) -> None:
        rows = [
            ("mu_z", repr(self.mu_z)),
            ("sigma_z", repr(self.sigma_z)),
            ("perp", repr(self.perp)),
            ("u_perp", repr(self.u_perp)),
            ("n_contexts", str(self.n_contexts)),
        ]
        if self.pearson_r is not None:
            rows.append(("pearson_r", repr(self.pearson_r)))
        lines = ["metric,value"] + [f"{k},{v}" for k, v in rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _iter_windows(model: LanguageModel, stream: BatchStream):
    """Yield (raw score matrix, flat targets) per window, state carried."""
    state = EncoderState.zeros(model, stream.batch_size)
    tape = Tape(grad=False)
    for x, y in stream.windows():
        contexts, state = encode(model, state, x, tape, train=False)
        yield raw_scores(model, contexts.values), flatten_targets(y)


def eval_diagnostics(model, stream: BatchStream) -> DiagnosticsReport:
    """Exact per-context evaluation over a batch stream.

    For every context: the full score row, its log partition, the
    normalized target log-probability, and the raw (unnormalized) target
    score. mu_z and sigma_z are the mean and population standard
    deviation of the log partition; perp = exp(-mean normalized
    log-probability); u_perp the same from raw scores.
    """
    base, offset = _unwrap(model)
    logz_parts, logp_parts, raw_parts = [], [], []
    for scores, targets in _iter_windows(base, stream):
        logz = row_logsumexp(scores)
        tgt = scores[np.arange(len(targets)), targets]
        logz_parts.append(logz)
        logp_parts.append(tgt - logz)
        raw_parts.append(tgt)
    if not logz_parts:
        raise ValueError("empty evaluation stream")
    logz_all = np.concatenate(logz_parts) - offset
    logp_all = np.concatenate(logp_parts)
    raw_all = np.concatenate(raw_parts) - offset
    return DiagnosticsReport(
        mu_z=float(np.mean(logz_all)),
        sigma_z=float(np.std(logz_all)),
        perp=float(np.exp(-np.mean(logp_all))),
        u_perp=float(np.exp(-np.mean(raw_all))),
        n_contexts=len(logz_all),
    )


def shift(model, dev_stream: BatchStream) -> ShiftedModel:
    """Center the model's log partitions on a held-out stream.

    Measures mu_z on the stream and returns a wrapper subtracting it from
    every score; re-measuring mu_z of the result on the same stream gives
    zero (up to accumulation rounding). Shifting an already shifted model
    composes the offsets.
    """
    measured = eval_diagnostics(model, dev_stream).mu_z
    base, offset = _unwrap(model)
    return ShiftedModel(base=base, shift=offset + measured)


def entropy(model, context: np.ndarray) -> float:
    """Entropy of the predicted distribution for one context vector."""
    base, _ = _unwrap(model)
    scores = raw_scores(base, np.asarray(context)[None, :])[0]
    logz = logsumexp(scores)
    p = np.exp(scores - logz)
    return max(float(logz - p @ scores), 0.0)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Plain textbook Pearson correlation; raises when undefined."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("need two aligned samples of size >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(dx @ dx)
    vy = float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        raise UndefinedCorrelationError("zero variance in one coordinate")
    return float(dx @ dy) / np.sqrt(vx * vy)


def _entropy_logz_pairs(model, stream: BatchStream, max_contexts: int | None = None):
    base, offset = _unwrap(model)
    h_parts, z_parts = [], []
    seen = 0
    for scores, _ in _iter_windows(base, stream):
        logz = row_logsumexp(scores)
        p = np.exp(scores - logz[:, None])
        h = np.maximum(logz - (p * scores).sum(axis=1), 0.0)
        h_parts.append(h)
        z_parts.append(logz - offset)
        seen += len(logz)
        if max_contexts is not None and seen >= max_contexts:
            break
    if not h_parts:
        raise ValueError("empty evaluation stream")
    h_all = np.concatenate(h_parts)
    z_all = np.concatenate(z_parts)
    if max_contexts is not None:
        h_all, z_all = h_all[:max_contexts], z_all[:max_contexts]
    return h_all, z_all


def entropy_logz_correlation(
    model,
    stream: BatchStream,
    bins: tuple[int, int] = (50, 50),
    max_contexts: int | None = None,
) -> tuple[float, Histogram2D]:
    """Pearson correlation of (entropy, log partition) plus a 2-D histogram.

    Histogram ranges are data driven and the edges are part of the
    payload, so the CSV is self-describing.
    """
    h_all, z_all = _entropy_logz_pairs(model, stream, max_contexts)
    r = pearson(h_all, z_all)
    counts, h_edges, z_edges = np.histogram2d(h_all, z_all, bins=bins)
    return r, Histogram2D(counts=counts.astype(np.int64), h_edges=h_edges, z_edges=z_edges)


def diagnose(
    model,
    stream: BatchStream,
    correlation: bool = False,
    bins: tuple[int, int] = (50, 50),
    max_contexts: int | None = None,
) -> DiagnosticsReport:
    """eval_diagnostics plus, optionally, the correlation and histogram."""
    report = eval_diagnostics(model, stream)
    if correlation:
        r, hist = entropy_logz_correlation(model, stream, bins=bins, max_contexts=max_contexts)
        report.pearson_r = r
        report.histogram = hist
    return report


# ---- sentence completion ------------------------------------------------


@dataclass
class ItemChoice:
    item_id: int
    choice: int
    correct: bool | None
    score_gap: float  # winning score minus runner-up


@dataclass
class CompletionResult:
    accuracy: float | None
    choices: list[ItemChoice]
    n_unanswered: int


def _candidate_scores(model, items: list[CompletionItem]):
    """Per item: (normalized, unnormalized) sentence scores, shape (5,).

    Each candidate fills the gap, the whole sentence is re-encoded from a
    fresh zero state primed with EOS, and per-word scores are summed over
    every sentence position.
    """
    base, offset = _unwrap(model)
    for item in items:
        n_cands = len(item.candidate_ids)
        sent = np.tile(item.token_ids, (n_cands, 1))
        sent[:, item.gap_index] = item.candidate_ids
        # Prime the encoder with the sentence-boundary token so the first
        # word is predicted from a defined context.
        inputs = np.concatenate(
            [np.full((n_cands, 1), EOS_ID, dtype=np.int64), sent[:, :-1]], axis=1
        )
        state = EncoderState.zeros(base, n_cands)
        tape = Tape(grad=False)
        contexts, _ = encode(base, state, inputs, tape, train=False)
        scores = raw_scores(base, contexts.values)
        targets = flatten_targets(sent)
        rows = np.arange(len(targets))
        tgt = scores[rows, targets]
        logz = row_logsumexp(scores)
        # step-major rows: position t of lane b sits at row t*n_cands + b
        norm = (tgt - logz).reshape(-1, n_cands).sum(axis=0)
        unnorm = (tgt - offset).reshape(-1, n_cands).sum(axis=0)
        yield norm, unnorm


def _choose(items: list[CompletionItem], per_item_scores) -> CompletionResult:
    choices = []
    n_correct = 0
    n_answered = 0
    for item_id, (item, scores) in enumerate(zip(items, per_item_scores)):
        order = np.argsort(-scores, kind="stable")
        pick = int(np.argmax(scores))  # first max wins ties
        gap = float(scores[order[0]] - scores[order[1]])
        correct = None
        if item.answer is not None:
            correct = pick == item.answer
            n_answered += 1
            n_correct += int(correct)
        choices.append(ItemChoice(item_id=item_id, choice=pick, correct=correct, score_gap=gap))
    accuracy = n_correct / n_answered if n_answered else None
    return CompletionResult(
        accuracy=accuracy, choices=choices, n_unanswered=len(items) - n_answered
    )


def complete(model, items: list[CompletionItem], mode: str = "normalized") -> CompletionResult:
    """Choose the gap filler maximizing the summed sentence score.

    mode selects normalized (score minus log partition per word) or
    unnormalized (raw score per word) sums. Ties go to the lowest
    candidate index. Items without a recorded answer are excluded from
    accuracy and counted in n_unanswered.
    """
    if mode not in ("normalized", "unnormalized"):
        raise ValueError(f"unknown mode {mode!r}")
    if not items:
        raise ValueError("no completion items")
    idx = 0 if mode == "normalized" else 1
    return _choose(items, (pair[idx] for pair in _candidate_scores(model, items)))


@dataclass
class CompletionReport:
    normalized: CompletionResult
    unnormalized: CompletionResult
    delta_acc: float | None  # unnormalized minus normalized accuracy


def completion_report(model, items: list[CompletionItem]) -> CompletionReport:
    """Run both scoring modes, encoding each candidate sentence once, and
    report the accuracy delta between them."""
    if not items:
        raise ValueError("no completion items")
    scored = list(_candidate_scores(model, items))
    norm = _choose(items, [pair[0] for pair in scored])
    unnorm = _choose(items, [pair[1] for pair in scored])
    delta = None
    if norm.accuracy is not None and unnorm.accuracy is not None:
        delta = unnorm.accuracy - norm.accuracy
    return CompletionReport(normalized=norm, unnormalized=unnorm, delta_acc=delta)


def write_completions_csv(result: CompletionResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["item_id", "choice", "correct", "score_gap"])
        for c in result.choices:
            writer.writerow(
                [c.item_id, c.choice, "" if c.correct is None else int(c.correct), repr(c.score_gap)]
            )
