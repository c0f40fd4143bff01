"""The five training losses and their shared pieces.

Every loss is the per-token mean of the negated training score, so that
learning-rate scales are comparable across methods:

  sm     exact softmax negative log likelihood
  dev    sm plus alpha * mean (log Z)^2 over all contexts
  and    negated raw target score plus the (alpha/gamma)-scaled penalty
         on a Bernoulli(gamma) subsample of contexts
  nce    noise-contrastive discrimination against k unigram samples;
         no partition sum is ever formed
  nce-r  nce plus the same subsampled penalty as `and`

The optional squash maps every raw score x to 10*tanh(x/5) before both
terms of the `and` loss. Bounding the scores is what keeps that loss
from diverging: its first term rewards raw scores without limit.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .corpus import Vocabulary, sample_noise
from .model import LanguageModel
from .numerics import Tape, Tensor, sigmoid

__all__ = [
    "Method",
    "ObjectiveConfig",
    "LossValue",
    "squash",
    "nce_posterior",
    "sm_loss",
    "dev_loss",
    "and_loss",
    "nce_loss",
    "ncer_loss",
    "compute_loss",
]


class Method(str, Enum):
    SM = "sm"
    DEV = "dev"
    AND = "and"
    NCE = "nce"
    NCE_R = "nce-r"


@dataclass
class ObjectiveConfig:
    """Method selector plus the hyperparameters the losses consult.

    alpha weights the (log Z)^2 penalty, gamma is the penalty sampling
    rate, k the number of noise samples per token. squash defaults to on
    for the `and` method and off elsewhere; noise is drawn fresh per
    token unless sharing is requested.
    """

    method: Method
    alpha: float = 0.0
    gamma: float = 0.1
    k: int = 100
    squash: bool | None = None
    noise: str = "per_token"  # or "shared"

    def __post_init__(self):
        self.method = Method(self.method)
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.noise not in ("per_token", "shared"):
            raise ValueError(f"unknown noise mode {self.noise!r}")

    @property
    def use_squash(self) -> bool:
        return self.method is Method.AND if self.squash is None else self.squash


@dataclass
class LossValue:
    """Scalar loss on the tape plus bookkeeping for logs and tests."""

    loss: Tensor
    n_tokens: int
    reg_term: float = 0.0
    n_penalized: int = 0

    def item(self) -> float:
        return float(self.loss.values)


def squash(x):
    """Monotone squashing of raw scores into (-10, 10): 10*tanh(x/5)."""
    return 10.0 * np.tanh(np.asarray(x, dtype=np.float64) / 5.0)


def nce_posterior(m_value: float, w: int, vocab: Vocabulary, k: int) -> float:
    """Probability that (w, c) came from data rather than noise:
    sigmoid(m - log(k p(w)))."""
    p = float(vocab.unigram[w])
    if p <= 0.0:
        raise ValueError(f"word {w} has zero unigram probability")
    return float(sigmoid(m_value - np.log(k * p)))


def _squash_t(tape: Tape, x: Tensor) -> Tensor:
    return tape.scale(tape.tanh(tape.scale(x, 0.2)), 10.0)


def _full_scores(tape: Tape, model: LanguageModel, contexts: Tensor) -> Tensor:
    return tape.affine(contexts, model.embed_out, model.bias_out, transpose_w=True)


def _penalty_rows(n: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(gamma) subsample of token indices; gamma=1 keeps all rows
    and consumes no randomness."""
    if gamma >= 1.0:
        return np.arange(n)
    return np.flatnonzero(rng.random(n) < gamma)


def _logz_penalty(
    tape: Tape,
    model: LanguageModel,
    contexts: Tensor,
    rows: np.ndarray,
    alpha: float,
    gamma: float,
    n_tokens: int,
    use_squash: bool,
) -> Tensor:
    """(alpha/gamma) * (1/N) * sum over sampled contexts of (log Z)^2."""
    sub = tape.lookup(contexts, rows)
    scores = _full_scores(tape, model, sub)
    if use_squash:
        scores = _squash_t(tape, scores)
    logz = tape.logsumexp_rows(scores)
    return tape.scale(tape.sum(tape.square(logz)), alpha / (gamma * n_tokens))


def _softmax_core(
    model: LanguageModel,
    contexts: Tensor,
    targets: np.ndarray,
    alpha: float,
    tape: Tape,
) -> LossValue:
    n = len(targets)
    scores = _full_scores(tape, model, contexts)
    logz = tape.logsumexp_rows(scores)
    target_scores = tape.take_cols(scores, targets)
    nll = tape.scale(tape.sum(tape.sub(logz, target_scores)), 1.0 / n)
    if alpha == 0.0:
        return LossValue(nll, n)
    penalty = tape.scale(tape.sum(tape.square(logz)), alpha / n)
    return LossValue(
        tape.add(nll, penalty), n, reg_term=float(penalty.values), n_penalized=n
    )


def sm_loss(model, vocab, contexts, targets, cfg, rng, tape) -> LossValue:
    """Exact softmax NLL: mean of log Z - target score."""
    return _softmax_core(model, contexts, targets, 0.0, tape)


def dev_loss(model, vocab, contexts, targets, cfg, rng, tape) -> LossValue:
    """Softmax NLL with an explicit (log Z)^2 penalty on every context.

    The partition sum is computed once per token and reused by both
    terms; alpha=0 reproduces sm_loss bitwise.
    """
    return _softmax_core(model, contexts, targets, cfg.alpha, tape)


def and_loss(model, vocab, contexts, targets, cfg, rng, tape) -> LossValue:
    """Partition-free first term plus a subsampled (log Z)^2 penalty.

    The first term is just the negated raw target score, so with alpha=0
    no partition sum is ever formed. When squashing is active every raw
    score passes through 10*tanh(x/5) before both terms.
    """
    n = len(targets)
    emb = tape.lookup(model.embed_out, targets[:, None])
    m = tape.add(tape.bdot(contexts, emb), tape.lookup(model.bias_out, targets[:, None]))
    if cfg.use_squash:
        m = _squash_t(tape, m)
    first = tape.scale(tape.sum(m), -1.0 / n)
    if cfg.alpha == 0.0:
        return LossValue(first, n)
    rows = _penalty_rows(n, cfg.gamma, rng)
    if rows.size == 0:
        return LossValue(first, n)
    penalty = _logz_penalty(
        tape, model, contexts, rows, cfg.alpha, cfg.gamma, n, cfg.use_squash
    )
    return LossValue(
        tape.add(first, penalty), n, reg_term=float(penalty.values), n_penalized=rows.size
    )


def _nce_core(model, vocab, contexts, targets, cfg, rng, tape) -> LossValue:
    n, k = len(targets), cfg.k
    if cfg.noise == "shared":
        noise = np.broadcast_to(sample_noise(vocab, k, rng), (n, k))
    else:
        noise = sample_noise(vocab, n * k, rng).reshape(n, k)
    ids = np.concatenate([targets[:, None], noise], axis=1)  # (n, k+1), target first
    emb = tape.lookup(model.embed_out, ids)
    m = tape.add(tape.bdot(contexts, emb), tape.lookup(model.bias_out, ids))
    shifted = tape.sub(m, np.log(k * vocab.unigram[ids]))
    pos = tape.log_sigmoid(tape.slice_cols(shifted, 0, 1))
    neg = tape.log_sigmoid(tape.scale(tape.slice_cols(shifted, 1, k + 1), -1.0))
    total = tape.add(tape.sum(pos), tape.sum(neg))
    return LossValue(tape.scale(total, -1.0 / n), n)


def nce_loss(model, vocab, contexts, targets, cfg, rng, tape) -> LossValue:
    """Noise-contrastive loss against k unigram samples per token.

    Per token: -[log sigmoid(m - log k p(w)) + sum over noise of
    log(1 - sigmoid(m_i - log k p(w_i)))], using log(1 - sigmoid(x)) =
    log_sigmoid(-x). The target may also be drawn as noise; there is no
    deduplication.
    """
    return _nce_core(model, vocab, contexts, targets, cfg, rng, tape)


def ncer_loss(model, vocab, contexts, targets, cfg, rng, tape) -> LossValue:
    """NCE plus the subsampled (log Z)^2 penalty; alpha=0 reproduces
    nce_loss bitwise and draws no subsampling randomness."""
    base = _nce_core(model, vocab, contexts, targets, cfg, rng, tape)
    if cfg.alpha == 0.0:
        return base
    rows = _penalty_rows(base.n_tokens, cfg.gamma, rng)
    if rows.size == 0:
        return base
    penalty = _logz_penalty(
        tape, model, contexts, rows, cfg.alpha, cfg.gamma, base.n_tokens, False
    )
    return LossValue(
        tape.add(base.loss, penalty),
        base.n_tokens,
        reg_term=float(penalty.values),
        n_penalized=rows.size,
    )


_LOSSES = {
    Method.SM: sm_loss,
    Method.DEV: dev_loss,
    Method.AND: and_loss,
    Method.NCE: nce_loss,
    Method.NCE_R: ncer_loss,
}


def compute_loss(
    model: LanguageModel,
    vocab: Vocabulary,
    contexts: Tensor,
    targets: np.ndarray,
    cfg: ObjectiveConfig,
    rng: np.random.Generator,
    tape: Tape,
) -> LossValue:
    """Dispatch to the configured training loss."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 1 or len(targets) != contexts.values.shape[0]:
        raise ValueError("targets must be flat and aligned with context rows")
    return _LOSSES[cfg.method](model, vocab, contexts, targets, cfg, rng, tape)
