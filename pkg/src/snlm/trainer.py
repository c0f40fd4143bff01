"""SGD training loop: truncated BPTT with state carry-over, global
gradient-norm clipping, and epoch-indexed learning-rate decay."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import BatchStream, Vocabulary
from .model import EncoderState, LanguageModel, encode, flatten_targets
from .numerics import Tape, Tensor
from .objectives import ObjectiveConfig, compute_loss

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "NonFiniteLossError",
    "NonFiniteGradientError",
    "learning_rate",
    "sgd_step",
    "train",
]


class NonFiniteLossError(RuntimeError):
    """Training aborted on a NaN/Inf loss; the message names the window."""


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Training regimen knobs.

    The learning rate at epoch e (1-based) is lr / lr_decay^max(0, e -
    decay_start), i.e. the base rate holds through decay_start epochs and
    is divided by lr_decay each epoch after. The `mscc` preset instead
    halves the rate after every epoch starting from the first.
    """

    objective: ObjectiveConfig
    epochs: int = 20
    lr: float = 1.0
    lr_decay: float = 1.2
    decay_start: int = 6
    clip: float = 5.0
    batch_size: int = 20
    bptt: int = 20
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.bptt < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size, bptt, eval_every must be positive")
        if self.lr <= 0 or self.clip <= 0:
            raise ValueError("lr and clip must be positive")
        if self.lr_decay <= 1.0:
            raise ValueError("lr_decay must exceed 1 (the rate is divided by it)")

    @classmethod
    def mscc(cls, objective: ObjectiveConfig, **kwargs) -> "TrainConfig":
        """Halve the learning rate after every epoch, starting at once."""
        return cls(objective=objective, lr_decay=2.0, decay_start=1, **kwargs)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr / cfg.lr_decay ** max(0, epoch - cfg.decay_start)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ppl: float
    mu_z: float
    sigma_z: float
    seconds: float


@dataclass
class TrainLog:
    """One record per completed epoch, written as CSV."""

    records: list[EpochRecord] = field(default_factory=list)

    HEADER = "epoch,loss,ppl,mu_z,sigma_z,seconds"

    def write_csv(self, path) -> None:
        lines = [self.HEADER]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.loss!r},{r.ppl!r},{r.mu_z!r},{r.sigma_z!r},{r.seconds!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sgd_step(params: Iterable[Tensor], lr: float, clip: float) -> None:
    """Clip the global gradient norm to `clip`, step, and zero the grads."""
    params = list(params)
    sq = 0.0
    for p in params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError("non-finite gradient")
        g = p.grad.reshape(-1)
        sq += float(g @ g)
    norm = math.sqrt(sq)
    scale = 1.0 if norm <= clip or norm == 0.0 else clip / norm
    for p in params:
        if p.grad is None:
            continue
        p.values -= (lr * scale) * p.grad
        p.grad.fill(0.0)


def train(
    model: LanguageModel,
    vocab: Vocabulary,
    train_stream: BatchStream,
    valid_stream: BatchStream | None,
    cfg: TrainConfig,
) -> TrainLog:
    """Fit the model; deterministic given the seed.

    LSTM state carries across windows within an epoch and resets at epoch
    boundaries. The gradient of every window is clipped on the global
    norm across all parameters before the SGD update.
    """
    from .diagnostics import eval_diagnostics  # local import avoids a cycle

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    log = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = learning_rate(cfg, epoch)
        state = EncoderState.zeros(model, train_stream.batch_size)
        losses = []
        for w_idx, (x, y) in enumerate(train_stream.windows()):
            tape = Tape()
            contexts, state = encode(model, state, x, tape, train=True, rng=rng)
            lv = compute_loss(model, vocab, contexts, flatten_targets(y), cfg.objective, rng, tape)
            value = lv.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, window {w_idx} "
                    f"(method {cfg.objective.method.value})"
                )
            tape.backward(lv.loss)
            sgd_step(params, lr, cfg.clip)
            losses.append(value)
        if not losses:
            raise ValueError("training stream produced no windows")
        mean_loss = float(np.mean(losses))
        ppl = mu = sigma = float("nan")
        if valid_stream is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report = eval_diagnostics(model, valid_stream)
            ppl, mu, sigma = report.perp, report.mu_z, report.sigma_z
        log.records.append(
            EpochRecord(epoch, mean_loss, ppl, mu, sigma, time.perf_counter() - t0)
        )
    return log
