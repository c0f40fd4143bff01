"""Session-scoped fixtures for the desk-scale acceptance runs.

The acceptance suite trains eight models on one synthetic corpus; the
fixtures below are built lazily and shared so each model trains exactly
once per session.
"""

import time
from dataclasses import dataclass

import numpy as np
import pytest

from snlm.corpus import BatchStream, Vocabulary, batchify, build_vocab, encode_lines
from snlm.model import LanguageModel
from snlm.objectives import ObjectiveConfig
from snlm.synthetic import BigramChain
from snlm.trainer import TrainConfig, TrainLog, train

# Desk-scale regimen: d=64, 10 epochs over a ~200K-token corpus. The base
# learning rate is 10 because the losses are per-token means (see the
# TrainConfig docstring); init_scale 0.25 gives the 2-layer LSTM a usable
# signal at this width.
DESK = dict(
    vocab_size=1000,
    train_tokens=200_000,
    valid_tokens=20_000,
    test_tokens=20_000,
    dim=64,
    epochs=10,
    lr=10.0,
    init_scale=0.25,
    batch_size=20,
    bptt=20,
)


@dataclass
class DeskData:
    vocab: Vocabulary
    train: BatchStream
    valid: BatchStream
    test: BatchStream


@dataclass
class DeskRun:
    model: LanguageModel
    log: TrainLog
    seconds: float

    @property
    def final(self):
        return self.log.records[-1]


@pytest.fixture(scope="session")
def desk_data():
    chain = BigramChain.random(DESK["vocab_size"], seed=11)
    train_lines = chain.sample_lines(DESK["train_tokens"], seed=12)
    valid_lines = chain.sample_lines(DESK["valid_tokens"], seed=13)
    test_lines = chain.sample_lines(DESK["test_tokens"], seed=14)
    vocab = build_vocab(train_lines, min_count=1)
    b, t = DESK["batch_size"], DESK["bptt"]
    return DeskData(
        vocab=vocab,
        train=batchify(encode_lines(train_lines, vocab), b, t),
        valid=batchify(encode_lines(valid_lines, vocab), b, t),
        test=batchify(encode_lines(test_lines, vocab), b, t),
    )


def train_desk(data: DeskData, method: str, alpha=0.0, gamma=0.1, k=100, seed=101) -> DeskRun:
    model = LanguageModel.create(
        data.vocab.size,
        DESK["dim"],
        rng=np.random.default_rng(seed),
        dropout=0.0,
        init_scale=DESK["init_scale"],
    )
    cfg = TrainConfig(
        objective=ObjectiveConfig(method=method, alpha=alpha, gamma=gamma, k=k),
        epochs=DESK["epochs"],
        lr=DESK["lr"],
        lr_decay=1.2,
        decay_start=6,
        clip=5.0,
        batch_size=DESK["batch_size"],
        bptt=DESK["bptt"],
        seed=seed,
        eval_every=5,
    )
    start = time.perf_counter()
    log = train(model, data.vocab, data.train, data.valid, cfg)
    return DeskRun(model=model, log=log, seconds=time.perf_counter() - start)


@pytest.fixture(scope="session")
def desk_sm(desk_data):
    return train_desk(desk_data, "sm")


@pytest.fixture(scope="session")
def desk_nce(desk_data):
    return train_desk(desk_data, "nce", k=100)


@pytest.fixture(scope="session")
def desk_dev_sweep(desk_data):
    return {alpha: train_desk(desk_data, "dev", alpha=alpha) for alpha in (0.1, 1.0, 10.0)}


@pytest.fixture(scope="session")
def desk_ncer_sweep(desk_data):
    return {
        alpha: train_desk(desk_data, "nce-r", alpha=alpha, gamma=0.1, k=20)
        for alpha in (0.1, 1.0, 10.0)
    }
