"""Seeded bigram text generator for desk-scale experiments.

Each word has a small random successor set with its own Dirichlet
concentration, drawn log-uniformly, so some contexts are nearly
deterministic and others nearly flat. That heterogeneity gives the
trained models a genuine spread of prediction entropies, which is what
the partition-variance diagnostics need to show anything interesting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["BigramChain"]


@dataclass
class BigramChain:
    words: list[str]
    successors: np.ndarray  # (V, s) int
    cdfs: np.ndarray  # (V, s) cumulative successor probabilities
    start_cdf: np.ndarray  # (V,)
    end_prob: float

    @classmethod
    def random(
        cls,
        vocab_size: int,
        seed: int,
        n_successors: int = 24,
        end_prob: float = 0.05,
    ) -> "BigramChain":
        rng = np.random.default_rng(seed)
        n_successors = min(n_successors, vocab_size)
        words = [f"w{i:04d}" for i in range(vocab_size)]
        successors = np.empty((vocab_size, n_successors), dtype=np.int64)
        cdfs = np.empty((vocab_size, n_successors))
        for w in range(vocab_size):
            successors[w] = rng.choice(vocab_size, size=n_successors, replace=False)
            concentration = 10.0 ** rng.uniform(-1.3, 0.7)
            cdfs[w] = np.cumsum(rng.dirichlet(np.full(n_successors, concentration)))
        start = rng.dirichlet(np.ones(vocab_size))
        return cls(
            words=words,
            successors=successors,
            cdfs=cdfs,
            start_cdf=np.cumsum(start),
            end_prob=end_prob,
        )

    def sample_lines(self, n_tokens: int, seed: int) -> list[list[str]]:
        """Sample whole sentences until at least n_tokens tokens
        (end-of-sentence markers included in the count) are produced."""
        rng = np.random.default_rng(seed)
        lines: list[list[str]] = []
        produced = 0
        n_next = self.successors.shape[1]
        while produced < n_tokens:
            w = min(int(np.searchsorted(self.start_cdf, rng.random(), side="right")),
                    len(self.words) - 1)
            line = [self.words[w]]
            while rng.random() >= self.end_prob:
                j = min(int(np.searchsorted(self.cdfs[w], rng.random(), side="right")),
                        n_next - 1)
                w = int(self.successors[w, j])
                line.append(self.words[w])
            lines.append(line)
            produced += len(line) + 1  # the EOS counts too
        return lines
