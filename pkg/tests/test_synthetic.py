"""The seeded bigram corpus generator."""

import numpy as np

from snlm.corpus import build_vocab
from snlm.synthetic import BigramChain


class TestBigramChain:
    def test_deterministic_given_seeds(self):
        a = BigramChain.random(50, seed=3).sample_lines(2000, seed=4)
        b = BigramChain.random(50, seed=3).sample_lines(2000, seed=4)
        assert a == b

    def test_token_budget_reached(self):
        lines = BigramChain.random(40, seed=1).sample_lines(5000, seed=2)
        total = sum(len(line) + 1 for line in lines)  # EOS included
        assert total >= 5000
        assert total <= 5000 + 2000  # one sentence of overshoot at most, loosely

    def test_words_come_from_the_chain_vocabulary(self):
        chain = BigramChain.random(30, seed=5)
        lines = chain.sample_lines(3000, seed=6)
        seen = {tok for line in lines for tok in line}
        assert seen <= set(chain.words)
        assert len(seen) > 15  # the chain actually circulates

    def test_conditional_entropy_varies_across_words(self):
        # rows are drawn with log-uniform concentrations: some nearly
        # deterministic, some nearly flat
        chain = BigramChain.random(200, seed=7)
        probs = np.diff(np.concatenate([np.zeros((200, 1)), chain.cdfs], axis=1), axis=1)
        ent = -np.sum(np.where(probs > 0, probs * np.log(np.maximum(probs, 1e-300)), 0.0), axis=1)
        assert ent.min() < 0.8
        assert ent.max() > 2.2

    def test_feeds_vocabulary_pipeline(self):
        lines = BigramChain.random(60, seed=8).sample_lines(4000, seed=9)
        vocab = build_vocab(lines, min_count=1)
        assert vocab.size > 40
        assert vocab.unigram.sum() == 1.0 or abs(vocab.unigram.sum() - 1.0) < 1e-12
