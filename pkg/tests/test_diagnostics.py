"""Partition diagnostics, shift correction, entropy, correlation, cloze scoring."""

import math

import numpy as np
import pytest

from snlm.corpus import batchify, build_vocab, load_completions
from snlm.diagnostics import (
    ShiftedModel,
    UndefinedCorrelationError,
    complete,
    completion_report,
    diagnose,
    entropy,
    entropy_logz_correlation,
    eval_diagnostics,
    pearson,
    shift,
    write_completions_csv,
)
from snlm.model import EncoderState, LanguageModel, encode
from snlm.numerics import Tape


def make_model(n_words, dim, seed=1, zero_out=False, dropout=0.0):
    return LanguageModel.create(
        n_words, dim, rng=np.random.default_rng(seed), dropout=dropout,
        zero_output_embeddings=zero_out,
    )


def varied_model(n_words, dim, seed=1):
    """A model whose predictions genuinely vary across contexts.

    Fresh init is nearly uniform (entropy variance ~1e-7), which makes
    oracle-equivalence assertions on correlations ill-conditioned; widen
    the output parameters instead.
    """
    model = make_model(n_words, dim, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    model.embed_out.values[...] = rng.normal(0, 0.6, model.embed_out.values.shape)
    model.bias_out.values[...] = rng.normal(0, 1.0, model.bias_out.values.shape)
    for layer in model.layers:
        layer.w.values[...] = rng.uniform(-0.4, 0.4, layer.w.values.shape)
    model.embed_in.values[...] = rng.uniform(-0.5, 0.5, model.embed_in.values.shape)
    return model


def make_stream(n_words, n_tokens=120, batch_size=2, bptt=5, seed=0):
    ids = np.random.default_rng(seed).integers(0, n_words, n_tokens)
    return batchify(ids, batch_size, bptt)


def enumeration_metrics(model, stream):
    """Per-context metrics by explicit loops over the vocabulary."""
    state = EncoderState.zeros(model, stream.batch_size)
    tape = Tape(grad=False)
    logz_all, logp_all, raw_all, entropies = [], [], [], []
    for x, y in stream.windows():
        contexts, state = encode(model, state, x, tape, train=False)
        ctx = contexts.values
        targets = np.ascontiguousarray(y.T).reshape(-1)
        for row, target in zip(ctx, targets):
            scores = [
                float(model.embed_out.values[w] @ row + model.bias_out.values[w])
                for w in range(model.vocab_size)
            ]
            z = sum(math.exp(s) for s in scores)
            probs = [math.exp(s) / z for s in scores]
            logz_all.append(math.log(z))
            logp_all.append(scores[target] - math.log(z))
            raw_all.append(scores[target])
            entropies.append(-sum(p * math.log(p) for p in probs if p > 0))
    return (
        np.array(logz_all),
        np.array(logp_all),
        np.array(raw_all),
        np.array(entropies),
    )


class TestEvalDiagnostics:
    def test_exactly_self_normalized_model(self):
        model = make_model(10, 6, zero_out=True)
        report = eval_diagnostics(model, make_stream(10))
        assert report.mu_z == pytest.approx(0.0, abs=1e-12)
        assert report.sigma_z == pytest.approx(0.0, abs=1e-12)
        assert report.perp == pytest.approx(10.0, abs=1e-9)
        assert report.u_perp == pytest.approx(10.0, abs=1e-9)

    def test_bias_shift_arithmetic(self):
        model = make_model(10, 6, zero_out=True)
        model.bias_out.values += 1.0
        report = eval_diagnostics(model, make_stream(10))
        assert report.mu_z == pytest.approx(1.0, abs=1e-12)
        assert report.sigma_z == pytest.approx(0.0, abs=1e-12)
        assert report.perp == pytest.approx(10.0, abs=1e-9)
        assert report.u_perp == pytest.approx(10.0 / math.e, abs=1e-9)

    def test_matches_enumeration_oracle(self):
        model = varied_model(12, 6, seed=5)
        stream = make_stream(12, n_tokens=52, batch_size=2, bptt=5, seed=3)
        report = eval_diagnostics(model, stream)
        logz, logp, raw, _ = enumeration_metrics(model, stream)
        assert report.n_contexts == len(logz) == 50
        assert report.mu_z == pytest.approx(logz.mean(), rel=1e-9)
        assert report.sigma_z == pytest.approx(logz.std(), rel=1e-9)
        assert report.perp == pytest.approx(math.exp(-logp.mean()), rel=1e-9)
        assert report.u_perp == pytest.approx(math.exp(-raw.mean()), rel=1e-9)

    def test_empty_stream_rejected(self):
        model = make_model(10, 6)
        stream = batchify(np.zeros(10, dtype=np.int64), 1, 10)  # zero full windows
        with pytest.raises(ValueError):
            eval_diagnostics(model, stream)


class TestShift:
    def test_centered_model_gets_zero_shift(self):
        model = make_model(10, 6, zero_out=True)
        shifted = shift(model, make_stream(10))
        assert shifted.shift == pytest.approx(0.0, abs=1e-12)

    def test_constant_partition_fully_corrected(self):
        model = make_model(10, 6, zero_out=True)
        model.bias_out.values += 3.0  # log Z = 3 for every context
        stream = make_stream(10)
        base = eval_diagnostics(model, stream)
        shifted = shift(model, stream)
        assert shifted.shift == pytest.approx(3.0, abs=1e-10)
        after = eval_diagnostics(shifted, stream)
        assert after.mu_z == pytest.approx(0.0, abs=1e-10)
        assert after.sigma_z == pytest.approx(base.sigma_z, abs=1e-12)

    def test_normalized_perplexity_invariant_exactly(self):
        model = make_model(12, 6, seed=7)
        stream = make_stream(12, seed=4)
        base = eval_diagnostics(model, stream)
        shifted = shift(model, stream)
        after = eval_diagnostics(shifted, stream)
        assert after.perp == base.perp  # bitwise
        # unnormalized perplexity scales by e^shift
        assert after.u_perp == pytest.approx(base.u_perp * math.exp(shifted.shift), rel=1e-12)

    def test_shift_composes(self):
        model = make_model(10, 6, zero_out=True)
        model.bias_out.values += 2.0
        stream = make_stream(10)
        once = shift(model, stream)
        twice = shift(once, stream)
        assert twice.shift == pytest.approx(once.shift, abs=1e-10)
        assert eval_diagnostics(twice, stream).mu_z == pytest.approx(0.0, abs=1e-10)

    def test_scoring_surface(self):
        model = make_model(10, 6, seed=9)
        wrapped = ShiftedModel(base=model, shift=0.75)
        c = np.random.default_rng(0).normal(0, 1, 6)
        from snlm.model import log_partition, score

        assert wrapped.score(c, 3) == pytest.approx(score(model, c, 3) - 0.75, abs=1e-12)
        assert wrapped.log_partition(c) == pytest.approx(log_partition(model, c) - 0.75, abs=1e-12)


class TestEntropy:
    def test_uniform_is_log_vocab(self):
        model = make_model(10, 6, zero_out=True)
        c = np.random.default_rng(0).normal(0, 1, 6)
        assert entropy(model, c) == pytest.approx(math.log(10), abs=1e-12)

    def test_near_delta_distribution(self):
        model = make_model(10, 6, zero_out=True)
        model.bias_out.values[4] += 50.0
        c = np.zeros(6)
        assert 0.0 <= entropy(model, c) <= 1e-15

    def test_matches_enumeration_oracle(self):
        model = make_model(8, 5, seed=11)
        rng = np.random.default_rng(2)
        for _ in range(5):
            c = rng.normal(0, 1, 5)
            scores = [
                float(model.embed_out.values[w] @ c + model.bias_out.values[w])
                for w in range(8)
            ]
            z = sum(math.exp(s) for s in scores)
            expected = -sum((math.exp(s) / z) * math.log(math.exp(s) / z) for s in scores)
            assert entropy(model, c) == pytest.approx(expected, abs=1e-12)

    def test_bounds_hold_over_stream(self):
        model = make_model(12, 6, seed=13)
        stream = make_stream(12, seed=5)
        _, _, _, entropies = enumeration_metrics(model, stream)
        assert np.all(entropies >= 0.0)
        assert np.all(entropies <= math.log(12) + 1e-12)


class TestCorrelation:
    def test_perfect_linear(self):
        x = np.arange(10.0)
        assert pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-12)

    def test_perfect_anticorrelation(self):
        x = np.arange(10.0)
        assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_textbook_formula_oracle(self):
        x = np.array([1.0, 2.0, 4.0, 4.5, 7.0])
        y = np.array([2.0, 1.0, 5.0, 3.0, 6.0])
        n = len(x)
        num = (x * y).sum() - n * x.mean() * y.mean()
        den = math.sqrt(((x**2).sum() - n * x.mean() ** 2) * ((y**2).sum() - n * y.mean() ** 2))
        assert pearson(x, y) == pytest.approx(num / den, abs=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson(np.ones(5), np.arange(5.0))

    def test_model_correlation_and_histogram(self):
        model = varied_model(12, 6, seed=15)
        stream = make_stream(12, n_tokens=200, seed=6)
        r, hist = entropy_logz_correlation(model, stream, bins=(6, 4))
        logz, _, _, entropies = enumeration_metrics(model, stream)
        assert r == pytest.approx(pearson(entropies, logz), rel=1e-9)
        assert hist.counts.shape == (6, 4)
        assert hist.counts.sum() == len(logz)  # marginals cover the sample
        assert hist.h_edges[0] <= entropies.min() and hist.h_edges[-1] >= entropies.max()

    def test_histogram_csv(self, tmp_path):
        model = make_model(12, 6, seed=15)
        _, hist = entropy_logz_correlation(model, make_stream(12, seed=6), bins=(3, 3))
        path = tmp_path / "hist.csv"
        hist.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "h_bin_lo,h_bin_hi,z_bin_lo,z_bin_hi,count"
        assert len(lines) == 1 + 9
        assert sum(int(line.rsplit(",", 1)[1]) for line in lines[1:]) == hist.counts.sum()

    def test_diagnose_attaches_correlation(self):
        model = make_model(12, 6, seed=15)
        report = diagnose(model, make_stream(12, seed=6), correlation=True, bins=(5, 5))
        assert report.pearson_r is not None
        assert report.histogram is not None

    def test_report_csv(self, tmp_path):
        model = make_model(12, 6, seed=15)
        report = diagnose(model, make_stream(12, seed=6))
        path = tmp_path / "diag.csv"
        report.write_csv(path)
        rows = dict(line.split(",") for line in path.read_text().splitlines()[1:])
        assert float(rows["mu_z"]) == report.mu_z
        assert int(rows["n_contexts"]) == report.n_contexts


# ---- completion scoring --------------------------------------------------


def make_items(vocab, sentences):
    """sentences: list of (tokens with one '___', candidates, answer)."""
    lines = []
    for tokens, cands, answer in sentences:
        suffix = f" | {answer}" if answer is not None else " |"
        lines.append(f"{' '.join(tokens)} | {' '.join(cands)}{suffix}")
    return lines


@pytest.fixture
def cloze_setup(tmp_path):
    lines = [["the", "cat", "sat", "on", "a", "mat"],
             ["a", "dog", "ran", "to", "the", "mat"]] * 3
    vocab = build_vocab(lines, min_count=1)
    model = make_model(vocab.size, 8, seed=21)

    def write_task(sentences):
        path = tmp_path / "task.txt"
        path.write_text("\n".join(make_items(vocab, sentences)) + "\n", encoding="utf-8")
        return load_completions(path, vocab)

    return vocab, model, write_task


def oracle_choice(model, vocab, item, mode):
    """Explicit per-candidate enumeration with naive softmax sums."""
    totals = []
    for cand in item.candidate_ids:
        sent = item.token_ids.copy()
        sent[item.gap_index] = cand
        inputs = np.concatenate([[vocab.eos_id], sent[:-1]])[None, :]
        ctx, _ = encode(model, EncoderState.zeros(model, 1),
                        inputs.astype(np.int64), Tape(grad=False))
        total = 0.0
        for t, target in enumerate(sent):
            scores = [
                float(model.embed_out.values[w] @ ctx.values[t] + model.bias_out.values[w])
                for w in range(model.vocab_size)
            ]
            if mode == "normalized":
                total += scores[target] - math.log(sum(math.exp(s) for s in scores))
            else:
                total += scores[target]
        totals.append(total)
    best = max(totals)
    return totals.index(best)  # first max: ties to the lowest index


class TestComplete:
    def test_self_normalized_model_modes_agree(self, cloze_setup):
        vocab, _, write_task = cloze_setup
        model = make_model(vocab.size, 8, zero_out=True, seed=22)
        items = write_task([
            (["the", "___", "sat", "on", "a", "mat"], ["cat", "dog", "mat", "on", "a"], 0),
            (["a", "___", "ran", "to", "the", "mat"], ["dog", "cat", "sat", "to", "the"], 0),
        ])
        report = completion_report(model, items)
        assert report.delta_acc == 0.0
        for a, b in zip(report.normalized.choices, report.unnormalized.choices):
            assert a.choice == b.choice

    def test_dominant_in_vocab_candidate_wins(self, cloze_setup):
        vocab, model, write_task = cloze_setup
        # four out-of-vocabulary candidates collapse to UNK; make UNK awful
        model.bias_out.values[vocab.unk_id] -= 25.0
        items = write_task([
            (["the", "___", "sat", "on", "a", "mat"],
             ["zeb", "qux", "cat", "yyz", "wub"], 2),
        ])
        result = complete(model, items, "normalized")
        assert result.choices[0].choice == 2
        assert result.accuracy == 1.0

    def test_all_unk_candidates_tie_to_lowest_index(self, cloze_setup):
        vocab, model, write_task = cloze_setup
        items = write_task([
            (["the", "___", "sat", "on", "a", "mat"],
             ["zeb", "qux", "nop", "yyz", "wub"], None),
        ])
        for mode in ("normalized", "unnormalized"):
            result = complete(model, items, mode)
            assert result.choices[0].choice == 0
            assert result.choices[0].score_gap == 0.0

    def test_matches_enumeration_oracle(self, cloze_setup):
        vocab, model, write_task = cloze_setup
        items = write_task([
            (["the", "___", "sat", "on", "a", "mat"], ["cat", "dog", "mat", "ran", "to"], 0),
            (["a", "dog", "___", "to", "the", "mat"], ["ran", "sat", "cat", "a", "mat"], 0),
            (["___", "cat", "sat", "on", "a", "mat"], ["the", "a", "to", "on", "dog"], 0),
        ])
        for mode in ("normalized", "unnormalized"):
            result = complete(model, items, mode)
            for item, choice in zip(items, result.choices):
                assert choice.choice == oracle_choice(model, vocab, item, mode)

    def test_normalized_choices_invariant_under_bias_shift(self, cloze_setup):
        vocab, model, write_task = cloze_setup
        items = write_task([
            (["the", "___", "sat", "on", "a", "mat"], ["cat", "dog", "mat", "ran", "to"], None),
            (["a", "dog", "___", "to", "the", "mat"], ["ran", "sat", "cat", "a", "mat"], None),
        ])
        before = [c.choice for c in complete(model, items, "normalized").choices]
        model.bias_out.values += 1.3
        after = [c.choice for c in complete(model, items, "normalized").choices]
        assert before == after

    def test_unanswered_items_excluded(self, cloze_setup):
        vocab, model, write_task = cloze_setup
        items = write_task([
            (["the", "___", "sat", "on", "a", "mat"], ["cat", "dog", "mat", "ran", "to"], 0),
            (["a", "dog", "___", "to", "the", "mat"], ["ran", "sat", "cat", "a", "mat"], None),
        ])
        result = complete(model, items, "normalized")
        assert result.n_unanswered == 1
        assert result.accuracy in (0.0, 1.0)  # computed over the single answered item

    def test_no_items_rejected(self, cloze_setup):
        _, model, _ = cloze_setup
        with pytest.raises(ValueError):
            complete(model, [], "normalized")

    def test_completions_csv(self, cloze_setup, tmp_path):
        vocab, model, write_task = cloze_setup
        items = write_task([
            (["the", "___", "sat", "on", "a", "mat"], ["cat", "dog", "mat", "ran", "to"], 0),
        ])
        result = complete(model, items, "normalized")
        path = tmp_path / "completions.csv"
        write_completions_csv(result, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "item_id,choice,correct,score_gap"
        assert len(lines) == 2
