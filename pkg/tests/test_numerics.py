"""Tape, stable kernels, and the finite-difference checker."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snlm.numerics import (
    NondeterministicFunctionError,
    Tape,
    TapeError,
    Tensor,
    grad_check,
    log_sigmoid,
    logsumexp,
    row_logsumexp,
    sigmoid,
)

# Frozen scalar oracles, computed once with mpmath at 50 digits.
LSE_123 = 3.4076059644443803045
LOG_HALF = -0.69314718055994530942
LOGSIG_1 = -0.31326168751822283405


class TestLogsumexp:
    def test_two_equal_terms(self):
        assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_singleton_identity(self):
        assert logsumexp([5.0]) == 5.0

    def test_direct_summation_oracle(self):
        assert logsumexp([1.0, 2.0, 3.0]) == pytest.approx(LSE_123, abs=1e-12)

    def test_huge_shift_no_overflow(self):
        assert logsumexp([1e308, 1e308]) == pytest.approx(1e308 + math.log(2), rel=1e-15)
        assert logsumexp([-1e308, -1e308]) == pytest.approx(-1e308, rel=1e-15)

    def test_empty_vector_rejected(self):
        with pytest.raises(ValueError):
            logsumexp([])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            logsumexp([0.0, np.nan])

    @given(st.lists(st.floats(-700, 700), min_size=1, max_size=40))
    @settings(max_examples=200, deadline=None)
    def test_bounds_property(self, values):
        out = logsumexp(values)
        assert out >= max(values) - 1e-12
        assert out <= max(values) + math.log(len(values)) + 1e-12

    def test_row_variant_matches_scalar(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0, 10, (7, 5))
        rows = row_logsumexp(a)
        for i in range(7):
            assert rows[i] == pytest.approx(logsumexp(a[i]), abs=1e-12)


class TestLogSigmoid:
    def test_at_zero(self):
        assert log_sigmoid(0.0) == pytest.approx(LOG_HALF, abs=1e-15)

    def test_deep_negative_asymptote(self):
        assert log_sigmoid(-1000.0) == pytest.approx(-1000.0, abs=1e-9)

    def test_scalar_oracle(self):
        assert log_sigmoid(1.0) == pytest.approx(LOGSIG_1, abs=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            log_sigmoid(float("inf"))

    @given(st.floats(-30, 30))
    @settings(max_examples=200, deadline=None)
    def test_sigmoid_complement_property(self, x):
        assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-12)


class TestBackward:
    def test_square_at_three(self):
        tape = Tape()
        x = Tensor(np.array(3.0))
        out = tape.sum(tape.square(x))
        tape.backward(out)
        assert float(x.grad) == pytest.approx(6.0, abs=1e-12)

    def test_log_sigmoid_at_zero(self):
        tape = Tape()
        x = Tensor(np.array(0.0))
        out = tape.sum(tape.log_sigmoid(x))
        tape.backward(out)
        assert float(x.grad) == pytest.approx(0.5, abs=1e-15)

    def test_composite_logsumexp_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(0, 1, (4, 3)))
        x = rng.normal(0, 1, (1, 3))

        def f():
            tape = Tape()
            scores = tape.matmul(Tensor(x), w, transpose_b=True)  # (1, 4)
            return tape.sum(tape.logsumexp_rows(scores))

        assert grad_check(f, [w]) <= 1e-6

    def test_gradients_accumulate_until_cleared(self):
        x = Tensor(np.array([2.0]))
        for expected in (4.0, 8.0):
            tape = Tape()
            out = tape.sum(tape.square(x))
            tape.backward(out)
            assert float(x.grad[0]) == pytest.approx(expected)
        x.zero_grad()
        assert float(x.grad[0]) == 0.0

    def test_linearity_of_sum_backward(self):
        # gradient of f+g equals gradient of f plus gradient of g, exactly
        x_pair = Tensor(np.array([1.5, -0.5]))

        def grads_of(build):
            x_pair.grad = None
            tape = Tape()
            tape.backward(build(tape))
            return x_pair.grad.copy()

        g_sum = grads_of(lambda t: t.add(t.sum(t.square(x_pair)), t.sum(t.sigmoid(x_pair))))
        g_f = grads_of(lambda t: t.sum(t.square(x_pair)))
        g_g = grads_of(lambda t: t.sum(t.sigmoid(x_pair)))
        np.testing.assert_array_equal(g_sum, g_f + g_g)

    def test_foreign_output_rejected(self):
        tape = Tape()
        other = Tape()
        x = Tensor(np.array([1.0]))
        out = other.sum(x)
        with pytest.raises(TapeError):
            tape.backward(out)

    def test_non_scalar_output_rejected(self):
        tape = Tape()
        out = tape.square(Tensor(np.array([1.0, 2.0])))
        with pytest.raises(TapeError):
            tape.backward(out)

    def test_second_replay_rejected(self):
        tape = Tape()
        out = tape.sum(tape.square(Tensor(np.array([1.0]))))
        tape.backward(out)
        with pytest.raises(TapeError):
            tape.backward(out)

    def test_no_grad_tape_records_nothing(self):
        tape = Tape(grad=False)
        out = tape.sum(tape.square(Tensor(np.array([1.0]))))
        assert len(tape) == 0
        with pytest.raises(TapeError):
            tape.backward(out)


class TestPrimitives:
    """Every tape primitive against central finite differences."""

    def _check(self, build, *shapes, seed=0, tol=1e-7):
        rng = np.random.default_rng(seed)
        params = [Tensor(rng.normal(0, 1, s)) for s in shapes]

        def f():
            return build(Tape(), *params)

        assert grad_check(f, params) <= tol

    def test_add_broadcast(self):
        self._check(lambda t, a, b: t.sum(t.add(a, b)), (3, 4), (4,))

    def test_sub_mul_square(self):
        self._check(
            lambda t, a, b: t.sum(t.mul(t.sub(a, b), t.square(a))), (3, 2), (3, 2)
        )

    def test_scale_sigmoid_tanh(self):
        self._check(
            lambda t, a: t.sum(t.add(t.sigmoid(t.scale(a, 0.7)), t.tanh(a))), (5,)
        )

    def test_matmul_both_orientations(self):
        self._check(lambda t, a, b: t.sum(t.matmul(a, b)), (3, 4), (4, 2))
        self._check(lambda t, a, b: t.sum(t.matmul(a, b, transpose_b=True)), (3, 4), (2, 4))

    def test_affine(self):
        self._check(lambda t, x, w, b: t.sum(t.affine(x, w, b)), (3, 4), (4, 2), (2,))
        self._check(
            lambda t, x, w, b: t.sum(t.affine(x, w, b, transpose_w=True)),
            (3, 4), (2, 4), (2,),
        )

    def test_bdot(self):
        self._check(lambda t, c, e: t.sum(t.bdot(c, e)), (3, 4), (3, 5, 4))

    def test_lookup_with_duplicates(self):
        ids = np.array([[0, 2, 2], [1, 0, 2]])
        self._check(lambda t, tab: t.sum(t.square(t.lookup(tab, ids))), (3, 4))
        self._check(lambda t, tab: t.sum(t.square(t.lookup(tab, ids))), (3,))

    def test_take_cols(self):
        idx = np.array([0, 3, 1])
        self._check(lambda t, x: t.sum(t.square(t.take_cols(x, idx))), (3, 4))

    def test_slice_hstack_concat(self):
        self._check(
            lambda t, a, b: t.sum(
                t.square(t.concat_rows([t.slice_cols(t.hstack(a, b), 1, 4), b]))
            ),
            (3, 2), (3, 3),
        )

    def test_log_sigmoid_rows(self):
        self._check(lambda t, x: t.sum(t.log_sigmoid(x)), (4, 3))

    def test_logsumexp_rows(self):
        self._check(lambda t, x: t.sum(t.logsumexp_rows(x)), (4, 6))

    def test_dropout_identity_at_rate_zero(self):
        tape = Tape()
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert tape.dropout(x, 0.0, None) is x

    def test_dropout_inverted_scaling(self):
        rng = np.random.default_rng(5)
        tape = Tape(grad=False)
        x = Tensor(np.ones((2000, 4)))
        out = tape.dropout(x, 0.5, rng).values
        kept = out != 0.0
        assert np.allclose(out[kept], 2.0)  # inverted scaling: 1/(1-rate)
        assert abs(kept.mean() - 0.5) < 0.05


class TestGradCheck:
    def test_quadratic_is_machine_exact(self):
        x = Tensor(np.array([3.0]))

        def f():
            tape = Tape()
            return tape.sum(tape.square(x))

        assert grad_check(f, [x]) <= 1e-9

    def test_softmax_nll_small_model(self):
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(0, 0.5, (10, 4)))
        b = Tensor(rng.normal(0, 0.5, (10,)))
        ctx = rng.normal(0, 1.0, (6, 4))
        targets = rng.integers(0, 10, 6)

        def f():
            tape = Tape()
            scores = tape.affine(Tensor(ctx), w, b, transpose_w=True)
            logz = tape.logsumexp_rows(scores)
            tgt = tape.take_cols(scores, targets)
            return tape.scale(tape.sum(tape.sub(logz, tgt)), 1.0 / 6)

        assert grad_check(f, [w, b]) <= 1e-6

    def test_nondeterministic_function_flagged(self):
        state = {"n": 0}
        x = Tensor(np.array([1.0]))

        def f():
            state["n"] += 1
            tape = Tape()
            return tape.sum(tape.scale(x, float(state["n"])))

        with pytest.raises(NondeterministicFunctionError):
            grad_check(f, [x])

    def test_h_must_be_positive(self):
        x = Tensor(np.array([1.0]))
        with pytest.raises(ValueError):
            grad_check(lambda: None, [x], h=0.0)
