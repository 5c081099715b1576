import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from stavl.losses import (
    LossError,
    distill_loss,
    distill_loss_backward,
    distill_loss_forward,
    distill_loss_mse,
    distill_loss_mse_backward,
    distill_loss_mse_forward,
    text_loss,
    text_loss_backward,
    text_loss_forward,
)


def orthogonal_pair(rng, n, d):
    a = rng.standard_normal((n, d))
    b = rng.standard_normal((n, d))
    b -= (a * b).sum(axis=1, keepdims=True) / (a * a).sum(axis=1, keepdims=True) * a
    return a, b


# the epsilon added to each norm biases cosines by ~1e-8
GUARD_TOL = 1e-6


class TestDistill:
    def test_identical(self, rng):
        a = rng.standard_normal((5, 4))
        assert distill_loss(a, a.copy()) == pytest.approx(-1.0, abs=GUARD_TOL)

    def test_orthogonal(self, rng):
        assert distill_loss(*orthogonal_pair(rng, 6, 4)) == pytest.approx(0.0, abs=1e-12)

    def test_negated(self, rng):
        a = rng.standard_normal((5, 4))
        assert distill_loss(a, -a) == pytest.approx(1.0, abs=GUARD_TOL)

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_range_and_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        v = distill_loss(a, b)
        assert -1.0 <= v <= 1.0
        assert v == pytest.approx(oracles.neg_mean_cosine(a, b), abs=1e-12)

    def test_scale_invariance(self, rng):
        a, b = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
        s = rng.uniform(0.1, 10, size=(6, 1))
        assert distill_loss(a * s, b) == pytest.approx(distill_loss(a, b), abs=GUARD_TOL)
        assert distill_loss(a, b * s[::-1]) == pytest.approx(distill_loss(a, b), abs=GUARD_TOL)
        assert abs(distill_loss_mse(a * s, b) - distill_loss_mse(a, b)) > 1e-3

    def test_zero_rows(self):
        a = np.zeros((2, 3))
        assert distill_loss(a, np.ones((2, 3))) == 0.0
        with pytest.raises(LossError):
            distill_loss(a, np.ones((2, 3)), strict=True)

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            distill_loss(np.ones((2, 3)), np.ones((3, 3)))

    def test_row_selection(self, rng):
        a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        rows = np.array([1, 0, 1, 1, 0, 0], bool)
        assert distill_loss(a, b, rows) == pytest.approx(distill_loss(a[rows], b[rows]), abs=1e-14)
        with pytest.raises(LossError):
            distill_loss(a, b, np.zeros(6, bool))

    @pytest.mark.parametrize("rows", [None, np.array([1, 0, 1, 1], bool)])
    def test_gradient(self, rng, rows):
        a, b = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 4, 3))
        f = lambda: distill_loss(a, b, rows)  # noqa: E731
        g = distill_loss_backward(distill_loss_forward(a, b, rows)[1])
        assert oracles.rel_error(g, oracles.numerical_grad(f, a)) < 1e-7


class TestMse:
    def test_equal(self, rng):
        a = rng.standard_normal((3, 4))
        assert distill_loss_mse(a, a) == 0.0

    def test_constant_shift(self, rng):
        a = rng.standard_normal((3, 4))
        assert distill_loss_mse(a + 0.7, a) == pytest.approx(0.49, abs=1e-12)

    def test_oracle(self, rng):
        a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        assert distill_loss_mse(a, b) == pytest.approx(oracles.mse(a, b), abs=1e-12)
        assert distill_loss_mse(a, b) >= 0

    def test_gradient(self, rng):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        f = lambda: distill_loss_mse(a, b)  # noqa: E731
        g = distill_loss_mse_backward(distill_loss_mse_forward(a, b)[1])
        assert oracles.rel_error(g, oracles.numerical_grad(f, a)) < 1e-8


class TestText:
    def test_uniform(self):
        V = 7
        assert text_loss(np.zeros((3, V)), [0, 4, 6]) == pytest.approx(math.log(V), abs=1e-12)

    def test_large_margin(self):
        logits = np.zeros((2, 5))
        logits[0, 3] = logits[1, 1] = 60.0
        assert text_loss(logits, [3, 1]) < 1e-20

    def test_oracle(self, rng):
        logits = rng.standard_normal((3, 5)) * 3
        tgt = [4, 0, 2]
        assert text_loss(logits, tgt) == pytest.approx(oracles.cross_entropy(logits, tgt), abs=1e-10)

    def test_errors(self):
        with pytest.raises(LossError):
            text_loss(np.zeros((2, 4)), [0, 4])
        with pytest.raises(LossError):
            text_loss(np.zeros((2, 4)), [-1, 0])
        with pytest.raises(LossError):
            text_loss(np.zeros((0, 4)), np.zeros(0, int))

    def test_weights_select_tokens(self, rng):
        logits = rng.standard_normal((2, 3, 6))
        tgt = rng.integers(0, 6, (2, 3))
        w = np.array([[0, 1, 1], [0, 0, 1]], float)
        sel = w.astype(bool)
        assert text_loss(logits, tgt, w) == pytest.approx(text_loss(logits[sel], tgt[sel]), abs=1e-14)

    def test_gradient(self, rng):
        logits = rng.standard_normal((2, 3, 6))
        tgt = rng.integers(0, 6, (2, 3))
        w = np.array([[0, 1, 1], [1, 1, 1]], float)
        f = lambda: text_loss(logits, tgt, w)  # noqa: E731
        g = text_loss_backward(text_loss_forward(logits, tgt, w)[1])
        assert oracles.rel_error(g, oracles.numerical_grad(f, logits)) < 1e-8
