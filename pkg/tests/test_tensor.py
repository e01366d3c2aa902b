"""Unit tests for the autodiff tensor engine."""

import math

import numpy as np
import pytest

from rewirelab import tensor as T


def grad_of(build, params):
    """Run build() under a fresh tape and return gradients for params."""
    with T.Tape() as tape:
        for p in params:
            tape.watch(p)
        loss = build()
    grads = T.backward(tape, loss)
    return [grads[p.node_id].data for p in params]


class TestForwardValues:
    def test_cosine_of_identical_vectors_is_one(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            v = T.Tensor(rng.uniform(-1, 1, size=7))
            assert T.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-12)

    def test_softmax_of_constant_vector_is_uniform(self):
        y = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_logsumexp_is_shift_invariant(self):
        y = T.logsumexp(T.Tensor([-1000.0, -1000.0]))
        assert y.item() == pytest.approx(-1000.0 + math.log(2.0), abs=1e-12)
        assert math.isfinite(y.item())

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        x = T.Tensor(rng.normal(size=(20, 9)) * 30)
        sums = T.softmax(x, axis=-1).data.sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)|\(2, 3\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_cosine_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            T.cosine_similarity(T.Tensor([0.0, 0.0]), T.Tensor([1.0, 0.0]))

    def test_strided_conv_floor_arithmetic(self):
        x = T.Tensor(np.random.default_rng(2).normal(size=(10, 2)))
        w = T.Tensor(np.random.default_rng(3).normal(size=(6, 4)))
        b = T.Tensor(np.zeros(4))
        out = T.strided_conv1d(x, w, b, stride=3)
        assert out.shape == (3, 4)

    def test_conv_below_window_errors(self):
        x = T.Tensor(np.zeros((2, 1)))
        w = T.Tensor(np.zeros((3, 4)))
        b = T.Tensor(np.zeros(4))
        with pytest.raises(T.ShapeError, match="shorter"):
            T.strided_conv1d(x, w, b, stride=3)


class TestBackwardBasics:
    def test_square_sum_gradient(self):
        x = T.Tensor([3.0], requires_grad=True)
        (g,) = grad_of(lambda: T.sum_all(T.mul(x, x)), [x])
        np.testing.assert_allclose(g, [6.0], rtol=1e-12)

    def test_matmul_adjoint_is_row_broadcast_of_column_sums(self):
        rng = np.random.default_rng(4)
        a = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(5, 2)))
        (ga,) = grad_of(lambda: T.sum_all(T.matmul(a, b)), [a])
        expected = np.tile(b.data.sum(axis=1), (3, 1))
        np.testing.assert_allclose(ga, expected, rtol=1e-12)

    def test_cross_entropy_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(5)
        z = T.Tensor(rng.normal(size=(1, 6)), requires_grad=True)
        (g,) = grad_of(lambda: T.cross_entropy(z, [2]), [z])
        soft = np.exp(z.data) / np.exp(z.data).sum()
        expected = soft.copy()
        expected[0, 2] -= 1.0
        np.testing.assert_allclose(g, expected, rtol=1e-10)
        fd = T.finite_difference_gradient(lambda t: T.cross_entropy(t, [2]), z)
        np.testing.assert_allclose(g, fd.data, rtol=1e-6, atol=1e-9)

    def test_double_backward_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.mul(x, x))
        T.backward(tape, loss)
        with pytest.raises(T.TapeError, match="already consumed"):
            T.backward(tape, loss)

    def test_loss_not_on_tape_rejected(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.Tape():
            T.sum_all(x)
        with T.Tape() as other:
            other.watch(x)
        with pytest.raises(T.TapeError, match="not recorded"):
            T.backward(other, T.Tensor(np.asarray(1.0)))

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(T.ShapeError, match="scalar"):
            T.backward(tape, y)

    def test_unused_watched_parameter_gets_zero_gradient(self):
        x = T.Tensor([1.0], requires_grad=True)
        unused = T.Tensor([5.0, 5.0], requires_grad=True)
        with T.Tape() as tape:
            tape.watch(unused)
            loss = T.sum_all(T.mul(x, x))
        grads = T.backward(tape, loss)
        np.testing.assert_array_equal(grads[unused.node_id].data, [0.0, 0.0])

    def test_fanout_accumulates_additively(self):
        x = T.Tensor([2.0], requires_grad=True)
        (g,) = grad_of(lambda: T.sum_all(T.add(T.mul(x, x), T.mul(x, x))), [x])
        np.testing.assert_allclose(g, [8.0], rtol=1e-12)


class TestFiniteDifferenceOracle:
    def test_square_at_three(self):
        fd = T.finite_difference_gradient(lambda t: T.sum_all(T.mul(t, t)), T.Tensor([3.0]))
        assert fd.data[0] == pytest.approx(6.0, abs=1e-6)

    def test_softmax_sum_is_constant(self):
        rng = np.random.default_rng(6)
        x = T.Tensor(rng.normal(size=8))
        fd = T.finite_difference_gradient(lambda t: T.sum_all(T.softmax(t)), x)
        np.testing.assert_allclose(fd.data, 0.0, atol=1e-6)

    def test_nonfinite_evaluation_rejected(self):
        def f(t):
            with np.errstate(invalid="ignore"):
                return float(np.log(t.data[0]))

        with pytest.raises(ValueError, match="non-finite"):
            T.finite_difference_gradient(f, T.Tensor([1e-9]), h=1e-5)

    def test_bad_step_rejected(self):
        with pytest.raises(ValueError):
            T.finite_difference_gradient(lambda t: 0.0, T.Tensor([1.0]), h=0.0)


def relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_gradient(build, x, h=1e-5, tol=1e-3):
    """Compare backward() against central differences for one input."""
    (g,) = grad_of(lambda: build(x), [x])
    fd = T.finite_difference_gradient(lambda t: build(t), x, h=h)
    err = relative_error(g, fd.data)
    assert err < tol, f"gradient mismatch: relative error {err:.2e}"


def _rand(rng, shape):
    return T.Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


class TestGradientsAgainstFiniteDifferences:
    """Each differentiable primitive, several random cases (inputs in [-1, 1])."""

    N_CASES = 20

    def test_matmul(self):
        rng = np.random.default_rng(10)
        for _ in range(self.N_CASES):
            a = _rand(rng, (3, 4))
            b = T.Tensor(rng.uniform(-1, 1, size=(4, 2)))
            check_gradient(lambda t: T.sum_all(T.mul(T.matmul(t, b), T.matmul(t, b))), a)

    def test_add_broadcast_bias(self):
        rng = np.random.default_rng(11)
        for _ in range(self.N_CASES):
            b = _rand(rng, (5,))
            x = T.Tensor(rng.uniform(-1, 1, size=(4, 5)))
            check_gradient(lambda t: T.sum_all(T.mul(T.add(x, t), T.add(x, t))), b)

    def test_gelu_away_from_kink(self):
        rng = np.random.default_rng(12)
        for _ in range(self.N_CASES):
            vals = rng.uniform(-1, 1, size=(3, 3))
            vals[np.abs(vals) < 1e-3] = 0.5
            x = T.Tensor(vals, requires_grad=True)
            check_gradient(lambda t: T.sum_all(T.gelu(t)), x)

    def test_layernorm(self):
        rng = np.random.default_rng(13)
        for _ in range(self.N_CASES):
            x = _rand(rng, (4, 6))
            gain = T.Tensor(rng.uniform(0.5, 1.5, size=6))
            bias = T.Tensor(rng.uniform(-0.5, 0.5, size=6))
            check_gradient(lambda t: T.sum_all(T.mul(T.layernorm(t, gain, bias), T.layernorm(t, gain, bias))), x)

    def test_softmax(self):
        rng = np.random.default_rng(14)
        w = None
        for _ in range(self.N_CASES):
            x = _rand(rng, (3, 5))
            w = T.Tensor(rng.uniform(-1, 1, size=(3, 5)))
            check_gradient(lambda t: T.sum_all(T.mul(T.softmax(t), w)), x)

    def test_logsumexp(self):
        rng = np.random.default_rng(15)
        for _ in range(self.N_CASES):
            x = _rand(rng, (7,))
            check_gradient(lambda t: T.logsumexp(t), x)

    def test_cosine_similarity(self):
        rng = np.random.default_rng(16)
        for _ in range(self.N_CASES):
            u = _rand(rng, (6,))
            v = T.Tensor(rng.uniform(-1, 1, size=6) + 1.5)
            check_gradient(lambda t: T.cosine_similarity(t, v), u)

    def test_dropout_with_fixed_mask(self):
        rng = np.random.default_rng(17)
        for _ in range(self.N_CASES):
            x = _rand(rng, (4, 4))
            mask = rng.random((4, 4)) < 0.8
            check_gradient(lambda t: T.sum_all(T.dropout(t, 0.8, mask=mask)), x)

    def test_embedding_lookup(self):
        rng = np.random.default_rng(18)
        for _ in range(self.N_CASES):
            table = _rand(rng, (6, 3))
            ids = rng.integers(0, 6, size=5)
            check_gradient(lambda t: T.sum_all(T.mul(T.embedding_lookup(t, ids), T.embedding_lookup(t, ids))), table)

    def test_strided_conv1d(self):
        rng = np.random.default_rng(19)
        for _ in range(self.N_CASES):
            x = _rand(rng, (9, 2))
            w = T.Tensor(rng.uniform(-1, 1, size=(4, 3)))
            b = T.Tensor(rng.uniform(-1, 1, size=3))
            check_gradient(lambda t: T.sum_all(T.gelu(T.strided_conv1d(t, w, b, stride=2))), x)

    def test_conv_weights_and_bias(self):
        rng = np.random.default_rng(20)
        x = T.Tensor(rng.uniform(-1, 1, size=(8, 2)))
        for _ in range(self.N_CASES):
            w = _rand(rng, (4, 3))
            check_gradient(lambda t: T.sum_all(T.strided_conv1d(x, t, T.Tensor(np.zeros(3)), stride=2)), w)

    def test_mean_over_axis(self):
        rng = np.random.default_rng(21)
        for _ in range(self.N_CASES):
            x = _rand(rng, (5, 3))
            check_gradient(lambda t: T.sum_all(T.mul(T.mean_over_axis(t, 0), T.mean_over_axis(t, 0))), x)

    def test_substitute_rows(self):
        rng = np.random.default_rng(22)
        for _ in range(self.N_CASES):
            emb = _rand(rng, (4,))
            x = T.Tensor(rng.uniform(-1, 1, size=(5, 4)))
            mask = rng.random(5) < 0.4
            check_gradient(lambda t: T.sum_all(T.mul(T.substitute_rows(x, mask, t), T.substitute_rows(x, mask, t))), emb)

    def test_slice_and_concat(self):
        rng = np.random.default_rng(23)
        for _ in range(self.N_CASES):
            x = _rand(rng, (3, 6))

            def f(t):
                a = T.slice_cols(t, 0, 3)
                b = T.slice_cols(t, 3, 6)
                return T.sum_all(T.mul(T.concat_cols([b, a]), T.concat_cols([b, a])))

            check_gradient(f, x)

    def test_stack_scalars_and_take(self):
        rng = np.random.default_rng(24)
        for _ in range(self.N_CASES):
            x = _rand(rng, (5,))

            def f(t):
                parts = [T.take_scalar(t, i) for i in range(5)]
                return T.logsumexp(T.stack_scalars(parts))

            check_gradient(f, x)

    def test_scale_by(self):
        rng = np.random.default_rng(25)
        for _ in range(self.N_CASES):
            s = _rand(rng, ())
            x = T.Tensor(rng.uniform(-1, 1, size=(3, 3)))
            check_gradient(lambda t: T.sum_all(T.mul(T.scale_by(x, t), T.scale_by(x, t))), s)

    def test_take_rows(self):
        rng = np.random.default_rng(26)
        for _ in range(self.N_CASES):
            x = _rand(rng, (6, 3))
            idx = rng.integers(0, 6, size=4)
            check_gradient(lambda t: T.sum_all(T.mul(T.take_rows(t, idx), T.take_rows(t, idx))), x)
