import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mapre import tensor as T
from mapre.gradcheck import finite_difference_check, relative_error
from mapre.gradsuite import ALL_CASES, PRIMITIVE_CASES, run_case
from mapre.tensor import Tape, Tensor, backward, no_grad


def _grad_of(f, *xs):
    ts = [Tensor(np.asarray(x, dtype=float), requires_grad=True) for x in xs]
    with Tape() as tape:
        out = f(*ts)
    backward(tape, out)
    return [t.grad for t in ts]


class TestBackwardExamples:
    def test_sum_gives_ones(self):
        (g,) = _grad_of(lambda x: T.sum_(x), [1.0, -2.0, 5.0])
        np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])

    def test_dot_self(self):
        (g,) = _grad_of(lambda x: T.dot(x, x), [2.0, 3.0])
        np.testing.assert_allclose(g, [4.0, 6.0], rtol=0, atol=1e-15)

    def test_cross_entropy_two_zero_logits(self):
        (g,) = _grad_of(lambda z: T.cross_entropy(z, [0]), [[0.0, 0.0]])
        np.testing.assert_allclose(g, [[-0.5, 0.5]], atol=1e-15)

    def test_non_scalar_root_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            backward(tape, y)

    def test_root_not_on_tape_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            T.dot(x, x)
        other = T.dot(x, x)  # computed outside the tape
        with pytest.raises(ValueError, match="tape"):
            backward(tape, other)

    def test_ops_outside_tape_are_not_recorded(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with no_grad():
                T.scale(x, 3.0)
        assert len(tape) == 0

    def test_only_primitives_recorded(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        with Tape() as tape:
            T.sum_(T.gelu(T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))))
        assert {r.op for r in tape.records} <= T.PRIMITIVES
        with pytest.raises(ValueError):
            tape.record("exp", (x,), x, lambda g: (g,))

    def test_intermediate_grads_populated(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.scale(x, 3.0)
            z = T.dot(y, y)
        backward(tape, z)
        np.testing.assert_allclose(y.grad, 2 * y.data)

    def test_leaf_grads_accumulate_across_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                z = T.dot(x, x)
            backward(tape, z)
        np.testing.assert_allclose(x.grad, 2 * 2 * x.data)
        T.zero_grad([x])
        assert x.grad is None


class TestDagAccumulation:
    def test_shared_subexpression_equals_expanded_tree(self):
        rng = np.random.default_rng(3)
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

        def shared(a, b):
            h = T.gelu(T.matmul(a, b))  # used three times
            return T.sum_(T.add(T.mul(h, h), T.scale(h, 0.5)))

        def expanded(a, b):
            h1 = T.gelu(T.matmul(a, b))
            h2 = T.gelu(T.matmul(a, b))
            h3 = T.gelu(T.matmul(a, b))
            return T.sum_(T.add(T.mul(h1, h2), T.scale(h3, 0.5)))

        ga = _grad_of(shared, a0, b0)
        gb = _grad_of(expanded, a0, b0)
        for x, y in zip(ga, gb):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)

    def test_same_tensor_twice_in_one_op(self):
        (g,) = _grad_of(lambda x: T.sum_(T.mul(x, x)), [1.5, -2.0])
        np.testing.assert_allclose(g, [3.0, -4.0])


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    def test_primitive_over_ten_seeds(self, name):
        for seed in range(10):
            res = run_case(name, seed)
            assert res.report.passed, (name, seed, res.report.max_rel_error, res.report.failures[:3])
            assert res.report.max_rel_error < 1e-4

    def test_every_primitive_has_a_case(self):
        covered = set()
        for name in ALL_CASES:
            rng = np.random.default_rng(0)
            f, params = ALL_CASES[name](rng)
            with Tape() as tape:
                f(*params)
            covered |= {r.op for r in tape.records}
        assert covered == T.PRIMITIVES

    def test_checker_on_dot(self):
        x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        rep = finite_difference_check(lambda a: T.dot(a, a), [x], h=1e-5)
        assert rep.max_rel_error < 1e-6

    def test_checker_on_constant(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        rep = finite_difference_check(lambda a: Tensor(np.array(4.0)), [x])
        assert rep.max_rel_error == 0.0 and rep.passed

    def test_checker_flags_a_wrong_gradient(self):
        def bad(a):
            out = T.dot(a, a)
            if T.current_tape() is not None:
                T.current_tape().records[-1].backward = lambda g: (g * a.data, None)  # drops one operand
            return out

        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        assert not finite_difference_check(bad, [x]).passed

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1e-9, 0.0) == pytest.approx(1e-9 / 1e-8)


class TestSoftmax:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                  elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = T.softmax(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
        y2 = T.softmax(Tensor(x + c)).data
        np.testing.assert_allclose(y, y2, rtol=0, atol=1e-12)

    def test_large_logits_do_not_overflow(self):
        y = T.log_softmax(Tensor([[1e4, 0.0, -1e4]])).data
        assert np.all(np.isfinite(y))
        assert y[0, 0] == pytest.approx(0.0)

    def test_log_softmax_matches_log_of_softmax(self):
        x = np.random.default_rng(1).normal(size=(4, 6))
        np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-12)


class TestShapesAndErrors:
    def test_matmul_broadcasts_over_heads(self):
        a = Tensor(np.ones((5, 4)))
        b = Tensor(np.ones((3, 4, 2)))
        assert T.matmul(a, b).shape == (3, 5, 2)

    def test_matmul_rejects_vectors(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_dot_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.dot(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_cross_entropy_target_checks(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0])

    def test_take_rows_out_of_range(self):
        with pytest.raises(IndexError):
            T.take_rows(Tensor(np.zeros((2, 3))), [2])

    def test_concat_empty(self):
        with pytest.raises(ValueError):
            T.concat([])


def test_tapes_are_thread_local():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    seen = {}

    def worker():
        seen["tape"] = T.current_tape()
        T.dot(x, x)

    with Tape() as tape:
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["tape"] is None
    assert len(tape) == 0
