import math

import numpy as np
import pytest

from mapre.objectives import ccr_loss, crr_loss, mlm_loss, total_loss
from mapre.gradsuite import run_case
from mapre.tensor import Tape, Tensor, backward


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _nll(scores, pos):
    """-log softmax(scores)[pos] by direct summation (inputs kept small)."""
    return -(scores[pos] - math.log(sum(math.exp(s) for s in scores)))


def brute_ccr(ua, ub, tau):
    ua, ub = ua.tolist(), ub.tolist()
    n = len(ua)
    total = 0.0
    for side, other in ((ua, ub), (ub, ua)):
        for i in range(n):
            cands = [_dot(side[i], other[j]) / tau for j in range(n)]
            cands += [_dot(side[i], side[j]) / tau for j in range(n) if j != i]
            total += _nll(cands, i)
    return total / (2 * n)


def brute_crr(w, v, idx, tau):
    w, v = w.tolist(), v.tolist()
    total = 0.0
    for i, wi in enumerate(w):
        total += _nll([_dot(wi, vj) / tau for vj in v], int(idx[i]))
    return total / len(w)


class TestCCR:
    @pytest.mark.parametrize("n", range(2, 9))
    def test_matches_brute_force(self, n):
        rng = np.random.default_rng(100 + n)
        for _ in range(20):
            ua, ub = rng.normal(size=(n, 6)), rng.normal(size=(n, 6))
            tau = float(rng.uniform(0.5, 2.0))
            got = float(ccr_loss(Tensor(ua), Tensor(ub), tau).data)
            assert abs(got - brute_ccr(ua, ub, tau)) < 1e-10

    def test_orthonormal_n2_value(self):
        e = np.eye(2)
        got = float(ccr_loss(Tensor(e), Tensor(e), 1.0).data)
        assert got == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
        assert round(got, 4) == 0.5514

    def test_identical_vectors_give_log3(self):
        u = np.ones((2, 3))
        assert float(ccr_loss(Tensor(u), Tensor(u)).data) == pytest.approx(math.log(3), abs=1e-12)

    def test_decreases_as_positive_grows(self):
        # a private extra coordinate on pair 0 raises only u_a0 . u_b0 (self scores are masked)
        rng = np.random.default_rng(0)
        ua, ub = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        prev = float(ccr_loss(Tensor(np.pad(ua, ((0, 0), (0, 1)))), Tensor(np.pad(ub, ((0, 0), (0, 1))))).data)
        for c in (0.5, 1.0, 1.5):
            extra = np.zeros((3, 1))
            extra[0] = c
            cur = float(ccr_loss(Tensor(np.hstack([ua, extra])), Tensor(np.hstack([ub, extra]))).data)
            assert cur < prev
            prev = cur

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(1)
        ua, ub = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        perm = rng.permutation(5)
        a = float(ccr_loss(Tensor(ua), Tensor(ub)).data)
        b = float(ccr_loss(Tensor(ua[perm]), Tensor(ub[perm])).data)
        assert a == pytest.approx(b, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            ccr_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))))
        with pytest.raises(ValueError):
            ccr_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            assert float(ccr_loss(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))).data) >= 0


class TestCRR:
    @pytest.mark.parametrize("n", range(2, 9))
    def test_matches_brute_force(self, n):
        rng = np.random.default_rng(200 + n)
        for _ in range(20):
            w, v = rng.normal(size=(2 * n, 5)), rng.normal(size=(n, 5))
            idx = np.concatenate([np.arange(n), np.arange(n)])
            tau = float(rng.uniform(0.5, 2.0))
            got = float(crr_loss(Tensor(w), Tensor(v), idx, tau).data)
            assert abs(got - brute_crr(w, v, idx, tau)) < 1e-10

    def test_single_relation_is_zero(self):
        assert float(crr_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))), [0, 0]).data) == 0.0

    def test_hand_value(self):
        got = float(crr_loss(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), [0]).data)
        assert got == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
        assert round(got, 4) == 0.3133

    def test_relabeling_symmetry(self):
        rng = np.random.default_rng(3)
        w, v = rng.normal(size=(8, 4)), rng.normal(size=(4, 4))
        idx = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        perm = rng.permutation(4)
        inv = np.argsort(perm)
        a = float(crr_loss(Tensor(w), Tensor(v), idx).data)
        b = float(crr_loss(Tensor(w), Tensor(v[perm]), inv[idx]).data)
        assert a == pytest.approx(b, abs=1e-12)

    def test_decreases_with_positive_score(self):
        w = np.array([[1.0, 0.0]])
        v = np.array([[0.5, 0.0], [0.0, 1.0]])
        lo = float(crr_loss(Tensor(w), Tensor(v), [0]).data)
        v[0, 0] = 2.0
        assert float(crr_loss(Tensor(w), Tensor(v), [0]).data) < lo

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            crr_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), [0, 2])


class TestMLM:
    def test_empty_targets(self):
        assert float(mlm_loss(Tensor(np.ones((4, 3))), [], [], Tensor(np.ones((9, 3)))).data) == 0.0

    def test_uniform_logits_give_log_v(self):
        got = mlm_loss(Tensor(np.zeros((5, 3))), [1, 2], [4, 7], Tensor(np.ones((8, 3))))
        assert float(got.data) == pytest.approx(math.log(8), abs=1e-12)

    def test_position_out_of_range(self):
        with pytest.raises(IndexError):
            mlm_loss(Tensor(np.zeros((3, 2))), [3], [0], Tensor(np.ones((4, 2))))

    def test_gradient_reaches_embedding_table(self):
        res = run_case("mlm_loss", 0)
        assert res.report.passed and res.report.max_rel_error < 1e-4


class TestTotal:
    def test_zero(self):
        assert total_loss(0.0, 0.0, 0.0).total == 0.0

    def test_derived_sum(self):
        out = total_loss(0.5514, 0.3133, math.log(8))
        assert round(out.total, 4) == 2.9441

    def test_exact_sum_of_oracle_values(self):
        e = np.eye(2)
        ccr = ccr_loss(Tensor(e), Tensor(e))
        crr = crr_loss(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), [0])
        mlm = mlm_loss(Tensor(np.zeros((2, 3))), [0], [1], Tensor(np.ones((8, 3))))
        out = total_loss(ccr, crr, mlm)
        assert out.total == (float(ccr.data) + float(crr.data)) + float(mlm.data)
        assert round(out.total, 4) == 2.9441

    def test_non_finite_component_named(self):
        with pytest.raises(FloatingPointError, match="l_crr"):
            total_loss(0.1, float("nan"), 0.2)

    def test_graph_backpropagates(self):
        u = Tensor(np.random.default_rng(0).normal(size=(2, 4)), requires_grad=True)
        with Tape() as tape:
            parts = total_loss(ccr_loss(u, u), Tensor(0.0), Tensor(0.0))
        backward(tape, parts.graph)
        assert u.grad is not None


@pytest.mark.parametrize("case", ["ccr_loss", "crr_loss", "episode_loss"])
def test_loss_gradients_over_ten_seeds(case):
    for seed in range(10):
        res = run_case(case, seed)
        assert res.report.passed, (case, seed, res.report.max_rel_error)
