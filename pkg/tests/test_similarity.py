import numpy as np
import pytest

from vrcoloc import kernels
from vrcoloc.similarity import (CosineScorer, RelationNetParams, RelationScorer, cosine_score,
                                gated_combine, grad_check, init_relation_net, make_scorer,
                                pairwise_cost, relation_backward, relation_score)


def random_params(d, seed):
    rng = np.random.default_rng(seed)
    return RelationNetParams(rng.normal(0, 0.5, (d, 2 * d)), rng.normal(0, 0.5, (d, 2 * d)),
                             rng.normal(size=d), rng.normal(size=d), rng.normal(size=d),
                             float(rng.normal()))


def reference_K(p, fi, fj):
    x = np.concatenate([fi, fj])
    gate = np.array([np.tanh(p.W1[k] @ x + p.b1[k]) / (1.0 + np.exp(-(p.W2[k] @ x + p.b2[k])))
                     for k in range(p.d_r)])
    return gate + (fi + fj) / 2


class TestGatedCombine:
    def test_zero_gate_gives_mean(self):
        p = random_params(3, 0)
        p.W1[:] = 0
        p.b1[:] = 0
        fi, fj = np.array([1.0, -2.0, 4.0]), np.array([3.0, 0.5, -1.0])
        assert np.allclose(gated_combine(p, fi, fj), (fi + fj) / 2, atol=0)

    def test_zero_inputs(self):
        p = random_params(3, 1)
        p.b1[:] = 0
        assert np.array_equal(gated_combine(p, np.zeros(3), np.zeros(3)), np.zeros(3))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_reference(self, seed):
        p = random_params(4, seed)
        rng = np.random.default_rng(100 + seed)
        fi, fj = rng.normal(size=4), rng.normal(size=4)
        assert np.allclose(gated_combine(p, fi, fj), reference_K(p, fi, fj), rtol=1e-12, atol=1e-12)


class TestRelationScore:
    def test_zero_readout(self):
        p = random_params(3, 2)
        p.w[:] = 0
        assert relation_score(p, np.ones(3), -np.ones(3)) == p.b

    def test_worked_example(self):
        p = RelationNetParams(np.zeros((2, 4)), np.ones((2, 4)), np.zeros(2), np.zeros(2),
                              np.ones(2), 0.0)
        assert relation_score(p, np.array([1.0, 1.0]), np.array([3.0, 5.0])) == 5.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_reference(self, seed):
        p = random_params(5, seed)
        rng = np.random.default_rng(seed)
        fi, fj = rng.normal(size=5), rng.normal(size=5)
        assert relation_score(p, fi, fj) == pytest.approx(p.w @ reference_K(p, fi, fj) + p.b, abs=1e-12)

    def test_asymmetric_raw_symmetric_scorer(self):
        p = random_params(4, 3)
        rng = np.random.default_rng(3)
        fi, fj = rng.normal(size=4), rng.normal(size=4)
        assert relation_score(p, fi, fj) != relation_score(p, fj, fi)
        sym = RelationScorer(p, symmetric=True)
        assert sym.score(fi, fj) == sym.score(fj, fi)


class TestCosine:
    def test_examples(self):
        f = np.array([0.3, -1.2, 2.0])
        assert cosine_score(f, f) == pytest.approx(1.0)
        assert cosine_score(f, -f) == pytest.approx(-1.0)
        assert cosine_score([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_zero_vector_is_neutral(self):
        assert cosine_score(np.zeros(3), np.ones(3)) == 0.0

    def test_scale_invariant_and_symmetric(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=5), rng.normal(size=5)
        assert cosine_score(7.5 * a, b) == pytest.approx(cosine_score(a, b), abs=1e-14)
        assert cosine_score(a, b) == pytest.approx(cosine_score(b, a), abs=1e-15)


class TestPairwiseCost:
    def test_negation(self):
        p = RelationNetParams(np.zeros((2, 4)), np.ones((2, 4)), np.zeros(2), np.zeros(2),
                              np.ones(2), 0.0)
        assert pairwise_cost(RelationScorer(p, symmetric=False),
                             np.array([1.0, 1.0]), np.array([3.0, 5.0])) == -5.0
        f = np.array([1.0, 2.0])
        assert pairwise_cost(CosineScorer(), f, f) == pytest.approx(-1.0)

    def test_monotone(self):
        p = random_params(3, 5)
        scorer = make_scorer("relnet-sym", p)
        rng = np.random.default_rng(5)
        pairs = [(rng.normal(size=3), rng.normal(size=3)) for _ in range(30)]
        scores = [scorer.score(a, b) for a, b in pairs]
        costs = [pairwise_cost(scorer, a, b) for a, b in pairs]
        assert all(c == -s for c, s in zip(costs, scores))


class TestBackward:
    def test_dead_readout(self):
        p = random_params(3, 6)
        p.w[:] = 0
        g = relation_backward(p, np.ones(3), np.arange(3.0), 2.5)
        for name in ("rel.W1", "rel.W2", "rel.b1", "rel.b2"):
            assert not np.any(g[name])
        assert float(g["rel.b"]) == 2.5

    def test_readout_gradient_is_K(self):
        p = random_params(4, 7)
        rng = np.random.default_rng(7)
        fi, fj = rng.normal(size=4), rng.normal(size=4)
        g = relation_backward(p, fi, fj, -1.5)
        assert np.allclose(g["rel.w"], -1.5 * gated_combine(p, fi, fj), atol=1e-14)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        assert max(grad_check(seed, d_r=6).values()) < 1e-4

    def test_sabotage_detected(self):
        def broken(params, fi, fj, up):
            g = relation_backward(params, fi, fj, up)
            g["rel.W2"] = g["rel.W2"] * 1.05
            return g
        report = grad_check(0, d_r=6, backward=broken)
        assert report["rel.W2"] > 1e-2
        assert report["rel.W1"] < 1e-4

    def test_report_deterministic(self):
        assert grad_check(3, d_r=4) == grad_check(3, d_r=4)


class TestScorerBlocks:
    def test_block_entries_do_not_depend_on_slicing(self):
        p = init_relation_net(8, seed=1)
        rng = np.random.default_rng(1)
        A, B = rng.normal(size=(9, 8)), rng.normal(size=(7, 8))
        s = RelationScorer(p)
        full = s.matrix(A, B)
        pa, pb = s.prepare(A), s.prepare(B)
        part = s.block(pa, [4, 2], pb, [6])
        assert part[0, 0] == full[4, 6] and part[1, 0] == full[2, 6]
        assert full[3, 5] == pytest.approx(s.score(A[3], B[5]), abs=1e-10)

    @pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")
    def test_backends_agree(self):
        p = init_relation_net(16, seed=2)
        rng = np.random.default_rng(2)
        A, B = rng.normal(size=(30, 16)), rng.normal(size=(20, 16))
        fast = RelationScorer(p, backend="cython").matrix(A, B)
        slow = RelationScorer(p, backend="python").matrix(A, B)
        assert np.allclose(fast, slow, rtol=1e-9, atol=1e-9)

    @pytest.mark.parametrize("backend", kernels.available_backends())
    @pytest.mark.parametrize("d", [3, 4, 8, 13, 64])
    def test_kernel_bits_ignore_layout(self, backend, d):
        # Exhaustive and greedy search compare costs of the same labeling
        # computed through differently shaped calls; entries must match exactly.
        rng = np.random.default_rng(d)
        P1, Q1, P2, Q2 = (rng.normal(size=(7, d)) for _ in range(4))
        w = rng.normal(size=d)
        ref = kernels.gated_sums(P1, Q1, P2, Q2, w, backend=backend)

        def shifted(a, off):
            v = np.empty(a.size + 8)[off:off + a.size].reshape(a.shape)
            v[...] = a
            return v

        for off in range(8):
            moved = [shifted(a, off) for a in (P1, Q1, P2, Q2, w)]
            assert np.array_equal(kernels.gated_sums(*moved, backend=backend), ref)
        for j in range(7):
            col = kernels.gated_sums(P1, Q1[[j]], P2, Q2[[j]], w, backend=backend)
            assert np.array_equal(col[:, 0], ref[:, j])
        row = kernels.gated_sums(P1[[5]], Q1, P2[[5]], Q2, w, backend=backend)
        assert np.array_equal(row[0], ref[5])

    def test_cosine_matrix(self):
        rng = np.random.default_rng(3)
        A, B = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
        M = CosineScorer().matrix(A, B)
        assert M[2, 1] == pytest.approx(cosine_score(A[2], B[1]), abs=1e-14)
