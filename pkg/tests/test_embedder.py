import numpy as np
import pytest

from vrcoloc.datamodel import BBox, Region
from vrcoloc.embedder import (Embedder, EmbedderParams, PretrainConfig, assemble_feature,
                              embed_concat, embed_translation, init_embedder, pretrain,
                              pretrain_loss_and_grads, pretrain_step, split_feature)
from vrcoloc.errors import SupervisionLeakError, ValidationError
from vrcoloc.optim import Adam
from vrcoloc.similarity import embedder_grad_check


def identity_params(d_x, shared=True):
    I = np.eye(d_x)
    return EmbedderParams(I, I if shared else I.copy(), np.zeros((1, d_x)), np.zeros(1), shared)


class TestFeatureLayout:
    def test_layout(self):
        r = Region(BBox(0, 0, 1, 1), np.array([5.0, 6.0]), np.array([0.3, 0.7]), 0.5)
        assert assemble_feature(r).tolist() == [0, 0, 1, 1, 5, 6, 0.3, 0.7]

    def test_zeros_pass_through(self):
        r = Region(BBox(0.1, 0.2, 0.3, 0.4), np.zeros(3), np.array([1.0, 0.0]), 0.5)
        x = assemble_feature(r)
        assert x[:4].tolist() == [0.1, 0.2, 0.3, 0.4]
        assert x[4:7].tolist() == [0, 0, 0]

    def test_round_trip_segments(self):
        r = Region(BBox(0.1, 0.2, 0.3, 0.4), np.array([1.0, -2.0, 3.0]), np.array([0.25, 0.75]), 0.5)
        box, app, cls = split_feature(assemble_feature(r), 3, 2)
        assert tuple(box) == r.box.as_tuple()
        assert np.array_equal(app, r.appearance) and np.array_equal(cls, r.class_scores)

    def test_dimension_mismatch(self):
        r = Region(BBox(0, 0, 1, 1), np.zeros(2), np.array([0.5, 0.5]), 0.5)
        with pytest.raises(ValidationError):
            assemble_feature(r, d_a=3)


class TestTranslation:
    def test_identity_projection(self):
        rng = np.random.default_rng(0)
        xs, xo = rng.normal(size=6), rng.normal(size=6)
        assert np.array_equal(embed_translation(identity_params(6), xs, xo), xo - xs)

    def test_identical_points_give_zero(self):
        p = init_embedder(6, 5, shared=True, seed=1)
        x = np.random.default_rng(2).normal(size=6)
        assert np.allclose(embed_translation(p, x, x), 0.0, atol=0)

    def test_matches_matrix_arithmetic(self):
        rng = np.random.default_rng(3)
        p = EmbedderParams(rng.normal(size=(4, 6)), rng.normal(size=(4, 6)),
                           np.zeros((2, 4)), np.zeros(2))
        xs, xo = rng.normal(size=6), rng.normal(size=6)
        expected = [sum(p.W_o[r, c] * xo[c] - p.W_s[r, c] * xs[c] for c in range(6)) for r in range(4)]
        assert np.allclose(embed_translation(p, xs, xo), expected, rtol=1e-12, atol=1e-12)

    def test_antisymmetric_when_shared(self):
        p = init_embedder(6, 5, shared=True, seed=4)
        rng = np.random.default_rng(5)
        xs, xo = rng.normal(size=6), rng.normal(size=6)
        assert np.array_equal(embed_translation(p, xs, xo), -embed_translation(p, xo, xs))

    def test_linear_in_subject(self):
        p = init_embedder(6, 5, seed=6)
        rng = np.random.default_rng(7)
        xs, xo = rng.normal(size=6), rng.normal(size=6)
        scaled = embed_translation(p, 3.0 * xs, xo)
        assert np.allclose(scaled, xo @ p.W_o.T - 3.0 * (xs @ p.W_s.T))

    def test_rows_independent(self):
        p = init_embedder(6, 5, seed=8)
        rng = np.random.default_rng(9)
        Xs, Xo = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        F = embed_translation(p, Xs, Xo)
        for k in range(4):
            assert np.allclose(F[k], embed_translation(p, Xs[k], Xo[k]))


class TestConcat:
    def test_definition(self):
        assert embed_concat([1.0, 2.0], [3.0, 4.0]).tolist() == [1, 2, 3, 4]

    def test_order_matters(self):
        assert not np.array_equal(embed_concat([1.0, 2.0], [3.0, 4.0]), embed_concat([3.0, 4.0], [1.0, 2.0]))

    @pytest.mark.parametrize("d_x", [1, 4, 9])
    def test_width(self, d_x):
        assert embed_concat(np.zeros(d_x), np.ones(d_x)).shape == (2 * d_x,)
        assert Embedder("concat", d_x=d_x).dim == 2 * d_x


class TestPretraining:
    def test_uniform_logits_give_log_c(self):
        p = init_embedder(6, 4, n_classes=5, seed=0)
        p = EmbedderParams(p.W_s, p.W_o, np.zeros((5, 4)), np.zeros(5))
        rng = np.random.default_rng(0)
        loss, _ = pretrain_loss_and_grads(p, rng.normal(size=(7, 6)), rng.normal(size=(7, 6)),
                                          rng.integers(0, 5, 7))
        assert loss == pytest.approx(np.log(5), abs=1e-12)

    def test_single_class_loss_zero(self):
        p = init_embedder(6, 4, n_classes=1, seed=0)
        rng = np.random.default_rng(1)
        loss, _ = pretrain_loss_and_grads(p, rng.normal(size=(3, 6)), rng.normal(size=(3, 6)),
                                          np.zeros(3, dtype=int))
        assert loss == 0.0

    @pytest.mark.parametrize("shared", [False, True])
    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_match_finite_differences(self, seed, shared):
        report = embedder_grad_check(seed, d_r=5, shared=shared)
        assert max(report.values()) < 1e-4

    def test_loss_decreases_on_fixed_batch(self):
        rng = np.random.default_rng(2)
        p = init_embedder(6, 8, n_classes=3, seed=2)
        Xs, Xo, y = rng.normal(size=(12, 6)), rng.normal(size=(12, 6)), rng.integers(0, 3, 12)
        opt = Adam(lr=1e-2)
        first, _ = pretrain_loss_and_grads(p, Xs, Xo, y)
        for _ in range(200):
            loss, p = pretrain_step(p, opt, Xs, Xo, y)
        final, _ = pretrain_loss_and_grads(p, Xs, Xo, y)
        assert 0.0 <= final < first

    def test_leak_rejected(self):
        p = init_embedder(6, 4, n_classes=2, seed=0)
        with pytest.raises(SupervisionLeakError):
            pretrain_loss_and_grads(p, np.zeros((1, 6)), np.zeros((1, 6)), [2])

    def test_pretrain_on_world(self, small_world):
        params, _, history = pretrain(small_world, PretrainConfig(d_r=8, steps=60, seed=1))
        assert params.W_p.shape == (len(small_world.train_predicates), 8)
        assert history[-1] < history[0]

    def test_pretrain_deterministic(self, small_world):
        cfg = PretrainConfig(d_r=8, steps=20, seed=4)
        a, _, ha = pretrain(small_world, cfg)
        b, _, hb = pretrain(small_world, cfg)
        assert ha == hb and all(np.array_equal(a.tensors()[k], b.tensors()[k]) for k in a.tensors())

    def test_shared_flag_aliases(self):
        p = init_embedder(6, 4, shared=True)
        assert p.W_s is p.W_o and "embed.W_o" not in p.tensors()
