import itertools

import numpy as np
import pytest

from vrcoloc.datamodel import ImageRecord, PairLabel, label_index_arrays
from vrcoloc.errors import SearchSpaceTooLarge, ValidationError
from vrcoloc.similarity import ConstantScorer, init_relation_net, make_scorer
from vrcoloc.solver import (InferenceConfig, LabelingProblem, brute_force, greedy_infer,
                            infer_one_annotated, infer_subject_fixed, labeling_cost,
                            subject_region_for_box)

from conftest import grid_regions


class TableScorer:
    """Similarity read from a table keyed by label ids (first embedding coordinate)."""
    symmetric = True

    def __init__(self, table):
        self.table = table

    def score(self, f_i, f_j):
        return self.table.get((int(f_i[0]), int(f_j[0])), self.table.get((int(f_j[0]), int(f_i[0])), 0.0))

    def matrix(self, A, B):
        return np.array([[self.score(a, b) for b in B] for a in A])


def random_problem(seed, b=None, max_labels=6, kind="relnet-sym", d=4):
    rng = np.random.default_rng(seed)
    b = b or int(rng.integers(2, 5))
    embs = [rng.normal(size=(int(rng.integers(1, max_labels + 1)), d)) for _ in range(b)]
    return LabelingProblem(embs, make_scorer(kind, init_relation_net(d, seed=seed + 1000)))


def naive_cost(problem, positions):
    total = 0.0
    for u in range(problem.size):
        for v in range(problem.size):
            if u != v:
                total -= problem.scorer.score(problem.embeddings[u][positions[u]],
                                              problem.embeddings[v][positions[v]])
    return total


def all_labelings(problem, pools=None):
    pools = pools or [range(problem.num_labels(u)) for u in range(problem.size)]
    return itertools.product(*pools)


class TestLabelingCost:
    def test_two_images(self):
        rng = np.random.default_rng(0)
        embs = [rng.normal(size=(2, 4)), rng.normal(size=(3, 4))]
        scorer = make_scorer("relnet-sym", init_relation_net(4, seed=0))
        pr = LabelingProblem(embs, scorer)
        s = scorer.score(embs[0][1], embs[1][2])
        assert labeling_cost(pr, [1, 2]) == pytest.approx(-2 * s, abs=1e-12)

    @pytest.mark.parametrize("b", [2, 3, 5])
    def test_constant_field(self, b):
        pr = LabelingProblem([np.zeros((3, 2))] * b, ConstantScorer(1.5))
        assert labeling_cost(pr, [0] * b) == -1.5 * b * (b - 1)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_double_loop(self, seed):
        pr = random_problem(seed, b=4)
        pos = [pr.num_labels(u) - 1 for u in range(pr.size)]
        assert labeling_cost(pr, pos) == pytest.approx(naive_cost(pr, pos), abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_raw_scorer_matches_double_loop(self, seed):
        pr = random_problem(seed, b=3, kind="relnet-raw")
        assert labeling_cost(pr, [0, 0, 0]) == pytest.approx(naive_cost(pr, [0, 0, 0]), abs=1e-10)

    def test_invalid_position(self):
        pr = random_problem(0, b=2)
        with pytest.raises(ValidationError):
            labeling_cost(pr, [0, 99])
        with pytest.raises(ValidationError):
            labeling_cost(pr, [0])

    def test_invariant_to_image_order(self):
        pr = random_problem(11, b=4)
        pos = [0] * 4
        rev = LabelingProblem(pr.embeddings[::-1], pr.scorer)
        assert labeling_cost(rev, pos) == pytest.approx(labeling_cost(pr, pos), abs=1e-12)


class TestBruteForce:
    def test_tiny_exhaustive(self):
        rng = np.random.default_rng(1)
        pr = LabelingProblem([rng.normal(size=(2, 4)), rng.normal(size=(2, 4))],
                             make_scorer("relnet-sym", init_relation_net(4, seed=1)))
        best = min(all_labelings(pr), key=lambda pos: (labeling_cost(pr, pos), pos))
        assert brute_force(pr).positions == best

    def test_constant_ties_lexicographic(self):
        pr = LabelingProblem([np.zeros((3, 2))] * 3, ConstantScorer(2.0))
        assert brute_force(pr).positions == (0, 0, 0)

    @pytest.mark.parametrize("seed", range(3))
    def test_beats_random_labelings(self, seed):
        pr = random_problem(seed, b=3, max_labels=5)
        best = brute_force(pr).cost
        rng = np.random.default_rng(seed)
        for _ in range(1000):
            pos = [int(rng.integers(pr.num_labels(u))) for u in range(3)]
            assert best <= labeling_cost(pr, pos)

    def test_cap(self):
        pr = LabelingProblem([np.zeros((10, 2))] * 3, ConstantScorer())
        with pytest.raises(SearchSpaceTooLarge, match="1000"):
            brute_force(pr, cap=999)


def crafted_gap_problem():
    """Greedy fixes (0, 0) for images 0 and 1, which strands image 2."""
    table = {(0, 10): 5.0, (1, 11): 4.0, (0, 20): 0.0, (10, 20): 0.0,
             (1, 21): 4.0, (11, 21): 4.0, (0, 11): 0.0, (1, 10): 0.0}
    embs = [np.array([[0.0], [1.0]]), np.array([[10.0], [11.0]]), np.array([[20.0], [21.0]])]
    return LabelingProblem(embs, TableScorer(table))


class TestGreedy:
    def test_oracle_200_instances(self):
        equal_b2 = 0
        for seed in range(200):
            pr = random_problem(seed)
            exact = brute_force(pr)
            greedy = greedy_infer(pr, InferenceConfig(restarts=2, seed=seed))
            assert exact.cost <= greedy.cost
            if pr.size == 2:
                assert greedy.positions == exact.positions
                equal_b2 += 1
        assert equal_b2 > 0

    def test_crafted_strict_gap(self):
        pr = crafted_gap_problem()
        exact = brute_force(pr)
        greedy = greedy_infer(pr, InferenceConfig(restarts=1))
        assert exact.positions == (1, 1, 1) and exact.cost == -24.0
        assert greedy.positions == (0, 0, 0) and greedy.cost == -10.0
        assert greedy.cost > exact.cost

    def test_ordering_exact_greedy_random(self):
        pr = random_problem(5, b=4)
        exact, greedy = brute_force(pr), greedy_infer(pr)
        rng = np.random.default_rng(5)
        random_costs = [labeling_cost(pr, [int(rng.integers(pr.num_labels(u))) for u in range(4)])
                        for _ in range(200)]
        assert exact.cost <= greedy.cost <= np.mean(random_costs)

    def test_constant_shift_keeps_argmax(self):
        pr = random_problem(21, b=4)

        class Shifted:
            symmetric = True

            def __init__(self, base, c):
                self.base, self.c = base, c

            def score(self, a, b):
                return self.base.score(a, b) + self.c

            def matrix(self, A, B):
                return self.base.matrix(A, B) + self.c

        shifted = LabelingProblem(pr.embeddings, Shifted(pr.scorer, 3.0))
        a, b = brute_force(pr), brute_force(shifted)
        assert a.positions == b.positions
        assert b.cost == pytest.approx(a.cost - 3.0 * 4 * 3, abs=1e-9)
        assert greedy_infer(pr).positions == greedy_infer(shifted).positions

    def test_deterministic(self):
        pr = random_problem(8, b=4)
        cfg = InferenceConfig(restarts=4, seed=3)
        assert greedy_infer(pr, cfg) == greedy_infer(random_problem(8, b=4), cfg)

    def test_pool_truncation_keeps_size(self):
        pr = random_problem(9, b=3, max_labels=6)
        g = greedy_infer(pr, InferenceConfig(pool_size=2))
        assert all(0 <= p < pr.num_labels(u) for u, p in enumerate(g.positions))


def image_with_regions(p, seed=0):
    return ImageRecord(f"im{seed}", grid_regions(p, seed=seed))


def problem_from_images(images, seed=0, d=4):
    rng = np.random.default_rng(seed)
    embs = [rng.normal(size=(im.num_regions * (im.num_regions - 1), d)) for im in images]
    labels = [label_index_arrays(im.num_regions) for im in images]
    return LabelingProblem(embs, make_scorer("relnet-sym", init_relation_net(d, seed)), labels)


class TestSubjectFixed:
    def test_restricted_pool_size(self):
        im = image_with_regions(5)
        region = subject_region_for_box(im, im.regions[3].box)
        assert region == 3
        s_idx, _ = label_index_arrays(5)
        assert int((s_idx == region).sum()) == 4

    def test_no_match(self):
        from vrcoloc.datamodel import BBox
        im = image_with_regions(4)
        assert subject_region_for_box(im, BBox(0.91, 0.91, 0.99, 0.99)) is None

    def test_subject_respected(self):
        images = [image_with_regions(5, s) for s in range(3)]
        pr = problem_from_images(images)
        lab = infer_subject_fixed(pr, [1, 4, 0])
        assert [l.subject_idx for l in lab.labels] == [1, 4, 0]

    def test_singleton_sets_forced(self):
        images = [image_with_regions(2, s) for s in range(3)]
        pr = problem_from_images(images, seed=2)
        lab = infer_subject_fixed(pr, [0, 1, 0])
        assert lab.labels == (PairLabel(0, 1), PairLabel(1, 0), PairLabel(0, 1))


class TestOneAnnotated:
    def test_two_images_is_marginal_argmin(self):
        pr = random_problem(4, b=2, max_labels=6)
        lab = infer_one_annotated(pr, 0, 0)
        costs = [labeling_cost(pr, [0, k]) for k in range(pr.num_labels(1))]
        assert lab.positions == (0, int(np.argmin(costs)))

    @pytest.mark.parametrize("seed", range(20))
    def test_three_images_matches_constrained_brute_force(self, seed):
        pr = random_problem(seed, b=3, max_labels=6)
        clamp = pr.num_labels(1) - 1
        lab = infer_one_annotated(pr, 1, clamp, InferenceConfig(restarts=1))
        pools = [np.arange(pr.num_labels(u)) for u in range(3)]
        pools[1] = np.array([clamp])
        exact = brute_force(pr, pools)
        assert lab.positions == exact.positions and lab.cost == exact.cost

    def test_clamp_unchanged(self):
        pr = random_problem(6, b=4)
        lab = infer_one_annotated(pr, 2, 0)
        assert lab.positions[2] == 0

    def test_invalid_clamp(self):
        pr = random_problem(6, b=3)
        with pytest.raises(ValidationError):
            infer_one_annotated(pr, 0, 99)
