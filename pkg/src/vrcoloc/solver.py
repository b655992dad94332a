"""Labeling inference: one subject-object pair per bag image.

A bag is a fully connected graph over its images; each image's label set is
every ordered pair of its regions. The cost of a labeling is the sum, over
ordered image pairs ``(u, v)``, of the negated similarity between the chosen
labels' embeddings. The unary term is constant and omitted. The labeling is
minimized jointly (one consistent label per image), exactly by enumeration
for small instances or greedily otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import (BBox, ImageRecord, PairLabel, iou, label_index_arrays,
                        label_position)
from .errors import SearchSpaceTooLarge, ValidationError

__all__ = [
    "Labeling", "InferenceConfig", "LabelingProblem", "labeling_cost",
    "brute_force", "greedy_infer", "infer_subject_fixed", "infer_one_annotated",
    "subject_region_for_box",
]


@dataclass(frozen=True)
class Labeling:
    """Chosen label position per image (bag order) and the labeling cost."""
    positions: tuple[int, ...]
    labels: tuple[PairLabel, ...]
    cost: float


@dataclass
class InferenceConfig:
    scorer: str = "relnet-sym"
    restarts: int = 4
    pool_size: int | None = None
    pool_sample: int = 64
    seed: int = 0
    brute_force_cap: int = 10 ** 6

    def __post_init__(self):
        if self.restarts < 1:
            raise ValidationError("restart count must be at least 1")
        if self.pool_size is not None and self.pool_size < 1:
            raise ValidationError("pool size must be at least 1")


@dataclass
class LabelingProblem:
    """Label embeddings of every bag image plus a scorer.

    ``embeddings[u]`` holds one row per label of image ``u``. ``labels[u]``
    is the pair ``(subject_idx, object_idx)`` of index arrays mapping each
    row to its region pair (``None`` for abstract instances).
    """
    embeddings: list
    scorer: object
    labels: list | None = None
    _prepared: dict = field(default_factory=dict, repr=False)
    _costs: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_images(cls, images, embedder, scorer, cache=None):
        embs, labels = [], []
        for im in images:
            if cache is not None and im.image_id in cache:
                F = cache[im.image_id]
            else:
                F = embedder.embed_labels(im)
                if cache is not None:
                    cache[im.image_id] = F
            embs.append(F)
            labels.append(label_index_arrays(im.num_regions))
        return cls(embs, scorer, labels)

    @property
    def size(self):
        return len(self.embeddings)

    def num_labels(self, u):
        return self.embeddings[u].shape[0]

    def pair_label(self, u, pos):
        if self.labels is None:
            return None
        s_idx, o_idx = self.labels[u]
        return PairLabel(int(s_idx[pos]), int(o_idx[pos]))

    def _prep(self, u):
        if u not in self._prepared:
            prepare = getattr(self.scorer, "prepare", None)
            F = self.embeddings[u]
            self._prepared[u] = prepare(F) if prepare is not None else F
        return self._prepared[u]

    def _scores(self, u, ru, v, rv):
        if hasattr(self.scorer, "block"):
            return self.scorer.block(self._prep(u), ru, self._prep(v), rv)
        return self.scorer.matrix(self.embeddings[u][ru], self.embeddings[v][rv])

    def cost_block(self, u, ru, v, rv):
        """Cost of both ordered terms (u, v) and (v, u) for label rows ``ru`` x ``rv``.

        Every entry is computed independently of the block's shape, so the
        same label pair always costs the same bits.
        """
        if (min(u, v), max(u, v)) in self._costs:
            C = self.cost_matrix(u, v)
            return C[ru][:, rv]
        S = self._scores(u, ru, v, rv)
        if getattr(self.scorer, "symmetric", False):
            return -2.0 * S
        return -(S + self._scores(v, rv, u, ru).T)

    def cost_matrix(self, u, v):
        """Full cost block between images ``u`` and ``v`` (cached)."""
        if u > v:
            return self.cost_matrix(v, u).T
        key = (u, v)
        if key not in self._costs:
            full = slice(None)
            S = self._scores(u, full, v, full)
            if getattr(self.scorer, "symmetric", False):
                C = -2.0 * S
            else:
                C = -(S + self._scores(v, full, u, full).T)
            self._costs[key] = C
        return self._costs[key]

    def make_labeling(self, positions):
        positions = tuple(int(p) for p in positions)
        labels = tuple(self.pair_label(u, p) for u, p in enumerate(positions))
        return Labeling(positions, labels if self.labels is not None else (),
                        labeling_cost(self, positions))


def labeling_cost(problem: LabelingProblem, positions):
    """Sum over ordered image pairs of the negated label similarity."""
    positions = list(positions)
    if len(positions) != problem.size:
        raise ValidationError(f"labeling has {len(positions)} labels for {problem.size} images")
    for u, p in enumerate(positions):
        if not (0 <= p < problem.num_labels(u)):
            raise ValidationError(f"label position {p} invalid for image {u}")
    total = 0.0
    for u in range(problem.size):
        for v in range(u + 1, problem.size):
            total += problem.cost_block(u, [positions[u]], v, [positions[v]])[0, 0]
    return float(total)


def _full_pools(problem):
    return [np.arange(problem.num_labels(u)) for u in range(problem.size)]


def brute_force(problem: LabelingProblem, pools=None, cap=10 ** 6):
    """Exact minimizer by enumeration; ties go to the lexicographically smallest labeling."""
    pools = _full_pools(problem) if pools is None else [np.asarray(p) for p in pools]
    space = math.prod(len(p) for p in pools)
    if space > cap:
        sizes = " x ".join(str(len(p)) for p in pools)
        raise SearchSpaceTooLarge(f"{sizes} = {space} labelings exceeds cap {cap}")
    b = problem.size
    shape = tuple(len(p) for p in pools)
    total = np.zeros(shape)
    for u in range(b):
        for v in range(u + 1, b):
            C = problem.cost_block(u, pools[u], v, pools[v])
            view = [1] * b
            view[u], view[v] = shape[u], shape[v]
            total = total + C.reshape(view)
    flat = int(np.argmin(total))
    idx = np.unravel_index(flat, shape)
    return problem.make_labeling([pools[u][k] for u, k in enumerate(idx)])


def _truncate_pools(problem, pools, config):
    """Keep the ``pool_size`` labels per image with highest mean similarity
    to a seeded sample of labels drawn from the other images."""
    T = config.pool_size
    if T is None or all(len(p) <= T for p in pools):
        return pools
    out = []
    for u, pool in enumerate(pools):
        if len(pool) <= T:
            out.append(pool)
            continue
        rng = np.random.default_rng([config.seed, 0x7A1, u])
        others = [v for v in range(problem.size) if v != u]
        sample = []
        for v in others:
            k = min(len(pools[v]), max(1, config.pool_sample // len(others)))
            sample.append(problem.embeddings[v][np.sort(rng.choice(pools[v], k, replace=False))])
        mean_sim = problem.scorer.matrix(problem.embeddings[u][pool],
                                         np.concatenate(sample)).mean(axis=1)
        keep = np.argsort(-mean_sim, kind="stable")[:T]
        out.append(pool[np.sort(keep)])
    return out


def _processing_orders(images, restarts, seed):
    orders = [list(images)]
    for r in range(1, restarts):
        rng = np.random.default_rng([seed, 0x0D5, r])
        orders.append([images[k] for k in rng.permutation(len(images))])
    return orders


def _greedy_run(problem, pools, order, unary):
    """One greedy chain: exhaustive over the first two images of ``order``,
    then one image at a time by minimum summed cost to the chosen labels."""
    chosen = {}
    if len(order) == 1:
        u = order[0]
        chosen[u] = pools[u][int(np.argmin(unary[u][pools[u]]))]
        return chosen
    u, v = order[0], order[1]
    if len(pools[u]) == problem.num_labels(u) and len(pools[v]) == problem.num_labels(v):
        C = problem.cost_matrix(u, v)  # cached across restarts
    else:
        C = problem.cost_block(u, pools[u], v, pools[v])
    C = C + unary[u][pools[u]][:, None] + unary[v][pools[v]][None, :]
    i, j = np.unravel_index(int(np.argmin(C)), C.shape)
    chosen[u], chosen[v] = pools[u][i], pools[v][j]
    for w in order[2:]:
        vec = unary[w][pools[w]].copy()
        for x, lx in chosen.items():
            vec += problem.cost_block(w, pools[w], x, [lx])[:, 0]
        chosen[w] = pools[w][int(np.argmin(vec))]
    return chosen


def _best_of(problem, candidates):
    best = None
    for positions in candidates:
        lab = problem.make_labeling(positions)
        if best is None or (lab.cost, lab.positions) < (best.cost, best.positions):
            best = lab
    return best


def greedy_infer(problem: LabelingProblem, config: InferenceConfig | None = None, pools=None):
    """Greedy labeling with seeded restarts over image processing orders."""
    config = config or InferenceConfig()
    pools = _full_pools(problem) if pools is None else [np.asarray(p) for p in pools]
    pools = _truncate_pools(problem, pools, config)
    unary = [np.zeros(problem.num_labels(u)) for u in range(problem.size)]
    candidates = []
    for order in _processing_orders(list(range(problem.size)), config.restarts, config.seed):
        chosen = _greedy_run(problem, pools, order, unary)
        candidates.append([chosen[u] for u in range(problem.size)])
    return _best_of(problem, candidates)


def subject_region_for_box(image: ImageRecord, box: BBox, thresh=0.5):
    """Highest-IoU region for ``box`` if that IoU reaches ``thresh``, else ``None``."""
    best, best_iou = None, -1.0
    for k, r in enumerate(image.regions):
        v = iou(r.box, box)
        if v > best_iou:
            best, best_iou = k, v
    return best if best_iou >= thresh else None


def infer_subject_fixed(problem: LabelingProblem, subject_regions, config=None):
    """Greedy inference with each image's subject pinned to one region.

    ``subject_regions[u]`` is the allowed subject region of image ``u``.
    """
    if problem.labels is None:
        raise ValidationError("subject-fixed inference needs region-pair labels")
    pools = []
    for u, region in enumerate(subject_regions):
        s_idx, _ = problem.labels[u]
        pool = np.flatnonzero(s_idx == region)
        if pool.size == 0:
            raise ValidationError(f"image {u}: subject region {region} has no labels")
        pools.append(pool)
    return greedy_infer(problem, config, pools)


def infer_one_annotated(problem: LabelingProblem, annotated: int, position: int, config=None):
    """Greedy inference with image ``annotated`` clamped to label ``position``.

    The clamp enters every free image as a unary cost; the free images are
    then labeled greedily (exhaustive over the first two free images of each
    seeded order, sequential after that).
    """
    config = config or InferenceConfig()
    if not (0 <= annotated < problem.size):
        raise ValidationError(f"annotated image index {annotated} out of range")
    if not (0 <= position < problem.num_labels(annotated)):
        raise ValidationError(f"clamp label {position} invalid for image {annotated}")
    pools = _full_pools(problem)
    pools[annotated] = np.array([position])
    pools = _truncate_pools(problem, pools, config)
    unary = [problem.cost_block(u, slice(None), annotated, [position])[:, 0] if u != annotated
             else np.zeros(problem.num_labels(u)) for u in range(problem.size)]
    free = [u for u in range(problem.size) if u != annotated]
    candidates = []
    for order in _processing_orders(free, config.restarts, config.seed):
        chosen = _greedy_run(problem, pools, order, unary)
        chosen[annotated] = position
        candidates.append([chosen[u] for u in range(problem.size)])
    return _best_of(problem, candidates)


def clamp_position(image: ImageRecord, label: PairLabel):
    label.check(image.num_regions)
    return label_position(image.num_regions, label.subject_idx, label.object_idx)
