"""Synthetic worlds with a known predicate structure.

Each predicate is a random direction of norm ``mu`` in appearance space.
For a ground-truth relationship the object region's appearance is the
subject's appearance plus the predicate vector plus isotropic Gaussian noise
whose expected norm is ``sigma``, so ``mu / sigma`` sets how separable the
predicates are.

Annotated subjects lean towards one "agent" class (class 0), the way people
dominate the subject slot of real relationship data. Without such a cue an
unseen predicate ``v`` and its reversal ``-v`` are indistinguishable, and so
is a labeling from its all-reversed twin.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .datamodel import (BBox, DatasetManifest, ImageRecord, Region,
                        RelationshipAnnotation, iou)
from .errors import ConfigurationError

__all__ = ["SynthConfig", "generate", "predicate_vectors", "gt_differences",
           "separability_report"]


@dataclass
class SynthConfig:
    n_train: int = 20
    n_test: int = 5
    images: int = 600
    regions: int = 20
    d_a: int = 16
    d_c: int = 8
    mu: float = 4.0
    sigma: float = 0.5
    annotations: int = 2
    seed: int = 0
    hard_mode: bool = False
    distractors: int = 2
    role_cue: float = 4.0

    def validate(self):
        if self.mu < 0 or self.sigma < 0:
            raise ConfigurationError("mu and sigma must be non-negative")
        if self.regions < 2:
            raise ConfigurationError("need at least 2 regions per image")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("need at least one train and one test predicate")
        if self.role_cue < 0:
            raise ConfigurationError("role cue must be non-negative")
        if self.d_a < 1 or self.d_c < 1:
            raise ConfigurationError("feature dimensions must be positive")
        if self.annotations < 1 or self.annotations > self.n_train + self.n_test:
            raise ConfigurationError("annotations per image must be in [1, n_predicates]")
        pairs = self.annotations + (self.distractors if self.hard_mode else 0)
        if 2 * pairs > self.regions:
            raise ConfigurationError(
                f"{pairs} disjoint region pairs do not fit in {self.regions} regions")


def predicate_vectors(config: SynthConfig):
    rng = np.random.default_rng([config.seed, 0x9E])
    n = config.n_train + config.n_test
    v = rng.normal(size=(n, config.d_a))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * config.mu


def _random_boxes(rng, count, max_iou=0.5):
    boxes = []
    while len(boxes) < count:
        w, h = rng.uniform(0.1, 0.4, size=2)
        x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
        box = BBox(float(x1), float(y1), float(min(1.0, x1 + w)), float(min(1.0, y1 + h)))
        if all(iou(box, b) <= max_iou for b in boxes):
            boxes.append(box)
    return boxes


def _class_scores(rng, d_c, agent_boost=0.0):
    alpha = np.full(d_c, 0.5)
    alpha[0] += agent_boost
    s = rng.dirichlet(alpha)
    return s / s.sum()


def generate(config: SynthConfig) -> DatasetManifest:
    config.validate()
    vectors = predicate_vectors(config)
    n_pred = len(vectors)
    split_rng = np.random.default_rng([config.seed, 0x5B])
    perm = split_rng.permutation(n_pred)
    train = sorted(int(k) for k in perm[:config.n_train])
    test = sorted(int(k) for k in perm[config.n_train:])
    noise_sd = config.sigma / np.sqrt(config.d_a)

    images = []
    for i in range(config.images):
        rng = np.random.default_rng([config.seed, 0x1A, i])
        boxes = _random_boxes(rng, config.regions)
        appearance = rng.normal(size=(config.regions, config.d_a))
        scores = [_class_scores(rng, config.d_c) for _ in range(config.regions)]
        objectness = rng.uniform(0.05, 1.0, size=config.regions)

        # round-robin first predicate so every predicate is populated
        first = i % n_pred
        rest = [int(k) for k in rng.permutation(n_pred) if k != first]
        preds = [first] + rest[:config.annotations - 1]
        n_pairs = config.annotations + (config.distractors if config.hard_mode else 0)
        slots = rng.permutation(config.regions)[:2 * n_pairs]
        subj, obj = slots[:n_pairs], slots[n_pairs:]

        anns = []
        for k, pid in enumerate(preds):
            s, o = int(subj[k]), int(obj[k])
            appearance[o] = appearance[s] + vectors[pid] + rng.normal(0, noise_sd, config.d_a)
            if config.role_cue > 0:
                scores[s] = _class_scores(rng, config.d_c, config.role_cue)
            anns.append(RelationshipAnnotation(boxes[s], boxes[o], pid, s, o))
        if config.hard_mode:
            wrong = [int(k) for k in rest[config.annotations - 1:]]
            for k in range(config.distractors):
                s, o = int(subj[config.annotations + k]), int(obj[config.annotations + k])
                pid = wrong[k % len(wrong)] if wrong else preds[0]
                appearance[o] = (appearance[s] + vectors[pid]
                                 + rng.normal(0, 2 * noise_sd, config.d_a))

        regions = tuple(Region(boxes[k], appearance[k], scores[k], float(objectness[k]))
                        for k in range(config.regions))
        images.append(ImageRecord(f"syn{i:05d}", regions, tuple(anns)))

    return DatasetManifest(
        config.d_a, config.d_c, {k: f"pred{k:03d}" for k in range(n_pred)},
        tuple(train), tuple(test), tuple(images),
        {"generator": "synthgen", "config": asdict(config)})


def gt_differences(manifest: DatasetManifest):
    """Object-minus-subject appearance of every matched annotation."""
    diffs, pids = [], []
    for im in manifest.images:
        for a in im.annotations:
            if a.matched:
                diffs.append(im.regions[a.object_region].appearance
                             - im.regions[a.subject_region].appearance)
                pids.append(a.predicate_id)
    return np.array(diffs), np.array(pids)


def _mean_pairwise(A, B=None):
    if B is None:
        n = len(A)
        if n < 2:
            return 0.0
        d = np.linalg.norm(A[:, None, :] - A[None, :, :], axis=2)
        return float(d.sum() / (n * (n - 1)))
    if len(A) == 0 or len(B) == 0:
        return 0.0
    return float(np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2).mean())


def separability_report(manifest: DatasetManifest, max_per_predicate=200):
    """Mean within- and across-predicate distances of ground-truth differences."""
    diffs, pids = gt_differences(manifest)
    groups = {int(p): diffs[pids == p][:max_per_predicate] for p in np.unique(pids)}
    per = {}
    for p, D in groups.items():
        others = np.concatenate([G for q, G in groups.items() if q != p]) if len(groups) > 1 else D[:0]
        per[p] = {"count": int(len(D)), "within": _mean_pairwise(D),
                  "across": _mean_pairwise(D, others)}
    within = float(np.mean([s["within"] for s in per.values()]))
    across = float(np.mean([s["across"] for s in per.values()]))
    return {"per_predicate": per, "within": within, "across": across,
            "ratio": across / within if within > 0 else float("inf")}
