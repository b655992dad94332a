"""Inference over bag lists, with optional process-level parallelism.

Bags are independent, so workers each handle whole bags and results are
reassembled in bag order; the output does not depend on the worker count.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

from . import records
from .datamodel import DatasetManifest, PairLabel
from .errors import ValidationError
from .similarity import make_scorer
from .solver import (InferenceConfig, LabelingProblem, brute_force, clamp_position,
                     greedy_infer, infer_one_annotated, infer_subject_fixed,
                     subject_region_for_box)
from .trainer import Checkpoint

PREDICTIONS_SCHEMA = "vrcoloc.predictions"
REPORT_SCHEMA = "vrcoloc.report"
SCHEMA_VERSION = 1

MODES = ("free", "subject_fixed", "one_annotated")

__all__ = ["MODES", "infer_bag", "infer_bags", "default_workers", "validate_bags",
           "save_predictions", "load_predictions", "save_report", "load_report"]


def default_workers():
    return max(1, int(os.environ.get("VRCOLOC_WORKERS", "1")))


def validate_bags(manifest: DatasetManifest, bags):
    """Check that every bag image exists and carries the bag's predicate."""
    for k, bag in enumerate(bags):
        if bag.common_predicate_id not in manifest.predicates:
            raise ValidationError(f"bag {k}: unknown predicate {bag.common_predicate_id}")
        for iid in bag.image_ids:
            image = manifest.image(iid)
            if bag.common_predicate_id not in image.predicates():
                raise ValidationError(
                    f"bag {k}: {iid} has no annotation of predicate {bag.common_predicate_id}")
    return bags


def _gt_annotation(image, predicate_id):
    anns = image.annotations_for(predicate_id)
    if not anns:
        raise ValidationError(f"{image.image_id} has no annotation of predicate {predicate_id}")
    return anns[0]


def infer_bag(manifest: DatasetManifest, bag, ckpt: Checkpoint, mode="free",
              config: InferenceConfig | None = None, exact=False, cache=None, bag_index=0):
    """Infer one bag; returns the prediction record for it."""
    config = config or InferenceConfig()
    images = manifest.bag_images(bag)
    scorer = make_scorer(config.scorer, ckpt.relation)
    problem = LabelingProblem.from_images(images, ckpt.make_embedder(), scorer, cache)
    record = {"bag": bag_index, "mode": mode, "skipped": False}

    if mode == "free":
        lab = brute_force(problem, cap=config.brute_force_cap) if exact else greedy_infer(problem, config)
    elif mode == "subject_fixed":
        subjects = []
        for im in images:
            region = subject_region_for_box(im, _gt_annotation(im, bag.common_predicate_id).subject_box)
            if region is None:
                record.update(skipped=True, reason=f"no region matches the subject box of {im.image_id}")
                return record
            subjects.append(region)
        lab = infer_subject_fixed(problem, subjects, config)
    elif mode == "one_annotated":
        ann = _gt_annotation(images[0], bag.common_predicate_id)
        if not ann.matched:
            record.update(skipped=True, reason=f"annotation of {images[0].image_id} is unmatched")
            return record
        pos = clamp_position(images[0], PairLabel(ann.subject_region, ann.object_region))
        lab = infer_one_annotated(problem, 0, pos, config)
        record["annotated_image"] = 0
    else:
        raise ValidationError(f"unknown inference mode {mode!r}")

    record["cost"] = lab.cost
    record["images"] = [
        {"image_id": im.image_id, "subject_idx": l.subject_idx, "object_idx": l.object_idx,
         "subject_box": list(im.regions[l.subject_idx].box.as_tuple()),
         "object_box": list(im.regions[l.object_idx].box.as_tuple())}
        for im, l in zip(images, lab.labels)]
    return record


def _infer_chunk(args):
    manifest, bags, indices, ckpt, mode, config, exact = args
    cache = {}
    return [infer_bag(manifest, bags[k], ckpt, mode, config, exact, cache, k) for k in indices]


def infer_bags(manifest, bags, ckpt, mode="free", config=None, exact=False, workers=1):
    config = config or InferenceConfig()
    if mode not in MODES:
        raise ValidationError(f"unknown inference mode {mode!r}")
    indices = list(range(len(bags)))
    if workers <= 1 or len(bags) < 2:
        return _infer_chunk((manifest, bags, indices, ckpt, mode, config, exact))
    chunks = [indices[w::workers] for w in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_infer_chunk, [(manifest, bags, c, ckpt, mode, config, exact)
                                             for c in chunks if c]))
    out = [None] * len(bags)
    for part in parts:
        for rec in part:
            out[rec["bag"]] = rec
    return out


def save_predictions(predictions, path, config: InferenceConfig, meta=None):
    payload = {"predictions": predictions, "config": asdict(config), "meta": meta or {}}
    return records.write_record(path, PREDICTIONS_SCHEMA, SCHEMA_VERSION, payload)


def load_predictions(path):
    body = records.read_record(path, PREDICTIONS_SCHEMA, SCHEMA_VERSION)
    return body["predictions"], body


def save_report(report, path, meta=None):
    payload = report.to_dict()
    payload["meta"] = {**payload.get("meta", {}), **(meta or {})}
    return records.write_record(path, REPORT_SCHEMA, SCHEMA_VERSION, payload)


def load_report(path):
    return records.read_record(path, REPORT_SCHEMA, SCHEMA_VERSION)
