"""Regions, images, bags and the dataset manifest.

Boxes are stored in normalized ``[0, 1]`` image coordinates. All record types
are immutable once built; feature vectors are held as read-only float64 arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import records
from .errors import (ConfigurationError, DegenerateImageError, ParseError,
                     ValidationError)

MANIFEST_SCHEMA = "vrcoloc.manifest"
BAGS_SCHEMA = "vrcoloc.bags"
SCHEMA_VERSION = 1

__all__ = [
    "BBox", "Region", "RelationshipAnnotation", "ImageRecord", "PairLabel",
    "Bag", "DatasetManifest", "iou", "nms_topk", "ingest_regions",
    "build_label_set", "label_count", "match_annotations", "make_bags",
    "load_manifest", "save_manifest", "load_bags", "save_bags",
]


def _frozen_vector(values, name):
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise ValidationError(f"box coordinate {name}={v!r} outside [0, 1]")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"box has non-positive area: {self.as_tuple()}")

    @classmethod
    def from_seq(cls, seq):
        if len(seq) != 4:
            raise ValidationError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True, eq=False)
class Region:
    box: BBox
    appearance: np.ndarray
    class_scores: np.ndarray
    objectness: float

    def __post_init__(self):
        object.__setattr__(self, "appearance", _frozen_vector(self.appearance, "appearance"))
        object.__setattr__(self, "class_scores", _frozen_vector(self.class_scores, "class_scores"))
        if not (0.0 <= self.objectness <= 1.0):
            raise ValidationError(f"objectness {self.objectness!r} outside [0, 1]")
        if self.class_scores.size and abs(self.class_scores.sum() - 1.0) > 1e-5:
            raise ValidationError(
                f"class scores sum to {self.class_scores.sum():.8f}, expected 1")

    def __eq__(self, other):
        if not isinstance(other, Region):
            return NotImplemented
        return (self.box == other.box and self.objectness == other.objectness
                and np.array_equal(self.appearance, other.appearance)
                and np.array_equal(self.class_scores, other.class_scores))

    __hash__ = None

    def to_dict(self):
        return {"box": list(self.box.as_tuple()), "appearance": self.appearance,
                "class_scores": self.class_scores, "objectness": self.objectness}

    @classmethod
    def from_dict(cls, d):
        return cls(BBox.from_seq(d["box"]), d["appearance"], d["class_scores"],
                   float(d["objectness"]))


@dataclass(frozen=True)
class RelationshipAnnotation:
    """A ground-truth ``<subject, predicate, object>`` tuple.

    ``subject_region`` / ``object_region`` are the indices of the matched
    regions, or ``None`` while the annotation is unmatched.
    """
    subject_box: BBox
    object_box: BBox
    predicate_id: int
    subject_region: int | None = None
    object_region: int | None = None

    @property
    def matched(self):
        return self.subject_region is not None and self.object_region is not None

    def to_dict(self):
        return {"subject_box": list(self.subject_box.as_tuple()),
                "object_box": list(self.object_box.as_tuple()),
                "predicate_id": self.predicate_id,
                "subject_region": self.subject_region,
                "object_region": self.object_region}

    @classmethod
    def from_dict(cls, d):
        return cls(BBox.from_seq(d["subject_box"]), BBox.from_seq(d["object_box"]),
                   int(d["predicate_id"]), d.get("subject_region"), d.get("object_region"))


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    regions: tuple[Region, ...]
    annotations: tuple[RelationshipAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        n = len(self.regions)
        for ann in self.annotations:
            for idx in (ann.subject_region, ann.object_region):
                if idx is not None and not (0 <= idx < n):
                    raise ValidationError(
                        f"{self.image_id}: annotation region index {idx} out of range")

    @property
    def num_regions(self):
        return len(self.regions)

    def annotations_for(self, predicate_id):
        return [a for a in self.annotations if a.predicate_id == predicate_id]

    def predicates(self):
        return {a.predicate_id for a in self.annotations}

    def to_dict(self):
        return {"image_id": self.image_id,
                "regions": [r.to_dict() for r in self.regions],
                "annotations": [a.to_dict() for a in self.annotations]}

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["image_id"]),
                   tuple(Region.from_dict(r) for r in d["regions"]),
                   tuple(RelationshipAnnotation.from_dict(a) for a in d["annotations"]))


@dataclass(frozen=True, order=True)
class PairLabel:
    subject_idx: int
    object_idx: int

    def __post_init__(self):
        if self.subject_idx == self.object_idx:
            raise ValidationError("a label needs two distinct regions")
        if self.subject_idx < 0 or self.object_idx < 0:
            raise ValidationError("negative region index")

    def check(self, num_regions):
        if self.subject_idx >= num_regions or self.object_idx >= num_regions:
            raise ValidationError(
                f"label {self.as_tuple()} out of range for {num_regions} regions")
        return self

    def as_tuple(self):
        return (self.subject_idx, self.object_idx)


@dataclass(frozen=True)
class Bag:
    image_ids: tuple[str, ...]
    common_predicate_id: int

    def __post_init__(self):
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        if len(self.image_ids) < 2:
            raise ValidationError("a bag needs at least two images")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValidationError("bag images must be distinct")

    @property
    def size(self):
        return len(self.image_ids)


@dataclass(frozen=True)
class DatasetManifest:
    d_a: int
    d_c: int
    predicates: dict[int, str]
    train_predicates: tuple[int, ...]
    test_predicates: tuple[int, ...]
    images: tuple[ImageRecord, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "train_predicates", tuple(sorted(self.train_predicates)))
        object.__setattr__(self, "test_predicates", tuple(sorted(self.test_predicates)))
        object.__setattr__(self, "images", tuple(self.images))
        self.validate()
        object.__setattr__(self, "_index", {im.image_id: im for im in self.images})

    def validate(self):
        overlap = set(self.train_predicates) & set(self.test_predicates)
        if overlap:
            raise ValidationError(f"predicates in both splits: {sorted(overlap)}")
        vocab = set(self.predicates)
        for pid in self.train_predicates + self.test_predicates:
            if pid not in vocab:
                raise ValidationError(f"split predicate {pid} not in vocabulary")
        seen = set()
        for im in self.images:
            if im.image_id in seen:
                raise ValidationError(f"duplicate image id {im.image_id!r}")
            seen.add(im.image_id)
            for k, r in enumerate(im.regions):
                if r.appearance.size != self.d_a or r.class_scores.size != self.d_c:
                    raise ValidationError(
                        f"{im.image_id} region {k}: dims ({r.appearance.size}, "
                        f"{r.class_scores.size}) != manifest ({self.d_a}, {self.d_c})")
            for a in im.annotations:
                if a.predicate_id not in vocab:
                    raise ValidationError(
                        f"{im.image_id}: predicate {a.predicate_id} not in vocabulary")

    @property
    def d_x(self):
        return 4 + self.d_a + self.d_c

    def image(self, image_id):
        try:
            return self._index[image_id]
        except KeyError:
            raise ValidationError(f"unknown image id {image_id!r}") from None

    def split_predicates(self, split):
        if split == "train":
            return self.train_predicates
        if split == "test":
            return self.test_predicates
        raise ConfigurationError(f"unknown split {split!r}")

    def bag_images(self, bag):
        return [self.image(i) for i in bag.image_ids]

    def to_dict(self):
        return {"d_a": self.d_a, "d_c": self.d_c,
                "predicates": {str(k): v for k, v in sorted(self.predicates.items())},
                "split": {"train": list(self.train_predicates),
                          "test": list(self.test_predicates)},
                "images": [im.to_dict() for im in self.images],
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["d_a"]), int(d["d_c"]),
                   {int(k): str(v) for k, v in d["predicates"].items()},
                   tuple(d["split"]["train"]), tuple(d["split"]["test"]),
                   tuple(ImageRecord.from_dict(im) for im in d["images"]),
                   dict(d.get("meta", {})))


# --- geometry ---------------------------------------------------------------

def iou(a: BBox, b: BBox) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def nms_topk(regions: Sequence[Region], iou_thresh=0.5, top_k=100):
    """Greedy non-maximum suppression followed by a top-k cut.

    Returns indices into ``regions`` in descending objectness order; ties
    go to the lower original index.
    """
    order = sorted(range(len(regions)), key=lambda i: (-regions[i].objectness, i))
    keep = []
    for i in order:
        if len(keep) >= top_k:
            break
        box = regions[i].box
        if all(iou(box, regions[j].box) <= iou_thresh for j in keep):
            keep.append(i)
    return keep


def ingest_regions(image: ImageRecord, iou_thresh=0.5, top_k=100, match_thresh=0.5):
    """Apply NMS/top-k to raw detections, then re-match the annotations."""
    keep = nms_topk(image.regions, iou_thresh, top_k)
    stripped = tuple(replace(a, subject_region=None, object_region=None)
                     for a in image.annotations)
    kept = ImageRecord(image.image_id, tuple(image.regions[i] for i in keep), stripped)
    return match_annotations(kept, match_thresh)


# --- labels -----------------------------------------------------------------

def label_count(num_regions):
    return num_regions * (num_regions - 1)


def build_label_set(image: ImageRecord):
    p = image.num_regions
    if p < 2:
        raise DegenerateImageError(
            f"{image.image_id}: {p} region(s), need at least 2 for a subject-object pair")
    return [PairLabel(s, o) for s in range(p) for o in range(p) if s != o]


def label_index_arrays(num_regions):
    """Subject and object index arrays in ``build_label_set`` order."""
    s, o = np.meshgrid(np.arange(num_regions), np.arange(num_regions), indexing="ij")
    mask = s != o
    return s[mask], o[mask]


def label_position(num_regions, subject_idx, object_idx):
    """Position of ``(subject_idx, object_idx)`` in the lexicographic label list."""
    return subject_idx * (num_regions - 1) + object_idx - (object_idx > subject_idx)


# --- annotation matching ----------------------------------------------------

def _best_region(regions, box):
    best, best_iou = None, -1.0
    for k, r in enumerate(regions):
        v = iou(r.box, box)
        if v > best_iou:
            best, best_iou = k, v
    return best, best_iou


def match_annotations(image: ImageRecord, iou_thresh=0.5):
    """Attach each annotation to its highest-IoU regions.

    An annotation whose subject or object best IoU falls below ``iou_thresh``
    is left unmatched (both indices ``None``), as is one whose subject and
    object resolve to the same region.
    """
    matched = []
    for ann in image.annotations:
        s, s_iou = _best_region(image.regions, ann.subject_box)
        o, o_iou = _best_region(image.regions, ann.object_box)
        if s is None or s_iou < iou_thresh or o_iou < iou_thresh or s == o:
            matched.append(replace(ann, subject_region=None, object_region=None))
        else:
            matched.append(replace(ann, subject_region=s, object_region=o))
    return ImageRecord(image.image_id, image.regions, tuple(matched))


# --- bags -------------------------------------------------------------------

def predicate_pools(manifest: DatasetManifest, split):
    pools = {pid: [] for pid in manifest.split_predicates(split)}
    for im in manifest.images:
        if im.num_regions < 2:
            continue
        for pid in sorted(im.predicates()):
            if pid in pools:
                pools[pid].append(im.image_id)
    return pools


def make_bags(manifest: DatasetManifest, split, bag_size, count, seed):
    """Sample ``count`` bags from one split.

    Each bag draws a predicate uniformly from those with at least
    ``bag_size`` images, then ``bag_size`` distinct images from its pool.
    Images may recur across bags.
    """
    if bag_size < 2:
        raise ConfigurationError("bag_size must be at least 2")
    pools = predicate_pools(manifest, split)
    eligible = [pid for pid in sorted(pools) if len(pools[pid]) >= bag_size]
    if not eligible:
        raise ConfigurationError(
            f"no {split} predicate occurs in {bag_size} or more images")
    rng = np.random.default_rng(seed)
    bags = []
    for _ in range(count):
        pid = eligible[int(rng.integers(len(eligible)))]
        pool = pools[pid]
        picks = rng.choice(len(pool), size=bag_size, replace=False)
        bags.append(Bag(tuple(pool[int(k)] for k in picks), pid))
    return bags


# --- files ------------------------------------------------------------------

def save_manifest(manifest: DatasetManifest, path):
    return records.write_record(path, MANIFEST_SCHEMA, SCHEMA_VERSION, manifest.to_dict())


def manifest_from_record(body):
    records.check_header(body, MANIFEST_SCHEMA, SCHEMA_VERSION)
    try:
        return DatasetManifest.from_dict(body)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed manifest: {exc!r}") from exc


def load_manifest(path) -> DatasetManifest:
    body = records.read_record(path, MANIFEST_SCHEMA, SCHEMA_VERSION)
    return manifest_from_record(body)


def save_bags(bags, path, meta=None):
    payload = {"bags": [{"image_ids": list(b.image_ids),
                         "common_predicate_id": b.common_predicate_id} for b in bags],
               "meta": meta or {}}
    return records.write_record(path, BAGS_SCHEMA, SCHEMA_VERSION, payload)


def load_bags(path):
    body = records.read_record(path, BAGS_SCHEMA, SCHEMA_VERSION)
    try:
        bags = [Bag(tuple(b["image_ids"]), int(b["common_predicate_id"]))
                for b in body["bags"]]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed bag file: {exc!r}") from exc
    return bags, body.get("meta", {})
