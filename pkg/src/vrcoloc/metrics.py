"""CorLoc-style localization metrics for relationship co-localization."""
from __future__ import annotations

from dataclasses import dataclass, field

from .datamodel import BBox, iou
from .errors import EvaluationDataError, UndefinedMetricError

__all__ = ["image_correct", "vr_corloc", "bag_corloc", "EvalReport", "evaluate",
           "format_summary"]


def image_correct(pred_subject: BBox, pred_object: BBox, gt_annotations, thresh=0.5):
    """True iff some ground-truth tuple is matched with IoU strictly above
    ``thresh`` on both the subject and the object box."""
    gt_annotations = list(gt_annotations)
    if not gt_annotations:
        raise EvaluationDataError("no ground-truth relationship for the bag's predicate")
    return any(iou(pred_subject, a.subject_box) > thresh and iou(pred_object, a.object_box) > thresh
               for a in gt_annotations)


def vr_corloc(image_flags):
    flags = list(image_flags)
    if not flags:
        raise UndefinedMetricError("VR-CorLoc over zero images")
    return sum(bool(f) for f in flags) / len(flags)


def bag_corloc(bag_flags):
    """Fraction of bags whose every image is correct; ``bag_flags`` is a list
    of per-bag lists of image flags."""
    bags = [list(b) for b in bag_flags]
    if not bags:
        raise UndefinedMetricError("Bag-CorLoc over zero bags")
    return sum(all(b) for b in bags) / len(bags)


@dataclass
class EvalReport:
    per_bag: list
    vr_corloc: float
    bag_corloc: float
    n_images: int
    n_correct_images: int
    n_bags: int
    n_correct_bags: int
    n_skipped: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {"per_bag": self.per_bag, "vr_corloc": self.vr_corloc,
                "bag_corloc": self.bag_corloc, "n_images": self.n_images,
                "n_correct_images": self.n_correct_images, "n_bags": self.n_bags,
                "n_correct_bags": self.n_correct_bags, "n_skipped": self.n_skipped,
                "meta": self.meta}


def evaluate(predictions, manifest, bags, thresh=0.5):
    """Score inference output against ground truth.

    ``predictions`` are dicts as written by the inference step; skipped bags
    are counted but excluded from both metrics.
    """
    per_bag, flags_by_bag, skipped = [], [], 0
    for pred in predictions:
        bag = bags[pred["bag"]]
        if pred.get("skipped"):
            skipped += 1
            per_bag.append({"bag": pred["bag"], "skipped": True, "images": []})
            continue
        flags = []
        for entry, image_id in zip(pred["images"], bag.image_ids):
            if entry["image_id"] != image_id:
                raise EvaluationDataError(
                    f"bag {pred['bag']}: prediction for {entry['image_id']!r}, expected {image_id!r}")
            gt = manifest.image(image_id).annotations_for(bag.common_predicate_id)
            flags.append(image_correct(BBox.from_seq(entry["subject_box"]),
                                       BBox.from_seq(entry["object_box"]), gt, thresh))
        flags_by_bag.append(flags)
        per_bag.append({"bag": pred["bag"], "skipped": False, "images": flags,
                        "correct": all(flags)})
    all_flags = [f for b in flags_by_bag for f in b]
    return EvalReport(per_bag, vr_corloc(all_flags), bag_corloc(flags_by_bag),
                      len(all_flags), sum(all_flags), len(flags_by_bag),
                      sum(all(b) for b in flags_by_bag), skipped)


def format_summary(report: EvalReport):
    rows = [("bags evaluated", f"{report.n_bags}"),
            ("bags skipped", f"{report.n_skipped}"),
            ("images evaluated", f"{report.n_images}"),
            ("VR-CorLoc", f"{100 * report.vr_corloc:6.2f}%  ({report.n_correct_images}/{report.n_images})"),
            ("Bag-CorLoc", f"{100 * report.bag_corloc:6.2f}%  ({report.n_correct_bags}/{report.n_bags})")]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
