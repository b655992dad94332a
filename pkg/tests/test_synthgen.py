import numpy as np
import pytest

from vrcoloc.datamodel import save_manifest
from vrcoloc.errors import ConfigurationError
from vrcoloc.synthgen import (SynthConfig, generate, gt_differences, predicate_vectors,
                              separability_report)

SMALL = dict(n_train=6, n_test=2, images=80, regions=8, d_a=8, d_c=4)


def test_noiseless_difference_is_predicate_vector():
    cfg = SynthConfig(**SMALL, sigma=0.0, seed=1)
    m = generate(cfg)
    vectors = predicate_vectors(cfg)
    diffs, pids = gt_differences(m)
    assert np.allclose(diffs, vectors[pids], atol=1e-12)
    assert separability_report(m)["within"] == pytest.approx(0.0, abs=1e-12)


def test_same_seed_same_bytes(tmp_path):
    a = save_manifest(generate(SynthConfig(**SMALL, seed=5)), tmp_path / "a.json")
    b = save_manifest(generate(SynthConfig(**SMALL, seed=5)), tmp_path / "b.json")
    c = save_manifest(generate(SynthConfig(**SMALL, seed=6)), tmp_path / "c.json")
    assert a == b and a != c


def test_nearest_predicate_vector_accuracy():
    cfg = SynthConfig(mu=4.0, sigma=0.5, images=600, seed=0)
    m = generate(cfg)
    vectors = predicate_vectors(cfg)
    diffs, pids = gt_differences(m)
    train = np.isin(pids, m.train_predicates)
    d = np.linalg.norm(diffs[train, None, :] - vectors[None, list(m.train_predicates), :], axis=2)
    predicted = np.array(m.train_predicates)[d.argmin(axis=1)]
    assert np.mean(predicted == pids[train]) >= 0.99


def test_separation_ratio():
    report = separability_report(generate(SynthConfig(mu=4.0, sigma=0.5, images=300)))
    assert report["ratio"] > 3


def test_no_structure_without_predicate_signal():
    report = separability_report(generate(SynthConfig(**SMALL, mu=0.0, sigma=1.0)))
    assert report["ratio"] == pytest.approx(1.0, abs=0.15)


def test_splits_and_validation(small_world):
    assert not set(small_world.train_predicates) & set(small_world.test_predicates)
    for im in small_world.images:
        assert all(a.matched for a in im.annotations)


def test_hard_mode_generates():
    m = generate(SynthConfig(**SMALL, hard_mode=True, distractors=2))
    assert len(m.images) == SMALL["images"]


def test_role_cue_marks_subjects():
    m = generate(SynthConfig(**{**SMALL, "images": 200}, role_cue=4.0))
    subj = [im.regions[a.subject_region].class_scores[0] for im in m.images for a in im.annotations]
    obj = [im.regions[a.object_region].class_scores[0] for im in m.images for a in im.annotations]
    assert np.mean(subj) > np.mean(obj) + 0.2


@pytest.mark.parametrize("bad", [dict(regions=1), dict(sigma=-1.0), dict(n_test=0),
                                 dict(d_a=0), dict(annotations=5, regions=8)])
def test_invalid_config(bad):
    with pytest.raises(ConfigurationError):
        generate(SynthConfig(**{**SMALL, **bad}))
