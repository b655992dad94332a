import numpy as np
import pytest

from vrcoloc.datamodel import (BBox, DatasetManifest, ImageRecord, Region,
                               RelationshipAnnotation)
from vrcoloc.synthgen import SynthConfig, generate


def make_region(box, d_a=2, d_c=2, objectness=0.5, appearance=None):
    app = np.zeros(d_a) if appearance is None else appearance
    return Region(BBox(*box), app, np.full(d_c, 1.0 / d_c), objectness)


def grid_regions(n, d_a=2, d_c=2, seed=0):
    """``n`` pairwise-disjoint regions on a regular grid."""
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n)))
    cell = 1.0 / side
    out = []
    for k in range(n):
        r, c = divmod(k, side)
        box = (c * cell, r * cell, c * cell + 0.8 * cell, r * cell + 0.8 * cell)
        out.append(Region(BBox(*box), rng.normal(size=d_a), np.full(d_c, 1.0 / d_c),
                          float(rng.uniform())))
    return out


@pytest.fixture
def tiny_manifest():
    regions = grid_regions(4)
    anns = (RelationshipAnnotation(regions[0].box, regions[1].box, 0, 0, 1),)
    images = [ImageRecord(f"im{k}", regions, anns if k % 2 == 0 else
                          (RelationshipAnnotation(regions[2].box, regions[3].box, 1, 2, 3),))
              for k in range(6)]
    return DatasetManifest(2, 2, {0: "on", 1: "under"}, (0,), (1,), tuple(images))


@pytest.fixture(scope="session")
def small_world():
    return generate(SynthConfig(n_train=6, n_test=3, images=90, regions=6, d_a=8, d_c=4,
                                mu=4.0, sigma=0.5, annotations=2, seed=3))
