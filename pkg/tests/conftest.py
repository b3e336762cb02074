import numpy as np
import pytest
from hypothesis import settings

from vpstrack.masks import Category, InstanceMask, SegmentationMap

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")

CATS = (Category(1, False, "sky"), Category(2, False, "road"), Category(11, True, "car"), Category(12, True, "person"))

_acceptance_lines = []


def record_criterion(number, ok, detail=""):
    _acceptance_lines.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


def mask_from_pixels(pixels, shape, class_id=11, instance_id=1):
    bits = np.zeros(shape, dtype=bool)
    for x, y in pixels:
        bits[y, x] = True
    return InstanceMask(bits, class_id, instance_id)


def random_segmap(rng, h=8, w=10, n_things=4, void_frac=0.0):
    """Random map: stuff bands plus rectangular thing blobs, optional void speckle."""
    cls = np.where(np.arange(h)[:, None] < h // 2, 1, 2) * np.ones((1, w), dtype=int)
    inst = np.zeros((h, w), dtype=int)
    for k in range(1, n_things + 1):
        y0, x0 = rng.integers(0, h - 1), rng.integers(0, w - 1)
        y1, x1 = y0 + rng.integers(1, h // 2 + 1), x0 + rng.integers(1, w // 2 + 1)
        cls[y0:y1, x0:x1] = rng.choice([11, 12])
        inst[y0:y1, x0:x1] = k
    if void_frac:
        v = rng.random((h, w)) < void_frac
        cls[v] = 11
        inst[v] = 0
    return SegmentationMap(cls, inst, CATS)


def perturb_segmap(seg, rng, flip_frac=0.15):
    """Copy ``seg`` with a fraction of pixels relabelled from random other pixels."""
    cls = seg.class_ids.astype(int).copy()
    inst = seg.instance_ids.astype(int).copy()
    h, w = cls.shape
    sel = rng.random((h, w)) < flip_frac
    ys, xs = np.nonzero(sel)
    sy, sx = rng.integers(0, h, len(ys)), rng.integers(0, w, len(xs))
    cls[ys, xs] = cls[sy, sx]
    inst[ys, xs] = inst[sy, sx]
    # occasionally relabel a whole instance to a fresh id
    ids = np.unique(inst[inst > 0])
    if len(ids) and rng.random() < 0.5:
        inst[inst == rng.choice(ids)] = 50
    return SegmentationMap(cls, inst, seg.categories)
