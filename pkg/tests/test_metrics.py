import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advfield.metrics import dice, mean_dice


def test_dice_identical_and_disjoint():
    m = np.zeros((10, 10), dtype=int)
    m[2:5, 2:5] = 1
    assert dice(m, m) == 1.0
    other = np.zeros_like(m)
    other[6:9, 6:9] = 1
    assert dice(m, other) == 0.0


def test_dice_half_overlap_direct_count():
    a = np.zeros((20, 20), dtype=int)
    b = np.zeros((20, 20), dtype=int)
    a[0:10, 0:10] = 1            # 100 px
    b[5:15, 0:10] = 1            # 100 px, 50 shared
    assert dice(a, b) == pytest.approx(0.5)


def test_dice_empty_masks_agree():
    z = np.zeros((4, 4), dtype=int)
    assert dice(z, z) == 1.0
    with pytest.raises(ValueError):
        dice(z, np.zeros((4, 5), dtype=int))


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, (6, 7), elements=st.integers(0, 2)), arrays(np.int64, (6, 7), elements=st.integers(0, 2)),
       st.integers(0, 2))
def test_dice_range_and_symmetry(a, b, cls):
    d = dice(a, b, cls)
    assert 0.0 <= d <= 1.0
    assert d == dice(b, a, cls)


def test_mean_dice():
    a = np.ones((2, 3, 3), dtype=int)
    b = np.ones((2, 3, 3), dtype=int)
    b[1] = 0
    assert mean_dice(a, b) == pytest.approx(0.5)
    assert np.isnan(mean_dice([], []))
