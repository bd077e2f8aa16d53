import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdcl import maskops, mixing, oracles

SHAPE = (4, 4, 4)


def _sources(seed):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=(1, 1) + SHAPE) for _ in range(4)]
    ys = [rng.integers(0, 3, size=(1,) + SHAPE) for _ in range(4)]
    return xs, ys


def test_all_ones_and_all_zeros_masks():
    (xj, xp, xq, xi), (yj, yp, yq, yi) = _sources(0)
    ones = np.ones(SHAPE, dtype=np.uint8)
    x_in, x_out = mixing.mix_images(xj, xp, xq, xi, ones)
    assert np.array_equal(x_in, xj) and np.array_equal(x_out, xq)
    y_in, _ = mixing.mix_labels(yj, yp, yq, yi, ones)
    assert np.array_equal(y_in, yj)
    x_in, x_out = mixing.mix_images(xj, xp, xq, xi, 1 - ones)
    assert np.array_equal(x_in, xp) and np.array_equal(x_out, xi)


def test_identical_sources_ignore_the_mask():
    _, (y, *_) = _sources(1)
    mask = maskops.gen_copy_paste_mask(SHAPE, 0.5, np.random.default_rng(0))
    y_in, y_out = mixing.mix_labels(y, y, y, y, mask)
    assert np.array_equal(y_in, y) and np.array_equal(y_out, y)


def test_shape_mismatch():
    (xj, xp, xq, xi), _ = _sources(2)
    with pytest.raises(mixing.MixError):
        mixing.mix_images(xj, xp, xq, xi, np.ones((4, 4, 3), dtype=np.uint8))
    with pytest.raises(mixing.MixError):
        mixing.mix_images(xj, xp, xq[..., :3], xi, np.ones(SHAPE, dtype=np.uint8))


def test_pairing_constraint():
    (xj, xp, xq, xi), (yj, yp, yq, yi) = _sources(3)
    mask = np.ones(SHAPE, dtype=np.uint8)
    with pytest.raises(mixing.MixError):
        mixing.mix_pair(xi, xj, xp, xq, yi, yj, yp, yq, mask, ("a", "a", "p", "q"))
    with pytest.raises(mixing.MixError):
        mixing.mix_pair(xi, xj, xp, xq, yi, yj, yp, yq, mask, ("i", "j", "p", "p"))
    pair = mixing.mix_pair(xi, xj, xp, xq, yi, yj, yp, yq, mask, ("i", "j", "p", "q"))
    assert pair.provenance == ("i", "j", "p", "q")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.2, 0.8))
def test_mixing_properties(seed, beta):
    (xj, xp, xq, xi), (yj, yp, yq, yi) = _sources(seed)
    mask = maskops.gen_copy_paste_mask(SHAPE, beta, np.random.default_rng(seed))
    x_in, x_out = mixing.mix_images(xj, xp, xq, xi, mask)
    y_in, y_out = mixing.mix_labels(yj, yp, yq, yi, mask)
    # brute-force equivalence
    assert np.array_equal(x_in, oracles.mix_oracle(xj, xp, mask))
    assert np.array_equal(x_out, oracles.mix_oracle(xq, xi, mask))
    assert np.array_equal(y_in, oracles.mix_oracle(yj, yp, mask))
    assert np.array_equal(y_out, oracles.mix_oracle(yq, yi, mask))
    # partition: labeled source exactly where the mask is 1 (sources are a.s. distinct)
    from_j = (x_in == xj)[0, 0]
    assert np.array_equal(from_j, mask == 1)
    assert np.array_equal((x_in == xp)[0, 0], mask == 0)
    # label/image alignment
    assert np.all(y_in[0][mask == 1] == yj[0][mask == 1])
    # reconstruction with the complement mask
    c_in, _ = mixing.mix_images(xj, xp, xq, xi, 1 - mask)
    assert np.array_equal(x_in + c_in, xj + xp)
    assert y_in.max() < 3


def test_mixing_suite_passes():
    passed, failed, _ = oracles.suite_mixing()
    assert failed == 0 and passed == 100
