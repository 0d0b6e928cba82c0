import numpy as np
import pytest

from dfl_backdoor.defense import DefenseSpec, clip_incoming, median_aggregate
from dfl_backdoor.errors import InvalidArgument


def test_spec_validation():
    assert DefenseSpec().describe() == "none"
    assert DefenseSpec("norm_clip", 2.0).describe() == "norm_clip(threshold=2.0)"
    with pytest.raises(InvalidArgument):
        DefenseSpec("krum")
    with pytest.raises(InvalidArgument):
        DefenseSpec("norm_clip", 0.0)


def test_clip_incoming():
    own = np.zeros(3)
    nbrs = np.array([[3.0, 4.0, 0.0], [0.1, 0.0, 0.0]])
    out = clip_incoming(own, nbrs, 1.0)
    assert np.allclose(out[0], [0.6, 0.8, 0.0])
    assert np.array_equal(out[1], nbrs[1])
    assert np.all(np.linalg.norm(out - own, axis=1) <= 1.0 + 1e-12)
    assert np.array_equal(clip_incoming(own, nbrs, np.inf), nbrs)


def test_median_aggregate():
    own = np.array([0.0, 10.0])
    nbrs = np.array([[1.0, 0.0], [100.0, 1.0]])
    assert np.array_equal(median_aggregate(own, nbrs), [1.0, 1.0])
    with pytest.raises(InvalidArgument):
        median_aggregate(own, np.zeros((0, 2)))
