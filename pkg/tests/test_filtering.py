import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustgmm import (
    FILTER_SLACK,
    ActiveSet,
    RandomSource,
    robust_score_bound,
    spectral_filter,
)

from conftest import ForcedUniform


def three_point_scores():
    # covariance diag(2/3, 0): top direction e1, squared projections {1,1,0}
    return np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])


def test_default_slack_value():
    assert FILTER_SLACK == 24.0


def test_no_removal_below_slack_bound(rng):
    vals = three_point_scores()
    out = spectral_filter(vals, ActiveSet(np.arange(3)), 1.0, rng)
    assert out.mean_score == pytest.approx(2.0 / 3.0, rel=1e-12)
    assert out.threshold is None
    assert out.removed.indices.size == 0
    np.testing.assert_array_equal(out.kept.indices, [0, 1, 2])


def test_forced_threshold_removes_top_scores():
    vals = three_point_scores()
    rng = ForcedUniform(1, 0.5)
    # mean score 2/3 > 1 * 0.01 fires; threshold = 0.5 * max = 0.5
    out = spectral_filter(vals, ActiveSet(np.arange(3)), 0.01, rng, slack=1.0)
    assert out.threshold == pytest.approx(0.5)
    np.testing.assert_array_equal(out.kept.indices, [2])
    np.testing.assert_array_equal(out.removed.indices, [0, 1])


def test_tie_at_threshold_is_kept():
    # squared projections {4, 1, 1}; forced threshold 0.25 * 4 = 1.0 exactly
    vals = np.array([[2.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    rng = ForcedUniform(1, 0.25)
    out = spectral_filter(vals, ActiveSet(np.arange(3)), 0.5, rng, slack=1.0)
    assert out.threshold == pytest.approx(1.0)
    np.testing.assert_array_equal(out.kept.indices, [1, 2])
    np.testing.assert_array_equal(out.removed.indices, [0])


def test_identical_rows_never_removed(rng):
    vals = np.tile([3.0, -1.0], (8, 1))
    for bound in (0.0, 1e-12, 5.0):
        out = spectral_filter(vals, ActiveSet(np.arange(8)), bound, rng)
        assert out.threshold is None
        assert len(out.kept) == 8


def test_single_sample_zero_bound(rng):
    out = spectral_filter(
        np.array([[9.0, 9.0]]), ActiveSet(np.array([4])), 0.0, rng
    )
    assert out.threshold is None
    np.testing.assert_array_equal(out.kept.indices, [4])


def test_argmax_always_removed_when_fired(rng):
    # one huge outlier among small scores: firing must remove the max row
    vals = np.vstack([rng.normal((40, 3)) * 0.1, [[500.0, 0.0, 0.0]]])
    active = ActiveSet(np.arange(41))
    out = spectral_filter(vals, active, 1e-6, rng.child("f"), slack=1.0)
    assert out.threshold is not None
    assert 40 in out.removed.indices.tolist()


def test_no_removal_is_stable_under_repetition(rng):
    vals = rng.normal((50, 4))
    active = ActiveSet(np.arange(50))
    out = spectral_filter(vals, active, 100.0, rng.child("a"))
    assert out.threshold is None
    again = spectral_filter(vals, out.kept, 100.0, rng.child("b"))
    assert again.threshold is None
    np.testing.assert_array_equal(again.kept.indices, out.kept.indices)


def test_validation_errors(rng):
    vals = np.zeros((3, 2))
    active = ActiveSet(np.arange(3))
    with pytest.raises(ValueError, match="nonnegative"):
        spectral_filter(vals, active, -1.0, rng)
    with pytest.raises(ValueError, match="slack"):
        spectral_filter(vals, active, 1.0, rng, slack=0.0)
    with pytest.raises(ValueError, match="expected"):
        spectral_filter(np.zeros(3), active, 1.0, rng)
    with pytest.raises(ValueError, match="score rows"):
        spectral_filter(np.zeros((2, 2)), active, 1.0, rng)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**32 - 1),
    st.integers(2, 40),
    st.integers(1, 5),
    st.floats(0.0, 4.0),
)
def test_kept_removed_partition_active(seed, m, k, bound):
    src = RandomSource(seed)
    vals = src.normal((m, k)) * (1.0 + 10.0 * float(src.uniform()))
    base = np.sort(src.subset(1000, m))
    active = ActiveSet(base)
    out = spectral_filter(vals, active, bound, src.child("f"), slack=1.0)
    merged = np.sort(np.concatenate([out.kept.indices, out.removed.indices]))
    np.testing.assert_array_equal(merged, base)
    assert np.intersect1d(out.kept.indices, out.removed.indices).size == 0
    assert (out.threshold is None) == (out.removed.indices.size == 0)
    assert np.linalg.norm(out.direction) == pytest.approx(1.0, abs=1e-9)


def test_score_bound_bulk_spectrum():
    # population covariance diag(1, 1/3, 1/6): bulk mean = (1/3 + 1/6) / 2
    r3 = np.sqrt(3.0)
    rhalf = np.sqrt(0.5)
    vals = np.array(
        [
            [r3, 0.0, 0.0],
            [-r3, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, rhalf],
            [0.0, 0.0, -rhalf],
        ]
    )
    got = robust_score_bound(vals, ActiveSet(np.arange(6)))
    assert got == pytest.approx(0.25, rel=1e-12)


def test_score_bound_scalar_fallback():
    # centered squares {4,1,0,1,4}: median 1, scaled by the chi2(1) median
    vals = np.array([[-2.0], [-1.0], [0.0], [1.0], [2.0]])
    got = robust_score_bound(vals, ActiveSet(np.arange(5)))
    assert got == pytest.approx(1.0 / 0.4549364231195727, rel=1e-12)


def test_score_bound_ignores_one_spiked_direction(rng):
    # isotropic noise plus a strong rank-one spike: the bulk estimate stays
    # near the noise level instead of tracking the spike
    base = rng.normal((400, 6))
    spike = np.zeros((20, 6))
    spike[:, 0] = 40.0
    vals = np.vstack([base, spike])
    got = robust_score_bound(vals, ActiveSet(np.arange(420)))
    assert got < 2.0


def test_score_bound_validation():
    with pytest.raises(ValueError, match="expected"):
        robust_score_bound(np.zeros(4), ActiveSet(np.arange(4)))
    with pytest.raises(ValueError, match="score rows"):
        robust_score_bound(np.zeros((3, 2)), ActiveSet(np.arange(4)))
