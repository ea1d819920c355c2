import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazefuse.geometry import (
    CAMERA_AXIS,
    EmptySubsetError,
    GazeVector,
    SphericalGaze,
    angular_error,
    angular_errors,
    mean_angular_error,
    spherical_to_vector,
    subset_filter,
    subset_mask,
    vector_to_spherical,
)

vec = st.tuples(*[st.floats(-10, 10, allow_nan=False)] * 3).filter(
    lambda v: math.sqrt(sum(c * c for c in v)) > 1e-3)


def oracle_angle(p, t):
    """Plain-python arccos of the normalized dot product, in degrees."""
    dot = p[0] * t[0] + p[1] * t[1] + p[2] * t[2]
    npn = math.sqrt(p[0] ** 2 + p[1] ** 2 + p[2] ** 2)
    ntn = math.sqrt(t[0] ** 2 + t[1] ** 2 + t[2] ** 2)
    c = dot / (npn * ntn)
    c = 1.0 if c > 1.0 else -1.0 if c < -1.0 else c
    return math.acos(c) * 180.0 / math.pi


def unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------- angular_error

@pytest.mark.parametrize("a,b,deg", [
    ((1, 0, 0), (1, 0, 0), 0.0),
    ((1, 0, 0), (0, 1, 0), 90.0),
    ((1, 0, 0), (2, 0, 0), 0.0),
    ((1, 1, 0), (1, 0, 0), 45.0),
    ((1, 0, 0), (-1, 0, 0), 180.0),
])
def test_angular_error_anchors(a, b, deg):
    assert angular_error(a, b) == pytest.approx(deg, abs=1e-12)


def test_zero_vector_rejected():
    with pytest.raises(ValueError):
        angular_error((0, 0, 0), (1, 0, 0))
    with pytest.raises(ValueError):
        angular_errors(np.zeros((1, 3)), np.ones((1, 3)))


def test_clamp_prevents_nan():
    a = np.array([0.6, 0.8, 0.0])
    assert angular_error(a, a * (1 + 1e-16)) == 0.0
    assert not math.isnan(angular_error((1e-8, 1.0, 0.0), (1e-8, 1.0, 0.0)))


def test_accepts_gaze_vector_type():
    assert angular_error(GazeVector(0, 0, -1), GazeVector(0, 0, -3)) == 0.0


def test_vectorized_matches_scalar(rng):
    p, t = rng.normal(size=(50, 3)), unit(rng, 50)
    np.testing.assert_allclose(angular_errors(p, t), [angular_error(a, b) for a, b in zip(p, t)],
                               atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(vec, vec)
def test_symmetry_exact(a, b):
    assert angular_error(a, b) == angular_error(b, a)


@settings(max_examples=200, deadline=None)
@given(vec, vec, st.floats(1e-3, 1e3))
def test_positive_scale_invariance(a, b, c):
    base = angular_error(a, b)
    # acos amplifies round-off near 0 and 180 degrees; stay clear of the poles
    if not 1.0 < base < 179.0:
        return
    assert abs(angular_error(a, tuple(c * v for v in b)) - base) < 1e-9


def test_scale_invariance_unit_pairs(rng):
    a, b = unit(rng, 500), unit(rng, 500)
    for c in (1e-3, 0.5, 2.0, 7.0, 1e3):
        assert np.max(np.abs(angular_errors(a, c * b) - angular_errors(a, b))) < 1e-9


def test_triangle_inequality(rng):
    a, b, c = unit(rng, 2000), unit(rng, 2000), unit(rng, 2000)
    assert np.all(angular_errors(a, c) <= angular_errors(a, b) + angular_errors(b, c) + 1e-6)


def test_matches_scalar_oracle_1000_pairs(rng):
    p, t = rng.normal(size=(1000, 3)) * 3, unit(rng, 1000)
    ours = [angular_error(a, b) for a, b in zip(p, t)]
    ref = [oracle_angle(list(a), list(b)) for a, b in zip(p, t)]
    assert max(abs(x - y) for x, y in zip(ours, ref)) < 1e-9


# ---------------------------------------------------------------- spherical

def test_spherical_anchors():
    assert spherical_to_vector(SphericalGaze(0, 0)).as_array() == pytest.approx([0, 0, -1])
    assert spherical_to_vector(SphericalGaze(math.pi / 2, 0)).as_array() == pytest.approx([1, 0, 0])
    g = spherical_to_vector(SphericalGaze(0, math.pi / 2 - 1e-6)).as_array()
    np.testing.assert_allclose(g, [0, 1, 0], atol=1e-6)


def test_spherical_domain():
    with pytest.raises(ValueError):
        spherical_to_vector(SphericalGaze(0.0, math.pi / 2))


def test_vector_to_spherical_anchors():
    assert vector_to_spherical((0, 0, -1)) == SphericalGaze(0.0, 0.0)
    s = vector_to_spherical((0, 1, 0))
    assert s.yaw == 0.0 and s.pitch == pytest.approx(math.pi / 2)
    assert vector_to_spherical((0, -1, 0)).yaw == 0.0


def test_spherical_roundtrip_1000(rng):
    yaw = rng.uniform(-math.pi, math.pi, 1000)
    pitch = rng.uniform(-math.pi / 2 + 1e-3, math.pi / 2 - 1e-3, 1000)
    worst = 0.0
    for y, p in zip(yaw, pitch):
        g = spherical_to_vector(SphericalGaze(y, p))
        assert abs(g.norm() - 1.0) < 1e-12
        s = vector_to_spherical(g)
        dy = math.remainder(s.yaw - y, 2 * math.pi)
        worst = max(worst, abs(dy), abs(s.pitch - p))
    assert worst < 1e-9


def test_yaw_positive_to_subject_left_x_positive():
    g = spherical_to_vector(SphericalGaze(0.3, 0.0))
    assert g.x > 0 and g.z < 0
    assert spherical_to_vector(SphericalGaze(0.0, 0.2)).y > 0


# ---------------------------------------------------------------- subsets

def _at_angle(deg, azimuth=0.4):
    a = math.radians(deg)
    return np.array([math.sin(a) * math.cos(azimuth), math.sin(a) * math.sin(azimuth), -math.cos(a)])


def test_subset_anchors():
    assert subset_filter((0, 0, -1), "front_facing")
    assert not subset_filter((1, 0, 0), "front180")
    assert subset_filter((0, 0, 1), "all")


@pytest.mark.parametrize("subset,limit", [("front180", 90.0), ("front_facing", 20.0)])
def test_boundary_strict(subset, limit):
    for az in np.linspace(0, 2 * math.pi, 13):
        assert not subset_filter(_at_angle(limit, az), subset)
        assert subset_filter(_at_angle(limit - 1e-6, az), subset)
        assert not subset_filter(_at_angle(limit + 1e-6, az), subset)
    # the same vector built from yaw alone
    g = spherical_to_vector(SphericalGaze(math.radians(limit), 0.0))
    assert not subset_filter(g, subset)


def test_subset_mask_matches_filter(rng):
    t = unit(rng, 300)
    for s in ("all", "front180", "front_facing"):
        np.testing.assert_array_equal(subset_mask(t, s), [subset_filter(g, s) for g in t])


def test_subset_monotone_10000(rng):
    t = unit(rng, 10000)
    ff, f180 = subset_mask(t, "front_facing"), subset_mask(t, "front180")
    assert np.all(~ff | f180)
    assert subset_mask(t, "all").all()


def test_unknown_subset():
    with pytest.raises(ValueError):
        subset_filter((0, 0, -1), "front360")


def test_camera_axis():
    assert CAMERA_AXIS.tolist() == [0.0, 0.0, -1.0]


# ---------------------------------------------------------------- mean

def test_mean_identical_zero(rng):
    t = unit(rng, 20)
    assert mean_angular_error(t, t) == (0.0, 20)


def test_mean_two_samples():
    truths = [(0, 0, -1), (0, 0, -1)]
    preds = [(0, 0, -1), (1, 0, 0)]
    assert mean_angular_error(preds, truths) == (45.0, 2)


def test_mean_filters_on_truth():
    truths = [(0, 0, -1), (0, 0, 1)]
    preds = [(0, 0, 1), (0, 0, 1)]
    mean, count = mean_angular_error(preds, truths, "front180")
    assert (mean, count) == (180.0, 1)


def test_mean_empty_subset():
    with pytest.raises(EmptySubsetError) as e:
        mean_angular_error([(0, 0, 1)], [(0, 0, 1)], "front_facing")
    assert e.value.count == 0


def test_mean_length_mismatch():
    with pytest.raises(ValueError):
        mean_angular_error([(0, 0, 1)], [(0, 0, 1), (0, 0, 1)])


def test_mean_vs_oracle_100(rng):
    p, t = rng.normal(size=(100, 3)), unit(rng, 100)
    for subset, lim in (("all", 181.0), ("front180", 90.0), ("front_facing", 20.0)):
        keep = [oracle_angle(list(g), [0, 0, -1]) < lim for g in t]
        errs = [oracle_angle(list(a), list(b)) for a, b, k in zip(p, t, keep) if k]
        if not errs:
            continue
        mean, count = mean_angular_error(p, t, subset)
        assert count == len(errs)
        assert abs(mean - sum(errs) / len(errs)) < 1e-9
