import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from difftraverse import interpolation as ip


def _de_casteljau(points, u):
    pts = [np.asarray(p, dtype=float) for p in points]
    while len(pts) > 1:
        pts = [(1 - u) * a + u * b for a, b in zip(pts[:-1], pts[1:])]
    return pts[0]


def test_binomial_matches_math_comb():
    for n in range(0, 40):
        for k in range(n + 1):
            assert ip.binomial(n, k) == math.comb(n, k)


def test_bernstein_fixtures():
    for n in range(0, 10):
        assert ip.bernstein_weight(n, 0, 0.0) == 1.0
        assert ip.bernstein_weight(n, n, 1.0) == 1.0
    assert ip.bernstein_weight(2, 1, 0.5) == 0.5


def test_partition_of_unity():
    for n in range(0, 17):
        for u in np.linspace(0, 1, 101):
            assert abs(sum(ip.bernstein_weight(n, i, u) for i in range(n + 1)) - 1) < 1e-12


def test_bernstein_domain_errors():
    with pytest.raises(ip.InterpolationError):
        ip.bernstein_weight(3, 4, 0.5)
    with pytest.raises(ip.InterpolationError):
        ip.bernstein_weight(3, 1, 1.5)


def test_midpoint_fixture():
    curve = ip.BezierCurve(np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 0.0]]))
    np.testing.assert_allclose(ip.bezier_point(curve, 0.5), [1.0, 1.0], atol=1e-12)


@given(st.integers(1, 12), st.floats(0, 1), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_bezier_matches_de_casteljau(n, u, seed):
    pts = np.random.default_rng(seed).normal(size=(n + 1, 3))
    got = ip.bezier_point(ip.BezierCurve(pts), u)
    np.testing.assert_allclose(got, _de_casteljau(pts, u), atol=1e-10)


def test_endpoints_and_linear_case():
    pts = np.random.default_rng(1).normal(size=(5, 2, 2))
    c = ip.BezierCurve(pts)
    np.testing.assert_array_equal(ip.bezier_point(c, 0.0), pts[0])
    np.testing.assert_array_equal(ip.bezier_point(c, 1.0), pts[-1])
    lin = ip.BezierCurve(pts[:2])
    for u in np.linspace(0, 1, 11):
        np.testing.assert_allclose(ip.bezier_point(lin, u), (1 - u) * pts[0] + u * pts[1],
                                   atol=1e-15)
    with pytest.raises(ip.InterpolationError):
        ip.bezier_point(c, -0.1)


def test_sample_curve():
    pts = np.random.default_rng(2).normal(size=(4, 3))
    c = ip.BezierCurve(pts)
    two = ip.sample_curve(c, 2)
    np.testing.assert_array_equal(two.latents, pts[[0, -1]])
    fifty = ip.sample_curve(c, 50)
    assert len(fifty) == 50 and np.all(np.diff(fifty.u) > 0)
    const = ip.sample_curve(ip.BezierCurve(np.tile([[1.5, -2.0]], (6, 1))), 20)
    np.testing.assert_allclose(const.latents, np.tile([1.5, -2.0], (20, 1)), atol=1e-12)
    with pytest.raises(ip.InterpolationError):
        ip.sample_curve(c, 1)


def test_control_indices():
    assert ip.control_indices(10, 7) == [0, 2, 3, 4, 6, 8, 9]
    assert ip.control_indices(10, 10) == list(range(10))
    with pytest.raises(ip.InterpolationError):
        ip.control_indices(3, 5)
