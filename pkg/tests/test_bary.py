import math
from fractions import Fraction

import numpy as np
import pytest

from blurrast.bary import (DET_EPS, DegenerateTriangleError, TrianglePair, closest_weights,
                           endpoint_select, eval_bary, naive_bary, precompute_coeffs, triangle_matrix)


def random_pair(rng, size=64.0, motion=20.0):
    P0 = rng.uniform(0, size, (3, 2))
    P1 = P0 + rng.uniform(-motion, motion, (3, 2))
    return TrianglePair.from_points(P0, P1)


def test_naive_vertex_and_centroid():
    F = triangle_matrix([[1, 2], [7, 3], [4, 9]])
    np.testing.assert_allclose(naive_bary(F, [1, 2]), [1, 0, 0], atol=1e-15)
    c = F[:2].mean(axis=1)
    np.testing.assert_allclose(naive_bary(F, c), [1 / 3] * 3, atol=1e-15)


def test_naive_hand_value():
    # right triangle with legs 4: p = (1, 1) splits as 1/2, 1/4, 1/4
    F = triangle_matrix([[0, 0], [4, 0], [0, 4]])
    np.testing.assert_allclose(naive_bary(F, [1, 1, 1]), [0.5, 0.25, 0.25], atol=1e-15)


def test_naive_residual(rng):
    for _ in range(100):
        F = triangle_matrix(rng.uniform(0, 100, (3, 2)))
        p = np.array([*rng.uniform(0, 100, 2), 1.0])
        np.testing.assert_allclose(F @ naive_bary(F, p), p, atol=1e-12 * 100)


def test_naive_degenerate():
    F = triangle_matrix([[0, 0], [1, 1], [2, 2]])
    with pytest.raises(DegenerateTriangleError):
        naive_bary(F, [0.5, 0.5])


def test_bad_triangle_matrix():
    with pytest.raises(ValueError):
        naive_bary(np.eye(3) * 2, [0, 0])


def test_growing_triangle_coefficients():
    # legs 2 -> 4, so the legs are s = 2 (1 + t) and det F(t) = s^2;
    # at p = (1, 1): w1 = w2 = 1 / s, w0 = 1 - 2 / s
    pair = TrianglePair.from_points([[0, 0], [2, 0], [0, 2]], [[0, 0], [4, 0], [0, 4]])
    c = precompute_coeffs(pair, [1, 1])
    assert (c.a1, c.a2, c.a3) == (4.0, 8.0, 4.0)
    np.testing.assert_array_equal(c.A1, [4, 0, 0])
    np.testing.assert_array_equal(c.A2, [4, 2, 2])
    np.testing.assert_array_equal(c.A3, [0, 2, 2])
    s = 2 * 1.3
    np.testing.assert_allclose(eval_bary(c, 0.3), [1 - 2 / s, 1 / s, 1 / s], atol=1e-15)


def test_static_pair_reduces_to_constant(rng):
    P = rng.uniform(0, 50, (3, 2))
    pair = TrianglePair.from_points(P, P)
    c = precompute_coeffs(pair, [20.0, 25.0])
    np.testing.assert_array_equal(c.A1, 0)
    np.testing.assert_array_equal(c.A2, 0)
    assert c.a1 == 0 and c.a2 == 0
    np.testing.assert_allclose(c.A3 / c.a3, naive_bary(pair.F0, [20.0, 25.0]), atol=1e-13)


def test_a3_is_start_determinant(rng):
    for _ in range(20):
        pair = random_pair(rng)
        c = precompute_coeffs(pair, rng.uniform(0, 64, 2))
        assert c.a3 == pytest.approx(np.linalg.det(pair.F0), rel=1e-10)
        assert c.a1 + c.a2 + c.a3 == pytest.approx(np.linalg.det(pair.F1), rel=1e-10)


def test_denominator_tracks_determinant(rng):
    ts = np.linspace(0, 1, 101)
    for _ in range(50):
        pair = random_pair(rng)
        c = precompute_coeffs(pair, rng.uniform(0, 64, 2))
        for t in ts:
            d = np.linalg.det(pair.at(t))
            assert abs(c.denominator(t) - d) <= 1e-9 * max(abs(d), 1.0)


def test_endpoints(rng):
    pair = random_pair(rng)
    p = rng.uniform(0, 64, 2)
    c = precompute_coeffs(pair, p)
    np.testing.assert_allclose(eval_bary(c, 0.0), naive_bary(pair.F0, p), atol=1e-12)
    np.testing.assert_allclose(eval_bary(c, 1.0), naive_bary(pair.F1, p), atol=1e-12)


def test_eval_matches_naive_random(rng):
    worst = 0.0
    for _ in range(1000):
        pair = random_pair(rng)
        p = rng.uniform(0, 64, 2)
        t = rng.uniform()
        c = precompute_coeffs(pair, p)
        if abs(c.denominator(t)) <= DET_EPS:
            continue
        worst = max(worst, np.abs(eval_bary(c, t) - naive_bary(pair.at(t), p)).max())
    assert worst < 1e-6


def test_orientation_flip_root_raises(rng):
    found = 0
    while found < 10:
        pair = random_pair(rng, motion=60.0)
        if np.linalg.det(pair.F0) * np.linalg.det(pair.F1) >= 0:
            continue
        c = precompute_coeffs(pair, rng.uniform(0, 64, 2))
        if abs(c.a1) > 1e-12:
            disc = c.a2 ** 2 - 4 * c.a1 * c.a3
            roots = [(-c.a2 + sg * math.sqrt(disc)) / (2 * c.a1) for sg in (1, -1)]
        else:
            roots = [-c.a3 / c.a2]
        inside = [r for r in roots if 0 < r < 1]
        assert len(inside) == 1
        with pytest.raises(DegenerateTriangleError):
            eval_bary(c, inside[0])
        found += 1


def test_closest_interior_unchanged():
    F = triangle_matrix([[0, 0], [10, 0], [0, 10]])
    np.testing.assert_array_equal(closest_weights(F, [1 / 3] * 3), [1 / 3] * 3)


def test_closest_edge_projection():
    # q = (3, -2) lies below edge v0 v1; the edge parameter is
    # ((3 - 0) * 10 + (-2 - 0) * 0) / 10^2 = 0.3
    F = triangle_matrix([[0, 0], [10, 0], [0, 10]])
    w = naive_bary(F, [3, -2])
    assert w[2] < 0
    np.testing.assert_allclose(closest_weights(F, w), [0.7, 0.3, 0.0], atol=1e-15)


def test_closest_vertex_region():
    F = triangle_matrix([[0, 0], [10, 0], [0, 10]])
    np.testing.assert_allclose(closest_weights(F, naive_bary(F, [-3, -4])), [1, 0, 0], atol=1e-15)


def test_closest_matches_dense_sampling(rng):
    for _ in range(20):
        P = rng.uniform(0, 20, (3, 2))
        F = triangle_matrix(P)
        if abs(np.linalg.det(F)) < 1.0:
            continue
        q = rng.uniform(-15, 35, 2)
        w = naive_bary(F, q)
        if np.all(w >= 0):
            continue
        cw = closest_weights(F, w)
        d = np.linalg.norm((F @ cw)[:2] - q)
        # an exterior point's nearest triangle point is on the boundary
        s = np.linspace(0, 1, 3334)[:, None]
        pts = np.concatenate([P[i] + s * (P[(i + 1) % 3] - P[i]) for i in range(3)])
        brute = np.linalg.norm(pts - q, axis=1).min()
        assert d <= brute + 1e-12
        assert brute <= d * (1 + 1e-3)


def test_closest_degenerate():
    with pytest.raises(DegenerateTriangleError):
        closest_weights(triangle_matrix([[0, 0], [1, 1], [2, 2]]), [2, -1, 0])


def test_endpoint_select():
    assert endpoint_select(0.5) == 0
    assert endpoint_select(0.0) == 0
    assert endpoint_select(0.75) == 1
    assert endpoint_select(1.0) == 1
    with pytest.raises(ValueError):
        endpoint_select(-0.1)


def _exact_weights(start, end, p, t):
    t = Fraction(t)
    V = [[(1 - t) * Fraction(a) + t * Fraction(b) for a, b in zip(s, e)] for s, e in zip(start, end)]
    u, v = Fraction(p[0]), Fraction(p[1])

    def cross(i, j):
        return (V[i][0] - u) * (V[j][1] - v) - (V[i][1] - v) * (V[j][0] - u)

    n = [cross(1, 2), cross(2, 0), cross(0, 1)]
    d = sum(n)
    return [float(x / d) for x in n]


def test_ill_conditioned_instance_against_exact_arithmetic():
    # nearly collinear at t = 0.99 with the pixel far outside: |w| ~ 1e5
    start = [[120.43191497447076, 122.76074569118516], [112.28953601864148, 89.09889721409343],
             [99.36043523012582, 43.05181231291151]]
    end = [[91.14916137749786, 158.81446577533296], [110.01071568857898, 92.32781688628585],
           [128.16129478262064, 28.66607692181537]]
    p = [42.48352975625396, 22.33232731449013]
    t = 0.99
    exact = np.array(_exact_weights(start, end, p, t))
    assert np.abs(exact).max() > 1e5
    pair = TrianglePair.from_points(start, end)
    fast = eval_bary(precompute_coeffs(pair, p), t)
    direct = naive_bary(pair.at(t), p)
    err_fast = np.abs(fast - exact).max()
    err_direct = np.abs(direct - exact).max()
    assert err_fast < 1e-11 * np.abs(exact).max()
    assert err_direct < 1e-9 * np.abs(exact).max()
    # the two float paths differ by more than 1e-6 here, within their rounding
    assert np.abs(fast - direct).max() > 1e-6
