import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vrpcc.geometry import (KdIndex, estimate_normals, farthest_point_sample, group, knn,
                            squared_distances)


def brute_knn(points, queries, k):
    out_i, out_d = [], []
    for q in queries:
        d = [float(((p - q) ** 2).sum()) for p in points]
        order = sorted(range(len(points)), key=lambda j: (d[j], j))[:k]
        out_i.append(order)
        out_d.append([d[j] for j in order])
    return np.array(out_i), np.array(out_d)


@given(st.integers(1, 300), st.integers(1, 50), st.integers(1, 8), st.integers(0, 2**31 - 1),
       st.booleans())
def test_kd_index_matches_brute_force(n, m, k, seed, lattice):
    rng = np.random.default_rng(seed)
    # lattice points produce many exact ties
    pts = rng.integers(-3, 4, (n, 3)).astype(float) if lattice else rng.normal(size=(n, 3))
    qs = rng.integers(-3, 4, (m, 3)).astype(float) if lattice else rng.normal(size=(m, 3))
    k = min(k, n)
    idx, sq = KdIndex(pts).query(qs, k)
    bi, bd = brute_knn(pts, qs, k)
    np.testing.assert_array_equal(idx, bi)
    np.testing.assert_array_equal(sq, bd)


def test_kd_index_tree_path_with_ties():
    rng = np.random.default_rng(5)
    pts = rng.integers(-4, 5, (3000, 3)).astype(float)
    qs = rng.integers(-4, 5, (800, 3)).astype(float)
    index = KdIndex(pts)
    idx, sq = index.query(qs, 6)
    d = squared_distances(qs, pts)
    ref = np.argsort(d, axis=1, kind="stable")[:, :6]
    np.testing.assert_array_equal(idx, ref)
    np.testing.assert_array_equal(sq, np.take_along_axis(d, ref, axis=1))


def test_kd_index_is_immutable_copy():
    pts = np.zeros((4, 3))
    index = KdIndex(pts)
    pts[0] = 9
    assert index.points[0, 0] == 0
    with pytest.raises(ValueError):
        index.points[0, 0] = 1


def test_knn_errors():
    index = KdIndex(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        index.query(np.zeros((1, 3)), 4)
    assert list(knn(index, [0, 0, 0], 3)) == [0, 1, 2]


def test_fps_line():
    pts = np.array([[x, 0, 0] for x in (0.0, 1.0, 2.0, 3.0, 10.0)])
    # seed 0 starts at the point farthest from the centroid
    assert list(farthest_point_sample(pts, 3, 0)) == [4, 0, 3]
    assert list(farthest_point_sample(pts, 2, 1)) == [1, 4]


def test_fps_ties_go_to_lowest_index():
    pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]], dtype=float)
    assert list(farthest_point_sample(pts, 4, 4)) == [0, 1, 2, 3]


@given(st.integers(2, 60), st.integers(0, 10**6))
def test_fps_maximises_min_distance(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    m = max(1, n // 2)
    chosen = farthest_point_sample(pts, m, seed % 7)
    assert len(set(chosen.tolist())) == m
    for j in range(1, m):
        mind = squared_distances(pts, pts[chosen[:j]]).min(axis=1)
        mind[chosen[:j]] = -1
        best = mind.max()
        assert mind[chosen[j]] == best
        assert chosen[j] == int(np.flatnonzero(mind == best)[0])


def test_fps_all_points_when_m_equals_n():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    assert sorted(farthest_point_sample(pts, 20).tolist()) == list(range(20))
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 21)


def test_fps_duplicate_points_never_repeat():
    pts = np.zeros((5, 3))
    assert sorted(farthest_point_sample(pts, 5).tolist()) == [0, 1, 2, 3, 4]


@given(st.integers(5, 80), st.integers(1, 5), st.integers(0, 10**6))
def test_group_relative_coords_exact(n, k, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    centers = farthest_point_sample(pts, 4)
    g = group(pts, centers, k)
    assert g.neighbor_idx.shape == (4, k)
    assert g.neighbor_idx.min() >= 0 and g.neighbor_idx.max() < n
    np.testing.assert_array_equal(g.relative_coords, pts[g.neighbor_idx] - g.centers[:, None, :])
    # each center is its own nearest neighbour
    np.testing.assert_array_equal(g.neighbor_idx[:, 0], centers)


def test_normals_on_plane_and_sphere():
    rng = np.random.default_rng(1)
    plane = np.column_stack([rng.uniform(-1, 1, (200, 2)), np.zeros(200)])
    n = estimate_normals(plane, 12)
    np.testing.assert_allclose(np.abs(n[:, 2]), 1.0, atol=1e-9)
    v = rng.normal(size=(800, 3))
    sphere = v / np.linalg.norm(v, axis=1, keepdims=True)
    n = estimate_normals(sphere, 12)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    # outward orientation on a convex surface
    assert np.all((n * sphere).sum(axis=1) > 0.95)


def test_normals_degenerate_cloud():
    n = estimate_normals(np.ones((5, 3)), 3)
    np.testing.assert_array_equal(n, np.tile([0.0, 0.0, 1.0], (5, 1)))
