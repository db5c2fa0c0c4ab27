import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vrpcc.geometry import KdIndex
from vrpcc.metrics import p2p
from vrpcc.octree import (OctreeCode, OctreeError, bits_per_point, octree_decode, octree_encode)
from vrpcc.pointset import normalize, synth_dataset


@pytest.mark.parametrize("depth", [1, 3, 7, 12])
def test_single_point_at_origin(depth):
    code = octree_encode(np.zeros((1, 3)), depth)
    out = octree_decode(code)
    assert out.shape == (1, 3)
    assert np.linalg.norm(out[0]) <= code.error_bound()
    assert len(code.occupancy) == depth


def test_known_small_code():
    pts = np.array([[-0.5, -0.5, -0.5], [0.5, 0.5, 0.5]])
    code = octree_encode(pts, 1)
    assert code.occupancy == bytes([0b10000001])
    np.testing.assert_array_equal(octree_decode(code), pts)
    code2 = octree_encode(pts, 2)
    assert code2.occupancy == bytes([0b10000001, 0b10000000, 0b10000000])


@given(st.integers(1, 9), st.integers(0, 10**6), st.integers(1, 200))
def test_error_bound_and_fixed_point(depth, seed, n):
    rng = np.random.default_rng(seed)
    pts = normalize(rng.normal(size=(n, 3)))[0]
    code = octree_encode(pts, depth)
    out = octree_decode(code)
    _, sq = KdIndex(out).nearest(pts)
    assert np.sqrt(sq.max()) <= code.error_bound() * (1 + 1e-12)
    assert octree_encode(out, depth) == code
    perm = rng.permutation(n)
    assert octree_encode(pts[perm], depth) == code


def test_boundary_points_and_outside():
    corners = np.array([[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0]])
    out = octree_decode(octree_encode(corners, 3))
    assert len(out) == 2
    with pytest.raises(OctreeError, match="outside"):
        octree_encode([[1.5, 0, 0]], 3)
    for bad in (0, 13):
        with pytest.raises(OctreeError):
            octree_encode(np.zeros((1, 3)), bad)


def test_serialization_round_trip_and_errors():
    pts = normalize(np.random.default_rng(1).normal(size=(50, 3)))[0]
    code = octree_encode(pts, 5)
    raw = code.to_bytes()
    assert raw[:4] == b"VOCT" and raw[4] == 5 and len(raw) == 5 + 48 + len(code.occupancy)
    assert OctreeCode.from_bytes(raw) == code
    with pytest.raises(OctreeError):
        OctreeCode.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(OctreeError):
        octree_decode(OctreeCode.from_bytes(raw[:-1]))
    with pytest.raises(OctreeError):
        octree_decode(OctreeCode.from_bytes(raw + b"\x01"))


def test_p2p_monotone_in_depth_on_synthetic_set():
    clouds = synth_dataset("all", 256, 0, 8, random_pose=True)
    for cloud in clouds:
        errs = [p2p(cloud, octree_decode(octree_encode(cloud, d))) for d in range(1, 10)]
        assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_bits_per_point_counts_occupancy_only():
    code = octree_encode(np.zeros((4, 3)), 3)
    assert bits_per_point(code, 4) == 3 * 8 / 4
