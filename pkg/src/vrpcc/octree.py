"""Octree occupancy codec used as the non-learned rate-distortion baseline.

The root cube is split recursively to the requested depth. Each internal node
emits one byte whose bit ``c`` marks child ``c`` (x is bit 2, y bit 1, z bit 0)
as occupied, in breadth-first order. Decoding returns the centres of the
occupied leaves. Occupancy bytes are stored raw.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .pointset import as_points

MAGIC = b"VOCT"
MAX_DEPTH = 12
DEFAULT_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
_HEADER = struct.Struct("<4sB6d")


class OctreeError(ValueError):
    pass


@dataclass(frozen=True)
class OctreeCode:
    depth: int
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]
    occupancy: bytes

    @property
    def side(self) -> float:
        return self.upper[0] - self.lower[0]

    @property
    def bits(self) -> int:
        return 8 * len(self.occupancy)

    def error_bound(self) -> float:
        """Largest possible distance from a point to its leaf centre."""
        return np.sqrt(3.0) / 2.0 * self.side / 2**self.depth

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.depth, *self.lower, *self.upper) + self.occupancy

    @classmethod
    def from_bytes(cls, raw: bytes) -> "OctreeCode":
        if len(raw) < _HEADER.size:
            raise OctreeError(f"octree stream too short: {len(raw)} bytes")
        magic, depth, *b = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise OctreeError(f"bad magic {magic!r}")
        return cls(depth, tuple(b[:3]), tuple(b[3:]), raw[_HEADER.size:])


def _check_depth(depth: int) -> None:
    if not 1 <= depth <= MAX_DEPTH:
        raise OctreeError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")


def _interleave(cells: np.ndarray, depth: int) -> np.ndarray:
    key = np.zeros(len(cells), dtype=np.int64)
    for bit in range(depth - 1, -1, -1):
        for axis in range(3):
            key = (key << 1) | ((cells[:, axis] >> bit) & 1)
    return key


def _deinterleave(keys: np.ndarray, depth: int) -> np.ndarray:
    cells = np.zeros((len(keys), 3), dtype=np.int64)
    for bit in range(depth):
        for axis in range(3):
            shift = 3 * bit + (2 - axis)
            cells[:, axis] |= ((keys >> shift) & 1) << bit
    return cells


def leaf_keys(points, depth: int, bounds=DEFAULT_BOUNDS) -> np.ndarray:
    """Sorted unique Morton keys of the occupied leaves."""
    _check_depth(depth)
    pts = as_points(points)
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    outside = np.any((pts < lo) | (pts > hi), axis=1)
    if outside.any():
        i = int(np.argmax(outside))
        raise OctreeError(f"point {i} {pts[i].tolist()} lies outside the root cube")
    cells = np.floor((pts - lo) / (hi - lo) * 2**depth).astype(np.int64)
    cells = np.minimum(cells, 2**depth - 1)
    return np.unique(_interleave(cells, depth))


def octree_encode(points, depth: int, bounds=DEFAULT_BOUNDS) -> OctreeCode:
    lo, hi = tuple(float(v) for v in bounds[0]), tuple(float(v) for v in bounds[1])
    sides = np.subtract(hi, lo)
    if not np.all(sides > 0) or not np.all(sides == sides[0]):
        raise OctreeError("root bounds must be a cube with positive side")
    keys = leaf_keys(points, depth, (lo, hi))
    chunks = []
    for level in range(depth):
        nodes = np.unique(keys >> (3 * (depth - level - 1)))
        _, first = np.unique(nodes >> 3, return_index=True)
        byte = np.bitwise_or.reduceat(1 << (nodes & 7), first) if len(nodes) else nodes
        chunks.append(byte.astype(np.uint8).tobytes())
    return OctreeCode(depth, lo, hi, b"".join(chunks))


def octree_decode(code: OctreeCode) -> np.ndarray:
    _check_depth(code.depth)
    nodes = np.zeros(1, dtype=np.int64)
    pos = 0
    occ = np.frombuffer(code.occupancy, dtype=np.uint8)
    for _ in range(code.depth):
        if pos + len(nodes) > len(occ):
            raise OctreeError(f"truncated occupancy data at byte {len(occ)}")
        bytes_ = occ[pos:pos + len(nodes)].astype(np.int64)
        pos += len(nodes)
        bits = (bytes_[:, None] >> np.arange(8)[None, :]) & 1
        if np.any(bytes_ == 0):
            raise OctreeError("corrupt occupancy data: empty internal node")
        parent, child = np.nonzero(bits)
        nodes = nodes[parent] * 8 + child
    if pos != len(occ):
        raise OctreeError(f"{len(occ) - pos} trailing occupancy bytes")
    cells = _deinterleave(nodes, code.depth)
    lo = np.asarray(code.lower)
    return lo + (cells + 0.5) * (code.side / 2**code.depth)


def bits_per_point(code: OctreeCode, n_points: int) -> float:
    """Occupancy bits per input point; the fixed header is not counted."""
    return code.bits / n_points
