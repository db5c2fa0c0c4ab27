"""Point cloud I/O, normalization and synthetic shapes.

A point cloud is an ``(n, 3)`` float64 array throughout the package. Row order
is kept but carries no meaning.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

DTYPE = np.float64

SHAPES = ("sphere", "cube-surface", "torus", "plane")
TORUS_MAJOR = 0.7
TORUS_MINOR = 0.3

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PointCloudParseError(ValueError):
    """Raised when a point cloud file cannot be parsed."""


@dataclass(frozen=True)
class NormalizationRecord:
    offset: tuple[float, float, float]
    scale: float

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"normalization scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "NormalizationRecord":
        return cls((0.0, 0.0, 0.0), 1.0)


def as_points(points) -> np.ndarray:
    """Validate and convert to a contiguous ``(n, 3)`` float64 array."""
    arr = np.ascontiguousarray(points, dtype=DTYPE)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("point cloud is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains non-finite coordinates")
    return arr


_DEGENERATE_RADIUS = 1e-9


def normalize(points) -> tuple[np.ndarray, NormalizationRecord]:
    """Center on the centroid and scale the farthest point onto the unit sphere."""
    pts = as_points(points)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = float(np.sqrt((centered**2).sum(axis=1)).max())
    # spreads at rounding level mean all points coincide
    degenerate = radius <= _DEGENERATE_RADIUS * max(1.0, float(np.abs(centroid).max()))
    scale = 1.0 if degenerate else radius
    rec = NormalizationRecord(tuple(float(c) for c in centroid), scale)
    return centered / scale, rec


def denormalize(points, rec: NormalizationRecord) -> np.ndarray:
    pts = as_points(points)
    return pts * rec.scale + np.asarray(rec.offset, dtype=DTYPE)


# --------------------------------------------------------------------------- #
# file formats

def _detect_format(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext in (".xyz", ".txt", ".pts"):
        return "xyz-text"
    if ext == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(512)
        if b"binary_little_endian" in head:
            return "ply-binary-le"
        return "ply-ascii"
    raise PointCloudParseError(f"{path}: cannot infer format from extension {ext!r}")


def load(path: str, format: str | None = None) -> np.ndarray:
    """Read a point cloud; ``format`` is one of xyz-text, ply-ascii, ply-binary-le."""
    fmt = format or _detect_format(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if fmt == "xyz-text":
        return _parse_xyz(raw, path)
    if fmt in ("ply-ascii", "ply-binary-le"):
        return _parse_ply(raw, path, fmt)
    raise ValueError(f"unknown point cloud format {fmt!r}")


def _parse_xyz(raw: bytes, path: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(raw.decode("ascii", errors="replace").splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) < 3:
            raise PointCloudParseError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
        try:
            xyz = [float(p) for p in parts[:3]]
        except ValueError:
            raise PointCloudParseError(f"{path}:{lineno}: cannot parse coordinates {s!r}") from None
        if not all(np.isfinite(xyz)):
            raise PointCloudParseError(f"{path}:{lineno}: non-finite coordinate")
        rows.append(xyz)
    if not rows:
        raise PointCloudParseError(f"{path}: no points")
    return np.array(rows, dtype=DTYPE)


def _parse_ply_header(raw: bytes, path: str):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PointCloudParseError(f"{path}: byte 0: not a PLY file (missing 'ply' or 'end_header')")
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[dict] = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PointCloudParseError(f"{path}:{lineno}: bad format line {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PointCloudParseError(f"{path}:{lineno}: bad element line {line!r}")
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise PointCloudParseError(f"{path}:{lineno}: property before element")
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise PointCloudParseError(f"{path}:{lineno}: unknown type in {line!r}")
                elements[-1]["props"].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1]["props"].append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise PointCloudParseError(f"{path}:{lineno}: bad property line {line!r}")
        else:
            raise PointCloudParseError(f"{path}:{lineno}: unexpected header line {line!r}")
    if fmt is None:
        raise PointCloudParseError(f"{path}: missing format line")
    return fmt, elements, body_start, len(lines) + 1


def _parse_ply(raw: bytes, path: str, expected: str) -> np.ndarray:
    fmt, elements, body_start, header_lines = _parse_ply_header(raw, path)
    if fmt == "binary_big_endian":
        raise PointCloudParseError(f"{path}: binary_big_endian PLY is not supported")
    declared = {"ascii": "ply-ascii", "binary_little_endian": "ply-binary-le"}[fmt]
    if declared != expected:
        raise PointCloudParseError(f"{path}: file is {declared}, expected {expected}")
    vertex = next((e for e in elements if e["name"] == "vertex"), None)
    if vertex is None:
        raise PointCloudParseError(f"{path}: no vertex element")
    names = [p[0] for p in vertex["props"]]
    for axis in "xyz":
        if axis not in names:
            raise PointCloudParseError(f"{path}: vertex element lacks property {axis!r}")
    if vertex["count"] < 1:
        raise PointCloudParseError(f"{path}: vertex count is zero")
    if fmt == "ascii":
        pts = _ply_ascii_body(raw[body_start:], path, elements, vertex, header_lines)
    else:
        pts = _ply_binary_body(raw, body_start, path, elements, vertex)
    if not np.all(np.isfinite(pts)):
        bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
        raise PointCloudParseError(f"{path}: vertex {bad}: non-finite coordinate")
    return pts


def _ply_ascii_body(body: bytes, path, elements, vertex, header_lines) -> np.ndarray:
    lines = body.decode("ascii", errors="replace").splitlines()
    cursor = 0
    for elem in elements:
        if elem is vertex:
            break
        cursor += elem["count"]
    names = [p[0] for p in vertex["props"]]
    cols = [names.index(a) for a in "xyz"]
    out = np.empty((vertex["count"], 3), dtype=DTYPE)
    for i in range(vertex["count"]):
        lineno = header_lines + 1 + cursor + i
        if cursor + i >= len(lines):
            raise PointCloudParseError(
                f"{path}:{lineno}: header declares {vertex['count']} vertices, file has {i}")
        parts = lines[cursor + i].split()
        if len(parts) < len(names):
            raise PointCloudParseError(f"{path}:{lineno}: expected {len(names)} values, got {len(parts)}")
        try:
            out[i] = [float(parts[c]) for c in cols]
        except ValueError:
            raise PointCloudParseError(f"{path}:{lineno}: cannot parse vertex {lines[cursor + i]!r}") from None
    if vertex is elements[-1]:
        extra = [ln for ln in lines[cursor + vertex["count"]:] if ln.strip()]
        if extra:
            raise PointCloudParseError(
                f"{path}:{header_lines + 1 + cursor + vertex['count']}: "
                f"header declares {vertex['count']} vertices, file has more rows")
    return out


def _ply_binary_body(raw: bytes, offset: int, path, elements, vertex) -> np.ndarray:
    for elem in elements[:elements.index(vertex)]:
        if any(isinstance(t, tuple) for _, t in elem["props"]):
            offset = _skip_binary_lists(raw, offset, elem, path)
        else:
            offset += elem["count"] * np.dtype([(n, "<" + t) for n, t in elem["props"]]).itemsize
    if any(isinstance(t, tuple) for _, t in vertex["props"]):
        raise PointCloudParseError(f"{path}: list properties on vertex are not supported")
    dt = np.dtype([(n, "<" + t) for n, t in vertex["props"]])
    need = vertex["count"] * dt.itemsize
    if offset + need > len(raw):
        have = max(0, (len(raw) - offset) // dt.itemsize)
        raise PointCloudParseError(
            f"{path}: byte {len(raw)}: header declares {vertex['count']} vertices, file has {have}")
    rec = np.frombuffer(raw, dtype=dt, count=vertex["count"], offset=offset)
    return np.stack([rec[a].astype(DTYPE) for a in "xyz"], axis=1)


def _skip_binary_lists(raw: bytes, offset: int, elem, path) -> int:
    for _ in range(elem["count"]):
        for _, t in elem["props"]:
            if isinstance(t, tuple):
                cnt_t, item_t = np.dtype("<" + t[1]), np.dtype("<" + t[2])
                if offset + cnt_t.itemsize > len(raw):
                    raise PointCloudParseError(f"{path}: byte {offset}: truncated list property")
                cnt = int(np.frombuffer(raw, cnt_t, 1, offset)[0])
                offset += cnt_t.itemsize + cnt * item_t.itemsize
            else:
                offset += np.dtype("<" + t).itemsize
    return offset


def save(points, path: str, format: str | None = None) -> None:
    """Write x, y, z only; text formats use 9 significant digits, binary PLY float64."""
    pts = as_points(points)
    fmt = format
    if fmt is None:
        fmt = "ply-binary-le" if path.lower().endswith(".ply") else "xyz-text"
    if fmt == "xyz-text":
        body = "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts)
        with open(path, "w") as fh:
            fh.write(body)
        return
    kind = {"ply-ascii": "ascii", "ply-binary-le": "binary_little_endian"}.get(fmt)
    if kind is None:
        raise ValueError(f"unknown point cloud format {fmt!r}")
    header = (
        "ply\n"
        f"format {kind} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n"
    ).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        if kind == "ascii":
            fh.write("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts).encode("ascii"))
        else:
            fh.write(pts.astype("<f8").tobytes())


# --------------------------------------------------------------------------- #
# synthetic data

def _sample_surface(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape == "sphere":
        v = rng.standard_normal((n, 3))
        return v / np.sqrt((v**2).sum(axis=1, keepdims=True))
    if shape == "cube-surface":
        h = 1.0 / np.sqrt(3.0)  # corners on the unit sphere
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-h, h, (n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            others = [b for b in range(3) if b != a]
            sel = axis == a
            pts[sel, a] = sign[sel] * h
            pts[sel, others[0]] = uv[sel, 0]
            pts[sel, others[1]] = uv[sel, 1]
        return pts
    if shape == "torus":
        big, small = TORUS_MAJOR, TORUS_MINOR
        out = np.empty((0, 2))
        # rejection on the tube angle: area element is proportional to R + r cos(v)
        while len(out) < n:
            u = rng.uniform(0, 2 * np.pi, 2 * n)
            v = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.uniform(0, big + small, 2 * n) < big + small * np.cos(v)
            out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
        u, v = out[:n, 0], out[:n, 1]
        ring = big + small * np.cos(v)
        return np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
    if shape == "plane":
        h = 1.0 / np.sqrt(2.0)
        uv = rng.uniform(-h, h, (n, 2))
        return np.stack([uv[:, 0], uv[:, 1], np.zeros(n)], axis=1)
    raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")


def synth_dataset(shape: str | Sequence[str], n: int, seed: int, count: int,
                  random_pose: bool = False) -> list[np.ndarray]:
    """Deterministic clouds sampled on analytic surfaces inside the unit ball.

    Every surface is generated centered at the origin with radius at most 1,
    so the clouds need no data-dependent rescaling. ``shape`` may be a list or
    ``"all"`` to cycle through shapes. With ``random_pose`` each cloud gets a
    random rotation, which keeps it on the (rotated) surface.
    """
    if n < 8:
        raise ValueError(f"n must be at least 8, got {n}")
    shapes = list(SHAPES) if shape == "all" else ([shape] if isinstance(shape, str) else list(shape))
    for s in shapes:
        if s not in SHAPES:
            raise ValueError(f"unknown shape {s!r}; expected one of {SHAPES}")
    rng = np.random.default_rng(seed)
    clouds = []
    for i in range(count):
        pts = _sample_surface(shapes[i % len(shapes)], n, rng)
        if random_pose:
            pts = pts @ Rotation.random(random_state=rng).as_matrix().T
        clouds.append(np.ascontiguousarray(pts, dtype=DTYPE))
    return clouds


def load_directory(path: str) -> list[np.ndarray]:
    files = sorted(f for f in os.listdir(path) if f.lower().endswith((".xyz", ".txt", ".pts", ".ply")))
    if not files:
        raise PointCloudParseError(f"{path}: no point cloud files")
    return [load(os.path.join(path, f)) for f in files]

