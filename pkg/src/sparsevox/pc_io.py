"""Point cloud containers, PLY reading/writing and raster-scan indexing."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import PlyError

MAX_BIT_DEPTH = 16

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

_BIT_DEPTH_COMMENT = re.compile(r"^comment\s+bit_depth\s+(\d+)\s*$")


def _canonical(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    return np.unique(pts, axis=0)


def required_bit_depth(points: np.ndarray) -> int:
    """Smallest b >= 1 with every coordinate < 2**b."""
    if len(points) == 0:
        return 1
    top = int(points.max())
    return max(1, top.bit_length())


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Deduplicated non-negative integer coordinates at a declared bit depth.

    ``points`` is kept sorted lexicographically so two clouds holding the same
    set compare equal element-wise.
    """

    points: np.ndarray
    bit_depth: int

    def __post_init__(self):
        pts = _canonical(self.points)
        object.__setattr__(self, "points", pts)
        if not 1 <= self.bit_depth <= MAX_BIT_DEPTH:
            raise ValueError(f"bit_depth {self.bit_depth} outside [1, {MAX_BIT_DEPTH}]")
        if len(pts) and (pts.min() < 0 or pts.max() >= (1 << self.bit_depth)):
            raise ValueError(f"coordinates do not fit in {self.bit_depth} bits")

    @classmethod
    def from_points(cls, points, bit_depth: int | None = None) -> "PointCloud":
        pts = _canonical(points)
        if bit_depth is None:
            bit_depth = required_bit_depth(pts)
        return cls(pts, bit_depth)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.bit_depth == other.bit_depth and np.array_equal(self.points, other.points)

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self.points)}, bit_depth={self.bit_depth})"


@dataclass(frozen=True, eq=False)
class VoxelBlock:
    """Occupied voxels of one d x d x d cube, in local coordinates.

    ``occupied`` is sorted in raster order (x slowest, z fastest).
    """

    origin: tuple[int, int, int]
    size: int
    occupied: np.ndarray

    def __post_init__(self):
        occ = _canonical(self.occupied)
        object.__setattr__(self, "occupied", occ)
        object.__setattr__(self, "origin", tuple(int(v) for v in self.origin))
        if len(occ) and (occ.min() < 0 or occ.max() >= self.size):
            raise ValueError(f"local coordinates outside [0, {self.size})")

    def __len__(self) -> int:
        return len(self.occupied)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelBlock):
            return NotImplemented
        return (self.origin == other.origin and self.size == other.size
                and np.array_equal(self.occupied, other.occupied))

    def indices(self) -> np.ndarray:
        """Raster indices of the occupied voxels, ascending."""
        return raster_indices(self.occupied, self.size)

    def occupancy(self) -> np.ndarray:
        """Flat 0/1 vector of length d**3 in raster order."""
        v = np.zeros(self.size ** 3, dtype=np.uint8)
        v[self.indices()] = 1
        return v

    @classmethod
    def from_indices(cls, indices, size: int, origin=(0, 0, 0)) -> "VoxelBlock":
        return cls(origin, size, raster_coords(np.asarray(indices, dtype=np.int64), size))

    def __repr__(self) -> str:
        return f"VoxelBlock(origin={self.origin}, size={self.size}, n={len(self.occupied)})"


def raster_index(coord: Sequence[int], d: int) -> int:
    """Map a local (x, y, z) to its raster position x*d^2 + y*d + z."""
    x, y, z = (int(c) for c in coord)
    if not (0 <= x < d and 0 <= y < d and 0 <= z < d):
        raise ValueError(f"coordinate {tuple(coord)} outside [0, {d})^3")
    return (x * d + y) * d + z


def raster_coord(i: int, d: int) -> tuple[int, int, int]:
    """Inverse of :func:`raster_index`."""
    i = int(i)
    if not 0 <= i < d ** 3:
        raise ValueError(f"index {i} outside [0, {d ** 3})")
    x, rem = divmod(i, d * d)
    y, z = divmod(rem, d)
    return x, y, z


def raster_indices(coords: np.ndarray, d: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return (c[:, 0] * d + c[:, 1]) * d + c[:, 2]


def raster_coords(indices: np.ndarray, d: int) -> np.ndarray:
    i = np.asarray(indices, dtype=np.int64)
    return np.stack([i // (d * d), (i // d) % d, i % d], axis=1)


# --------------------------------------------------------------------- PLY


class _Element:
    def __init__(self, name: str, count: int, line: int):
        self.name = name
        self.count = count
        self.line = line
        self.props: list[tuple[str, str | None, str]] = []  # (name, list count dtype, value dtype)

    def has_lists(self) -> bool:
        return any(p[1] is not None for p in self.props)


def _read_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyError("line 1: not a PLY file (missing 'ply' magic or 'end_header')")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    bit_depth = None
    elements: list[_Element] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line == "ply":
            continue
        words = line.split()
        key = words[0]
        if key == "format":
            if len(words) != 3 or words[2] != "1.0":
                raise PlyError(f"line {lineno}: bad format line {line!r}")
            if words[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"line {lineno}: unsupported PLY format {words[1]!r}")
            fmt = words[1]
        elif key == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PlyError(f"line {lineno}: bad element line {line!r}")
            elements.append(_Element(words[1], int(words[2]), lineno))
        elif key == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if len(words) == 5 and words[1] == "list":
                if words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise PlyError(f"line {lineno}: unknown list types in {line!r}")
                elements[-1].props.append((words[4], _PLY_TYPES[words[2]], _PLY_TYPES[words[3]]))
            elif len(words) == 3 and words[1] in _PLY_TYPES:
                elements[-1].props.append((words[2], None, _PLY_TYPES[words[1]]))
            else:
                raise PlyError(f"line {lineno}: bad property line {line!r}")
        elif key == "comment":
            m = _BIT_DEPTH_COMMENT.match(line)
            if m:
                bit_depth = int(m.group(1))
        elif key == "obj_info":
            continue
        else:
            raise PlyError(f"line {lineno}: unexpected header keyword {key!r}")
    if fmt is None:
        raise PlyError("header: missing format line")
    return fmt, elements, body_start, bit_depth, len(lines) + 1


def _vertex_xyz(elem: _Element) -> list[int]:
    names = [p[0] for p in elem.props]
    try:
        cols = [names.index(a) for a in "xyz"]
    except ValueError:
        raise PlyError(f"line {elem.line}: element vertex lacks x, y, z properties") from None
    for c in cols:
        if elem.props[c][1] is not None:
            raise PlyError(f"line {elem.line}: coordinate property is a list")
    return cols


def _parse_ascii(data: bytes, elements, body_start: int, header_lines: int) -> np.ndarray:
    text = data[body_start:].decode("ascii", errors="replace").splitlines()
    row = 0
    for elem in elements:
        if elem.name != "vertex":
            row += elem.count  # one text row per element, lists included
            continue
        cols = _vertex_xyz(elem)
        if row + elem.count > len(text):
            raise PlyError(f"line {header_lines + len(text)}: expected {elem.count} vertex rows, file ends early")
        out = np.empty((elem.count, 3), dtype=np.float64)
        for k in range(elem.count):
            words = text[row + k].split()
            try:
                out[k] = [float(words[c]) for c in cols]
            except (ValueError, IndexError):
                raise PlyError(f"line {header_lines + row + k + 1}: malformed vertex row {text[row + k]!r}") from None
        return out
    raise PlyError("header: no 'vertex' element")


def _parse_binary(data: bytes, elements, body_start: int) -> np.ndarray:
    offset = body_start
    for elem in elements:
        if not elem.has_lists():
            dtype = np.dtype([(f"p{j}", "<" + p[2]) for j, p in enumerate(elem.props)])
            nbytes = dtype.itemsize * elem.count
            if offset + nbytes > len(data):
                raise PlyError(f"offset {offset}: element {elem.name!r} truncated "
                               f"(need {nbytes} bytes, have {len(data) - offset})")
            if elem.name == "vertex":
                cols = _vertex_xyz(elem)
                rec = np.frombuffer(data, dtype=dtype, count=elem.count, offset=offset)
                return np.stack([rec[f"p{c}"].astype(np.float64) for c in cols], axis=1)
            offset += nbytes
            continue
        if elem.name == "vertex":
            raise PlyError(f"line {elem.line}: list properties on vertex are unsupported")
        for _ in range(elem.count):  # walk rows to skip variable-length lists
            for _, count_t, value_t in elem.props:
                if count_t is None:
                    offset += np.dtype(value_t).itemsize
                    continue
                size = np.dtype(count_t).itemsize
                if offset + size > len(data):
                    raise PlyError(f"offset {offset}: element {elem.name!r} truncated")
                n = int(np.frombuffer(data, dtype="<" + count_t, count=1, offset=offset)[0])
                offset += size + n * np.dtype(value_t).itemsize
        if offset > len(data):
            raise PlyError(f"offset {offset}: element {elem.name!r} truncated")
    raise PlyError("header: no 'vertex' element")


def parse_ply(data: bytes, bit_depth: int | None = None) -> PointCloud:
    """Read the vertex positions of an ASCII or little-endian binary PLY.

    Coordinates are rounded half-up to integers and deduplicated. The bit
    depth comes from ``bit_depth`` when given, else from a
    ``comment bit_depth N`` header line, else the smallest depth that fits.
    A point that does not fit the requested depth is an error.
    """
    fmt, elements, body_start, declared, header_lines = _read_header(data)
    if fmt == "ascii":
        xyz = _parse_ascii(data, elements, body_start, header_lines)
    else:
        xyz = _parse_binary(data, elements, body_start)
    if not np.all(np.isfinite(xyz)):
        raise PlyError("vertex data: non-finite coordinate")
    pts = np.floor(xyz + 0.5).astype(np.int64)
    if len(pts) and pts.min() < 0:
        bad = int(np.argmin(pts.min(axis=1)))
        raise PlyError(f"vertex {bad}: negative coordinate {tuple(pts[bad])} after rounding")
    needed = required_bit_depth(pts)
    if needed > MAX_BIT_DEPTH:
        raise PlyError(f"vertex data: coordinates need {needed} bits (max {MAX_BIT_DEPTH})")
    depth = bit_depth if bit_depth is not None else declared
    if depth is None:
        depth = needed
    elif needed > depth:
        raise PlyError(f"vertex data: coordinates need {needed} bits but bit depth is {depth}")
    return PointCloud.from_points(pts, depth)


def write_ply(pc: PointCloud, binary: bool = False) -> bytes:
    """Serialize integer coordinates as PLY; the bit depth rides in a comment."""
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"comment bit_depth {pc.bit_depth}\n"
        f"element vertex {len(pc.points)}\n"
        "property int x\nproperty int y\nproperty int z\n"
        "end_header\n"
    ).encode("ascii")
    if binary:
        return header + pc.points.astype("<i4").tobytes()
    body = "".join(f"{x} {y} {z}\n" for x, y, z in pc.points.tolist())
    return header + body.encode("ascii")


def read_ply(path, bit_depth: int | None = None) -> PointCloud:
    with open(path, "rb") as fh:
        return parse_ply(fh.read(), bit_depth=bit_depth)


def save_ply(pc: PointCloud, path, binary: bool = False) -> None:
    with open(path, "wb") as fh:
        fh.write(write_ply(pc, binary=binary))
