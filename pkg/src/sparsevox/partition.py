"""Octree signalling of which fixed-size blocks of a cloud are occupied.

Nodes are written breadth-first, one byte each. Bit ``7 - c`` of a node byte
flags child ``c = 4*xh + 2*yh + zh`` where ``xh, yh, zh`` pick the upper half
along each axis. Blocks therefore come out in Morton order of their block
coordinates, which is also the order the decoder rebuilds them in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptBitstreamError
from .pc_io import PointCloud, VoxelBlock


@dataclass(frozen=True)
class OctreePartition:
    bit_depth: int
    block_size_log2: int
    node_bytes: bytes

    @property
    def levels(self) -> int:
        return split_levels(self.bit_depth, self.block_size_log2)

    def leaf_origins(self) -> np.ndarray:
        """Block origins in leaf order, shape (n_blocks, 3)."""
        codes = _expand(self.node_bytes, self.levels)
        return _morton_decode(codes, self.levels) << self.block_size_log2


def split_levels(bit_depth: int, block_size_log2: int) -> int:
    return max(0, bit_depth - block_size_log2)


def _log2(block_size: int) -> int:
    if block_size < 1 or block_size & (block_size - 1):
        raise ValueError(f"block size {block_size} is not a power of two")
    return block_size.bit_length() - 1


def _morton_encode(cells: np.ndarray, levels: int) -> np.ndarray:
    code = np.zeros(len(cells), dtype=np.int64)
    for bit in range(levels - 1, -1, -1):
        child = (((cells[:, 0] >> bit) & 1) << 2) | (((cells[:, 1] >> bit) & 1) << 1) | ((cells[:, 2] >> bit) & 1)
        code = (code << 3) | child
    return code


def _morton_decode(codes: np.ndarray, levels: int) -> np.ndarray:
    cells = np.zeros((len(codes), 3), dtype=np.int64)
    for bit in range(levels):
        child = (codes >> (3 * bit)) & 7
        cells[:, 0] |= ((child >> 2) & 1) << bit
        cells[:, 1] |= ((child >> 1) & 1) << bit
        cells[:, 2] |= (child & 1) << bit
    return cells


def _node_bytes(leaf_codes: np.ndarray, levels: int) -> bytes:
    out = []
    for level in range(levels):
        children = np.unique(leaf_codes >> (3 * (levels - level - 1)))
        parents = children >> 3
        flags = (0x80 >> (children & 7)).astype(np.uint8)
        starts = np.flatnonzero(np.r_[True, parents[1:] != parents[:-1]])
        out.append(np.bitwise_or.reduceat(flags, starts).astype(np.uint8).tobytes())
    return b"".join(out)


def _expand(node_bytes: bytes, levels: int) -> np.ndarray:
    """Walk serialized nodes breadth-first and return leaf Morton codes."""
    nodes = np.zeros(1, dtype=np.int64)
    pos = 0
    buf = np.frombuffer(node_bytes, dtype=np.uint8)
    for level in range(levels):
        n = len(nodes)
        if pos + n > len(buf):
            raise CorruptBitstreamError(
                f"octree truncated at level {level}: need {n} node bytes at offset {pos}, "
                f"have {len(buf) - pos}")
        chunk = buf[pos:pos + n]
        if np.any(chunk == 0):
            bad = pos + int(np.flatnonzero(chunk == 0)[0])
            raise CorruptBitstreamError(f"octree node byte at offset {bad} is zero")
        bits = np.unpackbits(chunk[:, None], axis=1)  # MSB first -> child 0 first
        parent_idx, child = np.nonzero(bits)
        nodes = (nodes[parent_idx] << 3) | child
        pos += n
    if pos != len(buf):
        raise CorruptBitstreamError(f"octree has {len(buf) - pos} trailing bytes")
    return nodes


def build_partition(pc: PointCloud, block_size: int = 64) -> tuple[OctreePartition, list[VoxelBlock]]:
    """Split a cloud into its non-empty blocks and the octree that locates them."""
    if len(pc.points) == 0:
        raise ValueError("cannot partition an empty point cloud")
    b = _log2(block_size)
    levels = split_levels(pc.bit_depth, b)
    cells = pc.points >> b
    codes = _morton_encode(cells, levels)
    order = np.argsort(codes, kind="stable")
    codes, pts = codes[order], pc.points[order]
    uniq, starts = np.unique(codes, return_index=True)
    bounds = np.r_[starts, len(codes)]
    origins = _morton_decode(uniq, levels) << b
    blocks = [VoxelBlock(tuple(origins[k]), block_size, pts[bounds[k]:bounds[k + 1]] - origins[k])
              for k in range(len(uniq))]
    return OctreePartition(pc.bit_depth, b, _node_bytes(uniq, levels)), blocks


def serialize_partition(part: OctreePartition) -> bytes:
    return bytes(part.node_bytes)


def deserialize_partition(data: bytes, bit_depth: int, block_size: int) -> OctreePartition:
    """Validate node bytes against the depth/block size and wrap them."""
    part = OctreePartition(bit_depth, _log2(block_size), bytes(data))
    _expand(part.node_bytes, part.levels)
    return part


def assemble(blocks: list[VoxelBlock], bit_depth: int) -> PointCloud:
    """Inverse of :func:`build_partition`'s block split."""
    if not blocks:
        return PointCloud.from_points(np.zeros((0, 3)), bit_depth)
    pts = np.concatenate([b.occupied + np.asarray(b.origin) for b in blocks])
    return PointCloud.from_points(pts, bit_depth)
