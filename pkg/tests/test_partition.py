import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsevox import CorruptBitstreamError
from sparsevox.partition import (OctreePartition, assemble, build_partition, deserialize_partition,
                                 serialize_partition, split_levels)
from sparsevox.pc_io import PointCloud


def cell_set(pc, block_size):
    """Independent count of non-empty cells by brute force over a Python set."""
    return {tuple(int(v) // block_size for v in p) for p in pc.points}


def test_single_point_chain():
    pc = PointCloud.from_points([(0, 0, 0)], 10)
    part, blocks = build_partition(pc, 64)
    assert part.node_bytes == bytes([0x80] * 4)
    assert len(blocks) == 1 and blocks[0].origin == (0, 0, 0)
    assert blocks[0].occupied.tolist() == [[0, 0, 0]]
    assert len(serialize_partition(part)) == 4


def test_no_split_levels():
    pc = PointCloud.from_points([(1, 2, 3), (60, 0, 5)], 6)
    part, blocks = build_partition(pc, 64)
    assert part.node_bytes == b"" and part.levels == 0
    assert len(blocks) == 1 and len(blocks[0]) == 2


def test_small_depth_single_block_low_corner():
    pc = PointCloud.from_points([(3, 3, 3)], 2)
    part, blocks = build_partition(pc, 64)
    assert part.node_bytes == b"" and blocks[0].size == 64 and blocks[0].origin == (0, 0, 0)
    assert assemble(blocks, 2) == pc


def test_two_opposite_points():
    pc = PointCloud.from_points([(0, 0, 0), (512, 512, 512)], 10)
    part, blocks = build_partition(pc, 64)
    assert bin(part.node_bytes[0]).count("1") == 2
    assert part.node_bytes[0] == 0x81  # children 0 and 7
    assert [b.origin for b in blocks] == [(0, 0, 0), (512, 512, 512)]


def test_child_bit_order():
    # x upper half only -> child 4 -> bit 0x08
    pc = PointCloud.from_points([(64, 0, 0)], 7)
    assert build_partition(pc, 64)[0].node_bytes == bytes([0x08])
    pc = PointCloud.from_points([(0, 0, 64)], 7)
    assert build_partition(pc, 64)[0].node_bytes == bytes([0x40])


def test_full_root():
    pts = [(x, y, z) for x in (0, 64) for y in (0, 64) for z in (0, 64)]
    part, blocks = build_partition(PointCloud.from_points(pts, 7), 64)
    assert part.node_bytes == b"\xff" and len(blocks) == 8


def test_deserialize_examples():
    part = deserialize_partition(bytes([0x80] * 4), 10, 64)
    assert part.leaf_origins().tolist() == [[0, 0, 0]]
    assert deserialize_partition(b"", 6, 64).leaf_origins().tolist() == [[0, 0, 0]]


@pytest.mark.parametrize("data", [b"\x80\x00\x80\x80", b"\x00", b"\x80\x80", b"\x80" * 5])
def test_deserialize_rejects_corruption(data):
    with pytest.raises(CorruptBitstreamError):
        deserialize_partition(data, 10, 64)


def test_empty_cloud_is_error():
    with pytest.raises(ValueError):
        build_partition(PointCloud.from_points(np.zeros((0, 3)), 8), 64)


def test_block_size_must_be_power_of_two():
    with pytest.raises(ValueError):
        build_partition(PointCloud.from_points([(0, 0, 0)], 8), 48)


points = st.lists(st.tuples(*[st.integers(0, 1023)] * 3), min_size=1, max_size=300)


@given(points, st.sampled_from([8, 16, 64, 128]))
def test_round_trip_and_bounds(pts, block_size):
    pc = PointCloud.from_points(np.array(pts), 10)
    part, blocks = build_partition(pc, block_size)
    assert assemble(blocks, 10) == pc
    assert all(len(b) for b in blocks)
    assert {tuple(np.array(b.origin) // block_size) for b in blocks} == cell_set(pc, block_size)
    # decoder sees the same origins in the same order
    again = deserialize_partition(serialize_partition(part), 10, block_size)
    assert again == part
    assert again.leaf_origins().tolist() == [list(b.origin) for b in blocks]
    levels = split_levels(10, part.block_size_log2)
    assert levels <= len(part.node_bytes) <= (8 ** levels - 1) // 7
    assert all(b != 0 for b in part.node_bytes)


def test_leaf_order_is_breadth_first_leaf_order():
    rng = np.random.default_rng(1)
    pc = PointCloud.from_points(rng.integers(0, 1024, size=(500, 3)), 10)
    _, blocks = build_partition(pc, 64)
    # Morton keys of the cells must ascend
    def morton(c):
        key = 0
        for bit in range(3, -1, -1):
            key = key * 8 + 4 * ((c[0] >> bit) & 1) + 2 * ((c[1] >> bit) & 1) + ((c[2] >> bit) & 1)
        return key
    keys = [morton([v // 64 for v in b.origin]) for b in blocks]
    assert keys == sorted(keys)


def test_octree_partition_equality_fields():
    p = OctreePartition(10, 6, b"\x80" * 4)
    assert p.levels == 4
