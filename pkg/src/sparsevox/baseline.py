"""Order-0 adaptive reference coder.

Same octree, same container and same range coder as the learned codec; only
the probability model differs. Each voxel is coded with the running
Krichevsky-Trofimov estimate ``(n1 + 1/2) / (n + 1)`` over every voxel coded
so far in the cloud (counts carry over from block to block in leaf order).
The gap between the two codecs is therefore the value of the learned context.
"""

from __future__ import annotations

import time

import numpy as np

from . import entropy_coder as ec
from .codec import Bitstream, EncodeStats
from .errors import CorruptBitstreamError
from .partition import assemble, build_partition, deserialize_partition
from .pc_io import PointCloud, VoxelBlock


def _kt(n1: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.clip((n1 + 0.5) / (n + 1.0), ec.P_MIN, 1.0 - ec.P_MIN)


def encode_pc_order0(pc: PointCloud, block_size: int = 64) -> tuple[bytes, EncodeStats]:
    t0 = time.perf_counter()
    part, blocks = build_partition(pc, block_size)
    bits = np.concatenate([b.occupancy() for b in blocks]).astype(np.int64)
    seen_ones = np.concatenate([[0], np.cumsum(bits)[:-1]])
    p1 = _kt(seen_ones, np.arange(len(bits), dtype=np.float64))
    n = block_size ** 3
    payloads = []
    for k in range(len(blocks)):
        enc = ec.RangeEncoder()
        enc.encode_bits(p1[k * n:(k + 1) * n], bits[k * n:(k + 1) * n])
        payloads.append(enc.finish())
    bs = Bitstream(pc.bit_depth, part.block_size_log2, 0, 0, 0, 0, 0, part.node_bytes, payloads)
    data = bs.to_bytes()
    stats = EncodeStats(
        n_points=len(pc), n_blocks=len(blocks), total_bits=8 * len(data),
        octree_bits=8 * len(part.node_bytes), payload_bits=8 * sum(len(p) for p in payloads),
        header_bits=8 * bs.overhead_bytes(), nll_bits=ec.ideal_codelength(p1, bits),
        seconds=time.perf_counter() - t0)
    return data, stats


def decode_pc_order0(data: bytes) -> PointCloud:
    bs = Bitstream.from_bytes(data)
    part = deserialize_partition(bs.octree, bs.bit_depth, bs.block_size)
    origins = part.leaf_origins()
    if len(origins) != len(bs.payloads):
        raise CorruptBitstreamError("octree leaf count differs from block count")
    d = bs.block_size
    n1 = n = 0
    blocks = []
    for origin, payload in zip(origins, bs.payloads):
        dec = ec.RangeDecoder(payload)
        ones = []
        for i in range(d ** 3):
            p1 = min(max((n1 + 0.5) / (n + 1.0), ec.P_MIN), 1.0 - ec.P_MIN)
            if dec.decode_quantized(ec.quantize(p1)):
                ones.append(i)
                n1 += 1
            n += 1
        if not ones or not dec.at_end():
            raise CorruptBitstreamError("order-0 block payload is inconsistent")
        blocks.append(VoxelBlock.from_indices(ones, d, tuple(origin)))
    return assemble(blocks, bs.bit_depth)
