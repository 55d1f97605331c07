"""Whole-cloud encoding and decoding, and the ``.svx`` container.

Container layout (all integers little-endian)::

    magic            4s   b"SVXB"
    version          u8
    bit_depth        u8
    block_size_log2  u8
    L                u16
    filters          u16
    kernel           u8
    residual_blocks  u8
    model_checksum   u64
    octree_length    u32
    octree_bytes     octree_length bytes
    block_count      u32
    block_count x { payload_length u32, payload bytes }

Blocks appear in octree leaf order, so their origins are implied by the
octree. Each payload is an independent range-coder stream holding the
block's d**3 occupancy bits in raster order.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import entropy_coder as ec
from .errors import CorruptBitstreamError, ModelMismatchError
from .partition import assemble, build_partition, deserialize_partition
from .pc_io import PointCloud, VoxelBlock, raster_coords
from .prob_model import LN2, nll_loss, occupancy_probability
from .sparse_nn import ModelWeights, StreamingPredictor, forward, forward_batch

MAGIC = b"SVXB"
VERSION = 1
_HEADER = struct.Struct("<4sBBBHHBBQ")
_U32 = struct.Struct("<I")
HEADER_BYTES = _HEADER.size

# Memory budget for blocks evaluated together.
_ENCODE_VOXELS = 1 << 21
_DECODE_BYTES = 1 << 29


@dataclass
class Bitstream:
    bit_depth: int
    block_size_log2: int
    L: int
    filters: int
    kernel: int
    residual_blocks: int
    model_checksum: int
    octree: bytes
    payloads: list[bytes] = field(default_factory=list)

    @property
    def block_size(self) -> int:
        return 1 << self.block_size_log2

    def to_bytes(self) -> bytes:
        parts = [
            _HEADER.pack(MAGIC, VERSION, self.bit_depth, self.block_size_log2, self.L, self.filters,
                         self.kernel, self.residual_blocks, self.model_checksum),
            _U32.pack(len(self.octree)), self.octree, _U32.pack(len(self.payloads)),
        ]
        for p in self.payloads:
            parts += [_U32.pack(len(p)), p]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        def take(n: int, what: str) -> bytes:
            nonlocal pos
            if pos + n > len(data):
                raise CorruptBitstreamError(f"bitstream truncated in {what} at offset {pos}")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        pos = 0
        head = take(_HEADER.size, "header")
        magic, version, depth, bs_log2, L, filters, kernel, nres, checksum = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CorruptBitstreamError(f"not an svx bitstream (magic {magic!r})")
        if version != VERSION:
            raise CorruptBitstreamError(f"unsupported bitstream version {version}")
        octree = take(_U32.unpack(take(4, "octree length"))[0], "octree")
        count = _U32.unpack(take(4, "block count"))[0]
        payloads = []
        for k in range(count):
            n = _U32.unpack(take(4, f"block {k} length"))[0]
            payloads.append(take(n, f"block {k} payload"))
        if pos != len(data):
            raise CorruptBitstreamError(f"{len(data) - pos} trailing bytes after last block")
        return cls(depth, bs_log2, L, filters, kernel, nres, checksum, octree, payloads)

    def overhead_bytes(self) -> int:
        """Header plus length fields, everything that is neither octree nor payload."""
        return _HEADER.size + 8 + 4 * len(self.payloads)


@dataclass
class EncodeStats:
    n_points: int
    n_blocks: int
    total_bits: int
    octree_bits: int
    payload_bits: int
    header_bits: int
    nll_bits: float
    seconds: float

    @property
    def bpov(self) -> float:
        return self.total_bits / self.n_points

    @property
    def octree_share(self) -> float:
        return self.octree_bits / self.total_bits


def check_model(bs: Bitstream, weights: ModelWeights) -> None:
    cfg = weights.config
    if bs.model_checksum != weights.checksum():
        raise ModelMismatchError(
            f"bitstream was encoded with model {bs.model_checksum:016x}, weights are {weights.checksum():016x}")
    if (bs.L, bs.filters, bs.kernel, bs.residual_blocks) != (cfg.L, cfg.filters, cfg.kernel, cfg.residual_blocks):
        raise ModelMismatchError("bitstream model configuration differs from the weights")


# --------------------------------------------------------------- blocks


def block_probabilities(blocks: list[VoxelBlock], weights: ModelWeights) -> np.ndarray:
    """One-pass (teacher-forced) p1 for every voxel, shape (n_blocks, d**3)."""
    if not blocks:
        return np.zeros((0, 0))
    d = blocks[0].size
    per = max(1, _ENCODE_VOXELS // d ** 3)
    out = []
    for k in range(0, len(blocks), per):
        raw = forward_batch(weights, [b.occupied for b in blocks[k:k + per]], d)
        out.append(occupancy_probability(raw)[1])
    return np.concatenate(out)


def sequential_probabilities(block: VoxelBlock, weights: ModelWeights) -> np.ndarray:
    """p1 at each raster index from a fresh forward pass over the voxels before it."""
    d = block.size
    occ = block.occupancy()
    p1 = np.empty(d ** 3)
    for i in range(d ** 3):
        before = raster_coords(np.flatnonzero(occ[:i]), d)
        p1[i] = occupancy_probability(forward(weights, before, d)[i])[1]
    return p1


def encode_blocks(blocks: list[VoxelBlock], weights: ModelWeights) -> tuple[list[bytes], float]:
    """Range-code each block; returns payloads and the summed model NLL in bits."""
    if any(len(b) == 0 for b in blocks):
        raise ValueError("cannot encode an empty block")
    p1 = block_probabilities(blocks, weights)
    payloads = []
    nll = 0.0
    for b, p in zip(blocks, p1):
        bits = b.occupancy()
        enc = ec.RangeEncoder()
        enc.encode_bits(p, bits)
        payloads.append(enc.finish())
        nll += ec.ideal_codelength(p, bits)
    return payloads, nll


def encode_block(block: VoxelBlock, weights: ModelWeights) -> bytes:
    return encode_blocks([block], weights)[0][0]


def decode_blocks(payloads: list[bytes], weights: ModelWeights, d: int,
                  origins=None, trace: list | None = None) -> list[VoxelBlock]:
    """Decode several blocks voxel by voxel, advancing them in lockstep.

    ``trace``, when given, receives the p1 vector used at every step.
    """
    if origins is None:
        origins = [(0, 0, 0)] * len(payloads)
    per = max(1, _DECODE_BYTES // StreamingPredictor.bytes_per_lane(weights.config, d))
    out = []
    for k in range(0, len(payloads), per):
        out += _decode_group(payloads[k:k + per], weights, d, origins[k:k + per], trace)
    return out


def _decode_group(payloads, weights, d, origins, trace) -> list[VoxelBlock]:
    n = len(payloads)
    decoders = [ec.RangeDecoder(p) for p in payloads]
    sp = StreamingPredictor(weights, n, d)
    empty_q = int(ec.quantize_array(occupancy_probability(sp.empty[None])[1])[0])
    occ = np.zeros((n, d ** 3), dtype=np.uint8)
    bits = np.zeros(n, dtype=np.uint8)
    steps = [] if trace is not None else None
    for i in range(d ** 3):
        raw = sp.predict(i)
        if sp.last_lanes.size == 0 and steps is None:
            for k, dec in enumerate(decoders):
                bits[k] = dec.decode_quantized(empty_q)
        else:
            p1 = occupancy_probability(raw)[1]
            q = ec.quantize_array(p1).tolist()
            for k, dec in enumerate(decoders):
                bits[k] = dec.decode_quantized(q[k])
            if steps is not None:
                steps.append(p1)
        occ[:, i] = bits
        sp.commit(i, bits)
    for k, dec in enumerate(decoders):
        if not dec.at_end():
            raise CorruptBitstreamError(f"block payload has {len(payloads[k]) - dec.consumed} unread bytes")
    if steps is not None:
        trace.append(np.stack(steps, axis=1))
    blocks = []
    for k in range(n):
        idx = np.flatnonzero(occ[k])
        if idx.size == 0:
            raise CorruptBitstreamError("decoded an empty block")
        blocks.append(VoxelBlock.from_indices(idx, d, origins[k]))
    return blocks


def decode_block(payload: bytes, weights: ModelWeights, d: int, strategy: str = "incremental",
                 origin=(0, 0, 0)) -> VoxelBlock:
    """Decode one block.

    ``incremental`` evaluates only the current voxel from cached activations;
    ``scratch`` reruns the full forward pass on the voxels decoded so far
    before every bit. Both yield identical probabilities.
    """
    if not payload:
        raise CorruptBitstreamError("empty block payload")
    if strategy == "incremental":
        return decode_blocks([payload], weights, d, [origin])[0]
    if strategy != "scratch":
        raise ValueError(f"unknown decode strategy {strategy!r}")
    dec = ec.RangeDecoder(payload)
    decoded: list[int] = []
    for i in range(d ** 3):
        raw = forward(weights, raster_coords(np.asarray(decoded, dtype=np.int64), d), d)[i]
        if dec.decode_bit(float(occupancy_probability(raw)[1])):
            decoded.append(i)
    if not dec.at_end():
        raise CorruptBitstreamError("block payload has unread bytes")
    if not decoded:
        raise CorruptBitstreamError("decoded an empty block")
    return VoxelBlock.from_indices(decoded, d, origin)


def block_nll_bits(block: VoxelBlock, weights: ModelWeights) -> float:
    raw = forward(weights, block.occupied, block.size)
    return nll_loss(raw, block.occupancy()) / LN2


# --------------------------------------------------------------- clouds


def encode_pc(pc: PointCloud, weights: ModelWeights, block_size: int = 64) -> tuple[bytes, EncodeStats]:
    """Encode a cloud; returns container bytes and size/timing figures."""
    t0 = time.perf_counter()
    part, blocks = build_partition(pc, block_size)
    payloads, nll = encode_blocks(blocks, weights)
    cfg = weights.config
    bs = Bitstream(pc.bit_depth, part.block_size_log2, cfg.L, cfg.filters, cfg.kernel,
                   cfg.residual_blocks, weights.checksum(), part.node_bytes, payloads)
    data = bs.to_bytes()
    payload_bits = 8 * sum(len(p) for p in payloads)
    stats = EncodeStats(
        n_points=len(pc), n_blocks=len(blocks), total_bits=8 * len(data),
        octree_bits=8 * len(part.node_bytes), payload_bits=payload_bits,
        header_bits=8 * bs.overhead_bytes(), nll_bits=nll, seconds=time.perf_counter() - t0)
    return data, stats


def decode_pc(data: bytes, weights: ModelWeights) -> PointCloud:
    bs = Bitstream.from_bytes(data)
    check_model(bs, weights)
    part = deserialize_partition(bs.octree, bs.bit_depth, bs.block_size)
    origins = [tuple(o) for o in part.leaf_origins()]
    if len(origins) != len(bs.payloads):
        raise CorruptBitstreamError(f"octree has {len(origins)} leaves but stream holds {len(bs.payloads)} blocks")
    if any(len(p) == 0 for p in bs.payloads):
        raise CorruptBitstreamError("empty block payload")
    blocks = decode_blocks(bs.payloads, weights, bs.block_size, origins)
    return assemble(blocks, bs.bit_depth)


def read_header(data: bytes) -> Bitstream:
    """Parse the container without decoding (for inspection and guards)."""
    return Bitstream.from_bytes(data)
