import numpy as np
import pytest

from sparsevox import CorruptBitstreamError, ModelMismatchError
from sparsevox import entropy_coder as ec
from sparsevox.codec import (HEADER_BYTES, Bitstream, block_nll_bits, block_probabilities, decode_block,
                             decode_blocks, decode_pc, encode_block, encode_blocks, encode_pc, read_header,
                             sequential_probabilities)
from sparsevox.pc_io import PointCloud, VoxelBlock
from sparsevox.prob_model import occupancy_probability
from sparsevox.sparse_nn import NetworkConfig, forward, init_weights
from sparsevox.synth import dense_cloud, make_cloud

from conftest import random_block


def test_single_voxel_block(toy_weights):
    b = VoxelBlock.from_indices([0], 8)
    payload = encode_block(b, toy_weights)
    assert decode_block(payload, toy_weights, 8) == b
    assert decode_block(payload, toy_weights, 8, strategy="scratch") == b


def test_round_trip_random_blocks(toy_weights):
    rng = np.random.default_rng(0)
    blocks = [random_block(rng, density=rng.uniform(0.01, 0.9)) for _ in range(100)]
    payloads, _ = encode_blocks(blocks, toy_weights)
    assert decode_blocks(payloads, toy_weights, 8) == blocks


def test_scratch_and_incremental_decoders_agree(toy_weights):
    rng = np.random.default_rng(1)
    for _ in range(2):
        b = random_block(rng, density=0.2)
        payload = encode_block(b, toy_weights)
        assert decode_block(payload, toy_weights, 8, "scratch") == decode_block(payload, toy_weights, 8) == b


def test_one_pass_equals_sequential(toy_weights):
    rng = np.random.default_rng(2)
    b = random_block(rng, density=0.3)
    assert np.array_equal(block_probabilities([b], toy_weights)[0], sequential_probabilities(b, toy_weights))


def test_decode_trace_equals_one_pass(toy_weights):
    rng = np.random.default_rng(3)
    blocks = [random_block(rng) for _ in range(5)]
    payloads, _ = encode_blocks(blocks, toy_weights)
    trace = []
    decode_blocks(payloads, toy_weights, 8, trace=trace)
    assert np.array_equal(trace[0], block_probabilities(blocks, toy_weights))


def test_full_block_payload_matches_loss(toy_weights):
    b = VoxelBlock.from_indices(np.arange(512), 8)
    payload = encode_block(b, toy_weights)
    nll = block_nll_bits(b, toy_weights)
    assert nll <= 8 * len(payload) <= nll + 64
    assert decode_block(payload, toy_weights, 8) == b


def test_empty_block_and_payload_rejected(toy_weights):
    with pytest.raises(ValueError):
        encode_block(VoxelBlock((0, 0, 0), 8, np.zeros((0, 3))), toy_weights)
    with pytest.raises(CorruptBitstreamError):
        decode_block(b"", toy_weights, 8)
    # a stream that decodes to all-empty voxels is not a valid block
    enc = ec.RangeEncoder()
    p1 = occupancy_probability(forward(toy_weights, np.zeros((0, 3), dtype=np.int64), 8))[1]
    enc.encode_bits(p1, np.zeros(512, dtype=np.uint8))
    with pytest.raises(CorruptBitstreamError):
        decode_block(enc.finish(), toy_weights, 8)


def test_single_point_cloud_layout(toy_weights):
    pc = PointCloud.from_points([(5, 9, 1000)], 10)
    data, stats = encode_pc(pc, toy_weights, block_size=8)
    bs = read_header(data)
    assert bs.block_size == 8 and len(bs.octree) == 7 and len(bs.payloads) == 1
    assert len(data) == HEADER_BYTES + 4 + 7 + 4 + 4 + len(bs.payloads[0])
    assert decode_pc(data, toy_weights) == pc
    assert stats.total_bits == 8 * len(data)
    assert stats.bpov == stats.total_bits / 1


def test_single_point_cloud_default_block(toy_weights):
    pc = PointCloud.from_points([(0, 0, 0)], 10)
    data, _ = encode_pc(pc, toy_weights, block_size=64)
    bs = read_header(data)
    assert bs.octree == bytes([0x80] * 4) and len(bs.payloads) == 1
    assert decode_pc(data, toy_weights) == pc


@pytest.mark.parametrize("kind", ["sphere", "plane", "scatter", "solid"])
def test_cloud_round_trip(toy_weights, kind):
    pc = make_cloud(kind, 9, 3000, seed=4)
    data, stats = encode_pc(pc, toy_weights, block_size=8)
    assert decode_pc(data, toy_weights) == pc
    assert np.isfinite(stats.bpov) and stats.bpov > 0
    assert stats.octree_bits + stats.payload_bits + stats.header_bits == stats.total_bits


def test_sphere_shell_10bit(toy_weights):
    pc = make_cloud("sphere", 10, 50_000, seed=5)
    assert len(pc) > 40_000
    data, stats = encode_pc(pc, toy_weights, block_size=8)
    assert decode_pc(data, toy_weights) == pc
    assert np.isfinite(stats.bpov)


def test_block_size_16_round_trip(toy_weights):
    pc = make_cloud("torus", 8, 1500, seed=6)
    data, _ = encode_pc(pc, toy_weights, block_size=16)
    assert decode_pc(data, toy_weights) == pc


def test_deterministic_encoding(toy_weights):
    pc = make_cloud("box", 8, 2000, seed=7)
    assert encode_pc(pc, toy_weights, 8)[0] == encode_pc(pc, toy_weights, 8)[0]


def test_octree_share_small_on_dense_clouds(toy_weights):
    pc = dense_cloud(8, 40, 8, 0.35, seed=8)
    _, stats = encode_pc(pc, toy_weights, block_size=8)
    assert stats.octree_share < 0.05


def test_wrong_weights_refused(toy_weights):
    pc = make_cloud("sphere", 8, 500, seed=9)
    data, _ = encode_pc(pc, toy_weights, 8)
    other = init_weights(NetworkConfig.toy(), seed=99)
    with pytest.raises(ModelMismatchError):
        decode_pc(data, other)


@pytest.mark.parametrize("cut", [3, HEADER_BYTES + 2, -1])
def test_truncated_stream(toy_weights, cut):
    data, _ = encode_pc(make_cloud("plane", 8, 800, seed=10), toy_weights, 8)
    with pytest.raises(CorruptBitstreamError):
        decode_pc(data[:cut], toy_weights)


def test_trailing_bytes_and_bad_magic(toy_weights):
    data, _ = encode_pc(make_cloud("plane", 8, 300, seed=11), toy_weights, 8)
    with pytest.raises(CorruptBitstreamError):
        Bitstream.from_bytes(data + b"\0")
    with pytest.raises(CorruptBitstreamError):
        Bitstream.from_bytes(b"NOPE" + data[4:])


def test_payload_tampering_detected_or_changes_output(toy_weights):
    pc = make_cloud("sphere", 8, 400, seed=12)
    data, _ = encode_pc(pc, toy_weights, 8)
    bs = read_header(data)
    bs.payloads[0] = bs.payloads[0][:-1]
    with pytest.raises(CorruptBitstreamError):
        decode_pc(bs.to_bytes(), toy_weights)


def test_header_echoes_model(toy_weights):
    data, _ = encode_pc(PointCloud.from_points([(1, 1, 1)], 3), toy_weights, 8)
    bs = read_header(data)
    cfg = toy_weights.config
    assert (bs.L, bs.filters, bs.kernel, bs.residual_blocks) == (cfg.L, cfg.filters, cfg.kernel, cfg.residual_blocks)
    assert bs.model_checksum == toy_weights.checksum()
    assert Bitstream.from_bytes(bs.to_bytes()) == bs
