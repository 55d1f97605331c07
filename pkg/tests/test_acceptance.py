"""Acceptance criteria; each test prints one PASS/FAIL line with the measured figure."""

import math
import time

import numpy as np
import pytest

from sparsevox import entropy_coder as ec
from sparsevox.baseline import encode_pc_order0
from sparsevox.codec import block_probabilities, decode_pc, encode_blocks, encode_pc, sequential_probabilities
from sparsevox.pc_io import VoxelBlock, raster_coords
from sparsevox.prob_model import loss_gradient, nll_loss
from sparsevox.sparse_nn import NetworkConfig, backward, build_mask, forward, forward_batch
from sparsevox.synth import corpus, dense_cloud, random_cloud
from sparsevox.training import BlockDataset, TrainConfig, evaluate, make_dataset, train

from conftest import random_block, tiny_model


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}")
        assert ok, detail
    return emit


def test_criterion_01_lossless_random_clouds(toy_weights, verdict):
    t0 = time.perf_counter()
    failures, points = [], 0
    for seed in range(100):
        pc = random_cloud(seed)
        points += len(pc)
        data, _ = encode_pc(pc, toy_weights, block_size=8)
        if decode_pc(data, toy_weights) != pc:
            failures.append(seed)
    elapsed = time.perf_counter() - t0
    verdict(1, "lossless round trip", not failures and elapsed < 600,
            f"100 clouds, {points} points, {len(failures)} mismatches, {elapsed:.0f} s (limit 600 s)")


def test_criterion_02_causality(toy_weights, verdict):
    rng = np.random.default_rng(2)
    d, broken = 8, 0
    for _ in range(50):
        occ = rng.random(d ** 3) < rng.uniform(0.02, 0.8)
        ref = forward(toy_weights, raster_coords(np.flatnonzero(occ), d), d)
        for i in rng.integers(0, d ** 3, 20):
            other = occ.copy()
            other[i:] = rng.random(d ** 3 - i) < rng.uniform(0.0, 1.0)
            got = forward(toy_weights, raster_coords(np.flatnonzero(other), d), d)
            broken += not np.array_equal(ref[i], got[i])
    verdict(2, "causality", broken == 0, f"50 blocks x 20 indices, {broken} outputs changed")


def test_criterion_03_masks(verdict):
    bad = []
    for k in (1, 3, 5):
        for mt, extra in (("A", 0), ("B", 1)):
            m = build_mask((k, k, k), mt)
            n = k ** 3 // 2 + extra
            if int(m.sum()) != n or not np.array_equal(np.flatnonzero(m), np.arange(n)):
                bad.append(f"{k}{mt}")
    verdict(3, "mask construction", not bad, "k in {1,3,5}, types A/B" + (f", wrong: {bad}" if bad else " exact"))


def test_criterion_04_gradients(verdict):
    w = tiny_model().astype(np.float64)
    rng = np.random.default_rng(4)
    blocks = [random_block(rng, d=4, density=0.4), random_block(rng, d=4, density=0.2)]
    occ = np.stack([b.occupancy() for b in blocks])
    coords = [b.occupied for b in blocks]

    def loss():
        return nll_loss(forward_batch(w, coords, dtype=np.float64), occ, clip=False)

    raw, cache = forward_batch(w, coords, dtype=np.float64, keep_cache=True)
    grads = backward(w, cache, loss_gradient(raw, occ, clip=False))
    h, worst, checked = 1e-4, 0.0, 0
    for layer, (dw, db) in zip(w.layers, grads):
        for arr, g in ((layer.weights, dw), (layer.bias, db)):
            for k in range(arr.size):
                if arr is layer.weights and not layer.mask[np.unravel_index(k, arr.shape)[0]]:
                    continue
                keep = arr.flat[k]
                arr.flat[k] = keep + h
                up = loss()
                arr.flat[k] = keep - h
                dn = loss()
                arr.flat[k] = keep
                num = (up - dn) / (2 * h)
                worst = max(worst, abs(g.flat[k] - num) / max(abs(num), 1e-6))
                checked += 1
    verdict(4, "gradient correctness", worst < 1e-3,
            f"{checked} parameters, worst relative error {worst:.2e} (limit 1e-3)")


def test_criterion_05_coder(verdict):
    rng = np.random.default_rng(5)
    n = 100_000
    p1 = np.clip(rng.random(n) ** rng.uniform(0.2, 5.0, n), ec.P_MIN, 1 - ec.P_MIN)
    bits = (rng.random(n) < p1).astype(np.int64)
    payload = ec.encode(p1, bits)
    ideal = math.fsum(-math.log2(p if b else 1.0 - p) for p, b in zip(p1.tolist(), bits.tolist()))
    exact = np.array_equal(ec.decode(payload, p1), bits)
    ok = exact and 8 * len(payload) <= ideal + 64
    verdict(5, "coder optimality", ok,
            f"{8 * len(payload)} payload bits vs {ideal:.1f} ideal (+{8 * len(payload) - ideal:.1f}), "
            f"round trip {'exact' if exact else 'BROKEN'}")


def test_criterion_06_codelength_identity(toy_weights, verdict):
    rng = np.random.default_rng(6)
    blocks = [random_block(rng) for _ in range(100)]
    p1 = block_probabilities(blocks, toy_weights)
    payloads, _ = encode_blocks(blocks, toy_weights)
    gaps = [8 * len(pl) - ec.ideal_codelength(p, b.occupancy()) for pl, p, b in zip(payloads, p1, blocks)]
    ok = all(0 <= g <= 64 for g in gaps)
    verdict(6, "codelength identity", ok,
            f"100 blocks, payload minus NLL in [{min(gaps):.2f}, {max(gaps):.2f}] bits (allowed [0, 64])")


def test_criterion_07_one_pass_equals_sequential(toy_weights, verdict):
    rng = np.random.default_rng(7)
    blocks = [random_block(rng) for _ in range(50)]
    one_pass = block_probabilities(blocks, toy_weights)
    differ = sum(not np.array_equal(one_pass[k], sequential_probabilities(b, toy_weights))
                 for k, b in enumerate(blocks))
    verdict(7, "one-pass equals sequential", differ == 0, f"50 blocks, {differ} differ")


def test_criterion_08_learning(verdict):
    t0 = time.perf_counter()
    dataset = make_dataset(corpus(12, seed=1), 8, seed=0)
    config = TrainConfig(learning_rate=3e-3, batch_size=8, grad_accumulation_steps=1,
                         early_stop_patience=5, max_epochs=100, time_limit=600.0, seed=0)
    result = train(dataset, config, NetworkConfig.toy())
    trained = time.perf_counter() - t0
    learned = base = 0
    n = 0
    for pc in corpus(6, seed=2):
        learned += encode_pc(pc, result.weights, block_size=8)[1].total_bits
        base += encode_pc_order0(pc, block_size=8)[1].total_bits
        n += len(pc)
    gain = 100.0 * (1.0 - learned / base)
    verdict(8, "learning effectiveness", gain >= 20.0 and trained <= 1800,
            f"held-out {learned / n:.3f} bpov vs order-0 {base / n:.3f} bpov, gain {gain:.1f}% (need 20%), "
            f"trained {trained:.0f} s to epoch {result.best_epoch}")


def test_criterion_09_octree_share(toy_weights, verdict):
    shares = []
    for seed, density in enumerate((0.3, 0.45, 0.6)):
        pc = dense_cloud(8, 60, 8, density, seed=seed)
        shares.append(100.0 * encode_pc(pc, toy_weights, block_size=8)[1].octree_share)
    verdict(9, "octree overhead", max(shares) < 5.0,
            "dense clouds at 30/45/60% occupancy, octree share " + ", ".join(f"{s:.2f}%" for s in shares))


def test_criterion_10_overfit(verdict):
    g = raster_coords(np.arange(512), 8)
    block = VoxelBlock((0, 0, 0), 8, g[g.sum(axis=1) <= 12])
    config = TrainConfig(learning_rate=3e-3, batch_size=8, grad_accumulation_steps=1, early_stop_patience=200,
                         max_epochs=200, rotation=False, subsampling=False, seed=0)
    result = train(BlockDataset([block] * 16, [block]), config, NetworkConfig.toy())
    bpov = evaluate(result.weights, [block])[1]
    verdict(10, "single-block overfit", bpov < 0.1,
            f"{len(block)} voxels, {bpov:.4f} bpov after {len(result.metrics) // 2} epochs (limit 0.1)")
