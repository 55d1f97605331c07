"""NLL training of the context model with Adam, accumulation and early stopping."""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import TrainingDiverged
from .partition import build_partition
from .pc_io import PointCloud, VoxelBlock
from .prob_model import LN2, loss_gradient, nll_loss
from .sparse_nn import ModelWeights, NetworkConfig, backward, forward_batch, init_weights, with_config

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    grad_accumulation_steps: int = 16
    early_stop_patience: int = 5
    max_epochs: int = 100
    validation_fraction: float = 0.1
    rotation: bool = True
    subsampling: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    time_limit: float | None = None  # seconds; checked between epochs

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.grad_accumulation_steps < 1:
            raise ValueError("learning rate, batch size and accumulation steps must be positive")
        if self.early_stop_patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be positive")
        if not 0 < self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5]")


@dataclass
class BlockDataset:
    train: list[VoxelBlock]
    validation: list[VoxelBlock]

    def __len__(self) -> int:
        return len(self.train) + len(self.validation)


@dataclass
class TrainResult:
    weights: ModelWeights
    metrics: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_validation: float = float("inf")


def make_dataset(clouds: list[PointCloud], d: int, seed: int = 0, validation_fraction: float = 0.1) -> BlockDataset:
    """Every occupied d**3 block of every cloud, shuffled and split by seed."""
    if not clouds:
        raise ValueError("no point clouds given")
    blocks = []
    for pc in clouds:
        if len(pc):
            blocks += build_partition(pc, d)[1]
    if not blocks:
        raise ValueError("clouds contain no occupied blocks")
    order = np.random.default_rng(seed).permutation(len(blocks))
    blocks = [blocks[i] for i in order]
    n_val = int(len(blocks) * validation_fraction)
    return BlockDataset(blocks[n_val:], blocks[:n_val])


def _rotations() -> list[np.ndarray]:
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3), dtype=np.int64)
            m[range(3), perm] = signs
            if round(np.linalg.det(m)) == 1:
                mats.append(m)
    return mats


ROTATIONS = _rotations()


def rotate_block(block: VoxelBlock, rotation: np.ndarray) -> VoxelBlock:
    """Apply an axis-aligned rotation about the block centre."""
    d = block.size
    centred = 2 * block.occupied - (d - 1)  # integer, keeps exactness for even d
    turned = centred @ np.asarray(rotation).T
    return VoxelBlock(block.origin, d, (turned + d - 1) // 2)


def augment(block: VoxelBlock, seed=None, rotation: bool = True, subsampling: bool = True,
            keep_rate: float | None = None) -> VoxelBlock:
    """Random cube rotation (one of 24) and/or subsampling.

    The keep-rate is drawn from [0.5, 1] unless ``keep_rate`` fixes it. An
    emptied block is resampled, so the result always holds a voxel.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = block
    if rotation:
        out = rotate_block(out, ROTATIONS[int(rng.integers(len(ROTATIONS)))])
    if subsampling:
        rate = rng.uniform(0.5, 1.0) if keep_rate is None else keep_rate
        if not 0.0 < rate <= 1.0:
            raise ValueError("keep_rate must lie in (0, 1]")
        while True:
            keep = rng.random(len(out)) < rate
            if keep.any():
                break
        out = VoxelBlock(out.origin, out.size, out.occupied[keep])
    return out


def evaluate(weights: ModelWeights, blocks: list[VoxelBlock], batch_size: int = 64) -> tuple[float, float]:
    """Codelength of ``blocks`` under the float32 model: (bits per voxel, bits per occupied voxel)."""
    w32 = weights.astype(np.float32)
    bits = voxels = occupied = 0.0
    for k in range(0, len(blocks), batch_size):
        chunk = blocks[k:k + batch_size]
        d = chunk[0].size
        raw = forward_batch(w32, [b.occupied for b in chunk], d, exact=False)
        for b, r in zip(chunk, raw):
            bits += nll_loss(r, b.occupancy()) / LN2
            voxels += d ** 3
            occupied += len(b)
    return bits / voxels, bits / max(occupied, 1)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1: float, beta2: float, eps: float):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * corr * m / (np.sqrt(v) + self.eps)


def _flat_grads(grads) -> list[np.ndarray]:
    out = []
    for dw, db in grads:
        out += [dw, db]
    return out


def train(dataset: BlockDataset, config: TrainConfig, network: NetworkConfig | None = None,
          init: ModelWeights | None = None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimise the mixture NLL; returns the best-validation weights and per-epoch metrics.

    Each batch contributes the mean over its blocks of the per-block summed
    NLL, divided by the accumulation count; Adam steps once per
    ``grad_accumulation_steps`` batches. Without a validation split the
    un-augmented training blocks stand in for it.
    """
    if not dataset.train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    d = dataset.train[0].size
    if init is not None:
        weights = init.astype(np.float64)
    else:
        network = network or NetworkConfig.toy()
        weights = init_weights(network, seed=config.seed).astype(np.float64)
    if weights.config.d != d:
        weights = with_config(weights, d=d)
    params = weights.arrays()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    val_blocks = dataset.validation or dataset.train

    result = TrainResult(weights.astype(np.float32))
    since_best = 0
    t_start = time.perf_counter()
    acc = [np.zeros_like(p) for p in params]
    pending = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(dataset.train))
        loss_bits = voxels = 0.0
        for step, k in enumerate(range(0, len(order), config.batch_size)):
            batch = [dataset.train[i] for i in order[k:k + config.batch_size]]
            if config.rotation or config.subsampling:
                batch = [augment(b, rng, config.rotation, config.subsampling) for b in batch]
            occ = np.stack([b.occupancy() for b in batch])
            raw, cache = forward_batch(weights, [b.occupied for b in batch], d, np.float64,
                                       keep_cache=True, exact=False)
            loss = nll_loss(raw, occ, clip=False)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {step}; "
                    f"max |param| = {max(float(np.abs(p).max()) for p in params):.3g}")
            loss_bits += loss / LN2
            voxels += occ.size
            g = loss_gradient(raw, occ, clip=False) / (len(batch) * config.grad_accumulation_steps)
            for a, gr in zip(acc, _flat_grads(backward(weights, cache, g))):
                a += gr
            pending += 1
            if pending == config.grad_accumulation_steps:
                opt.step(acc)
                for a in acc:
                    a[...] = 0.0
                pending = 0
        if pending:
            scale = config.grad_accumulation_steps / pending
            opt.step([a * scale for a in acc])
            for a in acc:
                a[...] = 0.0
            pending = 0

        elapsed = time.perf_counter() - t_start
        val_bpv, val_bpov = evaluate(weights, val_blocks)
        records = [
            {"epoch": epoch, "split": "train", "nll_bits_per_voxel": loss_bits / voxels, "wall_time": elapsed},
            {"epoch": epoch, "split": "validation", "nll_bits_per_voxel": val_bpv,
             "bits_per_occupied_voxel": val_bpov, "wall_time": elapsed},
        ]
        for rec in records:
            result.metrics.append(rec)
            if on_epoch:
                on_epoch(rec)
        log.info("epoch %d train %.4f val %.4f bits/voxel", epoch, loss_bits / voxels, val_bpv)

        if val_bpv < result.best_validation:
            result.best_validation = val_bpv
            result.best_epoch = epoch
            result.weights = weights.astype(np.float32)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break
        if config.time_limit is not None and elapsed >= config.time_limit:
            break
    return result


def metrics_jsonl(metrics: list[dict]) -> str:
    return "".join(json.dumps(m) + "\n" for m in metrics)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
