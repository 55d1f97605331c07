"""Masked sparse 3D convolution and the causal context network.

Kernel positions are flattened in raster order over offsets
``(ox, oy, oz)`` in ``[-r, r]^3``. The weight at offset ``o`` carries the
feature of input coordinate ``q + o`` into output coordinate ``q``; a
position with raster index below the kernel centre is an input that precedes
the output in scan order. A type-A mask keeps only those positions, a type-B
mask also keeps the centre.

Network topology::

    occupied voxels (feature 1.0)
      -> masked conv A, generative, ReLU
      -> residual blocks: conv B -> ReLU -> conv B -> + skip -> ReLU
      -> sparse to dense -> 1x1x1 conv with 3L outputs

Causality holds by construction: the generative first layer creates a
coordinate only where some occupied voxel precedes it within the kernel, and
every later layer reads only from coordinates at or before its output.

Every convolution accumulates ``bias + sum_j sum_c x[j, c] * W[j, c]`` one
term at a time in a fixed order with separate multiply and add. A row's
result therefore depends on nothing but that row's inputs, which is what
lets the one-pass encoder and the voxel-by-voxel decoder agree bit for bit.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import WeightFileError


@dataclass(frozen=True)
class NetworkConfig:
    L: int = 5
    filters: int = 64
    kernel: int = 3
    residual_blocks: int = 2
    d: int = 64

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd and positive")
        if min(self.L, self.filters, self.d) < 1 or self.residual_blocks < 0:
            raise ValueError(f"invalid network config {self}")

    @property
    def h(self) -> int:
        return 3 * self.L

    @classmethod
    def toy(cls) -> "NetworkConfig":
        return cls(L=2, filters=8, kernel=3, residual_blocks=1, d=8)


def kernel_offsets(dims) -> np.ndarray:
    """All kernel offsets, shape (kD*kH*kW, 3), in raster order."""
    kd, kh, kw = _check_dims(dims)
    ax = [np.arange(k) - k // 2 for k in (kd, kh, kw)]
    g = np.meshgrid(*ax, indexing="ij")
    return np.stack([a.reshape(-1) for a in g], axis=1).astype(np.int64)


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(k) for k in dims)
    if len(dims) != 3 or any(k < 1 or k % 2 == 0 for k in dims):
        raise ValueError(f"kernel dims {dims} must be three odd positive integers")
    return dims


def build_mask(dims, mask_type: str) -> np.ndarray:
    """0/1 vector over flattened kernel positions.

    Type A keeps positions ``[0, K//2)``; type B keeps ``[0, K//2]``.
    """
    kd, kh, kw = _check_dims(dims)
    if mask_type not in ("A", "B"):
        raise ValueError(f"mask type must be 'A' or 'B', got {mask_type!r}")
    size = kd * kh * kw
    mask = np.ones(size, dtype=np.uint8)
    mask[size // 2 + (mask_type == "B"):] = 0
    return mask


@dataclass(eq=False)
class MaskedKernel:
    """Convolution weights of shape (K, C_in, C_out) with a causal mask applied."""

    dims: tuple[int, int, int]
    weights: np.ndarray
    bias: np.ndarray
    mask_type: str

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        k = self.dims[0] * self.dims[1] * self.dims[2]
        w = np.asarray(self.weights)
        if w.ndim != 3 or w.shape[0] != k:
            raise ValueError(f"weights shape {w.shape} does not match kernel size {k}")
        if self.bias.shape != (w.shape[2],):
            raise ValueError("bias length must equal output channels")
        self.weights = w * build_mask(self.dims, self.mask_type)[:, None, None].astype(w.dtype)

    @property
    def mask(self) -> np.ndarray:
        return build_mask(self.dims, self.mask_type)

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def offsets(self) -> np.ndarray:
        return kernel_offsets(self.dims)

    @property
    def active_offsets(self) -> np.ndarray:
        return self.offsets[self.active]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]

    def astype(self, dtype) -> "MaskedKernel":
        return MaskedKernel(self.dims, self.weights.astype(dtype), self.bias.astype(dtype), self.mask_type)


# --------------------------------------------------------------- tensors


@dataclass(eq=False)
class SparseTensor:
    """Coordinates in ``[0, d)^3`` with one feature row each.

    ``batch`` tags each coordinate with the block it belongs to, so several
    blocks can share one tensor. Rows are kept sorted by (batch, raster index).
    """

    coords: np.ndarray
    feats: np.ndarray
    d: int
    batch: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        f = np.asarray(self.feats)
        if f.ndim != 2 or len(f) != len(c):
            raise ValueError("feats must have one row per coordinate")
        b = np.zeros(len(c), dtype=np.int64) if self.batch is None else np.asarray(self.batch, dtype=np.int64)
        if len(c) and (c.min() < 0 or c.max() >= self.d):
            raise ValueError(f"coordinates outside [0, {self.d})^3")
        keys = _keys(c, b, self.d)
        order = np.argsort(keys, kind="stable")
        if len(keys) > 1 and np.any(np.diff(keys[order]) == 0):
            raise ValueError("duplicate coordinates in sparse tensor")
        self.coords, self.feats, self.batch = c[order], f[order], b[order]
        self.keys = keys[order]

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def with_feats(self, feats: np.ndarray) -> "SparseTensor":
        out = object.__new__(SparseTensor)
        out.coords, out.batch, out.keys, out.d = self.coords, self.batch, self.keys, self.d
        out.feats = feats
        return out


def _keys(coords: np.ndarray, batch: np.ndarray, d: int) -> np.ndarray:
    return ((batch * d + coords[:, 0]) * d + coords[:, 1]) * d + coords[:, 2]


_LUT_LIMIT = 1 << 24  # dense key lookup below this many voxels


def neighbor_map(out: SparseTensor, src: SparseTensor, offsets: np.ndarray) -> np.ndarray:
    """Row of ``src`` at ``out.coords + o`` for each offset, -1 where absent."""
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)
    nbr = np.full((len(offsets), len(out)), -1, dtype=np.int64)
    if len(out) == 0 or len(src) == 0:
        return nbr
    d = out.d
    q = (out.coords[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    inside = np.all((q >= 0) & (q < d), axis=1)
    keys = _keys(q[inside], np.tile(out.batch, len(offsets))[inside], d)
    span = int(max(out.batch.max(), src.batch.max()) + 1) * d ** 3
    if span <= _LUT_LIMIT:
        lut = np.full(span, -1, dtype=np.int64)
        lut[src.keys] = np.arange(len(src))
        col = lut[keys]
    else:
        pos = np.minimum(np.searchsorted(src.keys, keys), len(src) - 1)
        col = np.where(src.keys[pos] == keys, pos, -1)
    nbr.reshape(-1)[np.flatnonzero(inside)] = col
    return nbr


_TERM_BUDGET = 1 << 22  # float elements held at once by the few-row exact path
_ROW_CHUNK = 1 << 15  # output elements per chunk on the many-row exact path


def accumulate(gathers, weights: np.ndarray, bias: np.ndarray, n: int | None = None,
               exact: bool = True) -> np.ndarray:
    """``bias + sum_j sum_c gathers[j][:, c] * weights[j, c]``.

    ``gathers`` is a list of (n, C_in) arrays, one per kernel offset, or an
    array of shape (n, K, C_in). The exact path adds the terms strictly left
    to right starting from the bias, so each row's result is independent of
    the other rows and of how rows or terms are chunked. ``exact=False``
    hands the same sum to BLAS, which is faster but may round differently
    depending on the batch shape; it is only for training.
    """
    if isinstance(gathers, np.ndarray):
        n = len(gathers) if n is None else n
        stacked = gathers.reshape(n, gathers.shape[1] * gathers.shape[2])
    else:
        if n is None:
            n = len(gathers[0])
        stacked = np.concatenate(gathers, axis=1) if len(gathers) else np.zeros((n, 0), dtype=bias.dtype)
    w = weights.reshape(-1, weights.shape[-1])
    if not exact:
        return stacked @ w + bias
    cout = len(bias)
    out = np.empty((n, cout), dtype=bias.dtype)
    out[:] = bias
    if n * cout <= 512:
        # few rows (streaming decode): one ufunc call per chunk of terms
        step = max(1, _TERM_BUDGET // max(1, n * cout))
        for t0 in range(0, w.shape[0], step):
            terms = stacked[:, t0:t0 + step].T[:, :, None] * w[t0:t0 + step, None, :]
            terms[0] += out  # IEEE addition commutes, so this is out + term
            out = np.add.accumulate(terms, axis=0)[-1]
        return out
    rows = max(1, _ROW_CHUNK // cout)
    for r0 in range(0, n, rows):
        cols = np.ascontiguousarray(stacked[r0:r0 + rows].T)
        dst = out[r0:r0 + rows]
        tmp = np.empty_like(dst)
        for t in range(w.shape[0]):
            np.multiply(cols[t][:, None], w[t], out=tmp)
            dst += tmp
    return out


def generative_coords(inp: SparseTensor, kernel: MaskedKernel) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates reachable from the input through the active kernel offsets, clipped to the block."""
    if len(inp) == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    offs = kernel.active_offsets
    cand = (inp.coords[None, :, :] - offs[:, None, :]).reshape(-1, 3)
    bat = np.tile(inp.batch, len(offs))
    inside = np.all((cand >= 0) & (cand < inp.d), axis=1)
    cand, bat = cand[inside], bat[inside]
    keys, first = np.unique(_keys(cand, bat, inp.d), return_index=True)
    return cand[first], bat[first]


def sparse_conv(inp: SparseTensor, kernel: MaskedKernel, generative: bool = False,
                _nbr: np.ndarray | None = None, exact: bool = True) -> SparseTensor:
    """Masked sparse convolution.

    Non-generative: output coordinates are the input coordinates. Generative:
    output coordinates are every ``p - o`` for input ``p`` and active offset
    ``o``, clipped to the block, i.e. the positions each input can inform.
    """
    if inp.channels != kernel.c_in:
        raise ValueError(f"input has {inp.channels} channels, kernel expects {kernel.c_in}")
    if generative:
        coords, batch = generative_coords(inp, kernel)
        out = SparseTensor(coords, np.zeros((len(coords), 0)), inp.d, batch)
    else:
        out = inp
    nbr = neighbor_map(out, inp, kernel.active_offsets) if _nbr is None else _nbr
    padded = np.concatenate([inp.feats, np.zeros((1, inp.channels), dtype=inp.feats.dtype)])
    w = kernel.weights[kernel.active].astype(inp.feats.dtype, copy=False)
    b = kernel.bias.astype(inp.feats.dtype, copy=False)
    feats = accumulate(padded[nbr.T], w, b, n=len(out), exact=exact)
    return out.with_feats(feats)


def sparse_to_dense(inp: SparseTensor, n_blocks: int | None = None) -> np.ndarray:
    """Dense grid of shape (d, d, d, C), or (B, d, d, d, C) when ``n_blocks`` is given."""
    d = inp.d
    nb = 1 if n_blocks is None else n_blocks
    grid = np.zeros((nb * d ** 3, inp.channels), dtype=inp.feats.dtype)
    grid[inp.keys] = inp.feats
    shape = (d, d, d, inp.channels) if n_blocks is None else (nb, d, d, d, inp.channels)
    return grid.reshape(shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, np.zeros((), dtype=x.dtype))


# --------------------------------------------------------------- model


@dataclass(eq=False)
class ModelWeights:
    """Layers in topology order: first (A), residual convs (B, two per block), final 1x1x1 (B)."""

    config: NetworkConfig
    layers: list[MaskedKernel] = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        expected = 2 + 2 * cfg.residual_blocks
        if len(self.layers) != expected:
            raise ValueError(f"expected {expected} layers, got {len(self.layers)}")
        k = (cfg.kernel,) * 3
        shapes = [(k, 1, cfg.filters, "A")]
        shapes += [(k, cfg.filters, cfg.filters, "B")] * (2 * cfg.residual_blocks)
        shapes += [((1, 1, 1), cfg.filters, cfg.h, "B")]
        for layer, (dims, cin, cout, mt) in zip(self.layers, shapes):
            if layer.dims != dims or layer.c_in != cin or layer.c_out != cout or layer.mask_type != mt:
                raise ValueError(f"layer {layer.dims}/{layer.c_in}->{layer.c_out}/{layer.mask_type} "
                                 f"inconsistent with config (want {dims}/{cin}->{cout}/{mt})")

    @property
    def first(self) -> MaskedKernel:
        return self.layers[0]

    @property
    def final(self) -> MaskedKernel:
        return self.layers[-1]

    def residual_pairs(self) -> list[tuple[MaskedKernel, MaskedKernel]]:
        inner = self.layers[1:-1]
        return [(inner[2 * i], inner[2 * i + 1]) for i in range(self.config.residual_blocks)]

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, [l.astype(dtype) for l in self.layers])

    def copy(self) -> "ModelWeights":
        return self.astype(self.layers[0].weights.dtype)

    def arrays(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...] of the live arrays (mutating them edits the model)."""
        out = []
        for l in self.layers:
            out += [l.weights, l.bias]
        return out

    def n_parameters(self) -> int:
        return int(sum(l.active.size * l.c_in * l.c_out + l.c_out for l in self.layers))

    def to_bytes(self) -> bytes:
        return serialize_weights(self)

    def checksum(self) -> int:
        return struct.unpack("<Q", self.to_bytes()[-8:])[0]


def init_weights(config: NetworkConfig, seed: int = 0) -> ModelWeights:
    """He-uniform initialisation with fan-in counted over unmasked positions only."""
    rng = np.random.default_rng(seed)
    k = (config.kernel,) * 3
    specs = [(k, 1, config.filters, "A")]
    specs += [(k, config.filters, config.filters, "B")] * (2 * config.residual_blocks)
    specs += [((1, 1, 1), config.filters, config.h, "B")]
    layers = []
    for dims, cin, cout, mt in specs:
        ksize = dims[0] * dims[1] * dims[2]
        fan_in = int(build_mask(dims, mt).sum()) * cin
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(ksize, cin, cout)).astype(np.float32)
        layers.append(MaskedKernel(dims, w, np.zeros(cout, dtype=np.float32), mt))
    return ModelWeights(config, layers)


# --------------------------------------------------------------- forward / backward


@dataclass
class _ConvCache:
    inp: SparseTensor
    nbr: np.ndarray
    pre: np.ndarray  # pre-activation output
    nbr_t: np.ndarray | None = None  # output row at p - o, for input gradients


@dataclass
class ForwardCache:
    n_blocks: int
    d: int
    first: _ConvCache
    blocks: list[tuple[_ConvCache, _ConvCache, np.ndarray]]  # conv1, conv2, residual sum
    top: SparseTensor  # activations fed to the final layer


def _input_tensor(blocks, d: int, dtype) -> SparseTensor:
    coords = [np.asarray(b, dtype=np.int64).reshape(-1, 3) for b in blocks]
    batch = np.concatenate([np.full(len(c), i, dtype=np.int64) for i, c in enumerate(coords)]) if coords else np.zeros(0, np.int64)
    allc = np.concatenate(coords) if coords else np.zeros((0, 3), np.int64)
    return SparseTensor(allc, np.ones((len(allc), 1), dtype=dtype), d, batch)


def empty_params(weights: ModelWeights, dtype=np.float32) -> np.ndarray:
    """Final-layer output for a voxel with all-zero features (no causal context)."""
    fin = weights.final
    zero = np.zeros((1, fin.c_in), dtype=dtype)
    return accumulate([zero], fin.weights[0].astype(dtype)[None], fin.bias.astype(dtype))[0]


def forward_batch(weights: ModelWeights, blocks, d: int | None = None, dtype=np.float32,
                  keep_cache: bool = False, exact: bool = True):
    """Raw mixture parameters for every voxel of every block.

    ``blocks`` is a sequence of (n_i, 3) local coordinate arrays. Returns an
    array of shape (B, d**3, 3L) in raster order, and a cache for
    :func:`backward` when ``keep_cache`` is set.
    """
    d = weights.config.d if d is None else d
    w = weights.astype(dtype) if weights.first.weights.dtype != dtype else weights
    nb = len(blocks)
    x0 = _input_tensor(blocks, d, dtype)

    coords, batch = generative_coords(x0, w.first)
    shell = SparseTensor(coords, np.zeros((len(coords), 0), dtype=dtype), d, batch)
    nbr0 = neighbor_map(shell, x0, w.first.active_offsets)
    pre0 = sparse_conv(x0, w.first, generative=True, _nbr=nbr0, exact=exact)
    act = pre0.with_feats(relu(pre0.feats))
    first_cache = _ConvCache(x0, nbr0, pre0.feats)

    block_caches = []
    nbr_b = nbr_t = None
    for k1, k2 in w.residual_pairs():
        if nbr_b is None:
            nbr_b = neighbor_map(act, act, k1.active_offsets)
            if keep_cache:
                nbr_t = neighbor_map(act, act, -k1.active_offsets)
        c1 = sparse_conv(act, k1, _nbr=nbr_b, exact=exact)
        r1 = c1.with_feats(relu(c1.feats))
        c2 = sparse_conv(r1, k2, _nbr=nbr_b, exact=exact)
        s = c2.feats + act.feats
        block_caches.append((_ConvCache(act, nbr_b, c1.feats, nbr_t), _ConvCache(r1, nbr_b, c2.feats, nbr_t), s))
        act = act.with_feats(relu(s))

    fin = w.final
    out = np.empty((nb * d ** 3, fin.c_out), dtype=dtype)
    out[:] = empty_params(w, dtype)
    if len(act):
        out[act.keys] = accumulate([act.feats], fin.weights[0][None], fin.bias, exact=exact)
    out = out.reshape(nb, d ** 3, fin.c_out)
    if not keep_cache:
        return out
    return out, ForwardCache(nb, d, first_cache, block_caches, act)


def forward(weights: ModelWeights, occupied, d: int | None = None, dtype=np.float32) -> np.ndarray:
    """Raw parameters (d**3, 3L) for one block given its occupied local coordinates."""
    return forward_batch(weights, [occupied], d, dtype)[0]


def _conv_backward(cache: _ConvCache, kernel: MaskedKernel, g_out: np.ndarray, need_input: bool):
    """Gradients of one masked conv: (dW full-size, db, d input feats or None).

    Input gradients are gathered through the transposed neighbour map
    (output row at ``p - o`` for input row ``p``) rather than scattered.
    """
    inp = cache.inp
    cin, cout = inp.channels, g_out.shape[1]
    padded = np.concatenate([inp.feats, np.zeros((1, cin), dtype=g_out.dtype)])
    active = kernel.active
    stacked = np.concatenate([padded[cache.nbr[j]] for j in range(len(active))], axis=1)
    dW = np.zeros(kernel.weights.shape, dtype=g_out.dtype)
    dW[active] = (stacked.T @ g_out).reshape(len(active), cin, cout)
    db = g_out.sum(axis=0)
    g_in = None
    if need_input:
        g_pad = np.concatenate([g_out, np.zeros((1, cout), dtype=g_out.dtype)])
        g_stack = np.concatenate([g_pad[cache.nbr_t[j]] for j in range(len(active))], axis=1)
        w_t = kernel.weights[active].transpose(0, 2, 1).reshape(-1, cin)
        g_in = g_stack @ w_t
    return dW, db, g_in


def backward(weights: ModelWeights, cache: ForwardCache, grad_out: np.ndarray):
    """Reverse-mode gradients of a scalar loss given d loss / d raw parameters.

    Returns a list of (dW, db) per layer, aligned with ``weights.layers``.
    Masked-out kernel positions always receive exactly zero.
    """
    dtype = grad_out.dtype
    w = weights.astype(dtype) if weights.first.weights.dtype != dtype else weights
    g = grad_out.reshape(-1, grad_out.shape[-1])
    fin = w.final
    top = cache.top
    g_top = g[top.keys]
    d_fin_w = np.zeros(fin.weights.shape, dtype=dtype)
    d_fin_w[0] = top.feats.T @ g_top
    d_fin_b = g.sum(axis=0)
    g_act = g_top @ fin.weights[0].T

    grads_blocks = []
    for (k1, k2), (c1, c2, s) in zip(reversed(w.residual_pairs()), reversed(cache.blocks)):
        g_s = g_act * (s > 0)
        dW2, db2, g_r1 = _conv_backward(c2, k2, g_s, True)
        g_c1 = g_r1 * (c1.pre > 0)
        dW1, db1, g_a = _conv_backward(c1, k1, g_c1, True)
        g_act = g_s + g_a
        grads_blocks = [(dW1, db1), (dW2, db2)] + grads_blocks

    g_pre0 = g_act * (cache.first.pre > 0)
    dW0, db0, _ = _conv_backward(cache.first, w.first, g_pre0, False)
    return [(dW0, db0)] + grads_blocks + [(d_fin_w, d_fin_b)]


# --------------------------------------------------------------- streaming


_NO_LANES = np.zeros(0, dtype=np.int64)


class StreamingPredictor:
    """Voxel-by-voxel evaluation for ``n`` blocks decoded in lockstep.

    After the voxels before raster index ``i`` are committed, every layer's
    activation at positions ``<= i`` is final, so :meth:`predict` only
    computes position ``i``. Each row goes through :func:`accumulate` with
    the same terms as :func:`forward_batch`, so results match it exactly.
    """

    def __init__(self, weights: ModelWeights, n: int, d: int, dtype=np.float32):
        self.w = weights.astype(dtype) if weights.first.weights.dtype != dtype else weights
        self.n, self.d, self.dtype = n, d, dtype
        r = self.w.config.kernel // 2
        self.r = r
        size = d + 2 * r
        f = self.w.config.filters
        self.occ = np.zeros((n, size, size, size, 1), dtype=dtype)
        self.exists = np.zeros((n, d, d, d), dtype=bool)
        self.act = [np.zeros((n, size, size, size, f), dtype=dtype)
                    for _ in range(1 + self.w.config.residual_blocks)]
        self.mid = [np.zeros((n, size, size, size, f), dtype=dtype)
                    for _ in range(self.w.config.residual_blocks)]
        self.empty = empty_params(self.w, dtype)
        self.last_lanes = np.zeros(0, dtype=np.int64)
        # the active offsets are a raster-order prefix of the k**3 window
        self._packed = {id(kern): (kern.dims[0], len(kern.active), np.ascontiguousarray(kern.weights[kern.active]))
                        for kern in self.w.layers}
        self._fin_w = np.ascontiguousarray(self.w.final.weights[0][None])
        self._first_offsets = [tuple(int(v) for v in o) for o in self.w.first.active_offsets]

    def _conv_at(self, grid, lanes, pos, kernel: MaskedKernel):
        k, n_act, w = self._packed[id(kernel)]
        x, y, z = pos
        win = grid[lanes, x:x + k, y:y + k, z:z + k].reshape(len(lanes), k ** 3, -1)
        return accumulate(win[:, :n_act], w, kernel.bias, n=len(lanes))

    @staticmethod
    def bytes_per_lane(config: NetworkConfig, d: int, itemsize: int = 4) -> int:
        size = (d + 2 * (config.kernel // 2)) ** 3
        return size * itemsize * (1 + config.filters * (1 + 2 * config.residual_blocks)) + d ** 3

    def predict(self, i: int) -> np.ndarray:
        """Raw parameters at raster index ``i`` for every lane; ``last_lanes`` lists lanes with context."""
        d = self.d
        pos = (i // (d * d), (i // d) % d, i % d)
        out = np.empty((self.n, len(self.empty)), dtype=self.dtype)
        out[:] = self.empty
        here = self.exists[:, pos[0], pos[1], pos[2]]
        if not here.any():
            self.last_lanes = _NO_LANES
            return out
        lanes = np.flatnonzero(here)
        self.last_lanes = lanes
        r = self.r
        at = (lanes, pos[0] + r, pos[1] + r, pos[2] + r)
        a = relu(self._conv_at(self.occ, lanes, pos, self.w.first))
        self.act[0][at] = a
        for b, (k1, k2) in enumerate(self.w.residual_pairs()):
            m = relu(self._conv_at(self.act[b], lanes, pos, k1))
            self.mid[b][at] = m
            s = self._conv_at(self.mid[b], lanes, pos, k2) + a
            a = relu(s)
            self.act[b + 1][at] = a
        fin = self.w.final
        out[lanes] = accumulate([a], self._fin_w, fin.bias)
        return out

    def commit(self, i: int, bits: np.ndarray) -> None:
        """Record decoded occupancy at raster index ``i`` for every lane."""
        bits = np.asarray(bits)
        if not bits.any():
            return
        lanes = np.flatnonzero(bits)
        d, r = self.d, self.r
        x, y, z = i // (d * d), (i // d) % d, i % d
        self.occ[lanes, x + r, y + r, z + r] = 1
        for ox, oy, oz in self._first_offsets:
            qx, qy, qz = x - ox, y - oy, z - oz
            if 0 <= qx < d and 0 <= qy < d and 0 <= qz < d:
                self.exists[lanes, qx, qy, qz] = True


# --------------------------------------------------------------- weight file

MAGIC = b"SVXW"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIII")


def serialize_weights(weights: ModelWeights) -> bytes:
    cfg = weights.config
    parts = [_HEADER.pack(MAGIC, VERSION, cfg.d, cfg.L, cfg.filters, cfg.kernel, cfg.residual_blocks)]
    for layer in weights.layers:
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    body = b"".join(parts)
    digest = hashlib.blake2b(body, digest_size=8).digest()
    return body + digest


def deserialize_weights(data: bytes) -> ModelWeights:
    if len(data) < _HEADER.size + 8:
        raise WeightFileError("weight file too short")
    body, digest = data[:-8], data[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise WeightFileError("weight file checksum mismatch")
    magic, version, d, L, filters, kernel, nres = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise WeightFileError(f"bad weight file magic {magic!r}")
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    try:
        cfg = NetworkConfig(L=L, filters=filters, kernel=kernel, residual_blocks=nres, d=d)
    except ValueError as exc:
        raise WeightFileError(str(exc)) from None
    template = init_weights(cfg, seed=0)
    off = _HEADER.size
    layers = []
    for t in template.layers:
        nw, nb = t.weights.size, t.bias.size
        need = 4 * (nw + nb)
        if off + need > len(body):
            raise WeightFileError("weight file truncated")
        w = np.frombuffer(body, dtype="<f4", count=nw, offset=off).reshape(t.weights.shape).astype(np.float32)
        b = np.frombuffer(body, dtype="<f4", count=nb, offset=off + 4 * nw).astype(np.float32)
        off += need
        layers.append(MaskedKernel(t.dims, w, b, t.mask_type))
    if off != len(body):
        raise WeightFileError("weight file has trailing bytes")
    return ModelWeights(cfg, layers)


def save_weights(weights: ModelWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_weights(weights))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        return deserialize_weights(fh.read())


def with_config(weights: ModelWeights, **changes) -> ModelWeights:
    return ModelWeights(replace(weights.config, **changes), weights.layers)
