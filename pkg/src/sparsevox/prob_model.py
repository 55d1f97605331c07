"""Discretised logistic-mixture occupancy probabilities and their NLL.

The network emits, per voxel, ``3L`` raw numbers laid out as
``[pi_logits(L), mu(L), s_raw(L)]``. Mixture weights come from a softmax,
scales from ``softplus(s_raw) + S_MIN``. The probability that a voxel is
empty is the mixture CDF at 0.5::

    p0 = sum_l pi_l * sigmoid((0.5 - mu_l) / s_l)

Everything here runs in float64. Sums over mixture components are written
as explicit loops so that a voxel's probability does not depend on how many
other voxels are evaluated alongside it; the encoder and the decoder call
this with very different batch shapes and must agree to the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .entropy_coder import P_MIN
from .errors import ModelError

S_MIN = 1e-3
LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class LogisticMixtureParams:
    """Transformed mixture parameters, each of shape (..., L)."""

    pi: np.ndarray
    mu: np.ndarray
    s: np.ndarray


def n_components(raw: np.ndarray) -> int:
    h = raw.shape[-1]
    if h % 3:
        raise ValueError(f"raw parameter width {h} is not a multiple of 3")
    return h // 3


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def mixture_params(raw: np.ndarray) -> LogisticMixtureParams:
    raw = np.asarray(raw, dtype=np.float64)
    L = n_components(raw)
    logits, mu, s_raw = raw[..., :L], raw[..., L:2 * L], raw[..., 2 * L:]
    top = logits[..., 0]
    for l in range(1, L):
        top = np.maximum(top, logits[..., l])
    e = [np.exp(logits[..., l] - top) for l in range(L)]
    total = e[0]
    for l in range(1, L):
        total = total + e[l]
    pi = np.stack([e[l] / total for l in range(L)], axis=-1)
    return LogisticMixtureParams(pi, mu.copy(), softplus(s_raw) + S_MIN)


def empty_probability(raw: np.ndarray) -> np.ndarray:
    """Unclipped probability of an empty voxel."""
    m = mixture_params(raw)
    L = m.pi.shape[-1]
    p0 = m.pi[..., 0] * sigmoid((0.5 - m.mu[..., 0]) / m.s[..., 0])
    for l in range(1, L):
        p0 = p0 + m.pi[..., l] * sigmoid((0.5 - m.mu[..., l]) / m.s[..., l])
    return p0


def occupancy_probability(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(p0, p1) per voxel, clipped to [P_MIN, 1 - P_MIN] and summing to one."""
    raw = np.asarray(raw)
    if not np.all(np.isfinite(raw)):
        raise ModelError("context model produced non-finite parameters")
    p0 = np.clip(empty_probability(raw), P_MIN, 1.0 - P_MIN)
    return p0, 1.0 - p0


def _log_probs(raw: np.ndarray):
    """Per-voxel ln p0, ln p1 (unclipped) plus intermediates for gradients."""
    raw = np.asarray(raw, dtype=np.float64)
    L = n_components(raw)
    logits, mu, s_raw = raw[..., :L], raw[..., L:2 * L], raw[..., 2 * L:]
    log_pi = logits - logits.max(axis=-1, keepdims=True)
    log_pi = log_pi - np.log(np.exp(log_pi).sum(axis=-1, keepdims=True))
    s = softplus(s_raw) + S_MIN
    z = (0.5 - mu) / s
    a0 = log_pi - softplus(-z)  # log pi + log sigmoid(z)
    a1 = log_pi - softplus(z)   # log pi + log sigmoid(-z)

    def lse(a):
        m = a.max(axis=-1, keepdims=True)
        return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True)))[..., 0]

    return lse(a0), lse(a1), (a0, a1, log_pi, s, z, s_raw)


def nll_loss(raw_grid: np.ndarray, occupancy: np.ndarray, clip: bool = True) -> float:
    """Negative log-likelihood in nats of a 0/1 occupancy vector.

    With ``clip`` the probabilities are exactly the ones handed to the range
    coder, so ``nll_loss / ln 2`` is the ideal payload size in bits. Without
    it the loss is the smooth mixture likelihood used for training.
    """
    occ = np.asarray(occupancy).astype(bool).reshape(-1)
    raw = np.asarray(raw_grid).reshape(len(occ), -1)
    if clip:
        p0, p1 = occupancy_probability(raw)
        return float(-np.log(np.where(occ, p1, p0)).sum())
    lp0, lp1, _ = _log_probs(raw)
    return float(-np.where(occ, lp1, lp0).sum())


def nll_bits(raw_grid: np.ndarray, occupancy: np.ndarray, clip: bool = True) -> float:
    return nll_loss(raw_grid, occupancy, clip=clip) / LN2


def loss_gradient(raw_grid: np.ndarray, occupancy: np.ndarray, clip: bool = True) -> np.ndarray:
    """d nll_loss / d raw parameters, same shape as ``raw_grid``."""
    raw = np.asarray(raw_grid, dtype=np.float64)
    shape = raw.shape
    occ = np.asarray(occupancy).astype(bool).reshape(-1)
    raw = raw.reshape(len(occ), -1)
    L = n_components(raw)
    lp0, lp1, (a0, a1, log_pi, s, z, s_raw) = _log_probs(raw)
    y = occ[:, None]
    a = np.where(y, a1, a0)
    lp = np.where(occ, lp1, lp0)[:, None]
    w = np.exp(a - lp)  # posterior responsibility of each component
    pi = np.exp(log_pi)
    # d log p_y / dz: sigmoid(-z) for an empty voxel, -sigmoid(z) for an occupied one
    dlog_dz = np.where(y, -sigmoid(z), sigmoid(-z))
    g_z = -w * dlog_dz
    grad = np.empty_like(raw)
    grad[:, :L] = pi - w
    grad[:, L:2 * L] = -g_z / s
    grad[:, 2 * L:] = (-g_z * z / s) * sigmoid(s_raw)
    if clip:
        p0 = empty_probability(raw)
        live = (p0 > P_MIN) & (p0 < 1.0 - P_MIN)
        grad[~live] = 0.0
    return grad.reshape(shape)


def ideal_bpov(raw_grid: np.ndarray, occupancy: np.ndarray) -> float:
    """Ideal bits per occupied voxel of one block under the model."""
    n = int(np.asarray(occupancy).astype(bool).sum())
    return nll_bits(raw_grid, occupancy) / max(n, 1)


def raw_from_params(pi_logits, mu, s_raw) -> np.ndarray:
    """Pack per-component arrays back into the network's raw layout."""
    return np.concatenate([np.atleast_2d(pi_logits), np.atleast_2d(mu), np.atleast_2d(s_raw)], axis=-1)


def inverse_scale(s: float) -> float:
    """Raw value whose transformed scale equals ``s``."""
    t = s - S_MIN
    if t <= 0:
        raise ValueError(f"scale must exceed {S_MIN}")
    return float(t + np.log(-np.expm1(-t)))
