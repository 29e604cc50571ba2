"""Normalized-temperature cross-entropy (NT-Xent) over 2N projected embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

NEG_INF = -1e9  # additive mask for the self-similarity diagonal


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def similarity_matrix(z: Tensor) -> Tensor:
    """Cosine similarities of the rows of z: symmetric, unit diagonal, in [-1,1]."""
    if z.data.ndim != 2:
        raise ShapeError(f"similarity_matrix: expected 2-D, got {z.data.shape}")
    norms = np.sqrt((z.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms == 0.0):
        raise ValueError("similarity_matrix: zero-norm embedding row")
    zn = T.l2_normalize(z, axis=1)
    return T.matmul(zn, T.transpose2d(zn))


def nt_xent(z: Tensor, temperature: float = 0.5) -> Tensor:
    """Contrastive loss over 2N rows where rows (2k, 2k+1) are positive pairs.

    Per anchor i with positive j: -log( exp(s_ij/t) / sum_{k != i} exp(s_ik/t) ),
    cosine similarities, averaged over all 2N anchors. Rows are normalized
    internally; the denominator excludes only the anchor itself.
    """
    if temperature <= 0:
        raise ValueError(f"nt_xent: temperature must be positive, got {temperature}")
    if z.data.ndim != 2 or z.data.shape[0] % 2 != 0:
        raise ShapeError(f"nt_xent: expected (2N, p) embeddings, got {z.data.shape}")
    m = z.data.shape[0]
    if m < 4:
        raise ValueError(f"nt_xent: need at least 2 pairs (no negatives otherwise), got {m // 2}")

    sim = similarity_matrix(z)
    logits = sim * (1.0 / temperature)
    mask = np.zeros((m, m), dtype=np.float32)
    np.fill_diagonal(mask, NEG_INF)
    logp = T.log_softmax(T.add(logits, Tensor(mask)), axis=1)

    pos = np.zeros((m, m), dtype=np.float32)
    idx = np.arange(m)
    pos[idx, idx ^ 1] = 1.0  # partner row of 2k is 2k+1 and vice versa
    return T.tsum(T.mul(logp, Tensor(pos))) * (-1.0 / m)
