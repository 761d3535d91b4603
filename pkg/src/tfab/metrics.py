"""Perceptibility distances (L2, cosine, DTW, soft-DTW) and attack-success
aggregation.

DTW runs the classic dynamic program with squared-Euclidean local cost and
no band constraint; multichannel inputs score as the sum of per-channel 1D
alignments. The recurrence is evaluated along anti-diagonals so all channels
(and all cells of a diagonal) advance in one vectorized step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class DtwConfig:
    gamma: float = 0.0
    channel_mode: str = "per_channel_sum"
    local_distance: str = "squared_euclidean"

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.channel_mode != "per_channel_sum":
            raise ConfigError(f"unknown channel_mode {self.channel_mode!r}")
        if self.local_distance != "squared_euclidean":
            raise ConfigError(f"unknown local_distance {self.local_distance!r}")


def l2_dist(a, b) -> float:
    """Euclidean norm of the flattened difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"l2_dist: shapes {a.shape} and {b.shape} differ")
    return float(np.linalg.norm((a - b).ravel()))


def cosine_similarity(a, b) -> float:
    """Inner-product similarity of the flattened tensors, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: sizes {a.size} and {b.size} differ")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(a @ b / (na * nb))


def _as_channels(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"expected 1D sequence or [C,T] sample, got {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("empty sequence")
    return x


def _dtw_table(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """Per-channel alignment costs for a [C,n] vs [C,m] pair.

    gamma == 0 uses the hard minimum; gamma > 0 the smoothed min
    softmin_g(u,v,w) = -g*log(exp(-u/g)+exp(-v/g)+exp(-w/g)), stabilized by
    max-subtraction (equivalently min-subtraction of the negated terms).
    """
    c, n = a.shape
    m = b.shape[1]
    cost = np.square(a[:, :, None] - b[:, None, :])
    acc = np.full((c, n + 1, m + 1), np.inf)
    acc[:, 0, 0] = 0.0
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        three = np.stack((acc[:, i - 1, j], acc[:, i, j - 1],
                          acc[:, i - 1, j - 1]))
        if gamma == 0.0:
            best = three.min(axis=0)
        else:
            lo = three.min(axis=0)
            z = np.exp(-(three - lo) / gamma).sum(axis=0)
            best = lo - gamma * np.log(z)
        acc[:, i, j] = cost[:, i - 1, j - 1] + best
    return acc[:, n, m]


def dtw(a, b, cfg: DtwConfig | None = None) -> float:
    """Classic DTW score; multichannel samples sum their per-channel 1D
    alignments. Sequences may differ in length."""
    if cfg is None:
        cfg = DtwConfig()
    if cfg.gamma != 0.0:
        raise ConfigError("dtw requires gamma == 0; use soft_dtw for gamma > 0")
    av = _as_channels(a)
    bv = _as_channels(b)
    if av.shape[0] != bv.shape[0]:
        raise ShapeError(
            f"channel counts differ: {av.shape[0]} vs {bv.shape[0]}"
        )
    return float(_dtw_table(av, bv, 0.0).sum())


def soft_dtw(a, b, cfg: DtwConfig) -> float:
    """Smoothed DTW with log-sum-exp min; may be negative."""
    if cfg.gamma <= 0.0:
        raise ConfigError(f"soft_dtw requires gamma > 0, got {cfg.gamma}")
    av = _as_channels(a)
    bv = _as_channels(b)
    if av.shape[0] != bv.shape[0]:
        raise ShapeError(
            f"channel counts differ: {av.shape[0]} vs {bv.shape[0]}"
        )
    return float(_dtw_table(av, bv, cfg.gamma).sum())


def asr(results) -> float:
    """Fraction of successful attacks among attackable samples."""
    results = list(results)
    if not results:
        raise ValueError("no attackable samples")
    return sum(1 for r in results if r.success) / len(results)


def perturbation_values(x_adv, x_benign, decimals: int = 9) -> np.ndarray:
    """Distinct perturbation values after rounding away float noise.

    The 1e-9 grid is far below any attack step size, so square-wave
    perturbations collapse to their few true levels while smooth attacks
    keep thousands of distinct values.
    """
    delta = np.asarray(x_adv, dtype=np.float64) - np.asarray(
        x_benign, dtype=np.float64
    )
    return np.unique(np.round(delta, decimals=decimals))
