"""Trajectory losses and evaluation distances.

Losses (``ahd``, ``training_loss``) are graph functions.  The evaluation
distances (``dtwd``, ``discrete_frechet``) are plain numpy dynamic programs,
vectorised over anti-diagonals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .ad import ShapeError, Tensor

LOSS_MODES = ("ahd_composite", "mse")


def _as_points(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim == 1:
        t = ad.reshape(t, (t.shape[0], 1))
    return t


def pairwise_distances(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distances between point sets ``(..., T, d)`` and ``(..., M, d)``."""
    ta = a.shape[-2]
    mb = b.shape[-2]
    diff = ad.reshape(a, (*a.shape[:-2], ta, 1, a.shape[-1])) - ad.reshape(b, (*b.shape[:-2], 1, mb, b.shape[-1]))
    return ad.sqrt(ad.sum(ad.square(diff), axis=-1))


def ahd(a, b) -> Tensor:
    """Average Hausdorff distance between two point sets.

    Accepts ``(T, d)`` / ``(M, d)`` sets or batches ``(B, T, d)`` / ``(B, M, d)``;
    returns one value per set pair.  The sets may differ in size.
    """
    a = _as_points(a)
    b = _as_points(b)
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("ahd needs nonempty point sets")
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"ahd: point dimensions differ ({a.shape[-1]} vs {b.shape[-1]})")
    dist = pairwise_distances(a, b)
    ax_t = dist.ndim - 2
    ax_m = dist.ndim - 1
    forward = ad.mean(ad.min_over_axis(dist, axis=ax_m), axis=ax_t)
    backward = ad.mean(ad.min_over_axis(dist, axis=ax_t), axis=ax_t)
    return forward + backward


def _first(x: Tensor) -> Tensor:
    t = x.shape[-2]
    if t == 1:
        return x
    return ad.split(x, [1, t - 1], axis=x.ndim - 2)[0]


def training_loss(rollout, demo, k: float = 0.0, mode: str = "ahd_composite") -> Tensor:
    """Scalar training loss averaged over any leading batch axes.

    ``ahd_composite`` adds ``k * |z_0 - z^d_0|^2`` to the AHD; ``mse`` is the
    mean over samples of the squared Euclidean error and needs equal lengths.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    r = _as_points(rollout)
    d = _as_points(demo)
    if mode == "mse":
        if r.shape != d.shape:
            raise ShapeError(f"mse needs equal-length trajectories, got {r.shape} and {d.shape}")
        return ad.mean(ad.sum(ad.square(r - d), axis=-1))
    loss = ahd(r, d)
    if k != 0.0:
        anchor = ad.sum(ad.square(_first(r) - _first(d)), axis=-1)
        loss = loss + ad.scale(ad.reshape(anchor, loss.shape), k)
    return ad.mean(loss)


# --------------------------------------------------------------------------
# evaluation distances


def _as_curve(x) -> np.ndarray:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("trajectories must be nonempty (n, d) arrays")
    return a


def _cost(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    if p.shape[1] != q.shape[1]:
        raise ShapeError(f"point dimensions differ ({p.shape[1]} vs {q.shape[1]})")
    return np.sqrt(((p[:, None, :] - q[None, :, :]) ** 2).sum(-1))


def _diagonal_dp(cost: np.ndarray, combine) -> np.ndarray:
    """Fill D[i, j] = combine(cost[i, j], D[i-1, j], D[i-1, j-1], D[i, j-1])
    one anti-diagonal at a time (cells on a diagonal are independent)."""
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0 if combine is _dtw_combine else -np.inf
    for s in range(n + m - 1):
        i = np.arange(max(0, s - m + 1), min(n, s + 1))
        j = s - i
        acc[i + 1, j + 1] = combine(cost[i, j], acc[i, j + 1], acc[i, j], acc[i + 1, j])
    return acc[1:, 1:]


def _dtw_combine(c, up, diag, left):
    return c + np.minimum(np.minimum(up, diag), left)


def _frechet_combine(c, up, diag, left):
    return np.maximum(c, np.minimum(np.minimum(up, diag), left))


@dataclass(frozen=True)
class DtwResult:
    raw: float
    normalized: float
    path_length: int


def dtwd(p, q) -> DtwResult:
    """Symmetric DTW with steps (1,0), (0,1), (1,1) and Euclidean point cost.

    ``normalized`` divides the cumulative cost by the number of aligned pairs
    on the optimal path.
    """
    a = _as_curve(p)
    b = _as_curve(q)
    acc = _diagonal_dp(_cost(a, b), _dtw_combine)
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    length = 1
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            moves = ((acc[i - 1, j - 1], -1, -1), (acc[i - 1, j], -1, 0), (acc[i, j - 1], 0, -1))
            _, di, dj = min(moves, key=lambda m: m[0])
            i += di
            j += dj
        length += 1
    raw = float(acc[-1, -1])
    return DtwResult(raw, raw / length, length)


def discrete_frechet(p, q) -> float:
    a = _as_curve(p)
    b = _as_curve(q)
    return float(_diagonal_dp(_cost(a, b), _frechet_combine)[-1, -1])
