"""Training objectives: chunk-independence penalties and InfoNCE grounding.

The independence penalty sums, per node, the correlation coefficient of
every unordered pair of that node's chunks. As printed the coefficient is
the (signed) Pearson form; a distance-correlation variant is available as
an alternative since the signed form rewards anti-correlation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ContractError, ShapeError
from .numerics import Tensor

VARIANCE_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    ind_text: Tensor
    ind_visual: Tensor
    ground: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "l_ind_T": self.ind_text.item(),
            "l_ind_V": self.ind_visual.item(),
            "l_ground": self.ground.item(),
            "total": self.total.item(),
        }


def correlation_coeff(x, y) -> Tensor:
    """Pearson-style Cov(x,y)/sqrt(D(x)D(y)) over paired entries.

    Returns exactly 0 when either variance falls below the floor: a
    constant chunk carries no correlation penalty.
    """
    xt = x if isinstance(x, Tensor) else nm.constant(x)
    yt = y if isinstance(y, Tensor) else nm.constant(y)
    if xt.data.ndim != 1 or yt.data.ndim != 1:
        raise ShapeError("correlation_coeff expects 1-D vectors")
    if xt.data.size != yt.data.size:
        raise ShapeError(f"length mismatch: {xt.data.size} vs {yt.data.size}")
    n = xt.data.size
    if n < 2:
        raise ShapeError("correlation_coeff needs length >= 2")
    dx = xt - float(xt.data.mean())
    dy = yt - float(yt.data.mean())
    vx = nm.sum_all(dx * dx)
    vy = nm.sum_all(dy * dy)
    if vx.item() / n < VARIANCE_FLOOR or vy.item() / n < VARIANCE_FLOOR:
        return nm.constant(0.0)
    cov = nm.sum_all(dx * dy)
    return cov / nm.sqrt(vx * vy)


def _pearson_rho_rows(x: Tensor, y: Tensor) -> Tensor:
    """Rowwise signed correlation over the last axis with variance guard."""
    dk = x.data.shape[-1]
    dx = x - nm.mean_axis(x, axis=x.data.ndim - 1, keepdims=True)
    dy = y - nm.mean_axis(y, axis=y.data.ndim - 1, keepdims=True)
    cov = nm.sum_axis(dx * dy, axis=x.data.ndim - 1)
    vx = nm.sum_axis(dx * dx, axis=x.data.ndim - 1)
    vy = nm.sum_axis(dy * dy, axis=x.data.ndim - 1)
    live = ((vx.data / dk) >= VARIANCE_FLOOR) & ((vy.data / dk) >= VARIANCE_FLOOR)
    mask = nm.constant(live.astype(np.float64))
    denom = nm.sqrt(vx * vy + nm.constant(1.0 - live))
    return cov / denom * mask


def _distance_rho_rows(x: Tensor, y: Tensor) -> Tensor:
    """Rowwise distance correlation over the last axis (always >= 0)."""
    def centered_dist(t: Tensor) -> Tensor:
        nd = t.data.ndim
        a = nm.reshape(t, t.data.shape + (1,))
        b = nm.reshape(t, t.data.shape[:-1] + (1, t.data.shape[-1]))
        diff = a - b
        dist = nm.relu(diff) + nm.relu(nm.neg(diff))      # |x_i - x_j|
        row = nm.mean_axis(dist, axis=nd, keepdims=True)
        col = nm.mean_axis(dist, axis=nd - 1, keepdims=True)
        grand = nm.mean_axis(nm.mean_axis(dist, axis=nd), axis=nd - 1, keepdims=True)
        return dist - row - col + nm.reshape(grand, grand.data.shape + (1,))

    nd = x.data.ndim
    ax_, ay_ = centered_dist(x), centered_dist(y)
    vxy = nm.mean_axis(nm.mean_axis(ax_ * ay_, axis=nd), axis=nd - 1)
    vxx = nm.mean_axis(nm.mean_axis(ax_ * ax_, axis=nd), axis=nd - 1)
    vyy = nm.mean_axis(nm.mean_axis(ay_ * ay_, axis=nd), axis=nd - 1)
    live = (vxx.data >= VARIANCE_FLOOR) & (vyy.data >= VARIANCE_FLOOR) & (vxy.data > 0)
    mask = nm.constant(live.astype(np.float64))
    guard = nm.constant(1.0 - live)
    num = nm.sqrt(vxy * mask + guard)
    den = nm.sqrt(nm.sqrt(vxx * vyy + guard))
    return num / den * mask


def independence_loss(embedding: Tensor, chunks: int, kind: str = "pearson") -> Tensor:
    """Sum over nodes and chunk pairs k < k' of the pair's correlation."""
    n, d = embedding.data.shape
    if d % chunks != 0:
        raise ShapeError(f"chunk count {chunks} must divide embedding dim {d}")
    if chunks < 2:
        return nm.constant(0.0)
    dk = d // chunks
    stacked = nm.transpose(nm.reshape(embedding, (n, chunks, dk)), (1, 0, 2))
    ka = np.array([a for a in range(chunks) for b in range(a + 1, chunks)])
    kb = np.array([b for a in range(chunks) for b in range(a + 1, chunks)])
    x = nm.take(stacked, ka, axis=0)
    y = nm.take(stacked, kb, axis=0)
    if kind == "pearson":
        rho = _pearson_rho_rows(x, y)
    elif kind == "distance":
        rho = _distance_rho_rows(x, y)
    else:
        raise ContractError(f"unknown independence kind {kind!r}")
    return nm.sum_all(rho)


def infonce_loss(scores: Tensor, positives, tau: float) -> Tensor:
    """Contrastive loss over rows of similarity scores.

    Each row holds the positive plus every negative (the positive sits in
    the denominator as well); positives[i] is the positive's column.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    n, cols = scores.data.shape
    pos = np.asarray(positives, dtype=np.int64)
    if pos.shape != (n,):
        raise ShapeError(f"need one positive index per row, got {pos.shape}")
    if (pos < 0).any() or (pos >= cols).any():
        raise ContractError("positive index out of range")
    scaled = scores * (1.0 / tau)
    lse = nm.logsumexp(scaled)
    onehot = np.zeros((n, cols))
    onehot[np.arange(n), pos] = 1.0
    picked = nm.sum_axis(scaled * nm.constant(onehot), axis=1)
    return nm.sum_all(lse - picked)


def total_loss(ind_text: Tensor, ind_visual: Tensor, ground: Tensor) -> LossBreakdown:
    """Unweighted sum of the three objectives."""
    return LossBreakdown(ind_text, ind_visual, ground, ind_text + ind_visual + ground)
