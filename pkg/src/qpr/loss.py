"""Training objectives over encoded pair batches.

Each loss returns its value together with gradients w.r.t. the encoded
vectors; those gradients are fed to :func:`qpr.encoder.backward_batch`.

* Triplet loss (hinge on squared or plain euclidean distance), reduced by sum.
* Smoothed deep metric loss: in-batch softmax over negative squared distances
  trained with KL divergence against label-smoothed targets, reduced by mean.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import log_softmax, softmax, xlogy


class DistanceVariant(str, enum.Enum):
    EUC = "euc"  # ||u - v||
    SSD = "ssd"  # ||u - v||^2


class Mining(str, enum.Enum):
    RANDOM = "random"
    HARD = "hard"


@dataclass(frozen=True)
class SdmlConfig:
    epsilon: float = 0.3
    N: int = 512

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.N < 2:
            raise ValueError("N must be >= 2")


@dataclass(frozen=True)
class TripletConfig:
    alpha: float = 0.5
    variant: DistanceVariant = DistanceVariant.SSD
    mining: Mining = Mining.RANDOM

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        object.__setattr__(self, "variant", DistanceVariant(self.variant))
        object.__setattr__(self, "mining", Mining(self.mining))


@dataclass
class PairBatch:
    """Row ``j`` of ``right`` is the only paraphrase of row ``j`` of ``left``."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        if self.left.shape != self.right.shape or self.left.ndim != 2:
            raise ValueError("left and right must be N x n matrices of equal shape")

    @property
    def N(self) -> int:
        return self.left.shape[0]


def pairwise_sq_dists(A: np.ndarray, B: np.ndarray, block: int = 1 << 22) -> np.ndarray:
    """``D[i, j] = sum_k (A[i, k] - B[j, k])**2`` by direct differencing, in row blocks."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    out = np.empty((A.shape[0], B.shape[0]))
    step = max(1, block // max(1, B.size))
    for s in range(0, A.shape[0], step):
        diff = A[s:s + step, None, :] - B[None, :, :]
        out[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _distance_and_grad(u: np.ndarray, v: np.ndarray, variant: DistanceVariant):
    """Distance between rows of ``u`` and ``v`` and its gradient w.r.t. ``u``."""
    diff = u - v
    sq = np.einsum("...k,...k->...", diff, diff)
    if variant is DistanceVariant.SSD:
        return sq, 2.0 * diff
    d = np.sqrt(sq)
    # subgradient 0 at coincident points
    scale = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
    return d, diff * scale[..., None]


def triplet_loss(anchor, pos, neg, cfg: TripletConfig):
    """Hinge ``[d(a, p) - d(a, n) + alpha]_+``.

    Accepts single vectors or row-aligned matrices; for matrices the loss is
    summed over rows. Returns ``(loss, (g_anchor, g_pos, g_neg))``.
    """
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(pos, dtype=np.float64)
    n = np.asarray(neg, dtype=np.float64)
    d_ap, g_ap = _distance_and_grad(a, p, cfg.variant)
    d_an, g_an = _distance_and_grad(a, n, cfg.variant)
    margin = d_ap - d_an + cfg.alpha
    active = (margin > 0).astype(np.float64)
    loss = float(np.sum(margin * active))
    act = active[..., None] if a.ndim > 1 else active
    g_a = act * (g_ap - g_an)
    g_p = -act * g_ap
    g_n = act * g_an
    return loss, (g_a, g_p, g_n)


def mine_negatives(batch: PairBatch, mining: Mining | str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Pick one in-batch negative ``j != i`` from the right side for every anchor ``i``.

    ``random`` draws uniformly; ``hard`` takes the closest non-paraphrase to the
    anchor, lowest index on ties.
    """
    mining = Mining(mining)
    N = batch.N
    if N < 2:
        raise ValueError("need at least two pairs to mine negatives")
    if mining is Mining.RANDOM:
        if rng is None:
            raise ValueError("random mining needs an rng")
        j = rng.integers(0, N - 1, size=N)
        return j + (j >= np.arange(N))
    D = pairwise_sq_dists(batch.left, batch.right)
    np.fill_diagonal(D, np.inf)
    return D.argmin(axis=1)


def triplet_batch_loss(batch: PairBatch, neg_idx: np.ndarray, cfg: TripletConfig):
    """Summed triplet loss with anchor ``left[i]``, positive ``right[i]``, negative ``right[neg_idx[i]]``.

    Returns ``(loss, g_left, g_right)``.
    """
    loss, (g_a, g_p, g_n) = triplet_loss(batch.left, batch.right, batch.right[neg_idx], cfg)
    g_right = g_p.copy()
    np.add.at(g_right, neg_idx, g_n)
    return loss, g_a, g_right


def sdml_probs(dist_row: np.ndarray) -> np.ndarray:
    """Softmax over negative squared distances (row-wise for matrices)."""
    return softmax(-np.asarray(dist_row, dtype=np.float64), axis=-1)


def smooth_labels(N: int, gold: int, epsilon: float) -> np.ndarray:
    """``(1 - eps) * onehot(gold) + eps / N``.

    Entries are evaluated in exact rational arithmetic on the decimal value of
    ``epsilon`` and rounded once, so e.g. ``eps=0.3, N=3`` gives exactly
    ``[0.8, 0.1, 0.1]``.
    """
    if not 0 <= gold < N:
        raise ValueError("gold index out of range")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    eps = Fraction(repr(float(epsilon)))
    off = eps / N
    out = np.full(N, float(off))
    out[gold] = float(1 - eps + off)
    return out


def _smoothed_targets(N: int, epsilon: float) -> np.ndarray:
    row = smooth_labels(N, 0, epsilon)
    off, gold = row[1], row[0]
    T = np.full((N, N), off)
    np.fill_diagonal(T, gold)
    return T


def sdml_per_anchor(batch: PairBatch, epsilon: float):
    """Per-anchor KL terms, the probability matrix and the smoothed targets."""
    D = pairwise_sq_dists(batch.left, batch.right)
    logp = log_softmax(-D, axis=1)
    T = _smoothed_targets(batch.N, epsilon)
    kl = np.sum(xlogy(T, T) - T * logp, axis=1)
    return kl, np.exp(logp), T


def sdml_loss(batch: PairBatch, cfg: SdmlConfig):
    """Mean over anchors of ``KL(smoothed targets || softmax(-D[i]))``.

    ``D`` is the ``N x N`` squared-distance matrix between left and right rows,
    so the batch needs exactly ``2N`` encoder passes. Returns
    ``(loss, g_left, g_right)``.
    """
    N = batch.N
    kl, P, T = sdml_per_anchor(batch, cfg.epsilon)
    # d loss / d D[i, j] = (T - P)[i, j] / N
    G = (T - P) / N
    L, R = batch.left, batch.right
    g_left = 2.0 * (G.sum(axis=1)[:, None] * L - G @ R)
    g_right = 2.0 * (G.sum(axis=0)[:, None] * R - G.T @ L)
    return float(kl.mean()), g_left, g_right
