"""Loss family for multi-label metric learning, with analytic gradients.

All distance-based losses operate on embedding vectors (rows of shape (m,))
and return the scalar value together with gradients with respect to every
input embedding. Gradients are exact subgradients: embeddings that appear
only in inactive hinge terms receive zero gradient.

The overlap term ``tau`` is the Jaccard distance between two label sets; it
scales how much of the margin a positive pair is allowed to keep.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping

import numpy as np

from .errors import ConfigError, ContractError, DegenerateGroupError

if TYPE_CHECKING:
    from .sampler import AnchorGroup


@dataclass(frozen=True)
class LossConfig:
    """Margin and numerical guards shared by the loss family."""

    margin: float = 0.2
    epsilon_dist: float = 1e-8

    def __post_init__(self):
        if self.margin <= 0.0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.epsilon_dist <= 0.0:
            raise ConfigError("epsilon_dist must be > 0")


@dataclass
class PairLossOutput:
    value: float
    grad_first: np.ndarray
    grad_second: np.ndarray


@dataclass
class TripletLossOutput:
    value: float
    anchor_grad: np.ndarray
    positive_grad: np.ndarray
    negative_grad: np.ndarray


@dataclass
class GroupLossOutput:
    value: float
    anchor_grad: np.ndarray
    positive_grads: np.ndarray  # (p, m)
    negative_grads: np.ndarray  # (n, m)


@dataclass
class SmoothMaxTerm:
    value: float
    anchor_grad: np.ndarray
    negative_grads: np.ndarray  # (n, m)


@dataclass
class PretrainLossOutput:
    value: float
    logit_grads: np.ndarray  # (l, 2), gradients w.r.t. the pre-softmax logits


def dist(u: np.ndarray, v: np.ndarray) -> float:
    """Euclidean distance; in [0, 2] for unit vectors."""
    return float(np.linalg.norm(np.asarray(u, dtype=np.float64) - v))


def _dists_and_grads(anchor: np.ndarray, others: np.ndarray, eps: float):
    """Distances from the anchor to each row, plus d(dist)/d(anchor).

    The gradient with respect to row i is the negation of row i of the
    returned gradient matrix. The guard ``eps`` removes the d=0 singularity.
    """
    diffs = anchor[None, :] - others
    d = np.linalg.norm(diffs, axis=1)
    grads = diffs / (d + eps)[:, None]
    return d, grads


def _as_matrix(vectors, name: str) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DegenerateGroupError(f"{name} set is empty")
    return arr


def triplet_loss(
    anchor: np.ndarray,
    positive: np.ndarray,
    negative: np.ndarray,
    cfg: LossConfig,
) -> TripletLossOutput:
    """Hinged triplet loss max(0, d(a, x+) - d(a, x-) + margin)."""
    anchor = np.asarray(anchor, dtype=np.float64)
    d, g = _dists_and_grads(anchor, np.stack([positive, negative]), cfg.epsilon_dist)
    raw = d[0] - d[1] + cfg.margin
    if raw <= 0.0:
        zero = np.zeros_like(anchor)
        return TripletLossOutput(0.0, zero, zero.copy(), zero.copy())
    return TripletLossOutput(
        value=float(raw),
        anchor_grad=g[0] - g[1],
        positive_grad=-g[0],
        negative_grad=g[1],
    )


def group_loss(
    anchor: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    cfg: LossConfig,
) -> GroupLossOutput:
    """Mean of the hinged triplet loss over all positive x negative pairs."""
    anchor = np.asarray(anchor, dtype=np.float64)
    P = _as_matrix(positives, "positive")
    N = _as_matrix(negatives, "negative")
    p, n = P.shape[0], N.shape[0]

    d_p, g_p = _dists_and_grads(anchor, P, cfg.epsilon_dist)
    d_n, g_n = _dists_and_grads(anchor, N, cfg.epsilon_dist)
    raw = d_p[:, None] - d_n[None, :] + cfg.margin
    active = raw > 0.0
    value = float(np.sum(raw[active])) / (p * n)

    row_counts = active.sum(axis=1).astype(np.float64)  # active terms per positive
    col_counts = active.sum(axis=0).astype(np.float64)  # active terms per negative
    scale = 1.0 / (p * n)
    anchor_grad = scale * (row_counts @ g_p - col_counts @ g_n)
    positive_grads = -scale * row_counts[:, None] * g_p
    negative_grads = scale * col_counts[:, None] * g_n
    return GroupLossOutput(value, anchor_grad, positive_grads, negative_grads)


def max_negative(anchor: np.ndarray, negatives: np.ndarray, cfg: LossConfig) -> float:
    """Largest contribution over the negative set: max_j (margin - d(a, x_j))."""
    anchor = np.asarray(anchor, dtype=np.float64)
    N = _as_matrix(negatives, "negative")
    d = np.linalg.norm(anchor[None, :] - N, axis=1)
    return float(np.max(cfg.margin - d))


def smooth_max_negative(
    anchor: np.ndarray, negatives: np.ndarray, cfg: LossConfig
) -> SmoothMaxTerm:
    """Log-sum-exp upper bound of :func:`max_negative`, max-shifted for safety.

    Satisfies max_negative <= value <= max_negative + log(n).
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    N = _as_matrix(negatives, "negative")
    d, g = _dists_and_grads(anchor, N, cfg.epsilon_dist)
    terms = cfg.margin - d
    shift = float(np.max(terms))
    exps = np.exp(terms - shift)
    total = float(np.sum(exps))
    value = shift + float(np.log(total))
    weights = exps / total  # softmax over the terms
    anchor_grad = -(weights @ g)
    negative_grads = weights[:, None] * g
    return SmoothMaxTerm(value, anchor_grad, negative_grads)


def overlap_tau(a, b) -> float:
    """Jaccard distance between two non-empty label sets.

    0 when the sets are equal, 1 when they are disjoint.
    """
    sa, sb = frozenset(a), frozenset(b)
    if not sa or not sb:
        raise ContractError("overlap_tau requires non-empty label sets")
    union = len(sa | sb)
    inter = len(sa & sb)
    return (union - inter) / union


def ml2_loss(
    anchor: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    taus,
    cfg: LossConfig,
) -> GroupLossOutput:
    """Overlap-aware multi-label loss.

    (1/p) sum_i max(0, d(a, x+_i) - margin * tau_i + smooth_max_negative).
    Every active hinge shares the same smooth negative term, so negatives
    collect one log-sum-exp-weighted gradient per active positive.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    P = _as_matrix(positives, "positive")
    taus = np.asarray(taus, dtype=np.float64)
    p = P.shape[0]
    if taus.shape != (p,):
        raise ContractError(f"expected {p} tau values, got shape {taus.shape}")
    if np.any(taus < 0.0) or np.any(taus > 1.0):
        raise ContractError("tau values must lie in [0, 1]")

    neg_term = smooth_max_negative(anchor, negatives, cfg)
    d_p, g_p = _dists_and_grads(anchor, P, cfg.epsilon_dist)
    hinges = d_p - cfg.margin * taus + neg_term.value
    active = (hinges > 0.0).astype(np.float64)
    n_active = int(np.count_nonzero(active))
    value = float(np.sum(hinges * active)) / p

    anchor_grad = (active @ g_p) / p + (n_active / p) * neg_term.anchor_grad
    positive_grads = -(active[:, None] * g_p) / p
    negative_grads = (n_active / p) * neg_term.negative_grads
    return GroupLossOutput(value, anchor_grad, positive_grads, negative_grads)


def contrastive_loss(
    x1: np.ndarray, x2: np.ndarray, same: bool, cfg: LossConfig
) -> PairLossOutput:
    """Squared-distance contrastive loss: d^2 for similar pairs,
    max(0, margin - d)^2 for dissimilar ones."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    diff = x1 - x2
    if same:
        value = float(diff @ diff)
        return PairLossOutput(value, 2.0 * diff, -2.0 * diff)
    d = float(np.linalg.norm(diff))
    slack = cfg.margin - d
    if slack <= 0.0:
        zero = np.zeros_like(x1)
        return PairLossOutput(0.0, zero, zero.copy())
    g = (2.0 * slack / (d + cfg.epsilon_dist)) * diff
    return PairLossOutput(float(slack * slack), -g, g)


def ml2plus_loss(
    group: AnchorGroup, emb: Mapping[str, np.ndarray], cfg: LossConfig
) -> GroupLossOutput:
    """ML2 with the fixed overlap tau = (p - 1) / p of single-label positives.

    ``emb`` maps example ids to embedding rows. Raises if any positive
    carries more than one label.
    """
    for pos in group.positives:
        if len(pos.labels) != 1:
            raise ContractError(
                f"positive {pos.id!r} has {len(pos.labels)} labels; "
                f"single-label positives required"
            )
    p = len(group.positives)
    tau = (p - 1) / p
    anchor = emb[group.anchor.id]
    P = np.stack([emb[ex.id] for ex in group.positives])
    N = np.stack([emb[ex.id] for ex in group.negatives]) if group.negatives else np.empty((0, anchor.shape[0]))
    return ml2_loss(anchor, P, N, np.full(p, tau), cfg)


def hard_class_mine(
    group: AnchorGroup, emb: Mapping[str, np.ndarray], cfg: LossConfig, k: int
) -> AnchorGroup:
    """Keep the k group members contributing most to the loss.

    Positives are scored by d(a, x+) - margin * tau, negatives by
    margin - d(a, x-). The returned group preserves the positive/negative
    partition and the relative order within each set.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    p, n = len(group.positives), len(group.negatives)
    if k > p + n:
        raise ContractError(f"k={k} exceeds group size {p + n}")
    if k == p + n:
        return group

    anchor = emb[group.anchor.id]
    scores = np.empty(p + n)
    for i, ex in enumerate(group.positives):
        scores[i] = dist(anchor, emb[ex.id]) - cfg.margin * group.tau_values[i]
    for j, ex in enumerate(group.negatives):
        scores[p + j] = cfg.margin - dist(anchor, emb[ex.id])

    keep = set(np.argsort(-scores, kind="stable")[:k].tolist())
    kept_pos = [i for i in range(p) if i in keep]
    kept_neg = [j for j in range(n) if p + j in keep]
    return dataclasses.replace(
        group,
        positives=tuple(group.positives[i] for i in kept_pos),
        negatives=tuple(group.negatives[j] for j in kept_neg),
        tau_values=tuple(group.tau_values[i] for i in kept_pos),
    )


def pretrain_loss(log_probs: np.ndarray, labels, label_count: int) -> PretrainLossOutput:
    """Mean negative log-likelihood over per-label present/absent heads.

    ``log_probs`` is an (l, 2) array of log-softmax pairs with column 0 the
    log-probability that the label is present. Gradients are returned with
    respect to the pre-softmax logits: (softmax - onehot) / l.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.shape != (label_count, 2):
        raise ContractError(f"expected log-probs of shape ({label_count}, 2), got {lp.shape}")
    probs = np.exp(lp)
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ContractError(f"row {bad} is not a log-softmax pair (exp-sum {sums[bad]:.12f})")

    present = np.zeros(label_count, dtype=bool)
    for lab in labels:
        present[lab] = True
    truth_col = np.where(present, 0, 1)
    value = -float(np.mean(lp[np.arange(label_count), truth_col]))

    onehot = np.zeros_like(lp)
    onehot[np.arange(label_count), truth_col] = 1.0
    grads = (probs - onehot) / label_count
    return PretrainLossOutput(value, grads)
