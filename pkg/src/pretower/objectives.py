"""Training losses and offline ranking metrics.

The click loss squashes unbounded model logits through a sigmoid and clamps
probabilities to [1e-7, 1 - 1e-7] before the log. The contrastive term is an
in-batch InfoNCE over the positively labeled instances: for each positive
(user, item) pair the denominator runs over every item in the batch,
including the pair's own item, so a singleton batch contributes exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, MetricError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lambda1: float  # contrastive weight
    lambda2: float  # L2 weight over weight matrices
    tau: float  # InfoNCE temperature

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self}")


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 1 or labels.size < 1:
        raise DataError(f"labels must be a non-empty vector, got shape {labels.shape}")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise DataError("labels must all be 0 or 1")
    return labels


def ctr_loss(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    labels = _check_labels(labels)
    if logits.shape != labels.shape:
        raise DataError(f"logits shape {logits.shape} does not match labels shape {labels.shape}")
    p = T.clip(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = T.Tensor(labels)
    y_neg = T.Tensor(1.0 - labels)
    pos_term = T.mul(y, T.log(p))
    neg_term = T.mul(y_neg, T.log(T.shift(T.scale(p, -1.0), 1.0)))
    return T.scale(T.reduce_mean(T.add(pos_term, neg_term)), -1.0)


def cir_loss(m_user: T.Tensor, m_item: T.Tensor, labels: np.ndarray, config: LossConfig) -> T.Tensor:
    """In-batch InfoNCE over positive pairs on cosine similarity / tau.

    Returns an exact 0 for a batch without positives, and for a batch of one
    positive pair (the denominator equals the numerator).
    """
    labels = _check_labels(labels)
    if m_user.ndim != 2 or m_user.shape != m_item.shape:
        raise DataError(
            f"representations must be matching (B, D) matrices, got {m_user.shape} and {m_item.shape}"
        )
    positives = np.flatnonzero(labels == 1.0)
    if positives.size == 0:
        return T.Tensor(0.0)
    batch = len(labels)
    u = T.l2_normalize(m_user, axis=1)
    v = T.l2_normalize(m_item, axis=1)
    sims = T.scale(T.matmul(u, T.transpose(v)), 1.0 / config.tau)
    rows = T.gather_rows(sims, positives)  # (P, B)
    own = np.zeros((positives.size, batch))
    own[np.arange(positives.size), positives] = 1.0
    numer = T.reduce_sum(T.mul(rows, T.Tensor(own)), axis=1)
    # log-sum-exp with max subtraction; the max's argmax routing cancels out
    row_max = T.reduce_max(rows, axis=1)
    spread = T.repeat_cols(T.reshape(row_max, (positives.size, 1)), batch)
    lse = T.add(row_max, T.log(T.reduce_sum(T.exp(T.add(rows, T.scale(spread, -1.0))), axis=1)))
    return T.reduce_mean(T.add(lse, T.scale(numer, -1.0)))


def l2_penalty(weights: Sequence[T.Tensor]) -> T.Tensor:
    """Squared Euclidean norm summed over the given tensors."""
    total = T.Tensor(0.0)
    for w in weights:
        total = T.add(total, T.reduce_sum(T.mul(w, w)))
    return total


def total_loss(
    logits: T.Tensor,
    m_user: T.Tensor | None,
    m_item: T.Tensor | None,
    labels: np.ndarray,
    weights: Sequence[T.Tensor],
    config: LossConfig,
) -> tuple[T.Tensor, T.Tensor, T.Tensor | None]:
    """Weighted sum of click loss, contrastive loss, and L2 penalty.

    Returns (total, click term, contrastive term or None). With both lambdas
    at zero the total IS the click term, bit for bit.
    """
    ctr = ctr_loss(logits, labels)
    total = ctr
    cir = None
    if config.lambda1 > 0.0 and m_user is not None and m_item is not None:
        cir = cir_loss(m_user, m_item, labels, config)
        total = T.add(total, T.scale(cir, config.lambda1))
    if config.lambda2 > 0.0 and weights:
        total = T.add(total, T.scale(l2_penalty(weights), config.lambda2))
    return total, ctr, cir


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    auc: float
    logloss: float
    relaimpr_vs_base: float | None = None

    def as_dict(self) -> dict:
        return {"auc": self.auc, "logloss": self.logloss, "relaimpr_vs_base": self.relaimpr_vs_base}


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC; tied scores contribute 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(np.asarray(labels))
    if scores.shape != labels.shape:
        raise MetricError(f"scores shape {scores.shape} does not match labels shape {labels.shape}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    avg_rank = starts + (counts + 1) / 2.0  # 1-based average rank per distinct score
    ranks = avg_rank[inverse]
    pos_rank_sum = ranks[labels == 1.0].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of clamped probabilities."""
    labels = _check_labels(np.asarray(labels))
    p = np.clip(np.asarray(probabilities, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def relaimpr(measure_auc: float, base_auc: float) -> float:
    """Relative AUC improvement over a base model, in percent, against the
    0.5 random-guess floor."""
    if base_auc == 0.5:
        raise MetricError("relaimpr is undefined for a base AUC of exactly 0.5")
    return ((measure_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def evaluate(logits: np.ndarray, labels: np.ndarray, base_auc: float | None = None) -> Metrics:
    """Score a model's raw logits: AUC, logloss on sigmoid outputs, and the
    relative improvement when a base AUC is supplied."""
    probs = sigmoid_np(logits)
    a = auc(np.asarray(logits), labels)
    rel = relaimpr(a, base_auc) if base_auc is not None else None
    return Metrics(auc=a, logloss=logloss(probs, labels), relaimpr_vs_base=rel)
