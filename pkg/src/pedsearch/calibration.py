"""Identity-supervised calibration of global visual features.

Training-only auxiliary task: sample a set of images from the batch, predict
pairwise identity-match probabilities from feature cosines, and pull that
distribution toward the label-matching distribution with a KL objective.
Classification (cross-entropy over identities) and batch-hard triplet losses
are provided as the comparison baselines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

log = logging.getLogger(__name__)


def pair_labels(pids: np.ndarray) -> np.ndarray:
    """y[i, j] = 1 iff i and j share an identity; the diagonal is always 1."""
    pids = np.asarray(pids)
    return (pids[:, None] == pids[None, :]).astype(np.float64)


def match_targets(y: np.ndarray) -> np.ndarray:
    """Row-normalised label matrix q = y / row-sum; rows are valid because
    every sample matches itself."""
    return y / y.sum(axis=1, keepdims=True)


@dataclass
class IdentitySampleSet:
    """Sampled features with pair labels for one calibration step."""

    features: Tensor          # (C, d)
    pids: np.ndarray          # (C,)
    y: np.ndarray             # (C, C)

    def __post_init__(self):
        self.pids = np.asarray(self.pids)
        expected = pair_labels(self.pids)
        if not np.array_equal(self.y, expected):
            raise ContractError("pair labels inconsistent with pids")


def sample_pairs(features: Tensor, pids: np.ndarray, count: int,
                 rng: np.random.Generator) -> IdentitySampleSet:
    """Draw ``count`` anchors without replacement, identity-stratified.

    When the batch holds at least one same-identity pair, the sample is
    guaranteed to contain one, so some anchor has a non-self positive.
    """
    pids = np.asarray(pids)
    batch = len(pids)
    if batch < 2:
        raise ConfigError("pair sampling needs a batch of at least 2")
    if count > batch:
        raise ConfigError(f"cannot sample {count} anchors from a batch of {batch}")
    chosen = rng.choice(batch, size=count, replace=False)
    if count >= 2:
        sampled_pids = pids[chosen]
        if not _has_positive_pair(sampled_pids) and _has_positive_pair(pids):
            # swap two slots for a same-identity pair from the batch
            values, counts = np.unique(pids, return_counts=True)
            dup = values[counts >= 2][0]
            pair_idx = np.flatnonzero(pids == dup)[:2]
            keep = [i for i in chosen if i not in pair_idx][: count - 2]
            chosen = np.array(list(pair_idx) + keep)
            chosen = chosen[rng.permutation(count)]
    sub_pids = pids[chosen]
    return IdentitySampleSet(
        features=T.gather_rows(features, chosen),
        pids=sub_pids,
        y=pair_labels(sub_pids),
    )


def _has_positive_pair(pids: np.ndarray) -> bool:
    return len(np.unique(pids)) < len(pids)


def match_probabilities(features: Tensor, tau: float) -> Tensor:
    """Row softmax of pairwise feature cosines divided by ``tau``.

    The diagonal (cosine 1) is included in the normalisation. Zero-norm
    features are guarded by the cosine norm floor.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    cos = T.cosine_matrix(features, features)
    return T.softmax(T.div(cos, T.tensor(np.asarray(tau, dtype=features.dtype))), axis=-1)


@dataclass
class MatchDistribution:
    p: Tensor                 # (C, C) predicted, rows sum to 1
    q: np.ndarray             # (C, C) ground truth, rows sum to 1
    tau: float

    def __post_init__(self):
        p = self.p.data if isinstance(self.p, Tensor) else np.asarray(self.p)
        if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
            raise ContractError("predicted match probabilities must be row-stochastic")
        if np.abs(self.q.sum(axis=1) - 1.0).max() > 1e-12:
            raise ContractError("target match probabilities must be row-stochastic")


def kl_match_loss(p: Tensor, q: np.ndarray, eps: float = 1e-8) -> Tensor:
    """(1/C) * sum_ij p_ij * log(p_ij / (q_ij + eps))."""
    c = p.shape[0]
    log_q = np.log(np.asarray(q, dtype=p.dtype) + eps)
    kl = T.mul(p, T.sub(T.log(p), Tensor(log_q)))
    return T.div(T.sum_(kl), T.tensor(np.asarray(float(c), dtype=p.dtype)))


def calibration_loss(sample: IdentitySampleSet, tau: float, eps: float = 1e-8) -> Tensor:
    return kl_match_loss(match_probabilities(sample.features, tau),
                         match_targets(sample.y), eps)


def identity_ce_loss(features: Tensor, pids: np.ndarray,
                     weight: Tensor, bias: Tensor) -> Tensor:
    """Cross-entropy of an identity classification head (ablation baseline)."""
    pids = np.asarray(pids)
    n_classes = weight.shape[1]
    if pids.min() < 0 or pids.max() >= n_classes:
        raise ContractError(
            f"pid range [{pids.min()}, {pids.max()}] outside classifier width {n_classes}"
        )
    logits = T.add(T.matmul(features, weight), bias)
    shift = logits.data.max(axis=1, keepdims=True)              # detached max
    shifted = T.sub(logits, Tensor(shift))
    log_norm = T.log(T.sum_(T.exp(shifted), axis=1))
    true_logit = T.take_pairs(shifted, np.arange(len(pids)), pids)
    return T.mean(T.sub(log_norm, true_logit))


def batch_hard_triplet_loss(features: Tensor, pids: np.ndarray,
                            margin: float = 0.2) -> Tensor:
    """Batch-hard triplet loss on cosine distance (ablation baseline).

    For each anchor with at least one non-self positive and one negative,
    hinge on (hardest positive distance - hardest negative distance + margin).
    """
    pids = np.asarray(pids)
    dist = T.sub(T.tensor(np.asarray(1.0, dtype=features.dtype)),
                 T.cosine_matrix(features, features))
    same = pids[:, None] == pids[None, :]
    pos_mask = same & ~np.eye(len(pids), dtype=bool)
    neg_mask = ~same
    anchors = np.flatnonzero(pos_mask.any(axis=1) & neg_mask.any(axis=1))
    if anchors.size == 0:
        log.warning("triplet loss: batch has no valid (anchor, positive, negative) triple")
        return T.tensor(np.zeros((), dtype=features.dtype))
    d = dist.data
    hard_pos = np.array([np.flatnonzero(pos_mask[a])[np.argmax(d[a, pos_mask[a]])] for a in anchors])
    hard_neg = np.array([np.flatnonzero(neg_mask[a])[np.argmin(d[a, neg_mask[a]])] for a in anchors])
    gap = T.sub(T.take_pairs(dist, anchors, hard_pos), T.take_pairs(dist, anchors, hard_neg))
    hinge = T.clamp_min(T.add(gap, T.tensor(np.asarray(margin, dtype=features.dtype))), 0.0)
    return T.mean(hinge)
