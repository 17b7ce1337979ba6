"""Retrieval and diagnostic metrics.

Ranking metrics break similarity ties by ascending gallery index so results
are reproducible. Each metric has a brute-force oracle in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

GroundTruth = list  # per query: collection of relevant gallery indices


def mask_flags(mask) -> np.ndarray:
    """Boolean flags from a PatchMask or a plain array/sequence.

    ndarray inputs pass through untouched (numpy arrays expose an unrelated
    ``flags`` attribute, so duck-typing on the name would misfire).
    """
    if isinstance(mask, (np.ndarray, list, tuple)):
        return np.asarray(mask, dtype=bool)
    return np.asarray(mask.flags, dtype=bool)


def _ranking(sim: np.ndarray) -> np.ndarray:
    """Descending-similarity order per query; ties keep ascending index."""
    return np.argsort(-sim, axis=1, kind="stable")


def _validate(sim: np.ndarray, gt: GroundTruth) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[1] == 0:
        raise ContractError(f"similarity matrix must be (Q, G) with G >= 1, got {sim.shape}")
    if len(gt) != sim.shape[0]:
        raise ContractError(f"{len(gt)} ground-truth rows for {sim.shape[0]} queries")
    for i, rel in enumerate(gt):
        if len(rel) == 0:
            raise ContractError(f"query {i} has no relevant gallery item")
    return sim


def rank_k(sim: np.ndarray, gt: GroundTruth, k: int) -> float:
    """Percentage of queries with a relevant item in the top-k results."""
    sim = _validate(sim, gt)
    if not 1 <= k <= sim.shape[1]:
        raise ContractError(f"k={k} outside gallery size {sim.shape[1]}")
    order = _ranking(sim)
    hits = 0
    for i, rel in enumerate(gt):
        rel_set = set(int(r) for r in rel)
        if any(int(j) in rel_set for j in order[i, :k]):
            hits += 1
    return 100.0 * hits / sim.shape[0]


def mean_average_precision(sim: np.ndarray, gt: GroundTruth) -> float:
    """Mean over queries of average precision across relevant items, x100."""
    sim = _validate(sim, gt)
    order = _ranking(sim)
    aps = []
    for i, rel in enumerate(gt):
        rel_set = set(int(r) for r in rel)
        found = 0
        precisions = []
        for rank, j in enumerate(order[i], start=1):
            if int(j) in rel_set:
                found += 1
                precisions.append(found / rank)
        aps.append(sum(precisions) / len(rel_set))
    return 100.0 * float(np.mean(aps))


def silhouette(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette value (b - a) / max(a, b) under Euclidean distance.

    Points in singleton classes score 0; when a point has a == b == 0 the
    ratio is defined as 0.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ContractError("silhouette needs at least two identity classes")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    scores = np.zeros(len(x))
    for i in range(len(x)):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own < 2:
            continue                                  # singleton convention: 0
        a = dist[i, own].sum() / (n_own - 1)          # excludes the zero self-distance
        b = min(dist[i, labels == c].mean() for c in classes if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def avg_dist(predicted: np.ndarray, mask, original: np.ndarray) -> float:
    """Mean |predicted masked pixel - value of the nearest visible pixel|.

    Nearest is by Euclidean pixel distance to any pixel inside an unmasked
    patch; ties resolve to the smallest row, then smallest column.
    """
    value, _ = avg_dist_table(predicted, mask, original)
    return value


def avg_dist_table(predicted: np.ndarray, mask, original: np.ndarray):
    """As :func:`avg_dist`, also returning the raw per-pixel difference table.

    The table is an (H, W) array holding, for masked pixels, the per-pixel
    absolute difference averaged over channels, and NaN elsewhere, so
    alternative readings of the aggregate can be recomputed.
    """
    pred = np.asarray(predicted, dtype=np.float64)
    orig = np.asarray(original, dtype=np.float64)
    if pred.shape != orig.shape or pred.ndim != 3:
        raise ContractError(f"image shapes disagree: {pred.shape} vs {orig.shape}")
    flags = np.asarray(mask_flags(mask), dtype=bool)
    _, h, w = pred.shape
    n = flags.size
    patch = math.isqrt(h * w // n)
    if patch * patch * n != h * w or h % patch or w % patch:
        raise ContractError(f"{n} patches cannot tile a {h}x{w} image")
    if flags.all() or not flags.any():
        raise ContractError("mask must leave at least one patch masked and one visible")

    gh, gw = h // patch, w // patch
    pix_masked = np.repeat(np.repeat(flags.reshape(gh, gw), patch, 0), patch, 1)
    vis_r, vis_c = np.nonzero(~pix_masked)            # row-major: sorted by (row, col)
    mr, mc = np.nonzero(pix_masked)
    d2 = (mr[:, None] - vis_r[None, :]) ** 2 + (mc[:, None] - vis_c[None, :]) ** 2
    nearest = np.argmin(d2, axis=1)                   # first minimum = (row, col) tie-break
    ref = orig[:, vis_r[nearest], vis_c[nearest]]     # (C, n_masked)
    diff = np.abs(pred[:, mr, mc] - ref)
    table = np.full((h, w), np.nan)
    table[mr, mc] = diff.mean(axis=0)
    return float(diff.mean()), table


@dataclass
class MetricsReport:
    """Retrieval scores plus diagnostics for one evaluation run."""

    rank1: float
    rank5: float
    rank10: float
    map: float
    silhouette: float
    avg_dist: float | None = None
    loss_curve: list = field(default_factory=list)

    def __post_init__(self):
        if not (self.rank1 <= self.rank5 <= self.rank10 <= 100.0 + 1e-9):
            raise ContractError("rank-k values must be non-decreasing in k and <= 100")
        if not (0.0 <= self.map <= 100.0 + 1e-9):
            raise ContractError(f"mAP {self.map} outside [0, 100]")

    def to_json(self) -> str:
        d = dict(vars(self))
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    MARKDOWN_HEADER = ("| run | Rank-1 | Rank-5 | Rank-10 | mAP | silhouette | avgDist |\n"
                       "|---|---|---|---|---|---|---|")

    def markdown_row(self, label: str) -> str:
        ad = "-" if self.avg_dist is None else f"{self.avg_dist:.4f}"
        return (f"| {label} | {self.rank1:.2f} | {self.rank5:.2f} | {self.rank10:.2f} "
                f"| {self.map:.2f} | {self.silhouette:.4f} | {ad} |")


def markdown_table(rows: list[tuple[str, "MetricsReport | None"]]) -> str:
    lines = [MetricsReport.MARKDOWN_HEADER]
    for label, report in rows:
        if report is None:
            lines.append(f"| {label} | failed | failed | failed | failed | failed | failed |")
        else:
            lines.append(report.markdown_row(label))
    return "\n".join(lines)
