"""Cross-modal projection matching loss, total objective, inference ranking.

CMPM pulls the row-softmax of cross-modal feature cosines toward the
normalised identity-match distribution, in both directions. At inference the
only cross-modal computation is the plain cosine similarity matrix between
text queries and gallery images.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, TrainingAbort
from .tensor import Tensor

FEATURE_MAGIC = b"VFET"
FEATURE_VERSION = 1
NORM_FLOOR = 1e-12


@dataclass
class AlignmentBatch:
    """Paired image/text global features with identity-level match labels."""

    image_globals: Tensor     # (B, d_out)
    text_globals: Tensor      # (B, d_out)
    y: np.ndarray             # (B, B), y[i, j] = 1 iff same identity

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        b = self.y.shape[0]
        if self.y.shape != (b, b):
            raise ContractError(f"match labels must be square, got {self.y.shape}")
        if not np.all(np.diag(self.y) == 1.0):
            raise ContractError("each image must match its own caption (diagonal ones)")


def cmpm_direction(anchors: Tensor, candidates: Tensor, y: np.ndarray,
                   tau: float, eps: float = 1e-8) -> Tensor:
    """One direction of the projection matching loss.

    p = row softmax of cosine(anchors, candidates)/tau; per-anchor loss is
    (1/B) sum_j p * log(p / (q + eps)) with q the row-normalised labels, and
    the direction loss averages the per-anchor losses with a second 1/B.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if anchors.shape != candidates.shape:
        raise ContractError(
            f"feature matrices disagree: {anchors.shape} vs {candidates.shape}"
        )
    b = anchors.shape[0]
    y = np.asarray(y, dtype=np.float64)
    q = y / y.sum(axis=1, keepdims=True)
    cos = T.cosine_matrix(anchors, candidates, floor=NORM_FLOOR)
    p = T.softmax(T.div(cos, T.tensor(np.asarray(tau, dtype=anchors.dtype))), axis=-1)
    log_q = np.log(q.astype(anchors.dtype) + eps)
    kl = T.mul(p, T.sub(T.log(p), Tensor(log_q)))
    return T.div(T.sum_(kl), T.tensor(np.asarray(float(b * b), dtype=anchors.dtype)))


def cmpm_loss(batch: AlignmentBatch, tau: float, eps: float = 1e-8) -> tuple[Tensor, Tensor, Tensor]:
    """Both directions of the loss: returns (total, image_to_text, text_to_image)."""
    i2t = cmpm_direction(batch.image_globals, batch.text_globals, batch.y, tau, eps)
    t2i = cmpm_direction(batch.text_globals, batch.image_globals, batch.y.T, tau, eps)
    return T.add(i2t, t2i), i2t, t2i


@dataclass
class LossBreakdown:
    """Per-term scalars for one step or one epoch."""

    mim: float = 0.0
    calibration: float = 0.0
    cmpm: float = 0.0
    i2t: float = 0.0
    t2i: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in vars(self).items()}


def total_loss(parts: dict[str, Tensor], weights: dict[str, float] | None = None) -> Tensor:
    """Weighted sum of enabled loss terms (unit weights by default).

    A non-finite part aborts training, naming the offending term.
    """
    if not parts:
        raise ContractError("total_loss needs at least one term")
    total = None
    for name, term in parts.items():
        value = term.item()
        if not np.isfinite(value):
            raise TrainingAbort(name)
        w = 1.0 if weights is None else float(weights.get(name, 1.0))
        weighted = term if w == 1.0 else T.mul(term, T.tensor(np.asarray(w, dtype=term.dtype)))
        total = weighted if total is None else T.add(total, weighted)
    return total


def similarity_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine similarity of every query row against every gallery row."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), NORM_FLOOR)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), NORM_FLOOR)
    return qn @ gn.T


# -- feature dump for offline evaluation --------------------------------------


def write_features(path, features: np.ndarray, meta: list[dict]) -> None:
    """Binary feature dump plus JSONL sidecar.

    Layout: magic "VFET", u32 version, u32 count, u32 dim, then row-major
    float32 values. The sidecar at ``<path>.jsonl`` holds one object per row:
    {"index", "person_id", "modality"}.
    """
    feats = np.ascontiguousarray(np.asarray(features, dtype=np.float32))
    if feats.ndim != 2:
        raise ContractError(f"features must be 2-d, got shape {feats.shape}")
    if len(meta) != feats.shape[0]:
        raise ContractError(f"{len(meta)} meta rows for {feats.shape[0]} features")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, feats.shape[0], feats.shape[1]))
        fh.write(feats.tobytes())
    with open(path.with_suffix(path.suffix + ".jsonl"), "w", encoding="utf-8") as fh:
        for i, row in enumerate(meta):
            fh.write(json.dumps({"index": i, "person_id": int(row["person_id"]),
                                 "modality": row["modality"]}) + "\n")


def read_features(path) -> tuple[np.ndarray, list[dict]]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise ContractError(f"bad feature file magic {magic!r}")
        version, count, dim = struct.unpack("<III", fh.read(12))
        if version != FEATURE_VERSION:
            raise ContractError(f"unsupported feature file version {version}")
        feats = np.frombuffer(fh.read(count * dim * 4), dtype="<f4").reshape(count, dim)
    meta = []
    with open(path.with_suffix(path.suffix + ".jsonl"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                meta.append(json.loads(line))
    return feats.copy(), meta
