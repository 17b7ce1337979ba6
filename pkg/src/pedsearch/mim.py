"""Masked image modeling with optional text guidance.

Training-only auxiliary task: zero out a random subset of patches, encode the
masked image, inject query-text cues into the visual tokens through one
multi-head cross attention layer, fuse with a short self-attention stack, and
predict raw pixels with a per-position projection followed by pixel shuffle.
The loss is the per-patch mean absolute error, averaged over masked patches
only. A text-free variant (cross attention skipped) exists for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .encoders import EncoderConfig, patchify
from .errors import ConfigError, ContractError
from .tensor import Tensor

VARIANTS = ("text_guided", "text_free")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class PatchMask:
    """Boolean per-patch flags (True = masked) plus the ratio that made them."""

    flags: np.ndarray
    ratio: float

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)
        expected = _round_half_up(self.ratio * self.flags.size)
        if int(self.flags.sum()) != expected:
            raise ContractError(
                f"mask has {int(self.flags.sum())} set flags, ratio {self.ratio} "
                f"over {self.flags.size} patches implies {expected}"
            )

    @property
    def count(self) -> int:
        return int(self.flags.sum())


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> PatchMask:
    """Mask exactly round(ratio * N) distinct patches, uniformly."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"masking ratio must be in [0, 1], got {ratio}")
    count = _round_half_up(ratio * n_patches)
    flags = np.zeros(n_patches, dtype=bool)
    if count:
        flags[rng.choice(n_patches, size=count, replace=False)] = True
    return PatchMask(flags=flags, ratio=ratio)


def sample_mask_batch(batch: int, n_patches: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_mask(n_patches, ratio, rng).flags for _ in range(batch)])


class CrossAttentionWeights(nn.Module):
    """Per-head query/key/value projections plus the output projection.

    Stored as combined (d, d) matrices; head i owns the column slice
    [i*d_h, (i+1)*d_h), identical to holding H separate (d, d_h) matrices.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"cross-attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.dim = dim
        self.w_q = nn.parameter(nn.normal_init(rng, (dim, dim), 0.02, dtype))
        self.w_k = nn.parameter(nn.normal_init(rng, (dim, dim), 0.02, dtype))
        self.w_v = nn.parameter(nn.normal_init(rng, (dim, dim), 0.02, dtype))
        self.w_o = nn.parameter(nn.normal_init(rng, (dim, dim), 0.02, dtype))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def head_slices(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Numpy views of head i's (d, d_h) projections, for oracle checks."""
        s = slice(i * self.head_dim, (i + 1) * self.head_dim)
        return self.w_q.data[:, s], self.w_k.data[:, s], self.w_v.data[:, s]


def cross_attention(queries: Tensor, context: Tensor, weights: CrossAttentionWeights,
                    scale_by_head_dim: bool = False) -> Tensor:
    """Multi-head cross attention: visual tokens query text keys/values.

    Per head: softmax(q_proj . k_proj^T / scale) @ v_proj, heads concatenated
    and projected. The score scale divides by sqrt(d) of the full width by
    default; ``scale_by_head_dim`` switches to the per-head sqrt(d_h)
    convention.
    """
    if queries.shape[-1] != weights.dim or context.shape[-1] != weights.dim:
        raise ContractError(
            f"cross attention width mismatch: queries {queries.shape}, "
            f"context {context.shape}, weights dim {weights.dim}"
        )
    squeeze = queries.ndim == 2
    if squeeze:
        queries = T.reshape(queries, (1,) + queries.shape)
        context = T.reshape(context, (1,) + context.shape)
    h = weights.heads
    scale = 1.0 / np.sqrt(weights.head_dim if scale_by_head_dim else weights.dim)
    q = nn.split_heads(T.matmul(queries, weights.w_q), h)
    k = nn.split_heads(T.matmul(context, weights.w_k), h)
    v = nn.split_heads(T.matmul(context, weights.w_v), h)
    scores = T.mul(T.matmul(q, T.permute(k, (0, 1, 3, 2))),
                   T.tensor(np.asarray(scale, dtype=queries.dtype)))
    mixed = nn.merge_heads(T.matmul(T.softmax(scores, axis=-1), v))
    out = T.matmul(mixed, weights.w_o)
    return T.reshape(out, out.shape[1:]) if squeeze else out


class ReconstructionHead(nn.Module):
    """Cross-attention enhancement, fusion encoder, and the pixel decoder."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator,
                 heads: int | None = None, fusion_depth: int = 4,
                 scale_by_head_dim: bool = False, dtype=np.float32):
        self.config = config
        self.scale_by_head_dim = scale_by_head_dim
        self.ln_q = nn.LayerNorm(config.d, dtype)
        self.ln_kv = nn.LayerNorm(config.d, dtype)
        self.mca = CrossAttentionWeights(config.d, heads or config.heads, rng, dtype)
        self.fusion = [nn.TransformerBlock(config.d, config.heads, rng, dtype)
                       for _ in range(fusion_depth)]
        out_dim = config.channels * config.patch * config.patch
        self.decoder = nn.Linear(config.d, out_dim, rng, dtype)

    def enhance(self, visual_seq: Tensor, text_seq: Tensor | None, variant: str) -> Tensor:
        """Residual cross-attention enhancement; identity for the text-free variant."""
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        if variant == "text_free":
            return visual_seq
        if text_seq is None:
            raise ContractError("text_guided variant needs text features")
        return T.add(visual_seq,
                     cross_attention(self.ln_q(visual_seq), self.ln_kv(text_seq),
                                     self.mca, self.scale_by_head_dim))

    def fuse(self, enhanced: Tensor) -> Tensor:
        for block in self.fusion:
            enhanced = block(enhanced)
        return enhanced

    def predict_pixels(self, fused_locals: Tensor) -> Tensor:
        """(B, N, d) token features to (B, C, H, W) pixel predictions."""
        cfg = self.config
        b, n, _ = fused_locals.shape
        gh, gw = cfg.image_h // cfg.patch, cfg.image_w // cfg.patch
        if n != gh * gw:
            raise ContractError(f"{n} tokens cannot tile a {gh}x{gw} patch grid")
        cells = self.decoder(fused_locals)                      # (B, N, C*P*P)
        grid = T.permute(T.reshape(cells, (b, gh, gw, cells.shape[-1])), (0, 3, 1, 2))
        return T.pixel_shuffle(grid, cfg.patch)

    def __call__(self, visual_seq: Tensor, text_seq: Tensor | None,
                 variant: str = "text_guided") -> Tensor:
        fused = self.fuse(self.enhance(visual_seq, text_seq, variant))
        return self.predict_pixels(fused[:, 1:])               # drop the CLS position


@dataclass
class ReconstructionOutput:
    predicted: Tensor
    per_patch_loss: Tensor


def reconstruction_loss(predicted: Tensor, target: Tensor | np.ndarray,
                        masks: np.ndarray, patch: int) -> tuple[Tensor, Tensor]:
    """Mean absolute pixel error per patch, averaged over masked patches.

    Returns (scalar loss, per-patch loss matrix). Unmasked patches contribute
    nothing to the scalar; with no masked patch the loss is defined as 0.
    """
    tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=predicted.dtype))
    if predicted.shape != tgt.shape:
        raise ContractError(f"prediction shape {predicted.shape} != target {tgt.shape}")
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    diff = T.absolute(T.sub(predicted, tgt))
    per_patch = T.mean(patchify(diff, patch), axis=-1)          # (B, N)
    n_masked = int(masks.sum())
    if n_masked == 0:
        zero = T.tensor(np.zeros((), dtype=predicted.dtype))
        return zero, per_patch
    weights = masks.astype(predicted.dtype) / n_masked
    loss = T.sum_(T.mul(per_patch, Tensor(weights)))
    return loss, per_patch
