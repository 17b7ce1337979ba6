"""Text and image encoders producing global and local features.

Both encoders are small pre-norm transformers. The text side runs over word
embeddings of a fixed-length token sequence (SOS + up to M words + EOS, then
zero padding) with PAD keys masked out of attention; the image side runs
ViT-style over non-overlapping patch projections with a learnable CLS token.
The global feature of each modality is a bias-true fully connected projection
of the EOS-position (text) or CLS-position (image) output.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

PAD_ID = 0
UNK_ID = 1
SOS_ID = 2
EOS_ID = 3
SPECIALS = ("<pad>", "<unk>", "<sos>", "<eos>")

_WORD_RE = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Word-level vocabulary; line number in the file is the token id."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise ConfigError(f"vocabulary must start with specials {SPECIALS}")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_corpus(cls, texts) -> "Vocabulary":
        words = sorted({w for text in texts for w in _WORD_RE.findall(text.lower())})
        return cls(list(SPECIALS) + words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


@dataclass
class TokenSequence:
    """Fixed-length id sequence: SOS, up to M words, EOS, zero padding."""

    ids: np.ndarray
    real_length: int
    eos_index: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids[0] != SOS_ID:
            raise ContractError("token sequence must start with SOS")
        if not (0 < self.eos_index < len(self.ids)):
            raise ContractError(f"eos_index {self.eos_index} out of range for length {len(self.ids)}")
        if self.ids[self.eos_index] != EOS_ID:
            raise ContractError("eos_index does not point at EOS")


def tokenize(text: str, vocab: Vocabulary, max_words: int) -> TokenSequence:
    """Lowercase, split on non-alphanumerics, map to ids, truncate, frame."""
    words = _WORD_RE.findall(text.lower())[:max_words]
    ids = np.zeros(max_words + 2, dtype=np.int64)
    ids[0] = SOS_ID
    for i, w in enumerate(words):
        ids[1 + i] = vocab.index.get(w, UNK_ID)
    eos = 1 + len(words)
    ids[eos] = EOS_ID
    return TokenSequence(ids=ids, real_length=eos + 1, eos_index=eos)


@dataclass
class EncoderConfig:
    """Geometry of both towers; desk-scale by default, paper-scale expressible."""

    d: int = 64
    layers: int = 2
    heads: int = 4
    patch: int = 8
    image_h: int = 64
    image_w: int = 32
    channels: int = 3
    text_len: int = 16
    vocab_size: int = 64
    d_out: int = 64

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}"
            )
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")

    @property
    def n_patches(self) -> int:
        return (self.image_h * self.image_w) // (self.patch * self.patch)


@dataclass
class FeatureBundle:
    """One global vector plus the per-token local matrix for one modality.

    ``sequence`` keeps the full final-layer hidden states (CLS/SOS/EOS
    positions included); the masked-reconstruction head consumes it.
    Arrays carry a leading batch axis when produced by the batched path.
    """

    global_feat: Tensor
    local_feats: Tensor
    modality: str
    sequence: Tensor = field(repr=False, default=None)


def patchify(images: Tensor | np.ndarray, patch: int) -> Tensor:
    """Cut (B, C, H, W) or (C, H, W) into rows of row-major (P, P, C) patches.

    Patch order is row-major over the (H/P, W/P) grid; each row flattens one
    patch with (row, col, channel) varying fastest to slowest reversed.
    """
    t = images if isinstance(images, Tensor) else Tensor(images)
    squeeze = t.ndim == 3
    if squeeze:
        t = T.reshape(t, (1,) + t.shape)
    b, c, h, w = t.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    t = T.reshape(t, (b, c, gh, patch, gw, patch))
    t = T.permute(t, (0, 2, 4, 3, 5, 1))  # (B, gh, gw, P, P, C)
    t = T.reshape(t, (b, gh * gw, patch * patch * c))
    return T.reshape(t, t.shape[1:]) if squeeze else t


class TextEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.token_emb = nn.Embedding(config.vocab_size, config.d, rng, dtype)
        self.pos_emb = nn.parameter(nn.normal_init(rng, (config.text_len + 2, config.d), 0.02, dtype))
        self.blocks = [nn.TransformerBlock(config.d, config.heads, rng, dtype)
                       for _ in range(config.layers)]
        self.ln_final = nn.LayerNorm(config.d, dtype)
        self.proj = nn.Linear(config.d, config.d_out, rng, dtype)

    def _run(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        # ids may be shorter than text_len+2; the positional table is sliced
        # to match, so encoding with pads stripped reuses the same weights.
        seq_len = ids.shape[1]
        x = T.add(self.token_emb(ids), self.pos_emb[:seq_len])
        valid = np.arange(seq_len)[None, :] < lengths[:, None]
        bias = nn.key_mask_bias(valid, self.dtype)
        for block in self.blocks:
            x = block(x, bias)
        return self.ln_final(x)

    def encode_batch(self, ids: np.ndarray, lengths: np.ndarray, eos_idx: np.ndarray) -> FeatureBundle:
        ids = np.asarray(ids)
        if np.any(np.asarray(eos_idx) >= ids.shape[1]):
            raise ContractError("eos index out of range")
        seq = self._run(ids, np.asarray(lengths))
        global_feat = self.proj(T.take_rows(seq, np.asarray(eos_idx)))
        local_feats = seq[:, 1:self.config.text_len + 1]
        return FeatureBundle(global_feat, local_feats, "text", seq)

    def encode(self, tokens: TokenSequence) -> FeatureBundle:
        b = self.encode_batch(tokens.ids[None], np.array([tokens.real_length]),
                              np.array([tokens.eos_index]))
        return FeatureBundle(b.global_feat[0], b.local_feats[0], "text", b.sequence[0])


class ImageEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        in_dim = config.channels * config.patch * config.patch
        self.patch_proj = nn.Linear(in_dim, config.d, rng, dtype)
        self.cls_token = nn.parameter(nn.normal_init(rng, (config.d,), 0.02, dtype))
        self.pos_emb = nn.parameter(nn.normal_init(rng, (config.n_patches + 1, config.d), 0.02, dtype))
        self.blocks = [nn.TransformerBlock(config.d, config.heads, rng, dtype)
                       for _ in range(config.layers)]
        self.ln_final = nn.LayerNorm(config.d, dtype)
        self.proj = nn.Linear(config.d, config.d_out, rng, dtype)

    def encode_batch(self, images: Tensor | np.ndarray, patch_masks: np.ndarray | None = None) -> FeatureBundle:
        """Encode (B, C, H, W) images; masked patches are zeroed before projection."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        b = x.shape[0]
        n = self.config.n_patches
        if patch_masks is not None:
            patch_masks = np.asarray(patch_masks, dtype=bool)
            if patch_masks.shape != (b, n):
                raise ContractError(
                    f"patch mask shape {patch_masks.shape} does not match (batch, {n})"
                )
            keep = ~pixel_mask(patch_masks, self.config)
            x = T.mul(x, Tensor(keep.astype(self.dtype)))
        tokens = self.patch_proj(patchify(x, self.config.patch))
        cls = T.broadcast_to(T.reshape(self.cls_token, (1, 1, self.config.d)),
                             (b, 1, self.config.d))
        seq = T.add(T.concat([cls, tokens], axis=1), self.pos_emb)
        for block in self.blocks:
            seq = block(seq)
        seq = self.ln_final(seq)
        global_feat = self.proj(seq[:, 0])
        return FeatureBundle(global_feat, seq[:, 1:], "image", seq)

    def encode(self, image: Tensor | np.ndarray, mask=None) -> FeatureBundle:
        """Single-image convenience wrapper; ``mask`` is a PatchMask or bool array."""
        flags = None
        if mask is not None:
            if isinstance(mask, (np.ndarray, list, tuple)):
                flags = np.asarray(mask, dtype=bool)
            else:
                flags = np.asarray(mask.flags, dtype=bool)
            if flags.shape != (self.config.n_patches,):
                raise ContractError(
                    f"mask length {flags.shape} does not match patch count {self.config.n_patches}"
                )
            flags = flags[None]
        if isinstance(image, Tensor):
            batched = T.reshape(image, (1,) + image.shape)
        else:
            batched = np.asarray(image, dtype=self.dtype)[None]
        b = self.encode_batch(batched, flags)
        return FeatureBundle(b.global_feat[0], b.local_feats[0], "image", b.sequence[0])


def pixel_mask(patch_masks: np.ndarray, config: EncoderConfig) -> np.ndarray:
    """Expand (B, N) patch flags to a (B, 1, H, W) boolean pixel mask."""
    b = patch_masks.shape[0]
    gh = config.image_h // config.patch
    gw = config.image_w // config.patch
    grid = patch_masks.reshape(b, 1, gh, 1, gw, 1)
    return np.broadcast_to(grid, (b, 1, gh, config.patch, gw, config.patch)).reshape(
        b, 1, config.image_h, config.image_w
    )
