"""Procedural identity-labelled pedestrian images and template captions.

Each identity is a tuple of closed-set attributes (hair/top/bottom/shoe
colours, bag type, top length) rendered as a blocky figure on a background,
with per-view jitter (horizontal shift, brightness, pixel noise) standing in
for cross-camera variation. Captions are filled sentence templates naming
every attribute. Images are written as binary PPM for bit-exact round trips.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .encoders import Vocabulary
from .errors import ConfigError, ContractError

IMAGE_SHAPE = (3, 64, 32)  # C, H, W

PALETTE = {
    "black": (0.10, 0.10, 0.10),
    "white": (0.95, 0.95, 0.95),
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.15),
    "purple": (0.60, 0.20, 0.70),
    "orange": (0.95, 0.55, 0.10),
}
COLOR_NAMES = tuple(PALETTE)
BAG_TYPES = ("none", "backpack", "shoulder")
TOP_LENGTHS = ("short", "long")

_BAG_COLOR = {"backpack": (0.35, 0.25, 0.15), "shoulder": (0.25, 0.30, 0.35)}
_SKIN = (0.85, 0.70, 0.55)


@dataclass(frozen=True)
class IdentitySpec:
    pid: int
    hair_color: str
    top_color: str
    bottom_color: str
    shoe_color: str
    bag: str
    top_len: str

    def attribute_tuple(self) -> tuple:
        return (self.hair_color, self.top_color, self.bottom_color,
                self.shoe_color, self.bag, self.top_len)


@dataclass
class RenderedView:
    pid: int
    image: np.ndarray      # (3, 64, 32) float32 in [0, 1]
    view_seed: int


def generate_identity(pid: int, rng: np.random.Generator) -> IdentitySpec:
    return IdentitySpec(
        pid=pid,
        hair_color=COLOR_NAMES[rng.integers(len(COLOR_NAMES))],
        top_color=COLOR_NAMES[rng.integers(len(COLOR_NAMES))],
        bottom_color=COLOR_NAMES[rng.integers(len(COLOR_NAMES))],
        shoe_color=COLOR_NAMES[rng.integers(len(COLOR_NAMES))],
        bag=BAG_TYPES[rng.integers(len(BAG_TYPES))],
        top_len=TOP_LENGTHS[rng.integers(len(TOP_LENGTHS))],
    )


def generate_identities(count: int, rng: np.random.Generator) -> list[IdentitySpec]:
    """Distinct identities; attribute-tuple collisions are resampled."""
    specs: list[IdentitySpec] = []
    seen: set[tuple] = set()
    while len(specs) < count:
        spec = generate_identity(len(specs), rng)
        if spec.attribute_tuple() in seen:
            continue
        seen.add(spec.attribute_tuple())
        specs.append(spec)
    return specs


def _paint(img: np.ndarray, rows: slice, cols: slice, color) -> None:
    img[:, rows, cols] = np.asarray(color, dtype=img.dtype)[:, None, None]


def render(spec: IdentitySpec, view_seed: int, jitter: bool = True) -> np.ndarray:
    """Deterministic image for (spec, view_seed); jitter draws are
    pid-independent so identities sharing a view seed differ only where
    their attributes differ."""
    rng = np.random.default_rng(np.random.SeedSequence([int(view_seed) & ((1 << 63) - 1), 0x5EED]))
    if jitter:
        shift = int(rng.integers(-3, 4))
        background = rng.uniform(0.25, 0.75, size=3)
        brightness = 1.0 + rng.uniform(-0.1, 0.1)
    else:
        shift = 0
        background = np.full(3, 0.5)
        brightness = 1.0

    img = np.empty(IMAGE_SHAPE, dtype=np.float64)
    img[:] = background[:, None, None]
    c = 16 + shift
    torso_end = 38 if spec.top_len == "long" else 32
    _paint(img, slice(4, 12), slice(c - 5, c + 5), PALETTE[spec.hair_color])
    _paint(img, slice(12, 16), slice(c - 3, c + 3), _SKIN)  # face strip under the hair
    _paint(img, slice(16, torso_end), slice(c - 8, c + 8), PALETTE[spec.top_color])
    _paint(img, slice(torso_end, 52), slice(c - 5, c + 5), PALETTE[spec.bottom_color])
    _paint(img, slice(52, 60), slice(c - 6, c + 6), PALETTE[spec.shoe_color])
    if spec.bag == "backpack":
        _paint(img, slice(18, 34), slice(c + 8, c + 12), _BAG_COLOR["backpack"])
    elif spec.bag == "shoulder":
        _paint(img, slice(20, 36), slice(c - 12, c - 8), _BAG_COLOR["shoulder"])

    img *= brightness
    if jitter:
        img += rng.normal(0.0, 0.02, size=IMAGE_SHAPE)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_views(spec: IdentitySpec, count: int, rng: np.random.Generator,
                 jitter: bool = True) -> list[RenderedView]:
    if count < 1:
        raise ContractError("need at least one view")
    seeds = rng.integers(0, 1 << 62, size=count)
    return [RenderedView(pid=spec.pid, image=render(spec, int(s), jitter), view_seed=int(s))
            for s in seeds]


# every template (with its bag clause) fits the 16-word desk token budget,
# so truncation never drops an attribute; variety across templates keeps the
# text tower from memorising caption surface forms
_TEMPLATES = (
    ("a person with {hair} hair, {top_len} {top} top, {bottom} pants and "
     "{shoe} shoes", ", carrying {bag}"),
    ("{hair} haired pedestrian in {top_len} {top} shirt, {bottom} trousers "
     "and {shoe} footwear", ", holding {bag}"),
    ("{top} {top_len} top, {bottom} pants, {shoe} shoes, {hair} hair", ", with {bag}"),
    ("pedestrian wearing {top_len} {top} jacket, {bottom} pants, {shoe} shoes, "
     "{hair} hair", ", carrying {bag}"),
    ("{shoe} shoes, {bottom} pants and a {top_len} {top} top, hair {hair}", ", bag {bag}"),
    ("person whose hair is {hair}, top {top} and {top_len}, pants {bottom}, "
     "shoes {shoe}", ", with {bag}"),
    ("a {hair} hair person, {top} {top_len} shirt, {shoe} shoes and {bottom} "
     "trousers", ", holding {bag}"),
    ("{bottom} pants, {top_len} {top} top, {hair} hair and {shoe} shoes", ", carrying {bag}"),
)


def _fill(template: tuple[str, str], spec: IdentitySpec) -> str:
    body, bag_clause = template
    words = dict(hair=spec.hair_color, top=spec.top_color, bottom=spec.bottom_color,
                 shoe=spec.shoe_color, top_len=spec.top_len)
    text = body.format(**words)
    if spec.bag != "none":
        bag_word = "backpack" if spec.bag == "backpack" else "shoulder bag"
        text += bag_clause.format(bag=bag_word)
    return text


def describe(spec: IdentitySpec, rng: np.random.Generator) -> str:
    """One caption naming every attribute; the carrying clause is omitted
    when the identity has no bag."""
    return _fill(_TEMPLATES[rng.integers(len(_TEMPLATES))], spec)


def caption_closure() -> list[str]:
    """Every template filled with every closed-set word; the tokenizer
    vocabulary is built over this so captions never produce UNK."""
    out = [" ".join(COLOR_NAMES)]
    for template in _TEMPLATES:
        for bag in BAG_TYPES:
            for top_len in TOP_LENGTHS:
                spec = IdentitySpec(0, "black", "black", "black", "black", bag, top_len)
                out.append(_fill(template, spec))
    return out


# -- dataset IO ----------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255) from a (3, H, W) float image in [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6" or parts[2] != b"255":
        raise ContractError(f"unsupported PPM header in {path}")
    w, h = (int(x) for x in parts[1].split())
    pixels = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / 255.0)


@dataclass
class CaptionRow:
    image_path: str
    caption: str
    pid: int
    split: str
    image_index: int = -1


@dataclass
class Dataset:
    root: Path
    manifest: dict
    vocab: Vocabulary
    images: np.ndarray            # (n_images, 3, 64, 32) float32
    image_pids: np.ndarray
    image_splits: list[str]
    captions: list[CaptionRow]

    def split_rows(self, split: str) -> list[CaptionRow]:
        return [r for r in self.captions if r.split == split]

    def split_image_indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.image_splits) if s == split])


def write_dataset(root, identities: int, views_per_id: int, captions_per_view: int,
                  split_ratios: tuple[float, float, float], seed: int,
                  jitter: bool = True) -> dict:
    """Generate and write a full dataset; returns the manifest dict.

    Layout: images/<pid>_<view>.ppm, captions.jsonl, manifest.json, vocab.txt.
    Splits are identity-disjoint.
    """
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {split_ratios}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)

    id_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    view_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    text_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    split_rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))

    specs = generate_identities(identities, id_rng)
    order = split_rng.permutation(identities)
    n_train = int(round(split_ratios[0] * identities))
    n_val = int(round(split_ratios[1] * identities))
    if n_train + n_val > identities:
        raise ConfigError("split ratios leave no identities for the test split")
    split_of = {}
    for rank, idx in enumerate(order):
        pid = specs[idx].pid
        split_of[pid] = ("train" if rank < n_train
                         else "val" if rank < n_train + n_val else "test")

    caption_texts: list[str] = []
    rows: list[dict] = []
    counts = {s: {"identities": 0, "images": 0, "captions": 0} for s in ("train", "val", "test")}
    for spec in specs:
        split = split_of[spec.pid]
        counts[split]["identities"] += 1
        for v, view in enumerate(render_views(spec, views_per_id, view_rng, jitter)):
            rel = f"images/{spec.pid}_{v}.ppm"
            write_ppm(root / rel, view.image)
            counts[split]["images"] += 1
            for _ in range(captions_per_view):
                caption = describe(spec, text_rng)
                caption_texts.append(caption)
                rows.append({"image_path": rel, "caption": caption, "pid": spec.pid,
                             "split": split})
                counts[split]["captions"] += 1

    vocab = Vocabulary.from_corpus(caption_texts + caption_closure())
    vocab.save(root / "vocab.txt")
    with open(root / "captions.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    manifest = {
        "identities": identities,
        "views_per_id": views_per_id,
        "captions_per_view": captions_per_view,
        "split_ratios": list(split_ratios),
        "seed": seed,
        "jitter": jitter,
        "image_shape": list(IMAGE_SHAPE),
        "splits": counts,
        "identity_attributes": {str(s.pid): asdict(s) for s in specs},
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_dataset(root) -> Dataset:
    root = Path(root)
    with open(root / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    vocab = Vocabulary.load(root / "vocab.txt")
    captions: list[CaptionRow] = []
    with open(root / "captions.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                captions.append(CaptionRow(**json.loads(line)))
    path_index: dict[str, int] = {}
    images = []
    pids = []
    splits = []
    for row in captions:
        if row.image_path not in path_index:
            path_index[row.image_path] = len(images)
            images.append(read_ppm(root / row.image_path))
            pids.append(row.pid)
            splits.append(row.split)
        row.image_index = path_index[row.image_path]
    return Dataset(root=root, manifest=manifest, vocab=vocab,
                   images=np.stack(images), image_pids=np.array(pids),
                   image_splits=splits, captions=captions)
