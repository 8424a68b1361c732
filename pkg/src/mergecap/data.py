"""Vocabulary, dataset file formats and the synthetic compositional world."""

from __future__ import annotations

import json
import os
import string
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import tokenize

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

FEATURE_MAGIC = b"AMTF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_IMAGE_ID = struct.Struct("<Q")


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


# --------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    tokens: list[str]
    min_count_exclusive: int = 5
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise DataError(f"vocabulary must start with the reserved tokens {RESERVED}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary has duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def lookup(self, token_id: int) -> str:
        return self.tokens[token_id]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Words for ``ids``, stopping at eos and skipping pad/bos."""
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    def encode_caption(self, caption: str | Sequence[str], max_len: int = 16) -> list[int]:
        """Token ids of the first ``max_len`` words followed by eos."""
        words = tokenize(caption) if isinstance(caption, str) else list(caption)
        return self.encode(words[:max_len]) + [EOS]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])


def build_vocab(captions: Iterable[str | Sequence[str]], min_count_exclusive: int = 5,
                max_len: int = 16) -> Vocabulary:
    """Vocabulary from a caption corpus.

    Captions are cut to ``max_len`` words before counting; words seen
    ``min_count_exclusive`` times or fewer are left out (they encode as unk).
    Kept words are ordered by descending count, ties alphabetically.
    """
    counts: Counter = Counter()
    n = 0
    for cap in captions:
        words = tokenize(cap) if isinstance(cap, str) else list(cap)
        counts.update(words[:max_len])
        n += 1
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = [w for w, c in counts.items() if c > min_count_exclusive and w not in RESERVED]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + kept, min_count_exclusive)


# --------------------------------------------------------------------------
# image features and datasets


@dataclass
class ImageFeatures:
    regions: np.ndarray  # [n, feat_dim]
    mean: np.ndarray = field(default=None)  # [feat_dim]

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=np.float64)
        if self.regions.ndim != 2 or self.regions.shape[0] == 0:
            raise DataError(f"regions must be a non-empty [n, d] matrix, got {self.regions.shape}")
        if self.mean is None:
            self.mean = self.regions.mean(axis=0)

    @property
    def n_regions(self) -> int:
        return self.regions.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.regions.shape[1]


@dataclass
class ImageRecord:
    image_id: int
    features: ImageFeatures
    captions: list[str]


@dataclass
class CaptionDataset:
    split: str
    images: list[ImageRecord]

    def __len__(self) -> int:
        return len(self.images)

    def references(self) -> list[list[list[str]]]:
        """Tokenized reference captions per image."""
        return [[tokenize(c) for c in rec.captions] for rec in self.images]

    def encoded_references(self, vocab: Vocabulary, max_len: int = 16) -> list[list[list[int]]]:
        return [[vocab.encode_caption(c, max_len) for c in rec.captions] for rec in self.images]

    def check(self, vocab: Vocabulary, max_len: int = 16) -> None:
        for refs in self.encoded_references(vocab, max_len):
            for ids in refs:
                if len(ids) > max_len + 1 or max(ids) >= len(vocab):
                    raise DataError("encoded reference violates vocabulary/length bounds")


def write_features(path, items: Sequence[tuple[int, np.ndarray]]) -> None:
    """Write ``(image_id, regions)`` pairs in the AMTF binary layout."""
    if not items:
        n_regions, dim = 0, 0
    else:
        n_regions, dim = np.asarray(items[0][1]).shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(items), n_regions, dim))
        for image_id, regions in items:
            arr = np.asarray(regions, dtype="<f4")
            if arr.shape != (n_regions, dim):
                raise DataError(f"image {image_id}: regions shape {arr.shape} != {(n_regions, dim)}")
            fh.write(_IMAGE_ID.pack(int(image_id)))
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def read_features(path) -> list[tuple[int, ImageFeatures]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header at byte offset {len(raw)} "
                        f"(need {_HEADER.size} bytes)")
    magic, version, n_images, n_regions, dim = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte offset 0, expected \"AMTF\"")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version} at byte offset 4")
    block = n_regions * dim * 4
    out = []
    offset = _HEADER.size
    for _ in range(n_images):
        if offset + _IMAGE_ID.size + block > len(raw):
            raise DataError(f"{path}: truncated image record at byte offset {offset} "
                            f"(file is {len(raw)} bytes)")
        (image_id,) = _IMAGE_ID.unpack_from(raw, offset)
        offset += _IMAGE_ID.size
        regions = np.frombuffer(raw, dtype="<f4", count=n_regions * dim, offset=offset)
        offset += block
        out.append((image_id, ImageFeatures(regions.reshape(n_regions, dim).astype(np.float64))))
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes at byte offset {offset}")
    return out


def write_captions(path, items: Iterable[tuple[int, Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, caps in items:
            fh.write(json.dumps({"image_id": int(image_id), "captions": list(caps)}) + "\n")


def read_captions(path) -> dict[int, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[int(obj["image_id"])] = [str(c) for c in obj["captions"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad caption record ({exc})") from None
    return out


def save_split(directory, dataset: CaptionDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_features(directory / f"{dataset.split}.amtf",
                   [(r.image_id, r.features.regions) for r in dataset.images])
    write_captions(directory / f"{dataset.split}.jsonl",
                   [(r.image_id, r.captions) for r in dataset.images])


def load_split(directory, split: str) -> CaptionDataset:
    directory = Path(directory)
    feats = read_features(directory / f"{split}.amtf")
    caps = read_captions(directory / f"{split}.jsonl")
    images = []
    for image_id, f in feats:
        if image_id not in caps:
            raise DataError(f"{split}: image {image_id} has features but no captions")
        images.append(ImageRecord(image_id, f, caps[image_id]))
    return CaptionDataset(split, images)


# --------------------------------------------------------------------------
# synthetic world

DEFAULT_OBJECTS = ("ball", "box", "cup", "dog", "cat", "car", "tree", "chair")
DEFAULT_COLORS = ("red", "blue", "green", "yellow")
DEFAULT_TEMPLATES = (
    "a {c1} {o1} next to a {c2} {o2}",
    "a {c1} {o1} and a {c2} {o2}",
    "there is a {c1} {o1} beside a {c2} {o2}",
)


@dataclass
class SyntheticWorld:
    """Object categories with prototype features, colors as feature offsets,
    and paraphrase templates naming the objects present.

    Objects in a caption are listed in category order, so the references of an
    image are a function of which (object, color) pairs were drawn.
    """

    seed: int = 0
    objects: tuple = DEFAULT_OBJECTS
    colors: tuple = DEFAULT_COLORS
    templates: tuple = DEFAULT_TEMPLATES
    objects_per_image: int = 2
    min_refs: int = 2
    max_refs: int = 3
    object_scale: float = 1.0
    color_scale: float = 0.6
    noise: float = 0.1
    background_scale: float = 0.3

    def __post_init__(self):
        if len(self.objects) < 2:
            raise ValueError("synthetic world needs at least 2 object categories")
        if self.objects_per_image > len(self.objects):
            raise ValueError(f"cannot draw {self.objects_per_image} distinct objects "
                             f"from {len(self.objects)} categories")
        fields = {f for t in self.templates for _, f, _, _ in string.Formatter().parse(t) if f}
        want = {f"{p}{k}" for k in range(1, self.objects_per_image + 1) for p in "co"}
        if fields != want:
            raise ValueError(f"templates use fields {sorted(fields)}, expected {sorted(want)}")
        if not 1 <= self.min_refs <= self.max_refs <= len(self.templates):
            raise ValueError("reference count range must lie within 1..len(templates)")

    def prototypes(self, feat_dim: int) -> tuple[np.ndarray, np.ndarray]:
        if feat_dim < len(self.objects):
            raise ValueError(f"feat_dim {feat_dim} is smaller than the category count {len(self.objects)}")
        rng = np.random.default_rng([self.seed, feat_dim])
        obj = rng.standard_normal((len(self.objects), feat_dim)) * self.object_scale
        col = rng.standard_normal((len(self.colors), feat_dim)) * self.color_scale
        return obj, col

    def draw_image(self, image_id: int, n_regions: int, feat_dim: int, seed: int) -> ImageRecord:
        if n_regions < self.objects_per_image:
            raise ValueError(f"n_regions {n_regions} < objects per image {self.objects_per_image}")
        obj_proto, col_proto = self.prototypes(feat_dim)
        rng = np.random.default_rng([seed, image_id])
        objs = np.sort(rng.choice(len(self.objects), self.objects_per_image, replace=False))
        cols = rng.integers(0, len(self.colors), self.objects_per_image)
        regions = rng.standard_normal((n_regions, feat_dim)) * self.background_scale
        for k, (o, c) in enumerate(zip(objs, cols)):
            regions[k] = (obj_proto[o] + col_proto[c]
                          + rng.standard_normal(feat_dim) * self.noise)
        # stored as float32 on disk; keep in-memory datasets identical to loaded ones
        regions = regions[rng.permutation(n_regions)].astype(np.float32).astype(np.float64)
        slots = {}
        for k, (o, c) in enumerate(zip(objs, cols), 1):
            slots[f"o{k}"] = self.objects[o]
            slots[f"c{k}"] = self.colors[c]
        n_refs = int(rng.integers(self.min_refs, self.max_refs + 1))
        chosen = np.sort(rng.choice(len(self.templates), n_refs, replace=False))
        captions = [self.templates[t].format(**slots) for t in chosen]
        return ImageRecord(image_id, ImageFeatures(regions), captions)

    def objects_in(self, caption: str | Sequence[str]) -> set[str]:
        words = tokenize(caption) if isinstance(caption, str) else caption
        return {w for w in words if w in self.objects}


def generate_synthetic(world: SyntheticWorld, n_train: int, n_val: int, n_test: int,
                       n_regions: int = 6, feat_dim: int = 32, seed: int = 0
                       ) -> tuple[CaptionDataset, CaptionDataset, CaptionDataset]:
    """Train/val/test splits with consecutive, disjoint image ids."""
    splits = []
    start = 0
    for name, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        images = [world.draw_image(i, n_regions, feat_dim, seed) for i in range(start, start + count)]
        splits.append(CaptionDataset(name, images))
        start += count
    return tuple(splits)
