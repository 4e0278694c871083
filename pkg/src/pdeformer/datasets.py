"""MNIST IDX ingestion, a line-based labelled-text loader, and seeded synthetic sets.

IDX layout (big endian): magic ``0x00000803`` for images / ``0x00000801`` for
labels, one unsigned 32-bit extent per dimension, then unsigned bytes.
Labelled text is UTF-8, one ``label<TAB>text`` document per line.
"""
from __future__ import annotations

import gzip
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .transformer_ref import IMAGE_SIDE, make_rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
UNKNOWN_ID = 0
_TOKEN = re.compile(r"[^\W_]+")


class IDXError(ValueError):
    pass


@dataclass
class ImageSet:
    images: np.ndarray  # (n, 28, 28) in [0, 1]
    labels: np.ndarray  # (n,) in [0, 10)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)


@dataclass
class TextSet:
    documents: np.ndarray  # (n, seq_cap) token ids
    labels: np.ndarray
    vocab: dict[str, int]
    label_names: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def vocab_size(self) -> int:
        return max(self.vocab.values(), default=UNKNOWN_ID) + 1


# ----------------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(blob: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(blob) < 4:
        raise IDXError(f"{what}: file is {len(blob)} bytes, too short for the magic number")
    (found,) = struct.unpack_from(">I", blob, 0)
    if found != magic:
        raise IDXError(f"{what}: magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    if len(blob) < header:
        raise IDXError(f"{what}: file is {len(blob)} bytes, header needs {header}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise IDXError(f"{what}: dims {dims} declare {expected} bytes, file has {len(blob)} "
                       f"(payload starts at offset {header})")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(image_path, label_path) -> ImageSet:
    images = parse_idx(_read_bytes(image_path), IMAGE_MAGIC, 3, "images")
    labels = parse_idx(_read_bytes(label_path), LABEL_MAGIC, 1, "labels")
    if images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise IDXError(f"images: expected {IMAGE_SIDE}x{IMAGE_SIDE} at offsets 8-15, "
                       f"got {images.shape[1:]}")
    if images.shape[0] != labels.shape[0]:
        raise IDXError(f"image count {images.shape[0]} (offset 4) != label count "
                       f"{labels.shape[0]} (offset 4)")
    if labels.size and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise IDXError(f"labels: value {labels[bad]} at offset {8 + bad} is not a digit")
    return ImageSet(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    arr = np.asarray(array, dtype=np.uint8)
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def write_mnist_idx(images: np.ndarray, labels: np.ndarray, image_path, label_path) -> None:
    """Write byte images (0..255) and labels in IDX form."""
    Path(image_path).write_bytes(idx_bytes(images, IMAGE_MAGIC))
    Path(label_path).write_bytes(idx_bytes(labels, LABEL_MAGIC))


# ---------------------------------------------------------------------- text


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN.findall(text.lower())


def build_vocab(docs: list[list[str]], cap: int) -> dict[str, int]:
    counts = Counter(tok for doc in docs for tok in doc)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max(cap - 1, 0)]
    return {tok: i + 1 for i, (tok, _) in enumerate(ranked)}


def encode_tokens(tokens: list[str], vocab: dict[str, int], seq_cap: int) -> np.ndarray:
    ids = [vocab.get(t, UNKNOWN_ID) for t in tokens[:seq_cap]]
    return np.array(ids + [UNKNOWN_ID] * (seq_cap - len(ids)), dtype=np.int64)


def load_labeled_text(path, vocab_cap: int = 2000, seq_cap: int = 64) -> TextSet:
    """Read ``label<TAB>text`` lines; the vocabulary is frequency ranked, id 0 is unknown/padding."""
    if vocab_cap < 1 or seq_cap < 1:
        raise ValueError("vocab_cap and seq_cap must be positive")
    names, docs = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'label<TAB>text'")
            label, text = line.split("\t", 1)
            names.append(label.strip())
            docs.append(tokenize(text))
    label_names = sorted(set(names))
    index = {n: i for i, n in enumerate(label_names)}
    vocab = build_vocab(docs, vocab_cap)
    ids = np.stack([encode_tokens(d, vocab, seq_cap) for d in docs]) if docs \
        else np.zeros((0, seq_cap), dtype=np.int64)
    return TextSet(ids, np.array([index[n] for n in names], dtype=np.int64), vocab, label_names)


# ----------------------------------------------------------------- synthetic


def gaussian_blobs(seed: int, n: int, classes: int, sigma: float = 0.1,
                   separation: float = 10.0, side: int = IMAGE_SIDE) -> ImageSet:
    """Image-shaped class clusters in row-token space.

    Each class owns a centre row of width ``side``; every row of an image is
    that centre plus N(0, sigma^2) noise, so each token lies in its class
    cluster. The closest pair of centre rows is ``separation * sigma`` apart.
    Values are clipped to [0, 1].
    """
    if n < classes:
        raise ValueError("need at least one sample per class")
    rng = make_rng(seed)
    z = rng.standard_normal((classes, side))
    if classes > 1:
        gaps = np.linalg.norm(z[:, None] - z[None], axis=-1)
        min_gap = gaps[~np.eye(classes, dtype=bool)].min()
        centres = 0.5 + z * (separation * sigma / min_gap)
    else:
        centres = np.full((1, side), 0.5)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    x = centres[labels][:, None, :] + sigma * rng.standard_normal((n, side, side))
    return ImageSet(np.clip(x, 0.0, 1.0), labels.astype(np.int64))


def token_motifs(seed: int, n: int, classes: int, vocab: int = 200, seq_len: int = 32,
                 repeats: int = 3) -> TextSet:
    """Random background tokens; each class plants its signature token ``repeats`` times."""
    if n < classes:
        raise ValueError("need at least one sample per class")
    if vocab < classes + 2 or repeats > seq_len:
        raise ValueError("vocabulary too small or too many repeats for the sequence")
    rng = make_rng(seed)
    signature = 1 + np.arange(classes)  # ids 1..classes are class signatures
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    docs = rng.integers(classes + 1, vocab, size=(n, seq_len))
    for i, c in enumerate(labels):
        pos = rng.choice(seq_len, size=repeats, replace=False)
        docs[i, pos] = signature[c]
    names = {f"tok{i}": i for i in range(1, vocab)}
    return TextSet(docs.astype(np.int64), labels.astype(np.int64), names,
                   [f"class{c}" for c in range(classes)])


def synth_classification(seed: int, n: int, classes: int, width: int | None = None,
                         mode: str = "gaussian-blobs", **kwargs):
    """Dispatch to :func:`gaussian_blobs` (``width`` = image side) or :func:`token_motifs`
    (``width`` = vocabulary size)."""
    if mode == "gaussian-blobs":
        return gaussian_blobs(seed, n, classes, side=width or IMAGE_SIDE, **kwargs)
    if mode == "token-motifs":
        return token_motifs(seed, n, classes, vocab=width or 200, **kwargs)
    raise ValueError(f"unknown synthetic mode {mode!r}")
