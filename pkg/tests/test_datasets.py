import gzip
import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdeformer.datasets import (IMAGE_MAGIC, LABEL_MAGIC, UNKNOWN_ID, IDXError, build_vocab,
                                gaussian_blobs, idx_bytes, load_labeled_text, load_mnist_idx,
                                parse_idx, synth_classification, token_motifs, tokenize,
                                write_mnist_idx)

# frozen digests of the Philox-backed generators; a change breaks reproducibility
BLOBS_DIGEST = "73fa2a3c9132b25a6d79059569a6366a42e0de09c2a1cca647be5dc73c76abf0"
MOTIFS_DIGEST = "f9f4e5d5bb9ffca2f727e7139708a24de9959a9ab876533094d0c39e5575ac06"


# ----------------------------------------------------------------------- IDX


def hand_built_idx(images, labels):
    n = len(labels)
    img = struct.pack(">IIII", 0x803, n, 28, 28) + bytes(images)
    lab = struct.pack(">II", 0x801, n) + bytes(labels)
    return img, lab


def test_single_white_image(tmp_path):
    img, lab = hand_built_idx([255] * 784, [7])
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(lab)
    data = load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert data.images.shape == (1, 28, 28)
    assert (data.images == 1.0).all()
    assert data.labels.tolist() == [7]


def test_gzip_files_are_read(tmp_path):
    img, lab = hand_built_idx([0] * 784, [3])
    with gzip.open(tmp_path / "i.gz", "wb") as fh:
        fh.write(img)
    (tmp_path / "l").write_bytes(lab)
    assert load_mnist_idx(tmp_path / "i.gz", tmp_path / "l").labels.tolist() == [3]


def test_label_magic_in_image_slot_is_rejected(tmp_path):
    img, lab = hand_built_idx([0] * 784, [1])
    (tmp_path / "i").write_bytes(lab)
    (tmp_path / "l").write_bytes(lab)
    with pytest.raises(IDXError, match="magic"):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")


def test_round_trip_is_bit_equal(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=5).astype(np.uint8)
    write_mnist_idx(raw, labels, tmp_path / "i", tmp_path / "l")
    data = load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(np.rint(data.images * 255).astype(np.uint8), raw)
    assert np.array_equal(data.images, raw / 255.0)
    assert np.array_equal(data.labels, labels)


def test_truncated_payload_and_count_mismatch(tmp_path):
    img, lab = hand_built_idx([0] * 784 * 2, [1, 2])
    (tmp_path / "i").write_bytes(img[:-1])
    (tmp_path / "l").write_bytes(lab)
    with pytest.raises(IDXError, match="offset 16"):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 1) + b"\x01")
    with pytest.raises(IDXError, match="count"):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")


def test_every_single_byte_header_corruption_is_rejected():
    img = idx_bytes(np.zeros((2, 28, 28), dtype=np.uint8), IMAGE_MAGIC)
    lab = idx_bytes(np.array([1, 2], dtype=np.uint8), LABEL_MAGIC)
    for blob, magic, ndim, header in ((img, IMAGE_MAGIC, 3, 16), (lab, LABEL_MAGIC, 1, 8)):
        rejected = 0
        for pos in range(header):
            for value in range(256):
                if value == blob[pos]:
                    continue
                bad = bytearray(blob)
                bad[pos] = value
                with pytest.raises(IDXError):
                    parse_idx(bytes(bad), magic, ndim, "fuzz")
                rejected += 1
        assert rejected == header * 255


@given(st.binary(max_size=40))
def test_random_bytes_never_crash_the_parser(blob):
    try:
        parse_idx(blob, LABEL_MAGIC, 1, "fuzz")
    except IDXError:
        pass


# ---------------------------------------------------------------------- text


def test_vocab_ranks_by_frequency(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("a\tx y x\n", encoding="utf-8")
    data = load_labeled_text(path, vocab_cap=10, seq_cap=4)
    assert data.vocab["x"] < data.vocab["y"]
    assert data.documents[0].tolist() == [data.vocab["x"], data.vocab["y"], data.vocab["x"], 0]


def test_empty_text_is_kept_as_padding(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("a\thello world\nb\t!!! ...\n", encoding="utf-8")
    data = load_labeled_text(path, seq_cap=3)
    assert data.documents[1].tolist() == [UNKNOWN_ID] * 3
    assert data.label_names == ["a", "b"]
    assert data.labels.tolist() == [0, 1]


def test_missing_tab_names_the_line(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("a\tok\nno tab here\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":2:"):
        load_labeled_text(path)


def test_vocab_cap_and_unknowns(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("a\tq q q r r s\n", encoding="utf-8")
    data = load_labeled_text(path, vocab_cap=3, seq_cap=6)
    assert set(data.vocab) == {"q", "r"}
    assert data.documents[0].tolist()[-1] == UNKNOWN_ID
    again = load_labeled_text(path, vocab_cap=3, seq_cap=6)
    assert again.vocab == data.vocab


@given(st.text(max_size=60))
def test_tokenizer_idempotent_on_join(text):
    toks = tokenize(text)
    assert tokenize(" ".join(toks)) == toks


def test_build_vocab_breaks_ties_alphabetically():
    assert build_vocab([["b", "a"], ["a", "b", "c"]], cap=10) == {"a": 1, "b": 2, "c": 3}


# ----------------------------------------------------------------- synthetic


def test_blobs_are_separable_by_nearest_centroid():
    data = gaussian_blobs(0, 500, 10, sigma=0.1, separation=10.0)
    feats = data.images.reshape(len(data), -1)
    centroids = np.stack([feats[data.labels == c].mean(axis=0) for c in range(10)])
    d2 = ((feats[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    assert (d2.argmin(axis=1) == data.labels).mean() == 1.0
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0


def test_generators_are_seed_deterministic_and_pinned():
    a, b = gaussian_blobs(0, 20, 10), gaussian_blobs(0, 20, 10)
    assert a.images.tobytes() == b.images.tobytes()
    assert hashlib.sha256(a.images.tobytes() + a.labels.tobytes()).hexdigest() == BLOBS_DIGEST
    t = token_motifs(0, 20, 4)
    assert hashlib.sha256(t.documents.tobytes() + t.labels.tobytes()).hexdigest() == MOTIFS_DIGEST
    assert not np.array_equal(gaussian_blobs(1, 20, 10).images, a.images)


def test_single_class_and_dispatch():
    assert not gaussian_blobs(0, 7, 1).labels.any()
    assert not token_motifs(0, 7, 1).labels.any()
    assert synth_classification(0, 8, 2, width=50, mode="token-motifs").documents.max() < 50
    with pytest.raises(ValueError):
        synth_classification(0, 8, 2, mode="spirals")
    with pytest.raises(ValueError):
        gaussian_blobs(0, 3, 4)


def test_motifs_plant_signatures():
    data = token_motifs(3, 40, 4, vocab=30, seq_len=10, repeats=3)
    for doc, c in zip(data.documents, data.labels):
        assert (doc == c + 1).sum() == 3
        assert all((doc == s + 1).sum() == 0 for s in range(4) if s != c)
    assert data.documents.max() < 30
