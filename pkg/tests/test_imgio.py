import struct

import numpy as np
import pytest

from convleak import imgio
from convleak.errors import DataLengthError, DimensionError, FormatError
from convleak.imgio import (Image, SilhouetteImage, binarize_markers,
                            load_idx, load_idx_labels, load_pgm, write_idx,
                            write_idx_labels, write_pgm)


def test_load_idx_handbuilt(tmp_path):
    # Byte-level writer independent of write_idx: 2 images of 3x3,
    # payload bytes 0..17.
    path = tmp_path / "two.idx"
    payload = bytes(range(18))
    path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 3, 3) + payload)
    imgs = load_idx(path)
    assert len(imgs) == 2
    assert np.array_equal(imgs[0].pixels.reshape(-1), np.arange(0, 9))
    assert np.array_equal(imgs[1].pixels.reshape(-1), np.arange(9, 18))


def test_load_idx_zero_images(tmp_path):
    path = tmp_path / "empty.idx"
    path.write_bytes(struct.pack(">IIII", 0x00000803, 0, 28, 28))
    assert load_idx(path) == []


def test_load_idx_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(struct.pack(">IIII", 0x00000801, 1, 3, 3) + bytes(9))
    with pytest.raises(FormatError):
        load_idx(path)


def test_load_idx_truncated(tmp_path):
    path = tmp_path / "short.idx"
    path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 3, 3) + bytes(10))
    with pytest.raises(DataLengthError):
        load_idx(path)


def test_idx_roundtrip(tmp_path, rng):
    imgs = [Image(rng.integers(0, 256, size=(7, 5), dtype=np.uint8))
            for _ in range(4)]
    path = tmp_path / "rt.idx"
    write_idx(imgs, path)
    back = load_idx(path)
    assert len(back) == 4
    for a, b in zip(imgs, back):
        assert np.array_equal(a.pixels, b.pixels)


def test_idx_labels_roundtrip(tmp_path):
    path = tmp_path / "labels.idx"
    write_idx_labels([3, 1, 4, 1, 5], path)
    assert np.array_equal(load_idx_labels(path), [3, 1, 4, 1, 5])
    bad = tmp_path / "bad.idx"
    bad.write_bytes(struct.pack(">II", 0x00000803, 1) + b"\x00")
    with pytest.raises(FormatError):
        load_idx_labels(bad)


def test_write_pgm_minimal(tmp_path):
    path = tmp_path / "one.pgm"
    write_pgm(Image(np.zeros((1, 1), dtype=np.uint8)), path)
    data = path.read_bytes()
    assert data == b"P5\n1 1\n255\n\x00"
    assert len(data) == 12


def test_pgm_roundtrip(tmp_path, rng):
    img = Image(rng.integers(0, 256, size=(11, 13), dtype=np.uint8))
    path = tmp_path / "rt.pgm"
    write_pgm(img, path)
    back = load_pgm(path)
    assert np.array_equal(img.pixels, back.pixels)


def test_pgm_all_white_byte_count(tmp_path):
    img = Image(np.full((28, 28), 255, dtype=np.uint8))
    path = tmp_path / "white.pgm"
    write_pgm(img, path)
    data = path.read_bytes()
    header = b"P5\n28 28\n255\n"
    assert data == header + b"\xff" * 784


def test_pgm_rejects_multichannel(tmp_path):
    img = Image(np.zeros((2, 2), dtype=np.uint8), channels=3)
    with pytest.raises(FormatError):
        write_pgm(img, tmp_path / "multi.pgm")


def test_load_pgm_rejects_other_maxval(tmp_path):
    path = tmp_path / "deep.pgm"
    path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(FormatError):
        load_pgm(path)


def test_image_rejects_out_of_range():
    with pytest.raises(FormatError):
        Image(np.array([[0, 300]], dtype=np.int32))
    with pytest.raises(FormatError):
        Image(np.array([[-1, 4]], dtype=np.int32))


def test_binarize_trivials():
    all_bg = SilhouetteImage(np.zeros((3, 3), dtype=bool))
    assert np.all(binarize_markers(all_bg).pixels == 0)
    all_fg = SilhouetteImage(np.ones((3, 3), dtype=bool))
    assert np.all(binarize_markers(all_fg).pixels == 255)


def test_binarize_checkerboard():
    markers = np.indices((4, 4)).sum(axis=0) % 2 == 0
    out = binarize_markers(SilhouetteImage(markers))
    # direct-mapping oracle
    expected = np.where(markers, 255, 0)
    assert np.array_equal(out.pixels, expected)
