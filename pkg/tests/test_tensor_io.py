import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from neurodecode.tensor_io import (BadMagicError, DatasetManifest, ImageDecodeError, LengthMismatchError,
                                   ManifestError, SampleRecord, TruncatedTensorError, UnsupportedDtypeError,
                                   UnsupportedVersionError, encode_tensor, load_image, load_manifest,
                                   read_tensor, resize_bilinear, save_image, save_manifest, write_tensor)
from oracles import bilinear_by_hand


def test_golden_bytes_single_one(tmp_path):
    p = tmp_path / "one.dctf"
    write_tensor(np.array([1.0], dtype=np.float32), p)
    assert p.read_bytes() == bytes.fromhex("44435446 01010000 01000000 01000000 0000803F")


def test_roundtrip_2x3(tmp_path):
    t = np.array([[0.1, -2.5, np.pi], [1e-30, -0.0, 3e38]], dtype=np.float32)
    write_tensor(t, tmp_path / "t.dctf")
    back = read_tensor(tmp_path / "t.dctf")
    assert back.shape == (2, 3)
    assert back.tobytes() == t.tobytes()


def test_nan_and_inf_payload_bits_survive(tmp_path):
    t = np.array([np.nan, np.inf, -np.inf], dtype=np.float32)
    write_tensor(t, tmp_path / "t.dctf")
    assert read_tensor(tmp_path / "t.dctf").tobytes() == t.tobytes()


@settings(max_examples=60, deadline=None)
@given(
    dims=st.lists(st.integers(1, 10), min_size=1, max_size=4).filter(lambda d: np.prod(d) <= 10_000),
    seed=st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(dims, seed):
    raw = np.random.default_rng(seed).integers(0, 2**32, size=int(np.prod(dims)), dtype=np.uint32)
    t = raw.view(np.float32).reshape(dims)  # arbitrary bit patterns, NaNs included
    from neurodecode.tensor_io import decode_tensor

    back = decode_tensor(encode_tensor(t))
    assert back.shape == tuple(dims)
    assert back.tobytes() == t.tobytes()


@pytest.mark.parametrize(
    "mutate, err",
    [
        (lambda b: b"XXXX" + b[4:], BadMagicError),
        (lambda b: b[:4] + b"\x02" + b[5:], UnsupportedVersionError),
        (lambda b: b[:5] + b"\x02" + b[6:], UnsupportedDtypeError),
        (lambda b: b[:-2], TruncatedTensorError),
        (lambda b: b[:14], TruncatedTensorError),
        (lambda b: b + b"\x00\x00\x00\x00", LengthMismatchError),
    ],
)
def test_malformed_files(tmp_path, mutate, err):
    good = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    p = tmp_path / "bad.dctf"
    p.write_bytes(mutate(good))
    with pytest.raises(err):
        read_tensor(p)


def test_error_classes_are_distinct():
    classes = {BadMagicError, UnsupportedVersionError, UnsupportedDtypeError, TruncatedTensorError,
               LengthMismatchError}
    for a in classes:
        for b in classes - {a}:
            assert not issubclass(a, b)


def test_zero_dim_rejected_on_write(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(np.zeros((0, 3), np.float32), tmp_path / "z.dctf")


def test_zero_dim_in_file_rejected(tmp_path):
    p = tmp_path / "z.dctf"
    p.write_bytes(struct.pack("<4sBBHI", b"DCTF", 1, 1, 0, 1) + struct.pack("<I", 0))
    with pytest.raises(LengthMismatchError):
        read_tensor(p)


# ------------------------------------------------------------------ images


def _png(path, arr, mode=None):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode=mode).save(path)


def test_load_red_pixel(tmp_path):
    _png(tmp_path / "r.png", [[[255, 0, 0]]])
    img = load_image(tmp_path / "r.png")
    assert img.shape == (1, 1, 3)
    assert img.dtype == np.float32
    np.testing.assert_array_equal(img.reshape(-1), [1.0, 0.0, 0.0])


def test_load_black(tmp_path):
    _png(tmp_path / "b.png", np.zeros((2, 2, 3)))
    assert not load_image(tmp_path / "b.png").any()


def test_grayscale_replicated(tmp_path):
    _png(tmp_path / "g.png", [[0, 51], [102, 255]])
    img = load_image(tmp_path / "g.png")
    assert img.shape == (2, 2, 3)
    np.testing.assert_array_equal(img[..., 0], img[..., 2])
    assert img[0, 1, 1] == np.float32(51 / 255.0)


def test_corrupt_file(tmp_path):
    p = tmp_path / "c.png"
    p.write_bytes(b"\x89PNG\r\n\x1a\n" + b"garbage" * 10)
    with pytest.raises(ImageDecodeError):
        load_image(p)


def test_sixteen_bit_rejected(tmp_path):
    p = tmp_path / "16.png"
    Image.fromarray(np.full((2, 2), 1000, dtype=np.uint16)).save(p)
    with pytest.raises(ImageDecodeError):
        load_image(p)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_png_writer_roundtrip(tmp_path_factory, seed):
    img = np.random.default_rng(seed).random((5, 7, 3)).astype(np.float32)
    p = tmp_path_factory.mktemp("png") / "x.png"
    save_image(img, p)
    assert np.abs(load_image(p) - img).max() <= 1 / 255


# ------------------------------------------------------------------ resize


def test_resize_identity():
    img = np.random.default_rng(0).random((5, 6, 3)).astype(np.float32)
    np.testing.assert_array_equal(resize_bilinear(img, 5, 6), img)


def test_resize_2x2_to_1x1_hand_value():
    # s = (0 + 0.5) * 2 / 1 - 0.5 = 0.5 on both axes: the mean of all four pixels
    v = np.array([[0, 1 / 3], [2 / 3, 1]], dtype=np.float32)
    img = np.repeat(v[..., None], 3, axis=-1)
    out = resize_bilinear(img, 1, 1)
    np.testing.assert_allclose(out, 0.5, atol=1e-7)


def test_constant_upscale():
    img = np.full((4, 4, 3), 0.37, dtype=np.float32)
    np.testing.assert_allclose(resize_bilinear(img, 16, 16), 0.37, atol=1e-7)


@pytest.mark.parametrize("shape, out", [((3, 5), (7, 2)), ((8, 8), (3, 3)), ((2, 9), (11, 4)), ((1, 1), (3, 2))])
def test_resize_matches_scalar_loop(shape, out):
    img = np.random.default_rng(1).random(shape + (3,)).astype(np.float32)
    np.testing.assert_allclose(resize_bilinear(img, *out), bilinear_by_hand(img, *out), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 20), st.integers(1, 20), st.integers(0, 1000))
def test_resize_stays_in_source_range(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)
    out = resize_bilinear(img, oh, ow)
    assert out.shape == (oh, ow, 3)
    assert out.min() >= img.min() and out.max() <= img.max()


@pytest.mark.parametrize("dims", [(0, 4), (4, 0), (-1, 2)])
def test_resize_bad_dims(dims):
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((2, 2, 3), np.float32), *dims)


# ---------------------------------------------------------------- manifest


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return path


def test_empty_manifest(tmp_path):
    m = load_manifest(_write(tmp_path / "m.json", []))
    assert len(m) == 0


def test_split_counts(tmp_path):
    _png(tmp_path / "a.png", np.zeros((2, 2, 3)))
    doc = [
        {"image": "a.png", "category": 0, "voxels": None, "features": None, "split": "train"},
        {"image": "a.png", "category": 1, "voxels": None, "features": None, "split": "test"},
    ]
    m = load_manifest(_write(tmp_path / "m.json", doc))
    assert len(m.split("train")) == 1
    assert len(m.split("test")) == 1


def test_validation_split_rejected(tmp_path):
    _png(tmp_path / "a.png", np.zeros((2, 2, 3)))
    doc = [{"image": "a.png", "category": 0, "voxels": None, "features": None, "split": "validation"}]
    with pytest.raises(ManifestError, match="split"):
        load_manifest(_write(tmp_path / "m.json", doc))


def test_dangling_path(tmp_path):
    doc = [{"image": "missing.png", "category": 0, "voxels": None, "features": None, "split": "train"}]
    with pytest.raises(ManifestError, match="dangling"):
        load_manifest(_write(tmp_path / "m.json", doc))


def test_category_out_of_range(tmp_path):
    _png(tmp_path / "a.png", np.zeros((2, 2, 3)))
    doc = {"num_categories": 2,
           "records": [{"image": "a.png", "category": 2, "voxels": None, "features": None, "split": "train"}]}
    with pytest.raises(ManifestError, match="out of range"):
        load_manifest(_write(tmp_path / "m.json", doc))


@pytest.mark.parametrize("bad", [
    {"image": "a.png", "category": -1, "split": "train"},
    {"image": "a.png", "category": True, "split": "train"},
    {"image": "a.png", "category": 0},
    {"image": "a.png", "category": 0, "split": "train", "extra": 1},
    {"image": 3, "category": 0, "split": "train"},
    {"image": "a.png", "category": 0, "split": "train", "voxels": 5},
])
def test_malformed_entries(tmp_path, bad):
    _png(tmp_path / "a.png", np.zeros((2, 2, 3)))
    with pytest.raises(ManifestError):
        load_manifest(_write(tmp_path / "m.json", [bad]))


def test_manifest_save_load_roundtrip(tmp_path):
    _png(tmp_path / "a.png", np.zeros((2, 2, 3)))
    write_tensor(np.ones(3, np.float32), tmp_path / "v.dctf")
    m = DatasetManifest([SampleRecord("a.png", 1, "v.dctf", None, "test")], 3, tmp_path)
    save_manifest(m, tmp_path / "m.json")
    back = load_manifest(tmp_path / "m.json")
    assert back.records == m.records
    assert back.num_categories == 3
