import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from chromaflow.color import colorfulness
from chromaflow.data import (
    CIFAR_RECORD,
    LabeledImage,
    decode_ppm,
    encode_ppm,
    filter_colorful,
    load_any,
    load_cifar10_bin,
    load_image_dir,
    read_image,
    read_manifest,
    save_cifar10_bin,
    write_image,
)
from chromaflow.errors import DataError, FormatError, IoError


def cifar_record(label, pixels):
    return bytes([label]) + pixels.transpose(2, 0, 1).tobytes()


def test_cifar_parse_layout(tmp_path):
    px = np.zeros((32, 32, 3), dtype=np.uint8)
    px[0, 1, 0] = 255  # red at row 0, col 1
    px[31, 0, 2] = 51
    path = tmp_path / "test_batch.bin"
    path.write_bytes(cifar_record(7, px) + cifar_record(0, np.zeros_like(px)))
    data = load_cifar10_bin(path)
    assert [d.label for d in data] == [7, 0]
    assert [d.id for d in data] == ["test_batch_00000", "test_batch_00001"]
    assert data[0].image[0, 1, 0] == 1.0
    assert data[0].image[31, 0, 2] == pytest.approx(0.2)
    assert data[0].image.sum() == pytest.approx(1.2)


def test_cifar_round_trip(tmp_path, demo_data):
    path = tmp_path / "b.bin"
    save_cifar10_bin(demo_data[:5], path)
    assert path.stat().st_size == 5 * CIFAR_RECORD
    back = load_cifar10_bin(path)
    for a, b in zip(demo_data, back):
        assert a.label == b.label
        assert np.abs(a.image - b.image).max() <= 1 / 510 + 1e-12


@pytest.mark.parametrize("blob", [b"", b"\0" * (CIFAR_RECORD - 1), b"\x0a" + b"\0" * (CIFAR_RECORD - 1)])
def test_cifar_malformed(tmp_path, blob):
    path = tmp_path / "bad.bin"
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        load_cifar10_bin(path)


def test_missing_file():
    with pytest.raises(IoError):
        load_cifar10_bin("/nonexistent/batch.bin")


@settings(max_examples=50)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)),
                  elements=st.floats(0, 1, width=64)))
def test_ppm_round_trip_within_half_step(img):
    back = decode_ppm(encode_ppm(img))
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 510 + 1e-12
    assert encode_ppm(back) == encode_ppm(img)


def test_ppm_header_variants():
    payload = bytes(range(6))
    assert decode_ppm(b"P6 2 1 255\n" + payload).shape == (1, 2, 3)
    assert decode_ppm(b"P6\n# comment\n2 1\n255\n" + payload)[0, 1, 2] == pytest.approx(5 / 255)


@pytest.mark.parametrize(
    "raw",
    [
        b"P3\n1 1\n255\n\0\0\0",
        b"P61 1\n255\n\0\0\0",
        b"P6\n1 1\n65535\n\0\0\0\0\0\0",
        b"P6\n1 1\n255\n\0\0",
        b"P6\n1 1\n255\n\0\0\0\0",
        b"P6\n1 x\n255\n\0\0\0",
        b"P6\n0 1\n255\n",
    ],
)
def test_ppm_malformed(raw):
    with pytest.raises(FormatError):
        decode_ppm(raw)


def test_write_image_rounds_to_nearest(tmp_path):
    img = np.array([[[0.0, 0.5, 1.0]]])
    write_image(img, tmp_path / "x.ppm")
    assert (tmp_path / "x.ppm").read_bytes() == b"P6\n1 1\n255\n" + bytes([0, 128, 255])
    np.testing.assert_array_equal(read_image(tmp_path / "x.ppm"), [[[0, 128 / 255, 1]]])


def make_dir(tmp_path, rows, files):
    for name in files:
        write_image(np.full((2, 2, 3), 0.5), tmp_path / name)
    (tmp_path / "manifest.csv").write_text("filename,true_label,target_label\n" + "\n".join(rows) + "\n")
    return tmp_path


def test_image_dir_in_manifest_order(tmp_path):
    make_dir(tmp_path, ["b.ppm,3,", "a.ppm,1,4"], ["a.ppm", "b.ppm"])
    data = load_image_dir(tmp_path)
    assert [(d.id, d.label, d.target) for d in data] == [("b.ppm", 3, None), ("a.ppm", 1, 4)]
    assert load_any(tmp_path)[0].id == "b.ppm"


@pytest.mark.parametrize(
    "rows, files",
    [
        (["a.ppm,1"], ["a.ppm", "b.ppm"]),
        (["a.ppm,1", "b.ppm,2"], ["a.ppm"]),
        (["a.ppm,11"], ["a.ppm"]),
        (["a.ppm,one"], ["a.ppm"]),
        (["a.ppm,1", "a.ppm,2"], ["a.ppm"]),
    ],
)
def test_image_dir_errors(tmp_path, rows, files):
    make_dir(tmp_path, rows, files)
    with pytest.raises(DataError):
        load_image_dir(tmp_path)


def test_manifest_missing(tmp_path):
    with pytest.raises(IoError):
        read_manifest(tmp_path / "nope.csv")


def test_filter_colorful_partition(demo_data):
    gray = LabeledImage(np.full((32, 32, 3), 0.3), 0, "gray")
    items = [gray] + list(demo_data[:10])
    kept, excluded = filter_colorful(items, 15)
    assert excluded[0] is gray
    assert len(kept) + len(excluded) == len(items)
    assert all(colorfulness(k.image) >= 15 for k in kept)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 80), st.floats(0, 80))
def test_filter_monotone_in_threshold(demo_data, a, b):
    lo, hi = sorted((a, b))
    kept_lo = {d.id for d in filter_colorful(demo_data, lo)[0]}
    kept_hi = {d.id for d in filter_colorful(demo_data, hi)[0]}
    assert kept_hi <= kept_lo
