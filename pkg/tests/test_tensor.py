import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from wisernet.errors import (
    BadMagic,
    DimensionMismatch,
    IoFailure,
    MalformedHeader,
    ShapeOverflow,
    TruncatedPayload,
)
from wisernet.tensor import (
    NoiseField,
    PlanarImage,
    apply_noise,
    decode_ppm,
    encode_ppm,
    encode_tensor,
    load_ppm,
    load_tensor,
    save_ppm,
    save_tensor,
)


def img_of(r, g, b):
    return PlanarImage(np.stack([np.asarray(r), np.asarray(g), np.asarray(b)]).astype(np.uint8))


# ------------------------------------------------------------------- PPM

def test_single_red_pixel_decodes(tmp_path):
    p = tmp_path / "red.ppm"
    p.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    img = load_ppm(p)
    assert img.shape == (1, 1)
    assert img.bands[:, 0, 0].tolist() == [255, 0, 0]


def test_canonical_file_round_trips_byte_identical(tmp_path):
    rng = np.random.default_rng(3)
    raw = b"P6\n5 4\n255\n" + rng.integers(0, 256, 60, dtype=np.uint8).tobytes()
    src = tmp_path / "a.ppm"
    src.write_bytes(raw)
    dst = tmp_path / "b.ppm"
    save_ppm(load_ppm(src), dst)
    assert dst.read_bytes() == raw


def test_ascii_ppm_rejected():
    with pytest.raises(MalformedHeader):
        decode_ppm(b"P3\n1 1\n255\n255 0 0\n")


def test_maxval_other_than_255_rejected():
    with pytest.raises(MalformedHeader):
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))


def test_short_payload_is_truncated():
    with pytest.raises(TruncatedPayload):
        decode_ppm(b"P6\n2 2\n255\n" + bytes(11))


def test_header_comments_are_skipped():
    img = decode_ppm(b"P6 # comment\n2 # w\n1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    assert img.bands[:, 0, 1].tolist() == [4, 5, 6]


def test_zero_pixel_file_layout(tmp_path):
    p = tmp_path / "z.ppm"
    save_ppm(img_of([[0]], [[0]], [[0]]), p)
    data = p.read_bytes()
    # 11-byte canonical header plus one RGB triple
    assert data == b"P6\n1 1\n255\n\x00\x00\x00"
    assert len(data) == 14
    assert data.endswith(b"\x00\x00\x00")


def test_unwritable_path_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        save_ppm(img_of([[0]], [[0]], [[0]]), tmp_path / "missing" / "x.ppm")


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.just(3), st.integers(1, 6), st.integers(1, 6))))
def test_ppm_round_trip_property(bands):
    img = PlanarImage(bands)
    assert decode_ppm(encode_ppm(img)) == img


# -------------------------------------------------------------- WLTENSOR

def test_scalar_tensor_is_22_bytes(tmp_path):
    p = tmp_path / "t.wlt"
    save_tensor(np.array([7.0], np.float32), p)
    data = p.read_bytes()
    assert len(data) == 22
    assert data[:8] == b"WLTENSOR"
    assert data[8:10] == bytes([0, 1])
    assert struct.unpack("<Q", data[10:18]) == (1,)
    assert struct.unpack("<f", data[18:]) == (7.0,)


def test_bad_magic(tmp_path):
    p = tmp_path / "t.wlt"
    p.write_bytes(b"XXTENSOR" + encode_tensor(np.zeros(1, np.float32))[8:])
    with pytest.raises(BadMagic):
        load_tensor(p)


def test_truncated_tensor(tmp_path):
    p = tmp_path / "t.wlt"
    p.write_bytes(encode_tensor(np.zeros((2, 3), np.float64))[:-1])
    with pytest.raises(TruncatedPayload):
        load_tensor(p)


def test_huge_extent_overflows(tmp_path):
    p = tmp_path / "t.wlt"
    p.write_bytes(b"WLTENSOR" + bytes([0, 2]) + struct.pack("<2Q", 2**40, 2**40))
    with pytest.raises(ShapeOverflow):
        load_tensor(p)


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from([np.float32, np.float64]).flatmap(
        lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                              elements=st.floats(-1e6, 1e6, width=32 if dt is np.float32 else 64))
    )
)
def test_tensor_round_trip_bit_exact(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("t") / "x.wlt"
    save_tensor(arr, p)
    back = load_tensor(p)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


# ------------------------------------------------------------ apply_noise

def test_apply_noise_examples():
    img = img_of([[128, 255, 0]], [[10, 10, 10]], [[0, 0, 0]])
    n = NoiseField(np.array([[[1, 1, -1]], [[0, 0, 0]], [[0, 0, 0]]], np.int8))
    out = apply_noise(img, n)
    assert out.bands[0, 0].tolist() == [129, 254, 1]


def test_apply_noise_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        apply_noise(img_of([[1]], [[1]], [[1]]), NoiseField.zeros(2, 2))


@settings(max_examples=50, deadline=None)
@given(
    st.tuples(st.integers(1, 5), st.integers(1, 5)).flatmap(
        lambda hw: st.tuples(
            hnp.arrays(np.uint8, (3,) + hw),
            hnp.arrays(np.int8, (3,) + hw, elements=st.sampled_from([-1, 0, 1])),
        )
    )
)
def test_apply_noise_bounded_change(pair):
    bands, planes = pair
    img = PlanarImage(bands)
    out = apply_noise(img, NoiseField(planes))
    diff = np.abs(out.bands.astype(int) - bands.astype(int))
    assert diff.max(initial=0) <= 1
    assert apply_noise(img, NoiseField.zeros(*img.shape)) == img


def test_noise_field_rejects_other_values():
    with pytest.raises(ValueError):
        NoiseField(np.full((3, 1, 1), 2))
