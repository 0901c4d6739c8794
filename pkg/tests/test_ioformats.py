import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from structseg.ioformats import (
    DuplicateNameError,
    FormatError,
    MagicMismatchError,
    MalformedHeaderError,
    SizeMismatchError,
    TruncatedPayloadError,
    UnsupportedMaxvalError,
    UnsupportedVariantError,
    atomic_write,
    decode_netpbm,
    decode_tensors,
    encode_netpbm,
    encode_tensors,
    read_labels,
    read_pgm,
    read_ppm,
    read_tensors,
    render_heatmap,
    write_labels,
    write_pgm,
    write_ppm,
    write_tensors,
)


@given(arrays(np.uint8, array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=9)))
def test_gray_round_trip(img):
    assert decode_netpbm(encode_netpbm(img)).tobytes() == img.tobytes()


@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_color_round_trip(img):
    out = decode_netpbm(encode_netpbm(img))
    assert out.shape == img.shape and out.tobytes() == img.tobytes()


def test_file_round_trips(tmp_path, rng):
    gray = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    color = rng.integers(0, 256, (4, 3, 3)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", gray)
    write_ppm(tmp_path / "b.ppm", color)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), gray)
    np.testing.assert_array_equal(read_ppm(tmp_path / "b.ppm"), color)


def test_literal_p5():
    img = decode_netpbm(b"P5\n2 2\n255\n" + bytes([0, 10, 200, 255]))
    np.testing.assert_array_equal(img, [[0, 10], [200, 255]])


def test_header_comments_and_whitespace():
    img = decode_netpbm(b"P5 # comment\n2\t1 # more\n255 " + bytes([7, 8]))
    np.testing.assert_array_equal(img, [[7, 8]])


def test_raster_starting_with_whitespace_byte():
    # exactly one whitespace byte ends the header; the next byte is pixel data
    img = decode_netpbm(b"P5\n2 1\n255\n" + bytes([10, 32]))
    np.testing.assert_array_equal(img, [[10, 32]])


@pytest.mark.parametrize("data,error,message", [
    (b"P2\n2 2\n255\n0 0 0 0", UnsupportedVariantError, "unsupported variant"),
    (b"P5\n2 2\n65535\n" + bytes(8), UnsupportedMaxvalError, "maxval"),
    (b"P5\n2 2\n255\n" + bytes(3), TruncatedPayloadError, "truncated payload"),
    (b"P5\n2 2\n255\n" + bytes(5), SizeMismatchError, "unexpected"),
    (b"P5\n2 x\n255\n" + bytes(4), MalformedHeaderError, None),
    (b"P5\n2 2", MalformedHeaderError, None),
    (b"JFIF", MalformedHeaderError, "Netpbm"),
])
def test_netpbm_errors(data, error, message):
    with pytest.raises(error, match=message):
        decode_netpbm(data)


def test_error_classes_are_distinct():
    classes = {UnsupportedVariantError, UnsupportedMaxvalError, TruncatedPayloadError, MalformedHeaderError,
               SizeMismatchError, MagicMismatchError, DuplicateNameError}
    for c in classes:
        assert issubclass(c, FormatError)
        assert not any(issubclass(c, d) for d in classes - {c})


def test_pgm_reader_rejects_color(tmp_path):
    write_ppm(tmp_path / "c.ppm", np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(UnsupportedVariantError):
        read_pgm(tmp_path / "c.ppm")


def test_labels_round_trip_and_range(tmp_path):
    labels = np.array([[0, 1], [2, 3]])
    write_labels(tmp_path / "l.pgm", labels)
    np.testing.assert_array_equal(read_labels(tmp_path / "l.pgm", 4), labels)
    with pytest.raises(FormatError, match="label 3"):
        read_labels(tmp_path / "l.pgm", 3)
    with pytest.raises(ValueError):
        write_labels(tmp_path / "m.pgm", np.array([[300]]))


def handmade_container():
    # one entry named "ab" of shape (2,) holding 1.0 and -2.5
    return (b"SMT1" + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab" + struct.pack("<I", 1)
            + struct.pack("<I", 2) + struct.pack("<ff", 1.0, -2.5))


def test_container_byte_layout():
    assert encode_tensors({"ab": np.array([1.0, -2.5])}) == handmade_container()
    out = decode_tensors(handmade_container())
    np.testing.assert_array_equal(out["ab"], [1.0, -2.5])


@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=4), elements=st.floats(width=32)))
def test_container_round_trip(arr):
    back = decode_tensors(encode_tensors({"cam": arr, "x": arr[..., None]}))
    assert back["cam"].shape == arr.shape and back["cam"].tobytes() == arr.astype("<f4").tobytes()


def test_cam_stack_file_round_trip(tmp_path, rng):
    cam = rng.uniform(size=(4, 8, 8)).astype(np.float32)
    write_tensors(tmp_path / "c.smt", {"cam": cam, "tags": np.ones(3, np.float32)})
    back = read_tensors(tmp_path / "c.smt")
    assert list(back) == ["cam", "tags"] and back["cam"].tobytes() == cam.tobytes()


def test_empty_container():
    data = encode_tensors({})
    assert data == b"SMT1" + bytes(4)
    assert decode_tensors(data) == {}


def test_truncated_entry_is_named():
    data = encode_tensors({"first": np.zeros(2), "second": np.zeros((3, 3))})
    with pytest.raises(TruncatedPayloadError, match=r"truncated payload in entry 1 \('second'\)"):
        decode_tensors(data[:-5])


@pytest.mark.parametrize("data,error", [
    (b"SMT2" + bytes(4), MagicMismatchError),
    (encode_tensors({"a": np.zeros(1)}) + b"\0", SizeMismatchError),
    (b"SMT1" + struct.pack("<I", 2) + handmade_container()[8:] * 2, DuplicateNameError),
    (b"SMT1" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"\xff" + bytes(4), FormatError),
])
def test_container_errors(data, error):
    with pytest.raises(error):
        decode_tensors(data)


def test_atomic_write_replaces_without_leftovers(tmp_path):
    target = tmp_path / "out.bin"
    atomic_write(target, b"one")
    atomic_write(target, b"two")
    assert target.read_bytes() == b"two"
    assert os.listdir(tmp_path) == ["out.bin"]


def test_failed_write_keeps_previous_file(tmp_path):
    target = tmp_path / "t.smt"
    write_tensors(target, {"a": np.ones(2)})
    with pytest.raises(TypeError):
        write_tensors(target, {"a": object()})
    np.testing.assert_array_equal(read_tensors(target)["a"], [1, 1])
    assert os.listdir(tmp_path) == ["t.smt"]


def test_heatmap_endpoints():
    out = render_heatmap(np.array([[0.0, 1.0, 0.5]]))
    np.testing.assert_array_equal(out[0], [[0, 0, 255], [255, 0, 0], [0, 255, 0]])


def test_heatmap_constant_map():
    out = render_heatmap(np.full((1, 3, 4), 0.3))
    assert (out == out[0, 0]).all()


def test_heatmap_red_monotone_over_all_levels():
    levels = np.arange(256)[None] / 255
    red = render_heatmap(levels)[0, :, 0].astype(int)
    assert np.all(np.diff(red) >= 0)
    blue = render_heatmap(levels)[0, :, 2].astype(int)
    assert np.all(np.diff(blue) <= 0)


def test_heatmap_clamps_and_rejects():
    np.testing.assert_array_equal(render_heatmap([[-3.0, 9.0]]), render_heatmap([[0.0, 1.0]]))
    with pytest.raises(ValueError):
        render_heatmap([[np.nan]])
    with pytest.raises(ValueError):
        render_heatmap(np.zeros((2, 2, 2)))
