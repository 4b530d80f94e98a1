import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from panp.pgm import PGMError, decode_pgm, encode_pgm, load_image, read_pgm, to_bytes_image, write_pgm


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 40), st.integers(1, 40))))
def test_encode_decode_roundtrip(pixels):
    out, maxval = decode_pgm(encode_pgm(pixels))
    assert maxval == 255 and out.tobytes() == pixels.tobytes() and out.shape == pixels.shape


def test_header_format():
    data = encode_pgm(np.zeros((2, 3), dtype=np.uint8))
    assert data.startswith(b"P5\n3 2\n255\n") and len(data) == len(b"P5\n3 2\n255\n") + 6


def test_comments_in_header():
    data = b"P5\n# made by hand\n2 2 # width height\n255\n" + bytes([0, 64, 128, 255])
    pixels, _ = decode_pgm(data)
    assert pixels.tolist() == [[0, 64], [128, 255]]


def test_pillow_reads_our_files(tmp_path):
    from PIL import Image

    pixels = np.arange(256, dtype=np.uint8).reshape(16, 16)
    write_pgm(tmp_path / "a.pgm", pixels)
    with Image.open(tmp_path / "a.pgm") as im:
        assert im.mode == "L" and np.array_equal(np.asarray(im), pixels)


def test_pillow_written_files_load(tmp_path):
    from PIL import Image

    pixels = (np.arange(64).reshape(8, 8) * 4).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(tmp_path / "b.pgm")
    np.testing.assert_array_equal(load_image(tmp_path / "b.pgm"), pixels / 255.0)


@pytest.mark.parametrize(
    "data",
    [b"P2\n2 2\n255\n0 0 0 0", b"P5\n2 2\n255\n\x00\x01", b"P5\n2", b"P5\nx 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00"],
)
def test_malformed(data):
    with pytest.raises(PGMError):
        decode_pgm(data)


def test_load_image_scaling(tmp_path):
    write_pgm(tmp_path / "x.pgm", np.array([[0, 255], [51, 102]], dtype=np.uint8))
    np.testing.assert_array_equal(load_image(tmp_path / "x.pgm"), [[0.0, 1.0], [0.2, 0.4]])


def test_load_image_rejects_non_square_or_large(tmp_path):
    write_pgm(tmp_path / "wide.pgm", np.zeros((4, 8), dtype=np.uint8))
    write_pgm(tmp_path / "big.pgm", np.zeros((33, 33), dtype=np.uint8))
    for name in ("wide.pgm", "big.pgm"):
        with pytest.raises(PGMError):
            load_image(tmp_path / name)


def test_load_image_rejects_other_maxval(tmp_path):
    (tmp_path / "m.pgm").write_bytes(b"P5\n1 1\n100\n\x05")
    with pytest.raises(PGMError):
        load_image(tmp_path / "m.pgm")


def test_to_bytes_image_clamps_and_rounds():
    img = np.array([[-0.5, 0.0, 0.5], [0.999, 1.0, 3.0]])
    assert to_bytes_image(img).tolist() == [[0, 0, 128], [255, 255, 255]]


def test_float_roundtrip_through_8_bit(tmp_path):
    levels = np.arange(256, dtype=np.uint8).reshape(16, 16)
    write_pgm(tmp_path / "l.pgm", to_bytes_image(levels / 255.0))
    assert read_pgm(tmp_path / "l.pgm").tobytes() == levels.tobytes()
