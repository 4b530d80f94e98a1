"""Binary 8-bit PGM (P5) reading and writing."""

import numpy as np

MAX_SIDE = 32


class PGMError(ValueError):
    pass


def _header_tokens(data, count):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PGMError("PGM header ends early")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pgm(data):
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P5":
        raise PGMError(f"expected binary PGM magic P5, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMError(f"bad PGM header: {exc}") from None
    if not 0 < maxval < 256:
        raise PGMError(f"only 8-bit PGM is supported (maxval {maxval})")
    raster = data[offset : offset + width * height]
    if len(raster) != width * height:
        raise PGMError(f"PGM raster truncated: {len(raster)} of {width * height} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy(), maxval


def encode_pgm(pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise PGMError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes()


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())[0]


def write_pgm(path, pixels):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(pixels))


def to_bytes_image(img):
    """Map [0, 1] floats to 8-bit gray levels (clamped, rounded)."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path):
    """A square 8-bit PGM with side ≤ 32, scaled to [0, 1] by /255."""
    with open(path, "rb") as fh:
        pixels, maxval = decode_pgm(fh.read())
    if maxval != 255:
        raise PGMError(f"expected maxval 255, got {maxval}")
    h, w = pixels.shape
    if h != w:
        raise PGMError(f"image must be square, got {w}x{h}")
    if h > MAX_SIDE:
        raise PGMError(f"image side {h} exceeds {MAX_SIDE}")
    return pixels.astype(np.float64) / 255.0
