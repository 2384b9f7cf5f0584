"""Binary PPM (P6, maxval 255) image interchange.

This is the bit-exact format used by golden-file tests: quantization is
floor(x * 255 + 0.5) on values clipped to [0, 1], so u8 -> float -> u8
round-trips exactly.
"""

from __future__ import annotations

import numpy as np


class PpmFormatError(ValueError):
    pass


def quantize(image: np.ndarray) -> np.ndarray:
    """Map a float image in [0, 1] to uint8 with round-half-up."""
    image = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    return np.floor(image * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    data = image if image.dtype == np.uint8 else quantize(image)
    return b"P6\n%d %d\n255\n" % (w, h) + data.tobytes()


def write_ppm(image: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def _tokens(data: bytes):
    """Whitespace-separated header tokens, skipping '#' comments."""
    i = 0
    while True:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise PpmFormatError("unexpected end of header")
        yield data[start:i], i


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode P6 bytes into a float image in [0, 1]."""
    tokens = _tokens(data)
    fields = []
    end = 0
    for _ in range(4):
        tok, end = next(tokens)
        fields.append(tok)
    if fields[0] != b"P6":
        raise PpmFormatError(f"not a binary PPM: magic {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise PpmFormatError("non-numeric header field") from exc
    if maxval != 255:
        raise PpmFormatError(f"only maxval 255 is supported, got {maxval}")
    pixels = data[end + 1 : end + 1 + w * h * 3]
    if len(pixels) < w * h * 3:
        raise PpmFormatError("pixel payload truncated")
    raw = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return raw.astype(float) / 255.0


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
