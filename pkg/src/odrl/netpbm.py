"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255 only."""

from __future__ import annotations

import os

import numpy as np

from .exceptions import FormatError


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n" + f"{width} {height}".encode("ascii") + b"\n255\n"


def write_pgm(path, image) -> None:
    """Write a 2-D uint8 array as ``P5``."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise FormatError(f"PGM needs a 2-D uint8 array, got {image.dtype} {image.shape}")
    h, w = image.shape
    _write(path, _header(b"P5", w, h) + np.ascontiguousarray(image).tobytes())


def write_ppm(path, image) -> None:
    """Write an H x W x 3 uint8 array as ``P6``."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FormatError(f"PPM needs an HxWx3 uint8 array, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    _write(path, _header(b"P6", w, h) + np.ascontiguousarray(image).tobytes())


def _write(path, payload: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write image {os.fspath(path)!r}: {exc.strerror}") from exc


def _tokens(data: bytes, count: int):
    """Pull ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last token.
    """
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        tokens.append(data[start:pos])
    return tokens, pos


def parse_netpbm(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes into an (H, W) or (H, W, 3) uint8 array."""
    tokens, pos = _tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-integer netpbm header field") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise FormatError(f"bad dimensions {width}x{height}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing separator after maxval")
    body = data[pos + 1 :]
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    if len(body) != expected:
        raise FormatError(f"expected {expected} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8)
    if channels == 1:
        return pixels.reshape(height, width).copy()
    return pixels.reshape(height, width, 3).copy()


def read_netpbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_netpbm(fh.read())


def read_ppm(path) -> np.ndarray:
    image = read_netpbm(path)
    if image.ndim != 3:
        raise FormatError(f"{os.fspath(path)!r} is not a P6 image")
    return image


def read_pgm(path) -> np.ndarray:
    image = read_netpbm(path)
    if image.ndim != 2:
        raise FormatError(f"{os.fspath(path)!r} is not a P5 image")
    return image
