"""Binary PPM (P6), PGM (P5) and grayscale PFM (Pf) readers and writers."""
from __future__ import annotations

import os

import numpy as np


class FormatError(ValueError):
    """Malformed or unsupported image file; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte {offset})")
        self.offset = offset
        self.path = path


def _header_tokens(buf: bytes, count: int, path=None, start: int = 2):
    """Read ``count`` whitespace-separated header tokens, skipping '#' comments.

    Returns the tokens with their offsets, plus the offset of the payload
    (one whitespace byte after the last token).
    """
    tokens = []
    pos = start
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise FormatError("truncated header", pos, path)
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append((buf[start:pos], start))
    if pos >= n:
        raise FormatError("truncated header", pos, path)
    return tokens, pos + 1


def _int_token(tok, path):
    value, offset = tok
    try:
        out = int(value)
    except ValueError:
        raise FormatError(f"expected integer, got {value!r}", offset, path) from None
    if out <= 0:
        raise FormatError(f"expected positive integer, got {out}", offset, path)
    return out


def _payload(buf, start, nbytes, path):
    if len(buf) - start < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - start}", len(buf), path)
    return buf[start:start + nbytes]


def encode_ppm(rgb: np.ndarray) -> bytes:
    """P6 bytes from an (H, W, 3) uint8 array or floats in [0, 1] (round(255 c))."""
    rgb = _to_u8(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got {rgb.shape}")
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes()


def decode_ppm(buf: bytes, path=None) -> np.ndarray:
    return _decode_pnm(buf, b"P6", 3, path)


def encode_pgm(gray: np.ndarray) -> bytes:
    """P5 bytes from an (H, W) uint8 array or floats in [0, 1]."""
    gray = _to_u8(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) array, got {gray.shape}")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray).tobytes()


def decode_pgm(buf: bytes, path=None) -> np.ndarray:
    return _decode_pnm(buf, b"P5", 1, path)[..., 0]


def _to_u8(img):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    if np.issubdtype(img.dtype, np.floating):
        return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    raise ValueError(f"unsupported image dtype {img.dtype}")


def _decode_pnm(buf, magic, channels, path):
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0, path)
    (w_tok, h_tok, m_tok), start = _header_tokens(buf, 3, path)
    w, h, maxval = _int_token(w_tok, path), _int_token(h_tok, path), _int_token(m_tok, path)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", m_tok[1], path)
    data = _payload(buf, start, w * h * channels, path)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, channels).copy()


def encode_pfm(depth: np.ndarray) -> bytes:
    """Little-endian grayscale PFM, rows stored bottom-to-top."""
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"PFM writer takes an (H, W) array, got {depth.shape}")
    h, w = depth.shape
    payload = np.flipud(depth).astype("<f4").tobytes()
    return f"Pf\n{w} {h}\n-1.0\n".encode() + payload


def decode_pfm(buf: bytes, path=None) -> np.ndarray:
    if buf[:2] == b"PF":
        raise FormatError("color PFM ('PF') is not supported", 0, path)
    if buf[:2] != b"Pf":
        raise FormatError(f"bad magic {buf[:2]!r}, expected b'Pf'", 0, path)
    (w_tok, h_tok, s_tok), start = _header_tokens(buf, 3, path)
    w, h = _int_token(w_tok, path), _int_token(h_tok, path)
    try:
        scale = float(s_tok[0])
    except ValueError:
        raise FormatError(f"bad scale {s_tok[0]!r}", s_tok[1], path) from None
    if scale >= 0:
        raise FormatError(f"big-endian PFM (scale {s_tok[0].decode()}) is not supported", s_tok[1], path)
    data = _payload(buf, start, w * h * 4, path)
    return np.flipud(np.frombuffer(data, dtype="<f4").reshape(h, w)).astype(np.float32)


def _write(path, data: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def _read(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read {path}: {exc.strerror}") from exc


def write_ppm(path, rgb):
    _write(path, encode_ppm(rgb))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(_read(path), os.fspath(path))


def write_pgm(path, gray):
    _write(path, encode_pgm(gray))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(_read(path), os.fspath(path))


def write_pfm(path, depth):
    _write(path, encode_pfm(depth))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(_read(path), os.fspath(path))


def write_mask(path, mask):
    """Binary mask as PGM with values {0, 255}."""
    write_pgm(path, (np.asarray(mask) != 0).astype(np.uint8) * 255)


def read_mask(path) -> np.ndarray:
    """Mask PGM back to a {0, 1} uint8 array."""
    return (read_pgm(path) >= 128).astype(np.uint8)
