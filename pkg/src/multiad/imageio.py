"""Binary PGM (P5) / PPM (P6) codec, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageFormatError("truncated header")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode to ``uint8`` ``[h, w]`` (P5) or ``[h, w, 3]`` (P6)."""
    tokens, offset = _header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("malformed header numbers") from exc
    if width <= 0 or height <= 0:
        raise ImageFormatError("non-positive image extent")
    if not 0 < maxval <= 255:
        raise ImageFormatError(f"only 8-bit images are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raster = buf[offset : offset + need]
    if len(raster) != need:
        raise ImageFormatError(f"raster truncated: {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return arr.reshape((height, width) if channels == 1 else (height, width, 3)).copy()


def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ImageFormatError("encode_pnm expects uint8 pixels")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot encode array of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        return decode_pnm(path.read_bytes())
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc


def write_image(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(img))


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to 8-bit with rounding."""
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
