"""Binary Netpbm images, the SMT1 tensor container and false-color heatmaps.

SMT1 layout, all integers unsigned 32-bit little-endian::

    b"SMT1" | count | count * entry
    entry := name_len | name (UTF-8) | rank | dims[rank] | float32 LE data

Every writer goes through :func:`atomic_write`, so a failed write never
leaves a partial file behind.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np


class FormatError(ValueError):
    """Base class for malformed or unsupported input files."""


class MalformedHeaderError(FormatError):
    pass


class UnsupportedVariantError(FormatError):
    pass


class UnsupportedMaxvalError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class SizeMismatchError(FormatError):
    pass


class MagicMismatchError(FormatError):
    pass


class DuplicateNameError(FormatError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temporary file beside ``path`` and rename it into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


# -- Netpbm ------------------------------------------------------------------

_WHITESPACE = b" \t\n\r\v\f"
_CHANNELS = {b"P5": 1, b"P6": 3}


def _header_tokens(data: bytes, count: int):
    """Read ``count`` integer tokens after the magic; returns (tokens, payload offset)."""
    pos, tokens = 2, []
    while len(tokens) < count:
        if pos >= len(data):
            raise MalformedHeaderError(f"header ends after {len(tokens)} of {count} fields")
        ch = data[pos:pos + 1]
        if ch in (b"",) or ch[0] in _WHITESPACE:
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise MalformedHeaderError("unterminated comment in header")
            pos = end + 1
        else:
            start = pos
            while pos < len(data) and data[pos] not in _WHITESPACE and data[pos:pos + 1] != b"#":
                pos += 1
            tok = data[start:pos]
            if not tok.isdigit():
                raise MalformedHeaderError(f"expected an integer in header, got {tok[:16]!r}")
            tokens.append(int(tok))
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise MalformedHeaderError("missing whitespace after maxval")
    return tokens, pos + 1


def decode_netpbm(data: bytes) -> np.ndarray:
    """Parse P5 (gray, (H, W)) or P6 (color, (H, W, 3)) bytes with maxval 255."""
    magic = data[:2]
    if len(magic) < 2 or magic[:1] != b"P":
        raise MalformedHeaderError(f"not a Netpbm file (magic {magic!r})")
    if magic not in _CHANNELS:
        raise UnsupportedVariantError(f"unsupported variant {magic.decode('latin-1')}; only binary P5/P6")
    (width, height, maxval), offset = _header_tokens(data, 3)
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"image size must be positive, got {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"unsupported maxval {maxval}; only 255")
    channels = _CHANNELS[magic]
    expected = width * height * channels
    payload = data[offset:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise SizeMismatchError(f"{len(payload) - expected} unexpected bytes after the raster")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return img[..., 0].copy() if channels == 1 else img.copy()


def encode_netpbm(image) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"Netpbm images must be uint8, got {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise ValueError(f"image size must be positive, got {h}x{w}")
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def read_pgm(path) -> np.ndarray:
    img = decode_netpbm(_read_bytes(path))
    if img.ndim != 2:
        raise UnsupportedVariantError(f"{path}: expected a P5 gray image, found P6")
    return img


def read_ppm(path) -> np.ndarray:
    img = decode_netpbm(_read_bytes(path))
    if img.ndim != 3:
        raise UnsupportedVariantError(f"{path}: expected a P6 color image, found P5")
    return img


def write_pgm(path, image) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    atomic_write(path, encode_netpbm(image))


def write_ppm(path, image) -> None:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got shape {image.shape}")
    atomic_write(path, encode_netpbm(image))


def read_labels(path, num_classes: int | None = None) -> np.ndarray:
    """Label map stored as a PGM; values must be below ``num_classes`` if given."""
    labels = read_pgm(path).astype(np.int32)
    if num_classes is not None and labels.max() >= num_classes:
        raise FormatError(f"{path}: label {labels.max()} outside 0..{num_classes - 1}")
    return labels


def write_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("label values must lie in 0..255 to fit a PGM")
    write_pgm(path, labels.astype(np.uint8))


# -- tensor container ----------------------------------------------------------

MAGIC = b"SMT1"
_U32 = struct.Struct("<I")


def encode_tensors(tensors: dict) -> bytes:
    """Serialize named arrays; every array is stored as little-endian float32."""
    parts = [MAGIC, _U32.pack(len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value)
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"truncated payload in {what}: need {n} bytes, {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_tensors(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.pos = 4
    count = r.u32("entry count")
    out = {}
    for i in range(count):
        label = f"entry {i}"
        raw = r.take(r.u32(f"{label} name length"), f"{label} name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{label}: name is not valid UTF-8") from None
        label = f"entry {i} ({name!r})"
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        rank = r.u32(f"{label} rank")
        shape = tuple(r.u32(f"{label} dims") for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * n, label)
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(data):
        raise SizeMismatchError(f"{len(data) - r.pos} bytes after the last of {count} entries")
    return out


def read_tensors(path) -> dict:
    return decode_tensors(_read_bytes(path))


def write_tensors(path, tensors: dict) -> None:
    atomic_write(path, encode_tensors(tensors))


# -- heatmaps ------------------------------------------------------------------

# value -> (r, g, b); linear between breakpoints
JET_BREAKPOINTS = (
    (0.00, (0, 0, 255)),
    (0.25, (0, 255, 255)),
    (0.50, (0, 255, 0)),
    (0.75, (255, 255, 0)),
    (1.00, (255, 0, 0)),
)


def render_heatmap(values, palette: str = "jet") -> np.ndarray:
    """False-color (H, W, 3) uint8 rendering of a single-channel map.

    Values are clamped to [0, 1]; 0 is blue, 1 is red, with cyan, green and
    yellow at 0.25, 0.5 and 0.75.
    """
    if palette != "jet":
        raise ValueError(f"unknown palette {palette!r}")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3 and values.shape[0] == 1:
        values = values[0]
    if values.ndim != 2:
        raise ValueError(f"expected a single-channel map, got shape {values.shape}")
    if np.isnan(values).any():
        raise ValueError("heatmap input contains NaN")
    v = np.clip(values, 0.0, 1.0)
    xs = [b[0] for b in JET_BREAKPOINTS]
    rgb = [np.interp(v, xs, [b[1][c] for b in JET_BREAKPOINTS]) for c in range(3)]
    return np.rint(np.stack(rgb, axis=-1)).astype(np.uint8)
