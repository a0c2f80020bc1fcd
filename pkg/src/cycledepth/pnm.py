"""Minimal binary PPM (P6, 8-bit RGB) and PFM (float) readers/writers.

Images are handled as ``(3, H, W)`` float arrays in [0, 1]; disparity maps as
``(H, W)`` float32 arrays.
"""
import numpy as np


class FormatError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.offset = offset


def _read_tokens(buf: bytes, count: int, path, allow_comments=True):
    """Read ``count`` whitespace-separated header tokens; return (tokens, offsets, end)."""
    tokens, offsets = [], []
    i, n = 0, len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if allow_comments and i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise FormatError(path, i, "truncated header")
        start = i
        while i < n and not buf[i : i + 1].isspace():
            i += 1
        tokens.append(buf[start:i])
        offsets.append(start)
    if i >= n or not buf[i : i + 1].isspace():
        raise FormatError(path, i, "expected a single whitespace byte after the header")
    return tokens, offsets, i + 1


def _parse_int(tok, off, path, what):
    try:
        v = int(tok)
    except ValueError:
        raise FormatError(path, off, f"bad {what} {tok!r}") from None
    if v <= 0:
        raise FormatError(path, off, f"{what} must be positive, got {v}")
    return v


def save_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"save_ppm expects a (3, H, W) array, got {image.shape}")
    _, h, w = image.shape
    q = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    tokens, offsets, start = _read_tokens(buf, 4, path)
    if tokens[0] != b"P6":
        raise FormatError(path, offsets[0], f"bad magic {tokens[0]!r}, expected b'P6'")
    w = _parse_int(tokens[1], offsets[1], path, "width")
    h = _parse_int(tokens[2], offsets[2], path, "height")
    maxval = _parse_int(tokens[3], offsets[3], path, "maxval")
    if maxval != 255:
        raise FormatError(path, offsets[3], f"only 8-bit PPM (maxval 255) is supported, got {maxval}")
    need = w * h * 3
    if len(buf) - start < need:
        raise FormatError(path, len(buf), f"raster truncated: need {need} bytes after offset {start}")
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(h, w, 3)
    return (raster.transpose(2, 0, 1).astype(np.float32) / np.float32(255))


def save_pfm(path, disparity: np.ndarray) -> None:
    """Write a grayscale little-endian PFM (rows stored bottom to top)."""
    disparity = np.asarray(disparity, dtype=np.float32)
    if disparity.ndim != 2:
        raise ValueError(f"save_pfm expects an (H, W) array, got {disparity.shape}")
    h, w = disparity.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(disparity[::-1], dtype="<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    """Read a PFM; ``Pf`` returns ``(H, W)``, ``PF`` returns ``(3, H, W)``."""
    with open(path, "rb") as f:
        buf = f.read()
    tokens, offsets, start = _read_tokens(buf, 4, path, allow_comments=False)
    if tokens[0] not in (b"Pf", b"PF"):
        raise FormatError(path, offsets[0], f"bad magic {tokens[0]!r}, expected b'Pf' or b'PF'")
    channels = 1 if tokens[0] == b"Pf" else 3
    w = _parse_int(tokens[1], offsets[1], path, "width")
    h = _parse_int(tokens[2], offsets[2], path, "height")
    try:
        scale = float(tokens[3])
    except ValueError:
        raise FormatError(path, offsets[3], f"bad scale {tokens[3]!r}") from None
    if scale == 0:
        raise FormatError(path, offsets[3], "scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(buf) - start < count * 4:
        raise FormatError(path, len(buf), f"raster truncated: need {count * 4} bytes after offset {start}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=start).astype(np.float32)
    data = data.reshape(h, w, channels)[::-1]
    if channels == 1:
        return np.ascontiguousarray(data[:, :, 0])
    return np.ascontiguousarray(data.transpose(2, 0, 1))
