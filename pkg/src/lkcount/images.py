"""Minimal PGM/PPM (netpbm) reading and writing.

Images cross this boundary as float arrays in [0, 1] with shape [C, H, W]
(C = 1 for PGM, 3 for PPM).  Binary P5/P6 are written; P2/P3/P5/P6 with
maxval <= 255 are read.
"""

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes):
    i = 0
    n = len(data)
    while i < n:
        if data[i : i + 1].isspace():
            i += 1
        elif data[i : i + 1] == b"#":
            while i < n and data[i] != 0x0A:
                i += 1
        else:
            j = i
            while j < n and not data[j : j + 1].isspace():
                j += 1
            yield i, data[i:j]
            i = j


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    toks = _tokens(data)
    try:
        _, magic = next(toks)
        magic = magic.decode()
        header = [next(toks) for _ in range(3)]
    except StopIteration:
        raise ImageFormatError(f"{path}: truncated netpbm header") from None
    w, h, maxval = (int(t) for _, t in header)
    if maxval <= 0 or maxval > 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval}")
    channels = {"P2": 1, "P3": 3, "P5": 1, "P6": 3}.get(magic)
    if channels is None:
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    count = w * h * channels
    if magic in ("P5", "P6"):
        start = header[-1][0] + len(header[-1][1]) + 1  # single whitespace after maxval
        pix = np.frombuffer(data, dtype=np.uint8, count=count, offset=start)
    else:
        vals = [int(t) for _, t in toks]
        if len(vals) < count:
            raise ImageFormatError(f"{path}: expected {count} samples, got {len(vals)}")
        pix = np.array(vals[:count], dtype=np.uint8)
    img = pix.reshape(h, w, channels).transpose(2, 0, 1)
    return img.astype(np.float32) / maxval


def write_image(img: np.ndarray, path) -> None:
    """Write [C, H, W] floats in [0, 1] as binary PGM (C=1) or PPM (C=3)."""
    c, h, w = img.shape
    if c not in (1, 3):
        raise ImageFormatError(f"cannot write {c}-channel image as PGM/PPM")
    magic = b"P5" if c == 1 else b"P6"
    pix = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(pix.transpose(1, 2, 0).tobytes())
