"""LKC1 tensor container: named float tensors in one flat binary file.

Layout:
    bytes 0..3    magic ``LKC1``
    bytes 4..7    little-endian u32, manifest byte length M
    bytes 8..8+M  UTF-8 manifest, one entry per line:
                      <name> <dtype> <shape> <offset>
                  where dtype is ``f32`` or ``f64``, shape is comma-joined
                  positive extents (e.g. ``8,1,3,3``), and offset is the
                  byte position of the payload relative to the end of the
                  manifest (byte 8+M).
    rest          concatenated row-major little-endian IEEE-754 payloads.

Round-trips are bit-exact.  Names may be any non-empty string without
whitespace or newlines; dots are conventional for hierarchy
(``block0.branch1.kernel``).
"""

import struct

import numpy as np

MAGIC = b"LKC1"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class ContainerError(ValueError):
    """Malformed LKC1 file or invalid entry."""


def _check_name(name: str) -> None:
    if not name or any(c.isspace() for c in name):
        raise ContainerError(f"invalid tensor name {name!r}: must be non-empty, no whitespace")


def save_tensors(tensors: dict, path) -> None:
    """Write named float32/float64 arrays to an LKC1 file.

    Insertion order of ``tensors`` is preserved in the manifest.
    """
    lines = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        _check_name(name)
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_NAMES:
            raise ContainerError(f"{name}: dtype {arr.dtype} not storable (f32/f64 only)")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        dt = _DTYPE_NAMES[arr.dtype]
        shape = ",".join(str(e) for e in arr.shape)
        lines.append(f"{name} {dt} {shape} {offset}")
        data = arr.astype(_DTYPES[dt], copy=False).tobytes()
        payloads.append(data)
        offset += len(data)
    manifest = ("\n".join(lines) + "\n" if lines else "").encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for data in payloads:
            f.write(data)


def load_tensors(path) -> dict:
    """Read an LKC1 file back into an ordered ``{name: ndarray}`` dict."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not an LKC1 container")
    (mlen,) = struct.unpack("<I", raw[4:8])
    if 8 + mlen > len(raw):
        raise ContainerError(f"{path}: truncated manifest")
    manifest = raw[8 : 8 + mlen].decode("utf-8")
    payload = raw[8 + mlen :]
    out = {}
    for line in manifest.splitlines():
        if not line.strip():
            continue
        try:
            name, dt, shape_s, off_s = line.split()
            shape = tuple(int(e) for e in shape_s.split(","))
            off = int(off_s)
            dtype = _DTYPES[dt]
        except (ValueError, KeyError) as e:
            raise ContainerError(f"{path}: bad manifest line {line!r}") from e
        n = int(np.prod(shape))
        nbytes = n * dtype.itemsize
        if off < 0 or off + nbytes > len(payload):
            raise ContainerError(f"{path}: entry {name!r} payload out of bounds")
        arr = np.frombuffer(payload, dtype=dtype, count=n, offset=off).reshape(shape)
        out[name] = arr.copy()  # own the memory; file buffer is released
    return out


def encode_text(text: str) -> np.ndarray:
    """Encode a UTF-8 string as an f64 byte-value tensor (container-storable)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    """Inverse of :func:`encode_text`."""
    return arr.astype(np.uint8).tobytes().decode("utf-8")
