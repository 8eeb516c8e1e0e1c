"""Binary and text file formats.

* ``UTT1`` tensors: magic ``b"UTT1"``, little-endian u32 order ``N``, ``N`` u32
  extents, then the float64 little-endian values with the last index fastest.
* Chunked containers: a 4-byte magic, u32 version, then chunks made of an
  8-byte NUL-padded ASCII name, a u64 payload length and the payload.
* Landmark ``pts`` files (``version: 1`` / ``n_points`` / braces), visibility
  sidecars (one ``0`` or ``1`` per line) and binary 8-bit PGM (``P5``) images.
"""
import io
import struct
from pathlib import Path

import numpy as np

from .exceptions import DataFormatError

TENSOR_MAGIC = b"UTT1"
CHUNK_NAME_SIZE = 8
PTS_DECIMALS = 6


def tensor_to_bytes(x):
    x = np.asarray(x, dtype="<f8")
    if x.ndim < 1:
        x = x.reshape(1)
    header = TENSOR_MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return header + np.ascontiguousarray(x).tobytes()


def tensor_from_bytes(buf, offset=0, path=None):
    """Parse one tensor starting at ``offset``; return ``(array, next_offset)``."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise DataFormatError("missing UTT1 magic", path)
    try:
        (order,) = struct.unpack_from("<I", buf, offset + 4)
        if order < 1:
            raise DataFormatError("tensor order must be at least 1", path)
        dims = struct.unpack_from(f"<{order}I", buf, offset + 8)
    except struct.error as exc:
        raise DataFormatError("truncated tensor header", path) from exc
    start = offset + 8 + 4 * order
    count = int(np.prod(dims))
    end = start + 8 * count
    if end > len(buf):
        raise DataFormatError("truncated tensor payload", path)
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=start)
    return values.astype(np.float64).reshape(dims), end


def write_tensor(path, x):
    Path(path).write_bytes(tensor_to_bytes(x))


def read_tensor(path):
    buf = Path(path).read_bytes()
    x, end = tensor_from_bytes(buf, path=path)
    if end != len(buf):
        raise DataFormatError("trailing bytes after tensor payload", path)
    return x


def write_container(path, magic, version, chunks):
    """Write ``chunks`` (an ordered mapping of name to bytes) to ``path``."""
    out = io.BytesIO()
    out.write(magic)
    out.write(struct.pack("<I", version))
    for name, payload in chunks.items():
        raw = name.encode("ascii")
        if len(raw) > CHUNK_NAME_SIZE:
            raise ValueError(f"chunk name {name!r} longer than {CHUNK_NAME_SIZE} bytes")
        out.write(raw.ljust(CHUNK_NAME_SIZE, b"\0"))
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    Path(path).write_bytes(out.getvalue())


def read_container(path, magic):
    """Return ``(version, {name: payload})``; chunk order is preserved."""
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise DataFormatError(f"missing {magic!r} magic", path)
    if len(buf) < 8:
        raise DataFormatError("truncated container header", path)
    (version,) = struct.unpack_from("<I", buf, 4)
    chunks = {}
    pos = 8
    while pos < len(buf):
        if pos + CHUNK_NAME_SIZE + 8 > len(buf):
            raise DataFormatError("truncated chunk header", path)
        name = buf[pos:pos + CHUNK_NAME_SIZE].rstrip(b"\0").decode("ascii")
        (length,) = struct.unpack_from("<Q", buf, pos + CHUNK_NAME_SIZE)
        pos += CHUNK_NAME_SIZE + 8
        if pos + length > len(buf):
            raise DataFormatError(f"chunk {name} is truncated", path)
        chunks[name] = buf[pos:pos + length]
        pos += length
    return version, chunks


def tensors_to_bytes(arrays):
    return b"".join(tensor_to_bytes(a) for a in arrays)


def tensors_from_bytes(buf, count=None, path=None):
    out = []
    pos = 0
    while pos < len(buf) and (count is None or len(out) < count):
        x, pos = tensor_from_bytes(buf, pos, path=path)
        out.append(x)
    return out, pos


def write_pts(path, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lines = ["version: 1", f"n_points: {len(points)}", "{"]
    lines += [f"{x:.{PTS_DECIMALS}f} {y:.{PTS_DECIMALS}f}" for x, y in points]
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pts(path):
    """Read an ``(L, 2)`` landmark array from a pts file."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    try:
        n = None
        start = None
        for i, ln in enumerate(lines):
            if ln.startswith("n_points"):
                n = int(ln.split(":", 1)[1])
            elif ln == "{":
                start = i + 1
                break
        if n is None or start is None:
            raise DataFormatError("missing n_points or '{'", path)
        body = lines[start:start + n]
        if len(body) != n or lines[start + n:start + n + 1] != ["}"]:
            raise DataFormatError(f"expected {n} points followed by '}}'", path)
        pts = np.array([[float(v) for v in ln.split()] for ln in body])
    except (ValueError, IndexError) as exc:
        raise DataFormatError(f"malformed pts file: {exc}", path) from exc
    if pts.shape != (n, 2):
        raise DataFormatError("each point needs exactly two coordinates", path)
    return pts


def write_visibility(path, visible):
    Path(path).write_text("".join("1\n" if v else "0\n" for v in visible))


def read_visibility(path):
    vals = []
    for i, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        ln = ln.strip()
        if not ln:
            continue
        if ln not in ("0", "1"):
            raise DataFormatError(f"visibility entry must be 0 or 1, got {ln!r}", path, i)
        vals.append(ln == "1")
    return np.array(vals, dtype=bool)


def write_pgm(path, image):
    """Write a grayscale raster as binary PGM; float inputs are taken in [0, 1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path):
    """Read a binary PGM into a ``uint8`` array."""
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("truncated PGM header", path)
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise DataFormatError("only binary PGM (P5) is supported", path)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataFormatError("only 8-bit PGM is supported", path)
    pos += 1
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise DataFormatError("truncated PGM pixel data", path)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
