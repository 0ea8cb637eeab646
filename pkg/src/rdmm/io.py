"""File formats: binary tensors, PGM rasters, JSON manifests and CSV logs.

All writes go to a temporary file in the destination directory which is then
renamed into place, so readers never observe partial files.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import FormatError, InvalidParameterError

__all__ = [
    "TENSOR_MAGIC",
    "write_tensor",
    "read_tensor",
    "write_pgm",
    "read_pgm",
    "normalize_intensity",
    "read_image",
    "write_image",
    "render_figure",
    "write_json",
    "read_json",
    "write_metrics_csv",
    "METRIC_COLUMNS",
]

TENSOR_MAGIC = b"RDMMTNS1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i4")}
_CODES = {"f": 0, "i": 1}
METRIC_COLUMNS = ("iteration", "total", "sim", "kinetic", "omt", "range", "step_size")


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------------------
# tensors


def encode_tensor(array) -> bytes:
    array = np.asarray(array)
    if array.dtype.kind == "f":
        code, dtype = 0, _DTYPES[0]
    elif array.dtype.kind in "iub":
        if array.size and (array.min() < -(2**31) or array.max() >= 2**31):
            raise InvalidParameterError("integer values do not fit in int32")
        code, dtype = 1, _DTYPES[1]
    else:
        raise InvalidParameterError(f"unsupported dtype {array.dtype}")
    header = TENSOR_MAGIC + struct.pack("<II", code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 16:
        raise FormatError("truncated tensor header", offset=len(data))
    if data[:8] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic", offset=0)
    code, rank = struct.unpack_from("<II", data, 8)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=8)
    end = 16 + 8 * rank
    if len(data) < end:
        raise FormatError("truncated tensor dims", offset=len(data))
    dims = struct.unpack_from(f"<{rank}Q", data, 16)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(data) - end
    if payload != expected:
        raise FormatError(
            f"payload has {payload} bytes, expected {expected}", offset=end + min(payload, expected)
        )
    out = np.frombuffer(data, dtype=dtype, offset=end).reshape(dims)
    return out.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, array):
    """Write ``array`` as a TensorFile (float64 or int32, little-endian, row-major)."""
    _atomic_write(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# PGM


def write_pgm(path, pixels, maxval: int | None = None):
    """Write integer pixels as binary PGM (P5); 16-bit when ``maxval > 255``."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise InvalidParameterError("PGM images are 2D")
    if maxval is None:
        maxval = 255 if pixels.size == 0 or pixels.max() <= 255 else 65535
    if not 0 < maxval < 65536:
        raise InvalidParameterError("maxval must lie in [1, 65535]")
    if pixels.size and (pixels.min() < 0 or pixels.max() > maxval):
        raise InvalidParameterError("pixel values out of range")
    dtype = ">u1" if maxval < 256 else ">u2"
    # first array axis runs along image rows
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n{maxval}\n".encode("ascii")
    _atomic_write(path, header + np.ascontiguousarray(pixels, dtype=dtype).tobytes())


def _pgm_token(data, pos):
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header", offset=start)
    return data[start:pos], pos


def decode_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise FormatError("not a binary PGM (P5) file", offset=0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        tok, new = _pgm_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"invalid PGM {name} {tok!r}", offset=new - len(tok))
        values.append(int(tok))
        pos = new
    width, height, maxval = values
    if not 0 < maxval < 65536 or width < 1 or height < 1:
        raise FormatError("PGM header values out of range", offset=pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", offset=pos)
    pos += 1
    dtype = np.dtype(">u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(
            f"truncated PGM payload: {len(data) - pos} of {need} bytes", offset=len(data)
        )
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return pixels.reshape(height, width).astype(np.int32)


def read_pgm(path) -> np.ndarray:
    """Raw integer pixels of a P5 PGM file, shape ``(height, width)``."""
    return decode_pgm(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# images


def normalize_intensity(values, low: float = 0.1, high: float = 99.9) -> np.ndarray:
    """Map the ``low`` and ``high`` percentiles to 0 and 1 and clamp.

    A constant image maps to all zeros.
    """
    values = np.asarray(values, dtype=float)
    lo, hi = np.percentile(values, [low, high])
    if not hi > lo:
        return np.zeros_like(values)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def _is_tensor(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(8) == TENSOR_MAGIC


def read_image(path, normalize: bool = True) -> np.ndarray:
    """Load a PGM or TensorFile image as floats, percentile-normalized by default."""
    values = read_tensor(path) if _is_tensor(path) else read_pgm(path)
    values = values.astype(float)
    return normalize_intensity(values) if normalize else values


def write_image(path, image, fmt: str = "tensor"):
    """Save a float image, as a TensorFile or as 16-bit PGM of ``[0, 1]`` values."""
    image = np.asarray(image, dtype=float)
    if fmt == "tensor":
        write_tensor(path, image)
    elif fmt == "pgm":
        write_pgm(path, np.rint(np.clip(image, 0.0, 1.0) * 65535).astype(np.int64), 65535)
    else:
        raise InvalidParameterError(f"unknown image format {fmt!r}")


def render_figure(field, kind: str, path, sigma_range=None):
    """Render a scalar field as an 8-bit PGM.

    ``gray`` stretches ``[min, max]``; ``signed`` maps ``[-a, a]`` with
    ``a = max |field|`` so zero is mid-gray; ``std_map`` maps ``sigma_range``
    (smallest and largest Gaussian) and ``detjac`` maps ``[0, 2]`` with
    clamping.
    """
    field = np.asarray(field, dtype=float)
    if not np.all(np.isfinite(field)):
        raise InvalidParameterError("cannot render a non-finite field")
    if kind == "gray":
        lo, hi = float(field.min()), float(field.max())
    elif kind == "signed":
        a = float(np.max(np.abs(field)))
        lo, hi = -a, a
    elif kind == "std_map":
        if sigma_range is None:
            raise InvalidParameterError("std_map rendering needs sigma_range")
        lo, hi = map(float, sigma_range)
    elif kind == "detjac":
        lo, hi = 0.0, 2.0
    else:
        raise InvalidParameterError(f"unknown figure kind {kind!r}")
    if hi > lo:
        scaled = np.clip((field - lo) / (hi - lo), 0.0, 1.0)
    else:
        scaled = np.full(field.shape, 0.5 if kind == "signed" else 0.0)
    # round off float noise first so that e.g. det = 1 - 1e-16 still lands on 128
    pixels = np.floor(np.round(scaled * 255.0, 9) + 0.5).astype(np.int64)
    write_pgm(path, pixels, 255)
    return pixels


# ----------------------------------------------------------------------------
# structured text


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


def write_json(path, obj):
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False)
    _atomic_write(path, (text + "\n").encode("utf-8"))


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", offset=exc.pos) from exc


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(f"{float(value):.17g}"))


def write_metrics_csv(path, rows, columns=METRIC_COLUMNS):
    """CSV of ``rows`` (dicts) restricted to ``columns``, floats with 17 significant digits."""
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    _atomic_write(path, buf.getvalue().encode("ascii"))


def write_table_csv(path, header, rows):
    """Generic CSV with the same number formatting as :func:`write_metrics_csv`."""
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    _atomic_write(path, buf.getvalue().encode("ascii"))
