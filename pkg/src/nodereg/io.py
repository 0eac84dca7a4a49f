"""Persistence: minimal NIfTI-1, the DRV1 raw format, PGM snapshots, configs
and CSV tables.

Arrays are indexed ``[x, y, z]`` in memory. NIfTI stores x fastest, so
payloads are read and written in Fortran order; vector fields live in the
fifth NIfTI dimension and are channel-first in memory.
"""

import csv
import io
import math
from dataclasses import MISSING, fields
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
INTENT_VECTOR = 1007

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"), ("qoffset_x", "f4"),
    ("qoffset_y", "f4"), ("qoffset_z", "f4"), ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)), ("intent_name", "S16"), ("magic", "S4"),
]

# NIfTI datatype codes we read; writes use only the first three.
DATATYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
_CODES = {np.dtype(v).str[1:]: k for k, v in DATATYPES.items()}


def header_dtype(byteorder="<"):
    return np.dtype([(f[0], byteorder + f[1] if f[1][0] not in "S" else f[1]) + f[2:]
                     for f in _HEADER_FIELDS])


class NiftiError(ValueError):
    """Base class for malformed NIfTI input."""


class HeaderSizeError(NiftiError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


class RawFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# NIfTI-1


def _parse_header(raw):
    if len(raw) < HEADER_SIZE:
        raise HeaderSizeError(f"header has {len(raw)} bytes, expected {HEADER_SIZE}")
    for order in "<>":
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype(order))[0]
        if int(hdr["sizeof_hdr"]) == HEADER_SIZE:
            return hdr, order
    raise HeaderSizeError("sizeof_hdr is not 348 in either byte order")


def empty_header():
    """A zeroed little-endian header with the single-file magic."""
    hdr = np.zeros((), dtype=header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["magic"] = b"n+1"
    hdr["pixdim"] = 1.0
    hdr["srow_x"] = (1, 0, 0, 0)
    hdr["srow_y"] = (0, 1, 0, 0)
    hdr["srow_z"] = (0, 0, 1, 0)
    return hdr


def read_nifti(path, vector=None):
    """Read an uncompressed single-file NIfTI-1 volume.

    Parameters
    ----------
    path : str or Path
    vector : bool, optional
        Return a channel-first field. Defaults to ``True`` when the fifth
        dimension is larger than one.

    Returns
    -------
    data : ndarray
        ``float64`` when scaling applies or the stored type is floating,
        the stored integer type otherwise.
    header : numpy.void
        Parsed header; pass it back to :func:`write_nifti` to keep the
        fields this module does not interpret.

    Raises
    ------
    HeaderSizeError, BadMagicError, UnsupportedDatatypeError, TruncatedPayloadError
    """
    raw = Path(path).read_bytes()
    hdr, order = _parse_header(raw)
    if bytes(hdr["magic"]).rstrip(b"\0") != b"n+1":
        raise BadMagicError(f"{path}: magic {bytes(hdr['magic'])!r} is not n+1")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {code}")
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: dim[0] = {ndim} out of range")
    shape = [int(n) for n in hdr["dim"][1:ndim + 1]]
    dtype = np.dtype(order + DATATYPES[code])
    offset = int(hdr["vox_offset"])
    count = math.prod(shape)
    if len(raw) < offset + count * dtype.itemsize:
        raise TruncatedPayloadError(
            f"{path}: payload needs {count * dtype.itemsize} bytes after offset {offset}, "
            f"file has {max(len(raw) - offset, 0)}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and math.isfinite(slope) and (slope != 1 or inter != 0):
        data = data.astype(np.float64) * slope + inter
    elif data.dtype.kind == "f":
        data = data.astype(np.float64)
    if vector is None:
        vector = ndim >= 5 and shape[4] > 1
    if vector:
        data = data.reshape(tuple(shape[:3]) + (1,) * (3 - min(ndim, 3)) + (-1,))
        d = data.shape[-1]
        if d not in (2, 3) or any(n != 1 for n in data.shape[d:3]):
            raise NiftiError(f"{path}: {d} vector components do not match the grid")
        spatial = data.shape[:d]
        data = np.moveaxis(data, -1, 0).reshape((d,) + spatial)
    else:
        # drop trailing singleton dimensions beyond the spatial ones
        while data.ndim > 2 and data.shape[-1] == 1:
            data = data[..., 0]
    return data, hdr


def _storage_dtype(data, label):
    if label or data.dtype.kind in "iub":
        lo, hi = (int(data.min()), int(data.max())) if data.size else (0, 0)
        if lo >= 0 and hi <= 255:
            return np.dtype("u1")
        if lo >= -32768 and hi <= 32767:
            return np.dtype("<i2")
        return np.dtype("<i4")
    return np.dtype("<f4")


def write_nifti(path, data, spacing=None, header=None, label=None, vector=False):
    """Write a scalar volume, label volume or channel-first vector field.

    Scalars are stored as float32, integer volumes as uint8 or int16 (int32
    only when the values do not fit). With ``vector=True`` the array is
    ``(d, *spatial)`` and goes to the fifth dimension. ``header`` fields other
    than the geometry, type and scaling entries are copied verbatim.
    """
    data = np.asarray(data)
    if data.ndim < 1 or data.ndim > 4:
        raise ValueError(f"cannot store an array with {data.ndim} dimensions")
    hdr = empty_header() if header is None else np.array(header).astype(header_dtype("<"))
    hdr = hdr.copy()
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["magic"] = b"n+1"
    if vector:
        if data.ndim not in (3, 4) or data.shape[0] != data.ndim - 1:
            raise ValueError(f"shape {data.shape} is not a channel-first 2-D/3-D field")
        d = data.shape[0]
        spatial = list(data.shape[1:]) + [1] * (3 - d)
        payload = np.moveaxis(data, 0, -1).reshape(spatial + [1, d])
        dims = [5] + spatial + [1, d, 1, 1]
        hdr["intent_code"] = INTENT_VECTOR
    else:
        payload = data
        dims = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
        if int(hdr["intent_code"]) == INTENT_VECTOR:
            hdr["intent_code"] = 0
    stored = _storage_dtype(data, bool(label))
    hdr["dim"] = dims
    hdr["datatype"] = _CODES[stored.str[1:]]
    hdr["bitpix"] = stored.itemsize * 8
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    if spacing is not None:
        pix = np.array(hdr["pixdim"], dtype=np.float32)
        pix[1:1 + len(spacing)] = spacing
        hdr["pixdim"] = pix
    body = np.asarray(payload).astype(stored).tobytes(order="F")
    Path(path).write_bytes(hdr.tobytes() + b"\0" * (VOX_OFFSET - HEADER_SIZE) + body)


def nifti_spacing(header, ndim):
    return tuple(float(p) for p in header["pixdim"][1:1 + ndim])


# ---------------------------------------------------------------------------
# DRV1 raw


def write_raw(path, volume):
    """``b"DRV1"``, three little-endian int32 dims, then float32 row-major data.

    2-D volumes are stored with a trailing dimension of 1.
    """
    volume = np.asarray(volume)
    if volume.ndim not in (1, 2, 3):
        raise RawFormatError(f"DRV1 stores 1-3 dimensions, got {volume.ndim}")
    dims = list(volume.shape) + [1] * (3 - volume.ndim)
    head = b"DRV1" + np.asarray(dims, dtype="<i4").tobytes()
    Path(path).write_bytes(head + np.ascontiguousarray(volume, dtype="<f4").tobytes())


def read_raw(path, ndim=None):
    """Inverse of :func:`write_raw`. Trailing unit dimensions are dropped
    unless ``ndim`` asks for them."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != b"DRV1":
        raise RawFormatError(f"{path}: missing DRV1 magic")
    dims = [int(n) for n in np.frombuffer(raw, dtype="<i4", count=3, offset=4)]
    if min(dims) < 1:
        raise RawFormatError(f"{path}: non-positive dimension in {dims}")
    count = math.prod(dims)
    if len(raw) - 16 != 4 * count:
        raise RawFormatError(
            f"{path}: dims {dims} need {4 * count} payload bytes, found {len(raw) - 16}")
    data = np.frombuffer(raw, dtype="<f4", offset=16).reshape(dims).astype(np.float32)
    if ndim is None:
        ndim = 3
        while ndim > 1 and dims[ndim - 1] == 1:
            ndim -= 1
    return data.reshape(dims[:ndim]) if ndim < 3 else data


def read_volume(path):
    """Dispatch on the file suffix (``.nii`` or ``.drv``) and return float64."""
    path = Path(path)
    if path.suffix == ".drv":
        return read_raw(path).astype(np.float64)
    data, _ = read_nifti(path)
    return data


# ---------------------------------------------------------------------------
# PGM snapshots


def slice_image(volume, axis=1):
    """Mid slice of a 3-D volume along ``axis``; 2-D input is returned as is."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim == 2:
        return volume
    if volume.ndim != 3:
        raise ValueError("snapshots need a 2-D or 3-D volume")
    return np.take(volume, volume.shape[axis] // 2, axis=axis)


def to_uint8(image):
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.rint((image - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def write_slice_snapshot(volume, axis, path):
    """Binary PGM (P5) of the mid slice, min and max mapped to 0 and 255.

    Rows of the picture run along the first remaining axis.
    """
    pixels = to_uint8(slice_image(volume, axis))
    rows, cols = pixels.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(raw[-rows * cols:], dtype=np.uint8).reshape(rows, cols)


# ---------------------------------------------------------------------------
# configuration


def _converter(f):
    default = f.default if f.default is not MISSING else None
    kind = f.type if isinstance(f.type, type) else type(default)
    if kind is bool:
        return lambda s: {"true": True, "false": False, "1": True, "0": False}[s.lower()]
    if kind is int:
        return int
    if kind is float:
        return float
    if kind is tuple:
        return lambda s: tuple(float(x) if "." in x or "e" in x.lower() else int(x)
                               for x in s.replace(",", " ").split())
    return str


def config_schema(*classes, exclude=("shape", "seed")):
    """Map each dataclass field name to a string converter."""
    schema = {}
    for cls in classes:
        for f in fields(cls):
            if f.name not in exclude:
                schema.setdefault(f.name, _converter(f))
    return schema


def parse_config(text, schema):
    """Strict flat ``key = value`` parser; ``#`` starts a comment.

    Raises
    ------
    ConfigError
        On malformed lines, unknown keys (matched case-sensitively),
        repeated keys, or values that fail conversion.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: key {key!r} given twice")
        try:
            out[key] = schema[key](value)
        except (ValueError, KeyError):
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key!r}") from None
    return out


def read_config(path, schema):
    return parse_config(Path(path).read_text(), schema)


def format_config(values):
    lines = []
    for key, value in values.items():
        if isinstance(value, tuple):
            value = " ".join(repr(x) for x in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV tables


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[c]) if isinstance(row, dict) else _cell(c) for c in
                         (columns if isinstance(row, dict) else row)])
    return buf.getvalue()


def write_csv(path, columns, rows):
    Path(path).write_text(csv_text(columns, rows))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_loss_trace(path, trace, columns=("epoch", "S", "L_J", "L_grad", "L_mag", "total")):
    write_csv(path, columns, trace)


def report_rows(report):
    """Flatten a registration report into ``(metric, value)`` rows."""
    rows = []
    for key in sorted(report):
        value = report[key]
        if isinstance(value, dict):
            rows.extend((f"{key}[{k}]", value[k]) for k in sorted(value))
        else:
            rows.append((key, value))
    return rows


def write_report(path, report):
    write_csv(path, ("metric", "value"), report_rows(report))


__all__ = [
    "BadMagicError", "ConfigError", "HeaderSizeError", "NiftiError", "RawFormatError",
    "TruncatedPayloadError", "UnsupportedDatatypeError", "config_schema", "parse_config",
    "read_config", "read_csv", "read_nifti", "read_pgm", "read_raw", "read_volume",
    "write_csv", "write_loss_trace", "write_nifti", "write_raw", "write_report",
    "write_slice_snapshot",
]
