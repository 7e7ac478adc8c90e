"""Reader/writer for the ``.npy`` array format and ``.npz`` archives of them.

Layout of one ``.npy`` member::

    \\x93NUMPY | major | minor | header_len (u16 LE for v1, u32 LE for v2/v3)
    | header: Python dict literal with 'descr', 'fortran_order', 'shape',
      space-padded and newline-terminated so the data starts 64-byte aligned
    | raw C-order array data

Only plain numeric dtypes are supported; object arrays (pickles) are rejected.
"""

from __future__ import annotations

import ast
import io
import struct
import zipfile
from os import PathLike

import numpy as np

MAGIC = b"\x93NUMPY"
SUPPORTED = {"u1", "i1", "u2", "i2", "u4", "i4", "u8", "i8", "f4", "f8", "b1"}


class NpyFormatError(ValueError):
    pass


def _descr(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    code = f"{dtype.kind}{dtype.itemsize}"
    if code not in SUPPORTED:
        raise NpyFormatError(f"unsupported dtype {dtype}")
    return ("|" if dtype.itemsize == 1 else "<") + code


def dumps(arr) -> bytes:
    """Serialise an array to ``.npy`` bytes (format version 1.0, little-endian data)."""
    arr = np.asarray(arr)
    if arr.dtype.itemsize > 1:
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    descr = _descr(arr.dtype)
    shape = tuple(int(s) for s in arr.shape)
    header = "{'descr': %r, 'fortran_order': False, 'shape': %r, }" % (descr, shape)
    # pad so that magic + version + len + header is a multiple of 64
    base = len(MAGIC) + 2 + 2
    pad = (-(base + len(header) + 1)) % 64
    header_bytes = (header + " " * pad + "\n").encode("latin1")
    if len(header_bytes) > 0xFFFF:
        raise NpyFormatError("header too long for format 1.0")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(bytes([1, 0]))
    out.write(struct.pack("<H", len(header_bytes)))
    out.write(header_bytes)
    out.write(arr.tobytes(order="C"))
    return out.getvalue()


def parse_header(buf: bytes) -> tuple[dict, int]:
    """Return the header dict and the offset of the array data."""
    if len(buf) < 10 or buf[:6] != MAGIC:
        raise NpyFormatError("bad magic bytes: not an NPY file")
    major, minor = buf[6], buf[7]
    if major == 1:
        (hlen,) = struct.unpack("<H", buf[8:10])
        start = 10
    elif major in (2, 3):
        if len(buf) < 12:
            raise NpyFormatError("truncated NPY header")
        (hlen,) = struct.unpack("<I", buf[8:12])
        start = 12
    else:
        raise NpyFormatError(f"unsupported NPY version {major}.{minor}")
    if len(buf) < start + hlen:
        raise NpyFormatError("truncated NPY header")
    text = buf[start:start + hlen].decode("utf8" if major == 3 else "latin1")
    try:
        header = ast.literal_eval(text)
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"malformed NPY header: {text!r}") from exc
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= header.keys():
        raise NpyFormatError(f"NPY header missing keys: {text!r}")
    return header, start + hlen


def loads(buf: bytes) -> np.ndarray:
    header, offset = parse_header(buf)
    descr = header["descr"]
    if not isinstance(descr, str) or descr[1:] not in SUPPORTED:
        raise NpyFormatError(f"unsupported dtype descr {descr!r}")
    if header["fortran_order"]:
        raise NpyFormatError("fortran_order=True arrays are not supported")
    shape = tuple(header["shape"])
    dtype = np.dtype(descr)
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * dtype.itemsize
    if len(buf) - offset < nbytes:
        raise NpyFormatError(
            f"truncated NPY payload: need {nbytes} bytes, have {len(buf) - offset}"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=not dtype.isnative)


def save(path: str | PathLike, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arr))


def load(path: str | PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())


def save_npz(path: str | PathLike, compress: bool = True, **arrays) -> None:
    mode = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    with zipfile.ZipFile(path, "w", compression=mode) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = mode
            zf.writestr(info, dumps(arr))


def load_npz(path: str | PathLike, members=None) -> dict[str, np.ndarray]:
    """Load the requested ``.npy`` members (all numeric ones when ``members`` is None)."""
    out = {}
    with zipfile.ZipFile(path) as zf:
        names = [n[:-4] for n in zf.namelist() if n.endswith(".npy")]
        wanted = names if members is None else list(members)
        for name in wanted:
            if name not in names:
                raise KeyError(f"{path}: no member {name!r} (have {names})")
            buf = zf.read(f"{name}.npy")
            if members is None:
                try:
                    out[name] = loads(buf)
                except NpyFormatError:
                    continue
            else:
                out[name] = loads(buf)
    return out
