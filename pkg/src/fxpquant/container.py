"""Binary container files for models, compiled programs, and raw tensors.

All multi-byte values are little-endian.  A container is:

    magic     8 bytes   (b"FXQMDL01" model / b"FXQPRG01" program)
    n_sections u32
    section * n_sections

and each section is:

    name_len  u16
    name      utf-8 bytes
    dtype     u8        (codes in DTYPE_CODES; 7 = raw bytes, e.g. JSON)
    ndim      u8
    shape     u64 * ndim
    nbytes    u64
    data      raw little-endian array bytes (C order)

Structural metadata lives in a raw-bytes section named "meta" holding JSON
restricted to ints, strings, bools, lists and objects; every floating-point
quantity is stored as a typed f64 array section so the file round-trips
bit-exactly from any language.  Program containers contain no float-typed
sections at all.

Raw tensor files (.fxt) carry one fixed-point tensor:

    magic  4 bytes b"FXT1"
    signed u8, word_length u8, fractional_length i8, ndim u8
    shape  u32 * ndim
    data   int32 mantissas, little-endian, C order
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import InputError
from .formats import FixFormat, FixTensor

MODEL_MAGIC = b"FXQMDL01"
PROGRAM_MAGIC = b"FXQPRG01"
TENSOR_MAGIC = b"FXT1"

DTYPE_CODES = {
    np.dtype("uint8"): 0,
    np.dtype("int8"): 1,
    np.dtype("int16"): 2,
    np.dtype("int32"): 3,
    np.dtype("int64"): 4,
    np.dtype("float32"): 5,
    np.dtype("float64"): 6,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
RAW_BYTES_CODE = 7
FLOAT_CODES = (5, 6)


def pack_sections(magic: bytes, sections: dict[str, np.ndarray | bytes]) -> bytes:
    out = [magic, struct.pack("<I", len(sections))]
    for name, payload in sections.items():
        name_b = name.encode("utf-8")
        if isinstance(payload, bytes):
            code, ndim, shape, data = RAW_BYTES_CODE, 0, (), payload
        else:
            arr = np.asarray(payload)
            if arr.dtype not in DTYPE_CODES:
                raise InputError(f"unsupported section dtype {arr.dtype} for {name!r}")
            code, ndim, shape = DTYPE_CODES[arr.dtype], arr.ndim, arr.shape
            data = np.ascontiguousarray(arr).astype(
                arr.dtype.newbyteorder("<"), copy=False
            ).tobytes()
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<BB", code, ndim))
        out.append(struct.pack(f"<{ndim}Q", *shape))
        out.append(struct.pack("<Q", len(data)))
        out.append(data)
    return b"".join(out)


def unpack_sections(blob: bytes, magic: bytes) -> dict[str, np.ndarray | bytes]:
    if blob[:8] != magic:
        raise InputError(f"bad container magic {blob[:8]!r}, expected {magic!r}")
    (count,) = struct.unpack_from("<I", blob, 8)
    pos, sections = 12, {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        data = blob[pos : pos + nbytes]
        pos += nbytes
        if code == RAW_BYTES_CODE:
            sections[name] = data
        else:
            dt = CODE_DTYPES[code].newbyteorder("<")
            sections[name] = np.frombuffer(data, dtype=dt).reshape(shape).astype(
                CODE_DTYPES[code]
            )
    return sections


def section_dtype_codes(blob: bytes) -> dict[str, int]:
    """Map of section name to dtype code, without materializing the arrays."""
    (count,) = struct.unpack_from("<I", blob, 8)
    pos, codes = 12, {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2 + 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", blob, pos)
        pos += 8 + nbytes
        codes[name] = code
    return codes


def encode_meta(meta: dict) -> bytes:
    _assert_float_free(meta, "meta")
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_meta(data: bytes) -> dict:
    return json.loads(data.decode("utf-8"))


def _assert_float_free(obj, path: str):
    if isinstance(obj, float):
        raise InputError(f"float {obj!r} at {path}: store floats as f64 sections instead")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _assert_float_free(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _assert_float_free(v, f"{path}[{i}]")


def atomic_write_bytes(path: str, data: bytes):
    """Write via a temp file and rename so partial artifacts never appear."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".fxq-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_tensor(path: str, t: FixTensor):
    fmt = t.fmt
    m = np.ascontiguousarray(t.mantissa, dtype=np.int32)
    head = TENSOR_MAGIC + struct.pack(
        "<BBbB", int(fmt.signed), fmt.word_length, fmt.fractional_length, m.ndim
    )
    head += struct.pack(f"<{m.ndim}I", *m.shape)
    atomic_write_bytes(path, head + m.astype("<i4").tobytes())


def read_tensor(path: str) -> FixTensor:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != TENSOR_MAGIC:
        raise InputError(f"bad tensor magic {blob[:4]!r}")
    signed, wl, fl, ndim = struct.unpack_from("<BBbB", blob, 4)
    shape = struct.unpack_from(f"<{ndim}I", blob, 8)
    data = np.frombuffer(blob, dtype="<i4", offset=8 + 4 * ndim).reshape(shape)
    return FixTensor(data.astype(np.int64), FixFormat(wl, fl, signed=bool(signed)))
