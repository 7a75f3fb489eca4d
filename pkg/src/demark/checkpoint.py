"""Binary checkpoint container: named nd-arrays in a fixed little-endian layout.

Layout: magic "WMFK", version u32, tensor count u32, then per tensor (sorted by
name): name length u16, UTF-8 name, dtype byte, rank u8, dims u32 each, raw
little-endian values.
"""

import struct

import numpy as np

MAGIC = b"WMFK"
VERSION = 1

_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1,
             np.dtype("int64"): 2, np.dtype("uint8"): 3}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors) -> None:
    """tensors: dict name -> ndarray (float32/float64/int64/uint8)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            if arr.dtype not in _CODE_FOR:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            code = _CODE_FOR[arr.dtype]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", code))
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def _take(buf, offset, n, what):
    if offset + n > len(buf):
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf[offset:offset + n], offset + n


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    chunk, off = _take(buf, 0, 4, "magic")
    if chunk != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    chunk, off = _take(buf, off, 4, "version")
    version = struct.unpack("<I", chunk)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    chunk, off = _take(buf, off, 4, "tensor count")
    count = struct.unpack("<I", chunk)[0]

    tensors = {}
    for _ in range(count):
        chunk, off = _take(buf, off, 2, "name length")
        name_len = struct.unpack("<H", chunk)[0]
        chunk, off = _take(buf, off, name_len, "name")
        name = chunk.decode("utf-8")
        chunk, off = _take(buf, off, 1, f"{name} dtype")
        code = chunk[0]
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        chunk, off = _take(buf, off, 1, f"{name} rank")
        rank = chunk[0]
        dims = []
        for _ in range(rank):
            chunk, off = _take(buf, off, 4, f"{name} dims")
            dims.append(struct.unpack("<I", chunk)[0])
        dtype = np.dtype(_DTYPE_CODES[code])
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if dims else dtype.itemsize
        chunk, off = _take(buf, off, nbytes, f"{name} data")
        tensors[name] = np.frombuffer(chunk, dtype=dtype).reshape(dims).copy()
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after {count} tensors")
    return tensors


def load_into(named_params, tensors, prefix: str = "") -> None:
    """Copy checkpoint arrays into live parameter tensors, strict about names."""
    for name, param in named_params.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(param.shape):
            raise CheckpointError(
                f"shape mismatch for {key}: checkpoint {tuple(arr.shape)} vs "
                f"model {tuple(param.shape)}")
        param.data[...] = arr.astype(param.dtype, copy=False)
