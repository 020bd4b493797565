"""Binary checkpoints.

Layout, little-endian::

    magic "MOSK" | u32 version | u32 len + config text | u64 step
    u32 count, then per array: u16 len + name | u8 dtype code | u8 ndim | u32 dims | raw bytes
    32-byte sha256 of everything before it

Arrays are ``param/<name>`` for every model and router parameter (frozen ones
included) and ``adam_m/<name>``, ``adam_v/<name>`` for optimiser moments; the
optimiser step counter is stored as ``adam_step``.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from . import config as C

MAGIC = b"MOSK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _arrays(exp) -> dict[str, np.ndarray]:
    out = {}
    for prefix, module in (("model.", exp.model), ("router.", exp.router)):
        for name, p in module.named_parameters(prefix):
            out[f"param/{name}"] = p.data
    st = exp.optimizer.state
    for name in exp.optimizer.params:
        if name in st.exp_avg:
            out[f"adam_m/{name}"] = st.exp_avg[name]
            out[f"adam_v/{name}"] = st.exp_avg_sq[name]
    out["adam_step"] = np.array([st.step], dtype=np.int64)
    return out


def dumps(exp) -> bytes:
    buf = io.BytesIO()
    text = C.serialize(exp.config).encode()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(text)) + text + struct.pack("<Q", exp.step))
    arrays = _arrays(exp)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)) + key + struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(_DTYPES[code], copy=False).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save(exp, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(exp))
    tmp.replace(path)


def parse(blob: bytes) -> tuple[C.RunConfig, int, dict[str, np.ndarray]]:
    if len(blob) < 48 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    version, tlen = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    config = C.parse(body[pos:pos + tlen].decode())
    pos += tlen
    (step,) = struct.unpack_from("<Q", body, pos)
    (count,) = struct.unpack_from("<I", body, pos + 8)
    pos += 12
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", body, pos)
        name = body[pos + 2:pos + 2 + klen].decode()
        pos += 2 + klen
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return config, step, arrays


def load(path: str | Path):
    """Rebuild the experiment exactly as saved."""
    from .training import Experiment

    config, step, arrays = parse(Path(path).read_bytes())
    exp = Experiment(config)
    restore(exp, step, arrays)
    return exp


def restore(exp, step: int, arrays: dict[str, np.ndarray]) -> None:
    for prefix, module in (("model.", exp.model), ("router.", exp.router)):
        for name, p in module.named_parameters(prefix):
            key = f"param/{name}"
            if key not in arrays:
                raise CheckpointError(f"missing tensor {key}")
            if arrays[key].shape != p.shape:
                raise CheckpointError(f"shape mismatch for {key}: {arrays[key].shape} vs {p.shape}")
            p.data = arrays[key].astype(p.dtype)
    st = exp.optimizer.state
    st.step = int(arrays["adam_step"][0])
    st.exp_avg = {n: arrays[f"adam_m/{n}"] for n in exp.optimizer.params if f"adam_m/{n}" in arrays}
    st.exp_avg_sq = {n: arrays[f"adam_v/{n}"] for n in exp.optimizer.params if f"adam_v/{n}" in arrays}
    exp.step = step
    exp.model.clear_cache()
