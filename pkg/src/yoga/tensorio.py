"""GTEN tensor dumps for golden tests: a binary form and a small-tensor text form."""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"GTEN"
VERSION = 1


def _as4(arr: np.ndarray) -> np.ndarray:
    if arr.ndim > 4:
        raise ValueError(f"GTEN holds at most 4 dimensions, got {arr.ndim}")
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape)


def dumps(arr) -> bytes:
    a = _as4(np.asarray(arr, dtype=np.float32))
    return MAGIC + struct.pack("<5I", VERSION, *a.shape) + a.astype("<f4").tobytes()


def loads(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise ValueError("not a GTEN dump (bad magic)")
    if len(data) < 24:
        raise ValueError("GTEN header truncated")
    version, *shape = struct.unpack("<5I", data[4:24])
    if version != VERSION:
        raise ValueError(f"unsupported GTEN version {version}")
    n = int(np.prod(shape)) * 4
    if len(data) != 24 + n:
        raise ValueError(f"GTEN payload has {len(data) - 24} bytes, expected {n}")
    return np.frombuffer(data[24:], dtype="<f4").reshape(shape).astype(np.float32)


def dumps_text(arr) -> str:
    """``GTEN 1 n c h w`` header followed by one ``repr``-exact float per line."""
    a = _as4(np.asarray(arr, dtype=np.float32))
    head = "GTEN {} {}\n".format(VERSION, " ".join(str(d) for d in a.shape))
    return head + "".join(f"{float(v)!r}\n" for v in a.reshape(-1))


def loads_text(text: str) -> np.ndarray:
    lines = text.split()
    if lines[:1] != ["GTEN"]:
        raise ValueError("not a GTEN text dump")
    version, shape = int(lines[1]), tuple(int(v) for v in lines[2:6])
    if version != VERSION:
        raise ValueError(f"unsupported GTEN version {version}")
    values = np.array([float(v) for v in lines[6:]], dtype=np.float32)
    if values.size != int(np.prod(shape)):
        raise ValueError("GTEN text value count does not match its shape")
    return values.reshape(shape)


def save(path: Union[str, Path], arr, text: bool = False) -> None:
    p = Path(path)
    if text:
        p.write_text(dumps_text(arr))
    else:
        p.write_bytes(dumps(arr))


def load(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    return loads(data) if data[:4] == MAGIC and data[4:5] != b" " else loads_text(data.decode())
