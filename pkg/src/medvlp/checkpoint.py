"""Binary parameter checkpoints.

Layout (little-endian throughout): magic ``MMCK``, format version as u32,
then one block per entry: name length (u32), UTF-8 name, rank (u32), each
dimension (u32), float64 payload in row-major order. Entry order is
preserved, so a save/load round trip is byte-stable.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"MMCK"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, entries: dict[str, Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, tensor in entries.items():
            raw = name.encode("utf-8")
            arr = np.asarray(tensor.data, dtype=np.float64)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path, requires_grad: bool = False) -> dict[str, Tensor]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint {path}: while reading {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")

    entries: dict[str, Tensor] = {}
    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        count = 1
        for dim in dims:
            count *= dim
        payload = take(8 * count, f"payload of {name}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        entries[name] = Tensor(arr, requires_grad=requires_grad)
    return entries
