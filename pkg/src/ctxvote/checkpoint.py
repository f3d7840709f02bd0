"""Named float64 array container.

Layout::

    CTXVOTE-CKPT 1\\n
    <manifest byte length>\\n
    <manifest: UTF-8 text>
    <payload: little-endian float64 values, arrays back to back>

Manifest lines are either ``@key value`` metadata or
``name shape offset`` with ``shape`` written as ``3x4`` (``-`` for a scalar)
and ``offset`` the byte offset of the array inside the payload.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = b"CTXVOTE-CKPT 1\n"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    lines = []
    for k, v in (meta or {}).items():
        if "\n" in k + v or " " in k:
            raise CheckpointError(f"metadata key/value not representable: {k!r}")
        lines.append(f"@{k} {v}")
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"invalid array name {name!r}")
        a = np.asarray(arr, dtype="<f8")
        shape = "x".join(str(d) for d in a.shape) if a.ndim else "-"
        lines.append(f"{name} {shape} {offset}")
        buf = a.tobytes(order="C")
        chunks.append(buf)
        offset += len(buf)
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(manifest)}\n".encode("ascii"))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        mlen = int(rest[:nl])
    except ValueError:
        raise CheckpointError(f"{path}: bad manifest length") from None
    manifest = rest[nl + 1 : nl + 1 + mlen].decode("utf-8")
    payload = rest[nl + 1 + mlen :]
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for lineno, line in enumerate(manifest.splitlines(), 1):
        if not line:
            continue
        if line.startswith("@"):
            key, _, val = line[1:].partition(" ")
            meta[key] = val
            continue
        parts = line.split(" ")
        if len(parts) != 3:
            raise CheckpointError(f"{path}: manifest line {lineno} malformed: {line!r}")
        name, shape_s, off_s = parts
        shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split("x"))
        off = int(off_s)
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: array {name} runs past end of payload")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=off).astype(np.float64).reshape(shape)
    return arrays, meta
