"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"H2FXCKPT"
    4 bytes   format version (uint32)
    8 bytes   header length N (uint64)
    N bytes   UTF-8 JSON header: stage tag, resolved run config, and for every
              array its name, dtype, shape, byte offset and length
    ...       concatenated raw array payloads
    4 bytes   CRC32 of header + payload

Floating arrays are stored as little-endian float32, integer buffers as int64.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import CorruptCheckpoint, MissingCheckpoint

MAGIC = b"H2FXCKPT"
VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


def _to_array(t: torch.Tensor) -> tuple[str, np.ndarray]:
    a = t.detach().cpu().numpy()
    if np.issubdtype(a.dtype, np.floating):
        return "<f4", a.astype("<f4")
    return "<i8", a.astype("<i8")


def save_checkpoint(path, arrays: dict, stage: str, config: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Write ``arrays`` (name -> tensor/state dict entries) under a stage tag."""
    entries, chunks, offset = [], [], 0
    for name, t in arrays.items():
        t = t if isinstance(t, torch.Tensor) else torch.as_tensor(t)
        dtype, a = _to_array(t)
        raw = a.tobytes(order="C")
        entries.append({"name": name, "dtype": dtype, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"stage": stage, "config": config, "extra": extra or {}, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    body = struct.pack("<I", VERSION) + struct.pack("<Q", len(header)) + header + payload
    crc = zlib.crc32(header + payload) & 0xFFFFFFFF
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + body + struct.pack("<I", crc))


def load_checkpoint(path, expected_stage: Optional[str] = None) -> tuple[OrderedDict, dict]:
    """Return (name -> tensor, header). Raises CorruptCheckpoint on any damage."""
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint {path} does not exist")
    blob = path.read_bytes()
    if len(blob) < 24 or blob[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic or truncated preamble")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<Q", blob[12:20])
    start = 20
    if start + hlen + 4 > len(blob):
        raise CorruptCheckpoint(f"{path}: truncated header")
    header_raw = blob[start:start + hlen]
    payload = blob[start + hlen:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(header_raw + payload) & 0xFFFFFFFF != crc:
        raise CorruptCheckpoint(f"{path}: checksum mismatch (truncated or modified)")
    try:
        header = json.loads(header_raw.decode("utf-8"))
    except ValueError as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    if expected_stage is not None and header.get("stage") != expected_stage:
        raise CorruptCheckpoint(f"{path}: stage {header.get('stage')!r}, expected {expected_stage!r}")
    arrays = OrderedDict()
    for e in header["arrays"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise CorruptCheckpoint(f"{path}: unknown dtype {e['dtype']!r}")
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if n != e["nbytes"] or e["offset"] + n > len(payload):
            raise CorruptCheckpoint(f"{path}: array {e['name']} overruns payload")
        a = np.frombuffer(payload, dtype=dt, count=n // dt.itemsize, offset=e["offset"])
        arrays[e["name"]] = torch.from_numpy(a.reshape(e["shape"]).copy())
    return arrays, header


def module_arrays(modules: dict) -> OrderedDict:
    """Flatten ``{"prefix": nn.Module}`` into one name -> tensor mapping."""
    out = OrderedDict()
    for prefix, m in modules.items():
        for k, v in m.state_dict().items():
            out[f"{prefix}.{k}"] = v
    return out


def restore_modules(modules: dict, arrays: dict) -> None:
    """Load arrays produced by :func:`module_arrays`, validating every shape."""
    for prefix, m in modules.items():
        state = m.state_dict()
        for k, v in state.items():
            name = f"{prefix}.{k}"
            if name not in arrays:
                raise CorruptCheckpoint(f"checkpoint lacks {name}")
            if tuple(arrays[name].shape) != tuple(v.shape):
                raise CorruptCheckpoint(
                    f"{name}: checkpoint shape {tuple(arrays[name].shape)} vs model {tuple(v.shape)}")
        extra = {k for k in arrays if k.startswith(prefix + ".")} - {f"{prefix}.{k}" for k in state}
        if extra:
            raise CorruptCheckpoint(f"unexpected arrays for {prefix}: {sorted(extra)[:3]}")
        m.load_state_dict({k: arrays[f"{prefix}.{k}"].to(v.dtype) for k, v in state.items()})
