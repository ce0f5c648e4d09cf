"""Single-file model checkpoints.

Layout (little-endian)::

    b"MMCK" | u32 version | u32 len | config JSON (utf-8, sorted keys)
    u32 count | count x ( u16 len | name | u8 ndim | ndim x u32 dims | f32 payload )

Tensors are written in ``state_dict`` order as float32, so
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .fusion import FusionModel, model_from_description

MAGIC = b"MMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_json(model: FusionModel, extra: dict | None) -> bytes:
    doc = {"model": model.describe(), "extra": extra or {}}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(model: FusionModel, extra: dict | None = None) -> bytes:
    buf = io.BytesIO()
    cfg = _config_json(model, extra)
    buf.write(MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def save_checkpoint(model: FusionModel, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def parse_checkpoint(data: bytes) -> tuple[FusionModel, dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        doc = json.loads(data[pos:pos + n])
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            ndim = data[pos]
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            state[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    model = model_from_description(doc["model"])
    model.load_state_dict(state)
    model.eval()
    return model, doc["extra"]


def load_checkpoint(path) -> tuple[FusionModel, dict]:
    return parse_checkpoint(Path(path).read_bytes())
