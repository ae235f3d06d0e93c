"""Checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"DCACKPT1"
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header: {"plan": {...}, "meta": {...},
              "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
    ...       concatenated float32 little-endian tensor buffers; offsets are
              relative to the start of this data section

Tensor names are the model's state-dict keys, so backbone and DCAC
parameters are namespaced (``backbone.*``, ``dcac.*``). Header JSON is
written with sorted keys and tensors in state-dict order, which makes the
file a deterministic function of the parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .planner import PlanConfig

MAGIC = b"DCACKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor], plan: PlanConfig,
                    meta: dict[str, Any] | None = None) -> None:
    entries, buffers, offset = [], [], 0
    for name, tensor in state.items():
        buf = tensor.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C")
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(buf)})
        buffers.append(buf)
        offset += len(buf)
    header = json.dumps({"plan": plan.to_dict(), "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for buf in buffers:
            f.write(buf)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], PlanConfig, dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    data = memoryview(raw)[16 + n:]
    state = {}
    for e in header["tensors"]:
        chunk = data[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        state[e["name"]] = torch.from_numpy(arr)
    return state, PlanConfig.from_dict(header["plan"]), header["meta"]
