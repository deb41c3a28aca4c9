"""Binary checkpoint format.

Layout (all integers 32-bit little-endian)::

    b"LADR" | version | len | config JSON (UTF-8)
    | tensor count | per tensor: len | name (UTF-8) | rank | dims... | float32 LE values
"""

import json
import struct

import numpy as np
import torch

from .errors import FormatError
from .network import LADRCNN, NetworkConfig

MAGIC = b"LADR"
VERSION = 1


def _state_tensors(model):
    # num_batches_tracked is bookkeeping only; it is not stored
    return [(k, v) for k, v in model.state_dict().items() if not k.endswith("num_batches_tracked")]


def save_checkpoint(model, path):
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(cfg)), cfg]
    tensors = _state_tensors(model)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        cfg = NetworkConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
        model = LADRCNN(cfg)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config block: {exc}") from exc
    expected = dict(_state_tensors(model))
    count = r.u32()
    if count != len(expected):
        raise FormatError(f"expected {len(expected)} tensors, found {count}")
    state = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if name not in expected:
            raise FormatError(f"unexpected tensor {name!r}")
        if tuple(expected[name].shape) != shape:
            raise FormatError(f"shape mismatch for {name!r}: {shape} vs {tuple(expected[name].shape)}")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after tensor table")
    model.load_state_dict(state, strict=False)
    model.eval()
    return model
