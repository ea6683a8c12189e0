"""Bit-exact binary checkpoints for gated models.

Layout (all integers little-endian):

    magic   8 bytes  b"HATCKPT1"
    count   u64      number of entries
    entry   repeated, sorted by name:
        name_len  u32
        name      UTF-8 bytes
        dtype     u8   (0 = float64, 1 = float32, 2 = uint8 bitmask)
        rank      u64
        extents   rank * u64
        payload   raw little-endian C-order array bytes

Entry names mirror the model: gated layers save `{tag}/weight` and
`{tag}/bias`; each masker saves `{tag}/embeddings` ([tasks, features]),
`{tag}/cumulative`, and one `{tag}/stored/{t}` bitmask per finalized task;
task-indexed modules save `{tag}/{t}/{param}`; untagged plain layers are
named by pipeline position (`step3/weight`). The launch configuration rides
along as UTF-8 bytes under `meta/config` so a checkpoint suffices to rebuild
the network that wrote it.
"""

import struct

import numpy as np

from .layers import (
    HATMasker,
    LayerNorm,
    Linear,
    Sequential,
    TaskIndexed,
    _GatedWeightedLayer,
)
from .tensor import ShapeError, UsageError

__all__ = ["read_entries", "write_entries", "model_state", "load_model_state",
           "config_text", "MAGIC"]

MAGIC = b"HATCKPT1"
CONFIG_ENTRY = "meta/config"

_CODE_TO_DTYPE = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}


def _dtype_code(arr: np.ndarray) -> int:
    kind = arr.dtype
    if kind == np.float64:
        return 0
    if kind == np.float32:
        return 1
    if kind == np.uint8 or kind == np.bool_:
        return 2
    raise UsageError(f"cannot checkpoint dtype {arr.dtype}")


def write_entries(path, entries: dict) -> None:
    """Write named arrays to `path` in the checkpoint format."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<Q", len(entries))
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        code = _dtype_code(arr)
        if code == 2 and arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        # note: ascontiguousarray would promote rank-0 arrays to rank 1
        arr = np.asarray(arr, dtype=_CODE_TO_DTYPE[code], order="C")
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<B", code)
        blob += struct.pack("<Q", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise UsageError("truncated checkpoint file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_entries(path) -> dict:
    """Read a checkpoint back into {name: array}."""
    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _Reader(buf)
    if rd.take(len(MAGIC)) != MAGIC:
        raise UsageError(f"{path} is not a checkpoint file (bad magic)")
    (count,) = rd.unpack("<Q")
    entries = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<I")
        name = rd.take(name_len).decode("utf-8")
        (code,) = rd.unpack("<B")
        if code not in _CODE_TO_DTYPE:
            raise UsageError(f"unknown dtype code {code} for entry '{name}'")
        (rank,) = rd.unpack("<Q")
        shape = rd.unpack(f"<{rank}Q")
        dtype = _CODE_TO_DTYPE[code]
        payload = rd.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        entries[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if rd.pos != len(buf):
        raise UsageError(f"{path} has {len(buf) - rd.pos} trailing bytes")
    return entries


def _named_local(module) -> list:
    if isinstance(module, Linear):
        return [("weight", module.weight), ("bias", module.bias)]
    if isinstance(module, LayerNorm):
        return [("gain", module.gain), ("shift", module.shift)]
    raise UsageError(f"cannot checkpoint submodule type {type(module).__name__}")


def _walk(model: Sequential):
    """Yield ("param", name, tensor) and ("masker", tag, masker) records."""
    for i, step in enumerate(model.steps):
        if isinstance(step, _GatedWeightedLayer):
            yield "param", f"{step.layer_tag}/weight", step.weight
            if step.bias is not None:
                yield "param", f"{step.layer_tag}/bias", step.bias
            yield "masker", step.output_masker.layer_tag, step.output_masker
        elif isinstance(step, HATMasker):
            yield "masker", step.layer_tag, step
        elif isinstance(step, TaskIndexed):
            for t, sub in enumerate(step.submodules):
                for pname, param in _named_local(sub):
                    yield "param", f"{step.layer_tag}/{t}/{pname}", param
        elif isinstance(step, (Linear, LayerNorm)):
            for pname, param in _named_local(step):
                yield "param", f"step{i}/{pname}", param


def model_state(model: Sequential, config: str = None) -> dict:
    """Collect every array a bit-exact restore needs."""
    entries = {}

    def put(name, arr):
        if name in entries:
            raise UsageError(f"duplicate checkpoint entry '{name}'")
        entries[name] = arr

    for kind, name, obj in _walk(model):
        if kind == "param":
            put(name, obj.data.copy())
        else:
            put(f"{name}/embeddings",
                np.stack([row.data for row in obj.embedding_rows]))
            put(f"{name}/cumulative", obj.cumulative_mask.copy())
            for t, mask in sorted(obj.stored_task_masks.items()):
                put(f"{name}/stored/{t}", mask.astype(np.uint8))
    if config is not None:
        put(CONFIG_ENTRY, np.frombuffer(config.encode("utf-8"), dtype=np.uint8))
    return entries


def load_model_state(model: Sequential, entries: dict) -> None:
    """Restore a model in place from `read_entries` output.

    Every non-meta entry must be consumed and every expected entry present,
    so loading into a mismatched architecture fails loudly.
    """
    remaining = dict(entries)

    def pull(name):
        if name not in remaining:
            raise UsageError(f"checkpoint is missing entry '{name}'")
        return remaining.pop(name)

    def assign(tensor, name, value):
        if tensor.shape != value.shape:
            raise ShapeError(f"entry '{name}' has shape {value.shape}, "
                             f"model expects {tensor.shape}")
        tensor.data[...] = value
        tensor.grad = None

    for kind, name, obj in _walk(model):
        if kind == "param":
            assign(obj, name, pull(name))
        else:
            stacked = pull(f"{name}/embeddings")
            if stacked.shape != (len(obj.embedding_rows), obj.n_features):
                raise ShapeError(
                    f"entry '{name}/embeddings' has shape {stacked.shape}, "
                    f"masker expects {(len(obj.embedding_rows), obj.n_features)}")
            for row, values in zip(obj.embedding_rows, stacked):
                row.data[...] = values
                row.grad = None
            cumulative = pull(f"{name}/cumulative")
            if cumulative.shape != (obj.n_features,):
                raise ShapeError(f"entry '{name}/cumulative' has shape "
                                 f"{cumulative.shape}, masker expects "
                                 f"{(obj.n_features,)}")
            obj.cumulative_mask = cumulative.astype(np.float64)
            prefix = f"{name}/stored/"
            obj.stored_task_masks = {
                int(key[len(prefix):]): remaining.pop(key).astype(bool)
                for key in sorted(k for k in remaining if k.startswith(prefix))
            }

    leftovers = [k for k in remaining if not k.startswith("meta/")]
    if leftovers:
        raise UsageError(f"checkpoint entries not used by this model: "
                         f"{', '.join(sorted(leftovers))}")


def config_text(entries: dict) -> str:
    """The configuration string stored in a checkpoint, or empty."""
    if CONFIG_ENTRY not in entries:
        return ""
    return entries[CONFIG_ENTRY].tobytes().decode("utf-8")
