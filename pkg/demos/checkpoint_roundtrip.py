"""
Checkpointing: named arrays in a small binary format, byte-determined by
the model state.

The writer sorts entries by name and fixes every integer width and byte
order, so the same state always produces the same bytes — handy for both
caching and honest reproducibility claims.

Run with:  python3 demos/checkpoint_roundtrip.py
"""

import os
import tempfile

import numpy as np

from taskgate import HATLinear, HATPayload, ReLU, Sequential, Tensor
from taskgate.checkpoint import (load_model_state, model_state, read_entries,
                                 write_entries)

rng = np.random.default_rng(42)
model = Sequential(
    HATLinear(6, 12, 2, "l1", np.random.default_rng(1)),
    ReLU(),
    HATLinear(12, 3, 2, "l2", np.random.default_rng(2)),
)

workdir = tempfile.mkdtemp()
path = os.path.join(workdir, "model.ckpt")

# ---------------------------------------------------------------------------
# 1. What goes in the file: every parameter and every masker's state,
#    under hierarchical names.

entries = model_state(model, config="demo=true\n")
write_entries(path, entries)
print(f"wrote {len(entries)} entries, {os.path.getsize(path)} bytes")
for name in sorted(entries)[:6]:
    arr = np.asarray(entries[name])
    print(f"  {name:<22} {str(arr.dtype):<8} {arr.shape}")

with open(path, "rb") as fh:
    print("file starts with magic:", fh.read(8))

# ---------------------------------------------------------------------------
# 2. Round trip into a model built with different random weights.

x = rng.standard_normal((4, 6))
original = model.forward(HATPayload(Tensor(x), task=0)).masked_data().data

fresh = Sequential(
    HATLinear(6, 12, 2, "l1", np.random.default_rng(99)),
    ReLU(),
    HATLinear(12, 3, 2, "l2", np.random.default_rng(98)),
)
load_model_state(fresh, read_entries(path))
restored = fresh.forward(HATPayload(Tensor(x), task=0)).masked_data().data
print("restored outputs bit-identical:", np.array_equal(original, restored))

# ---------------------------------------------------------------------------
# 3. Determinism: writing the same state twice gives the same bytes.

path2 = os.path.join(workdir, "again.ckpt")
write_entries(path2, model_state(model, config="demo=true\n"))
same = open(path, "rb").read() == open(path2, "rb").read()
print("second write byte-identical:", same)
