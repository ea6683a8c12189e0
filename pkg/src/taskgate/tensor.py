"""Reverse-mode automatic differentiation on numpy arrays.

The graph is recorded on an explicit :class:`Tape`: operations executed while
a tape is active append nodes in creation order, and ``backward`` replays the
node list in exact reverse creation order. Outside a tape, every operation is
a plain numpy computation with no bookkeeping, which is what evaluation paths
use.

Gradient hooks attach to individual nodes. Each hook transforms an incoming
gradient before it is accumulated into the node's gradient slot; hooks on one
node fire in registration order, so registering ``f`` then ``g`` stores
``g(f(upstream))``.

Everything defaults to double precision. Single precision is available by
constructing tensors with ``dtype=np.float32``.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class UsageError(ValueError):
    """An operation was called in a way its contract forbids."""


class StateError(RuntimeError):
    """An object was driven through an invalid state transition."""


class HookHandle:
    """Removal token for a registered gradient hook."""

    def __init__(self, node: "Node", hook_id: int):
        self._node = node
        self._hook_id = hook_id

    def remove(self) -> None:
        self._node.hooks = [(h, fn) for h, fn in self._node.hooks if h != self._hook_id]


class Node:
    __slots__ = ("nid", "op", "parents", "backward_fn", "tensor", "hooks", "grad")

    def __init__(self, nid, op, parents, backward_fn, tensor):
        self.nid = nid
        self.op = op
        self.parents = parents          # per input: node id or None (non-differentiated)
        self.backward_fn = backward_fn  # out-gradient -> tuple of input gradients
        self.tensor = tensor
        self.hooks = []                 # [(hook_id, transform)] in registration order
        self.grad = None


class Tape:
    """Append-only record of one forward pass.

    Use as a context manager around the forward computation::

        with Tape() as tape:
            loss = model(x)
        loss.backward()

    A tape can be consumed by exactly one backward pass; call :meth:`reset`
    to clear gradient slots and run backward again over the same graph.
    Tapes are single-threaded; the active tape is tracked per thread.
    """

    _tls = threading.local()

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._next_hook_id = 0

    @classmethod
    def current(cls) -> Optional["Tape"]:
        return getattr(cls._tls, "active", None)

    def __enter__(self) -> "Tape":
        if Tape.current() is not None:
            raise UsageError("tapes do not nest; exit the active tape first")
        Tape._tls.active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._tls.active = None
        return False

    def reset(self) -> None:
        """Clear gradient slots so backward may run again on this graph."""
        for node in self.nodes:
            node.grad = None
        self.consumed = False

    def _add_node(self, op, parents, backward_fn, tensor) -> Node:
        node = Node(len(self.nodes), op, parents, backward_fn, tensor)
        self.nodes.append(node)
        return node

    def register_hook(self, node_id: int, transform: Callable[[np.ndarray], np.ndarray]) -> HookHandle:
        """Attach a shape-preserving gradient transform to a node."""
        if not 0 <= node_id < len(self.nodes):
            raise UsageError(f"unknown node id {node_id}")
        node = self.nodes[node_id]
        hook_id = self._next_hook_id
        self._next_hook_id += 1
        node.hooks.append((hook_id, transform))
        return HookHandle(node, hook_id)

    @staticmethod
    def _hooked(node: Node, grad: np.ndarray) -> np.ndarray:
        for _, transform in node.hooks:
            out = np.asarray(transform(grad))
            if out.shape != grad.shape:
                raise ShapeError(
                    f"gradient hook on node {node.nid} changed shape "
                    f"{grad.shape} -> {out.shape}"
                )
            grad = out
        return grad

    def backward(self, loss: "Tensor") -> None:
        if loss.shape != ():
            raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._node_tape is not self:
            raise UsageError("loss was not recorded on this tape")
        if self.consumed:
            raise StateError("tape already consumed by backward; call reset() first")
        self.consumed = True

        seed_node = self.nodes[loss._node_id]
        seed = np.ones((), dtype=loss.data.dtype)
        seed_node.grad = self._hooked(seed_node, seed)

        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            input_grads = node.backward_fn(node.grad)
            for parent_id, g in zip(node.parents, input_grads):
                if parent_id is None or g is None:
                    continue
                parent = self.nodes[parent_id]
                g = self._hooked(parent, np.asarray(g))
                parent.grad = g if parent.grad is None else parent.grad + g

        for node in self.nodes:
            t = node.tensor
            if node.grad is None or t is None or not t.requires_grad:
                continue
            if node.op == "leaf":
                t.grad = node.grad if t.grad is None else t.grad + node.grad
            else:
                t.grad = node.grad


class Tensor:
    """A shaped array of real values, optionally tracked on a tape.

    ``requires_grad`` marks trainable leaves; a leaf only joins a tape when an
    operation first touches it while that tape is active, and ``.grad``
    accumulates across backward passes until cleared.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and not (isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)):
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d shape, unlike calling it blind
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node_tape: Optional[Tape] = None
        self._node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self) -> Optional[int]:
        """Node id on the tape this tensor last joined, if any."""
        return self._node_id if self._node_tape is not None else None

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def register_hook(self, transform: Callable[[np.ndarray], np.ndarray]) -> HookHandle:
        """Register a gradient hook on this tensor's live tape node."""
        if self._node_tape is None:
            raise UsageError("tensor has no node; use it inside an active Tape first")
        return self._node_tape.register_hook(self._node_id, transform)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped, so only tensor operands get gradients
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def scale(self, c):
        return scale(self, c)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)

    def transpose(self):
        if self.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got shape {self.shape}")
        return permute(self, (1, 0))

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)


def _leaf_id(tape: Tape, t: Tensor) -> int:
    if t._node_tape is tape:
        return t._node_id
    node = tape._add_node("leaf", (), None, t)
    t._node_tape = tape
    t._node_id = node.nid
    return node.nid


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    tape = Tape.current()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        parents = tuple(_leaf_id(tape, t) if t.requires_grad else None for t in inputs)
        node = tape._add_node(op, parents, backward_fn, out)
        out._node_tape = tape
        out._node_id = node.nid
    return out


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.data.dtype)
    if arr.ndim == 0 and like.ndim > 0:
        arr = np.full(like.shape, arr[()], dtype=like.data.dtype)
    return Tensor(arr, requires_grad=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k] x [k,n], got {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return g @ b_data.T, a_data.T @ g

    return _record("matmul", (a, b), a_data @ b_data, backward_fn)


def _feature_axes(full_shape: tuple) -> tuple:
    # all axes except the feature axis (axis 1 for rank >= 2)
    return (0,) + tuple(range(2, len(full_shape)))


def _binary(op: str, a: Tensor, b, fwd, grad_a, grad_b) -> Tensor:
    """Shared machinery for elementwise binary ops.

    Equal shapes, or one operand a rank-1 vector broadcast across the other's
    feature axis (axis 1 of a rank >= 2 tensor). No other broadcast exists.
    """
    b = _wrap(b, a)
    if a.shape == b.shape:
        out = fwd(a.data, b.data)

        def backward_fn(g):
            return grad_a(g, a.data, b.data), grad_b(g, a.data, b.data)

        return _record(op, (a, b), out, backward_fn)

    # vector-over-feature-axis broadcast, in either operand order
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        vec, full, vec_first = b, a, False
    elif a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        vec, full, vec_first = a, b, True
    else:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")

    expand = (1, vec.shape[0]) + (1,) * (full.ndim - 2)
    vexp = vec.data.reshape(expand)
    axes = _feature_axes(full.shape)
    a_data = vexp if vec_first else full.data
    b_data = full.data if vec_first else vexp

    def backward_fn(g):
        ga = grad_a(g, a_data, b_data)
        gb = grad_b(g, a_data, b_data)
        if vec_first:
            ga = ga.sum(axis=axes)
        else:
            gb = gb.sum(axis=axes)
        return ga, gb

    return _record(op, (a, b), fwd(a_data, b_data), backward_fn)


def add(a: Tensor, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable numpy sigmoid, no tape involvement.

    Split by sign so exp never overflows; saturates to exact 0.0/1.0 at
    large |x|, which downstream mask logic relies on.
    """
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_sigmoid = sigmoid_values


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _record("sigmoid", (x,), y, backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _record("relu", (x,), np.where(mask, x.data, 0.0), backward_fn)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is 1 inside the range, 0 outside."""
    inside = (x.data >= lo) & (x.data <= hi)

    def backward_fn(g):
        return (g * inside,)

    return _record("clamp", (x,), np.clip(x.data, lo, hi), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        return (g * c,)

    return _record("scale", (x,), x.data * c, backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {shape}") from None

    def backward_fn(g):
        return (g.reshape(old),)

    return _record("reshape", (x,), out, backward_fn)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permutation {axes} invalid for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (g.transpose(inverse),)

    return _record("permute", (x,), x.data.transpose(axes), backward_fn)


def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    b, c, hp, wp = shape
    xp = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, :, i, j]
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw] kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input and weight, got {x.shape}, {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    xp = np.zeros((bsz, cin, hp, wp), dtype=x.data.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x.data
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)           # [B, Cin*kh*kw, Ho*Wo]
    wflat = weight.data.reshape(cout, -1)
    out = np.einsum("of,bfl->bol", wflat, cols).reshape(bsz, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gflat = g.reshape(bsz, cout, ho * wo)
        gw = np.einsum("bol,bfl->of", gflat, cols).reshape(weight.shape)
        gcols = np.einsum("of,bol->bfl", wflat, gflat)
        gxp = _col2im(gcols, (bsz, cin, hp, wp), kh, kw, sh, sw, ho, wo)
        gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record("conv2d", inputs, out, backward_fn)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of [B,F] with learnable gain and shift."""
    if x.ndim != 2 or gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm needs [B,F] with [F] gain/shift, got "
                         f"{x.shape}, {gain.shape}, {shift.shape}")
    nfeat = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gain.data * xhat + shift.data

    def backward_fn(g):
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        # exact: mean over F, not F-1, must match the forward var; numpy
        # default ddof=0 does.
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("layer_norm", (x, gain, shift), out, backward_fn)


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def backward_fn(g):
        return (np.full(shape, g, dtype=x.data.dtype),)

    return _record("sum", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype), backward_fn)


def reduce_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def backward_fn(g):
        return (np.full(shape, g / n, dtype=x.data.dtype),)

    return _record("mean", (x,), np.asarray(x.data.mean(), dtype=x.data.dtype), backward_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of [B,C] logits against integer labels in [0,C)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross-entropy needs [B,C] logits, got {logits.shape}")
    labels = np.asarray(labels)
    bsz, ncls = logits.shape
    if labels.shape != (bsz,):
        raise UsageError(f"labels must have shape ({bsz},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= ncls:
        raise UsageError(f"labels must lie in [0, {ncls}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(sez[:, 0])
    picked = z[np.arange(bsz), labels]
    loss = np.asarray((lse - picked).mean(), dtype=z.dtype)
    softmax = ez / sez

    def backward_fn(g):
        grad = softmax.copy()
        grad[np.arange(bsz), labels] -= 1.0
        return (grad * (g / bsz),)

    return _record("softmax_cross_entropy", (logits,), loss, backward_fn)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss."""
    if loss._node_tape is None:
        raise UsageError("loss was not recorded on a tape; compute it inside `with Tape():`")
    loss._node_tape.backward(loss)


def register_grad_hook(target: Tensor, transform: Callable[[np.ndarray], np.ndarray]) -> HookHandle:
    """Attach a gradient transform to a tensor's live tape node."""
    return target.register_hook(transform)
