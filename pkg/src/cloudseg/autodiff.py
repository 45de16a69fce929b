"""Minimal reverse-mode autodiff over dense numpy arrays.

Covers exactly the operations the segmentation network needs. Tensors form
an acyclic graph through parent links; backward() walks it once in reverse
topological order. 64-bit is the default precision.
"""

from __future__ import annotations

import struct

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense array plus provenance: parents and a backward closure.

    Leaves are created with `parameter` (gradient tracked) or `constant`
    (gradient not propagated past it).
    """

    __slots__ = ("values", "_grad", "parents", "backward_fn", "needs_grad", "name")

    def __init__(self, values, parents=(), backward_fn=None, needs_grad=False, name=None):
        values = np.asarray(values)
        if values.dtype not in _FLOAT_DTYPES:
            values = values.astype(np.float64)
        self.values = values
        self._grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.needs_grad = needs_grad
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def accumulate(self, g: np.ndarray):
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        self._grad += g

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        kind = "param" if (self.needs_grad and not self.parents) else \
            ("node" if self.parents else "const")
        return f"Tensor({kind}, shape={self.values.shape}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), needs_grad=True, name=name)


def constant(values, name: str | None = None) -> Tensor:
    return Tensor(values, needs_grad=False, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def make_op(values, parents, backward_fn, name=None) -> Tensor:
    """Record one operation node. The backward closure is dropped when no
    parent tracks gradients, so constant subgraphs cost nothing at backward."""
    needs = any(p.needs_grad for p in parents)
    if not needs:
        return Tensor(values, name=name)
    return Tensor(values, parents=parents, backward_fn=backward_fn,
                  needs_grad=True, name=name)


# ------------------------------------------------------------- elementwise

def _check_broadcast(a_shape, b_shape, op):
    # same rank with per-axis sizes equal or 1, or a bare scalar; the general
    # numpy rank-promotion rules are deliberately not supported
    if a_shape == () or b_shape == () or a_shape == b_shape:
        return
    if len(a_shape) != len(b_shape):
        raise ValueError(f"{op}: rank mismatch {a_shape} vs {b_shape}")
    for x, y in zip(a_shape, b_shape):
        if x != y and x != 1 and y != 1:
            raise ValueError(f"{op}: incompatible shapes {a_shape} vs {b_shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.sum(g)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return np.sum(g, axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    out_values = a.values + b.values

    def backward_fn(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return make_op(out_values, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    out_values = a.values - b.values

    def backward_fn(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(-_unbroadcast(g, b.shape))

    return make_op(out_values, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    out_values = a.values * b.values

    def backward_fn(g):
        a.accumulate(_unbroadcast(g * b.values, a.shape))
        b.accumulate(_unbroadcast(g * a.values, b.shape))

    return make_op(out_values, (a, b), backward_fn, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out_values = x.values * c

    def backward_fn(g):
        x.accumulate(g * c)

    return make_op(out_values, (x,), backward_fn, "scale")


# ----------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out_values = a.values @ b.values

    def backward_fn(g):
        a.accumulate(g @ b.values.T)
        b.accumulate(a.values.T @ g)

    return make_op(out_values, (a, b), backward_fn, "matmul")


# ------------------------------------------------------------- activations

def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.values > 0
    out_values = np.where(pos, x.values, slope * x.values)

    def backward_fn(g):
        x.accumulate(g * np.where(pos, 1.0, slope))

    return make_op(out_values, (x,), backward_fn, "leaky_relu")


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.values - np.max(x.values, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_values = e / np.sum(e, axis=-1, keepdims=True)

    def backward_fn(g):
        y = out_values
        x.accumulate(y * (g - np.sum(g * y, axis=-1, keepdims=True)))

    return make_op(out_values, (x,), backward_fn, "softmax_lastdim")


# ---------------------------------------------------------- index & segment

def gather_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ValueError("gather_rows: index must be 1-D")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ValueError(
            f"gather_rows: index out of range [0, {x.shape[0]})")
    out_values = x.values[index]

    def backward_fn(g):
        acc = np.zeros_like(x.values)
        np.add.at(acc, index, g)
        x.accumulate(acc)

    return make_op(out_values, (x,), backward_fn, "gather_rows")


def segment_sum(x: Tensor, offsets) -> Tensor:
    """Sum rows per segment: segment s covers rows offsets[s]:offsets[s+1].
    Empty segments produce zero rows."""
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.ndim != 1 or len(offsets) < 1 or offsets[0] != 0:
        raise ValueError("segment_sum: offsets must be 1-D starting at 0")
    if np.any(np.diff(offsets) < 0) or offsets[-1] != x.shape[0]:
        raise ValueError("segment_sum: offsets must be monotone and end at row count")
    n_seg = len(offsets) - 1
    counts = np.diff(offsets)
    out_values = np.zeros((n_seg,) + x.shape[1:], dtype=x.values.dtype)
    if x.shape[0]:
        seg_ids = np.repeat(np.arange(n_seg), counts)
        np.add.at(out_values, seg_ids, x.values)

    def backward_fn(g):
        x.accumulate(np.repeat(g, counts, axis=0))

    return make_op(out_values, (x,), backward_fn, "segment_sum")


# --------------------------------------------------------------- reductions

def max_over_axis(x: Tensor, axis: int) -> Tensor:
    out_values = np.max(x.values, axis=axis)
    # first occurrence wins so tie routing is deterministic
    arg = np.argmax(x.values, axis=axis)

    def backward_fn(g):
        acc = np.zeros_like(x.values)
        np.put_along_axis(acc, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis)
        x.accumulate(acc)

    return make_op(out_values, (x,), backward_fn, "max_over_axis")


def max_pool_channels(x: Tensor) -> Tensor:
    """Non-overlapping window-2 stride-2 max over the last (channel) axis."""
    d = x.shape[-1]
    if d % 2 != 0:
        raise ValueError(f"max_pool_channels: last dim must be even, got {d}")
    paired = x.values.reshape(x.shape[:-1] + (d // 2, 2))
    out_values = np.max(paired, axis=-1)
    arg = np.argmax(paired, axis=-1)

    def backward_fn(g):
        acc = np.zeros_like(paired)
        np.put_along_axis(acc, arg[..., None], g[..., None], -1)
        x.accumulate(acc.reshape(x.shape))

    return make_op(out_values, (x,), backward_fn, "max_pool_channels")


def sum_all(x: Tensor) -> Tensor:
    """Sum every element to a scalar; the loss-side reduction."""
    out_values = np.array(np.sum(x.values))

    def backward_fn(g):
        x.accumulate(np.broadcast_to(g, x.shape).copy())

    return make_op(out_values, (x,), backward_fn, "sum_all")


# ------------------------------------------------------------ shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_values = x.values.reshape(shape)

    def backward_fn(g):
        x.accumulate(g.reshape(x.shape))

    return make_op(out_values, (x,), backward_fn, "reshape")


def transpose_last2(x: Tensor) -> Tensor:
    if x.values.ndim < 2:
        raise ValueError("transpose_last2: needs rank >= 2")
    out_values = np.swapaxes(x.values, -1, -2)

    def backward_fn(g):
        x.accumulate(np.swapaxes(g, -1, -2))

    return make_op(out_values, (x,), backward_fn, "transpose_last2")


def concat_lastdim(*tensors: Tensor) -> Tensor:
    if len(tensors) < 2:
        raise ValueError("concat_lastdim: needs at least two tensors")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ValueError(
                f"concat_lastdim: leading dims differ, {tensors[0].shape} vs {t.shape}")
    out_values = np.concatenate([t.values for t in tensors], axis=-1)
    widths = [t.shape[-1] for t in tensors]
    splits = np.cumsum(widths[:-1])

    def backward_fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=-1)):
            t.accumulate(piece)

    return make_op(out_values, tensors, backward_fn, "concat_lastdim")


# -------------------------------------------------------------- batch norm

class BatchNormState:
    """Running statistics for one normalized feature map (per channel over
    the points axis)."""

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool) -> Tensor:
    """Normalize each channel over axis 0. Training mode uses batch statistics
    and updates the running ones; inference is a frozen affine map."""
    if x.values.ndim != 2:
        raise ValueError(f"batch_norm: expects (N, d) input, got {x.shape}")
    n, d = x.shape
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ValueError("batch_norm: gamma/beta must have shape (1, d)")
    eps = state.eps

    if training:
        mean = np.mean(x.values, axis=0)
        var = np.var(x.values, axis=0)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mean
        state.running_var = m * state.running_var + (1 - m) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mean) * inv_std
    out_values = gamma.values * xhat + beta.values

    def backward_fn(g):
        gamma.accumulate(np.sum(g * xhat, axis=0, keepdims=True))
        beta.accumulate(np.sum(g, axis=0, keepdims=True))
        dxhat = g * gamma.values
        if training:
            # statistics depend on x, so the full batch-norm backward applies
            dx = (dxhat - np.mean(dxhat, axis=0)
                  - xhat * np.mean(dxhat * xhat, axis=0)) * inv_std
        else:
            dx = dxhat * inv_std
        x.accumulate(dx)

    return make_op(out_values, (x, gamma, beta), backward_fn, "batch_norm")


# ---------------------------------------------------------------- backward

def backward(loss: Tensor):
    """Populate gradients of everything reachable from a scalar loss.

    Each node's backward rule runs exactly once, in reverse topological
    order; leaves not reachable keep a zero gradient.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.needs_grad and id(p) not in visited:
                stack.append((p, False))

    loss.accumulate(np.ones_like(loss.values))
    for node in reversed(topo):
        if node.backward_fn is not None:
            node.backward_fn(node._grad)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# -------------------------------------------------------- gradient checking

def finite_diff_check(f, inputs, eps: float = 1e-5) -> float:
    """Central-difference check of f's gradient at the given leaf tensors.

    f is called as f(*inputs) and must return a scalar Tensor. Returns the
    max relative error over all entries of all inputs. The denominator is
    max(|analytic|, |numeric|, floor) where the floor adapts to the overall
    gradient magnitude: entries whose true derivative is zero (e.g. a bias
    that a downstream softmax is invariant to) otherwise turn central-diff
    roundoff noise into spurious relative errors.
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    backward(out)
    grads = [np.array(t.grad, copy=True) for t in inputs]

    pairs = []
    for t, g in zip(inputs, grads):
        flat = t.values.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(*inputs).values)
            flat[i] = orig - eps
            f_minus = float(f(*inputs).values)
            flat[i] = orig
            pairs.append((gflat[i], (f_plus - f_minus) / (2.0 * eps)))

    scale = max((max(abs(a), abs(n)) for a, n in pairs), default=0.0)
    floor = max(1e-8, 1e-6 * scale)
    return max((abs(a - n) / max(abs(a), abs(n), floor) for a, n in pairs),
               default=0.0)


# ---------------------------------------------------------------- checkpoint

_MAGIC = b"CSEG"
_VERSION = 1


def save_checkpoint(path: str, arrays: dict[str, np.ndarray]):
    """Write named arrays as (name, shape, float32 little-endian) records."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", _VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            arr = np.asarray(arr)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read records written by save_checkpoint; values come back as float64."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version = data[4]
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", data, 5)
    pos = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        ndim = data[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
        pos += 4 * size
        out[name] = values.reshape(shape).astype(np.float64)
    return out
