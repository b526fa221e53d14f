"""Dense N-dimensional tensors with reverse-mode automatic differentiation.

Everything the network touches (feature maps, cost volumes, pose queries,
parameters) is a :class:`Tensor` backed by a contiguous row-major numpy
array.  Operations build a computation graph; calling ``backward()`` on a
scalar result accumulates gradients into every ``requires_grad`` leaf.

Precision is a constructor choice: float64 is the default (and what the
gradient-check tolerances assume), float32 is used for training runs.
Binary operations require matching dtypes; mixing them is a bug, not a
broadcast.
"""

from __future__ import annotations

import os
import struct

import numpy as np

__all__ = [
    "Tensor",
    "concat",
    "stack_rows",
    "leaky_relu",
    "softmax",
    "linear",
    "conv2d",
    "conv2d_output_size",
    "smooth_l1",
    "layer_norm",
    "sqrt",
    "absolute",
    "reciprocal",
    "atan2",
    "scale_by",
    "custom_op",
    "make_rng",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

_FLOAT_DTYPES = (np.float32, np.float64)


def make_rng(seed):
    """Deterministic generator (PCG64) used for every initialization."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    """Array plus the graph edges needed to backpropagate through it.

    ``data`` is always a contiguous numpy array of float32 or float64.
    ``grad`` stays ``None`` until a backward pass reaches this tensor.
    Tensors are not mutated after construction except for gradient
    accumulation, so a built graph can be replayed backward safely.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float64
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """Same values, no graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph machinery -----------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar output, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise TypeError(f"dtype mismatch: {self.dtype} vs {other.dtype}")
            return other
        return Tensor(np.full_like(self.data, float(other)))

    def __add__(self, other):
        other = self._coerce(other)
        _check_same_shape(self, other, "add")
        out = _node(self.data + other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(g)
                if other.requires_grad:
                    other._accumulate(g)
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        other = self._coerce(other)
        _check_same_shape(self, other, "sub")
        out = _node(self.data - other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(g)
                if other.requires_grad:
                    other._accumulate(-g)
            out._backward = backward
        return out

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        _check_same_shape(self, other, "mul")
        out = _node(self.data * other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(g * other.data)
                if other.requires_grad:
                    other._accumulate(g * self.data)
            out._backward = backward
        return out

    __rmul__ = __mul__

    def matmul(self, other):
        """2D matrix product; higher ranks go through reshape first."""
        if not isinstance(other, Tensor):
            raise TypeError("matmul expects a Tensor")
        if other.dtype != self.dtype:
            raise TypeError(f"dtype mismatch: {self.dtype} vs {other.dtype}")
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError(f"matmul is 2D only, got {self.shape} @ {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"inner dimensions disagree: {self.shape} @ {other.shape}")
        out = _node(self.data @ other.data, (self, other))
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(g @ other.data.T)
                if other.requires_grad:
                    other._accumulate(self.data.T @ g)
            out._backward = backward
        return out

    __matmul__ = matmul

    def transpose(self):
        if self.ndim != 2:
            raise ValueError("transpose is 2D only")
        out = _node(np.ascontiguousarray(self.data.T), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.T)
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    def __getitem__(self, idx):
        out = _node(self.data[idx], (self,))
        if out.requires_grad:
            def backward(g):
                buf = np.zeros_like(self.data)
                np.add.at(buf, idx, g)
                self._accumulate(buf)
            out._backward = backward
        return out

    def sum(self, axis=None):
        out = _node(np.asarray(self.data.sum(axis=axis)), (self,))
        if out.requires_grad:
            def backward(g):
                if axis is None:
                    self._accumulate(np.broadcast_to(g, self.data.shape).copy())
                else:
                    self._accumulate(np.broadcast_to(np.expand_dims(g, axis), self.data.shape).copy())
            out._backward = backward
        return out

    def mean(self):
        n = self.data.size
        out = _node(np.asarray(self.data.mean()), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(np.full_like(self.data, float(g) / n))
        return out


def _node(data, parents):
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)
    if not data.flags["C_CONTIGUOUS"]:
        data = np.ascontiguousarray(data)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = None
    return out


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op} requires equal shapes, got {a.shape} and {b.shape}")


def custom_op(data, parents, backward):
    """Create a graph node for an operation defined outside this module.

    ``backward(g)`` must accumulate into each requires_grad parent via
    ``parent._accumulate``.  Used by modules that fuse larger kernels
    (cost-volume correlation) instead of composing primitives.
    """
    out = _node(data, parents)
    if out.requires_grad:
        out._backward = backward
    return out


# -- structural ops ----------------------------------------------------------

def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of nothing")
    dt = tensors[0].dtype
    for t in tensors:
        if t.dtype != dt:
            raise TypeError("concat requires matching dtypes")
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(sl)])
        out._backward = backward
    return out


def stack_rows(tensors):
    """Stack 1-D tensors of equal length into a 2-D [n, d] tensor."""
    return concat([t.reshape(1, -1) for t in tensors], axis=0)


# -- elementwise nonlinearities ---------------------------------------------

def leaky_relu(x, slope=0.1):
    """max(v, slope*v) elementwise; the gradient at exactly zero is 1."""
    mask = x.data >= 0
    out = _node(np.where(mask, x.data, slope * x.data), (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * np.where(mask, 1.0, slope))
    return out


def softmax(x, axis):
    """Stabilized softmax along ``axis``: rows sum to one."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (x,))
    if out.requires_grad:
        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accumulate(y * (g - dot))
        out._backward = backward
    return out


def sqrt(x):
    """Elementwise square root; subgradient 0 where the input is exactly 0.

    The zero convention keeps the quaternion angle loss defined (with zero
    gradient) at perfect rotation agreement.
    """
    y = np.sqrt(x.data)
    out = _node(y, (x,))
    if out.requires_grad:
        def backward(g):
            d = np.zeros_like(y)
            nz = y != 0
            d[nz] = 0.5 / y[nz]
            x._accumulate(g * d)
        out._backward = backward
    return out


def absolute(x):
    out = _node(np.abs(x.data), (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * np.sign(x.data))
    return out


def reciprocal(x):
    y = 1.0 / x.data
    out = _node(y, (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(-g * y * y)
    return out


def atan2(y, x):
    """Elementwise two-argument arctangent, differentiable in both inputs."""
    _check_same_shape(y, x, "atan2")
    out = _node(np.arctan2(y.data, x.data), (y, x))
    if out.requires_grad:
        def backward(g):
            denom = x.data * x.data + y.data * y.data
            safe = np.where(denom == 0, 1.0, denom)
            if y.requires_grad:
                y._accumulate(np.where(denom == 0, 0.0, g * x.data / safe))
            if x.requires_grad:
                x._accumulate(np.where(denom == 0, 0.0, -g * y.data / safe))
        out._backward = backward
    return out


def scale_by(x, s):
    """Tensor times a scalar tensor (the one sanctioned scalar broadcast)."""
    if s.size != 1:
        raise ValueError("scale_by expects a scalar tensor")
    sval = float(s.data.reshape(()))
    out = _node(x.data * sval, (x, s))
    if out.requires_grad:
        def backward(g):
            if x.requires_grad:
                x._accumulate(g * sval)
            if s.requires_grad:
                s._accumulate(np.asarray((g * x.data).sum()).reshape(s.data.shape))
        out._backward = backward
    return out


# -- network layers ----------------------------------------------------------

def linear(x, weight, bias):
    """Affine map on the last axis: x[..., Din] @ weight[Din, Dout] + bias."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ValueError(f"linear: input feature size {x.shape[-1]} does not match weight rows {din}")
    if bias.shape != (dout,):
        raise ValueError(f"linear: bias shape {bias.shape} does not match weight columns {dout}")
    lead = x.shape[:-1]
    m = x.data.reshape(-1, din)
    out_data = (m @ weight.data + bias.data).reshape(lead + (dout,))
    out = _node(out_data, (x, weight, bias))
    if out.requires_grad:
        def backward(g):
            g2 = g.reshape(-1, dout)
            if x.requires_grad:
                x._accumulate((g2 @ weight.data.T).reshape(x.data.shape))
            if weight.requires_grad:
                weight._accumulate(m.T @ g2)
            if bias.requires_grad:
                bias._accumulate(g2.sum(axis=0))
        out._backward = backward
    return out


def add_channel_bias(x, bias):
    """Add a per-channel vector along the last axis of an activation.

    The second sanctioned broadcast besides scale_by: bias[C] lifts to
    x[..., C].  Gradient for the bias sums over every leading position.
    """
    if bias.ndim != 1:
        raise ValueError("bias must be a vector")
    if x.shape[-1] != bias.shape[0]:
        raise ValueError(
            f"bias length {bias.shape[0]} does not match channel count {x.shape[-1]}"
        )
    if x.dtype != bias.dtype:
        raise TypeError("add_channel_bias requires matching dtypes")
    out = _node(x.data + bias.data, (x, bias))
    if out.requires_grad:
        def backward(g):
            if x.requires_grad:
                x._accumulate(g)
            if bias.requires_grad:
                bias._accumulate(g.reshape(-1, bias.shape[0]).sum(axis=0))
        out._backward = backward
    return out


def conv2d_output_size(h, w, k, stride, padding):
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def conv2d(x, kernel, stride=1, padding=0):
    """2-D convolution, channel-last: x[H,W,Cin], kernel[k,k,Cin,Cout].

    Output spatial size is floor((H + 2p - k)/stride) + 1.  Implemented as
    k*k shifted matrix products, which keeps forward and backward exact
    mirror images of each other.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects x[H,W,Cin] and kernel[k,k,Cin,Cout], got {x.shape} and {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh != kw:
        raise ValueError("conv2d kernels must be square")
    if x.shape[2] != cin:
        raise ValueError(f"conv2d: input has {x.shape[2]} channels but kernel expects {cin}")
    h, w, _ = x.shape
    ho, wo = conv2d_output_size(h, w, kh, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: output would be empty for input {x.shape}")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    out_data = np.zeros((ho, wo, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            out_data += patch @ kernel.data[i, j]
    out = _node(out_data, (x, kernel))
    if out.requires_grad:
        def backward(g):
            if kernel.requires_grad:
                dk = np.empty_like(kernel.data)
                for i in range(kh):
                    for j in range(kw):
                        patch = xp[i:i + stride * ho:stride, j:j + stride * wo:stride, :]
                        dk[i, j] = np.tensordot(patch, g, axes=([0, 1], [0, 1]))
                kernel._accumulate(dk)
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g @ kernel.data[i, j].T
                if padding:
                    dxp = dxp[padding:padding + h, padding:padding + w, :]
                x._accumulate(dxp)
        out._backward = backward
    return out


def smooth_l1(pred, target):
    """Summed Huber penalty: 0.5 e^2 for |e| < 1, |e| - 0.5 beyond."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target), dtype=pred.dtype)
    _check_same_shape(pred, target, "smooth_l1")
    e = pred.data - target.data
    a = np.abs(e)
    val = np.where(a < 1.0, 0.5 * e * e, a - 0.5).sum()
    out = _node(np.asarray(val), (pred, target))
    if out.requires_grad:
        def backward(g):
            d = np.clip(e, -1.0, 1.0) * float(g)
            if pred.requires_grad:
                pred._accumulate(d)
            if target.requires_grad:
                target._accumulate(-d)
        out._backward = backward
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    out = _node(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def backward(g):
            if gain.requires_grad:
                gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                bias._accumulate(g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gx = g * gain.data
                term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(term * istd)
        out._backward = backward
    return out


# -- checkpoint format -------------------------------------------------------

CHECKPOINT_MAGIC = b"POETCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(params, path):
    """Write named parameters to the binary checkpoint format.

    Layout, all little-endian: magic "POETCKPT", version u32, then per
    parameter (sorted by name): name length u32, utf-8 name, rank u32,
    each dimension u32, float32 payload in row-major order.
    """
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(params):
            arr = params[name]
            if isinstance(arr, Tensor):
                arr = arr.data
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint back into a dict of float32 arrays."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params = {}
    off = 12
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        params[name] = np.ascontiguousarray(arr)
    return params
