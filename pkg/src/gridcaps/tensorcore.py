"""Minimal dense-tensor core with reverse-mode differentiation.

Values are float64 numpy arrays. Each operation records a closure that
pushes the upstream gradient to its inputs; `Tensor.backward()` runs the
closures in reverse topological order. Only the primitives the capsule
model needs are implemented: elementwise arithmetic, matmul, reductions,
tanh/exp/log, softmax/log-softmax, the capsule squash, dropout, valid 2-D
convolution, and an affine map.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Rng:
    """Seeded random source; identical seed gives an identical draw sequence."""

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
            self.seed = seed.entropy
        else:
            self._ss = np.random.SeedSequence(seed)
            self.seed = seed
        self._gen = np.random.default_rng(self._ss)

    def spawn(self, n: int) -> list["Rng"]:
        """Independent child streams, derived deterministically from this seed."""
        return [Rng(ss) for ss in self._ss.spawn(n)]

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    """Build an op output; record the closure only when a parent needs grads."""
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and structural ops -------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward():
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward():
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward():
        _accum(a, _unbroadcast(out.grad @ b.data.swapaxes(-1, -2), a.data.shape))
        _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ out.grad, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    out = _make(out_data, (a,), backward)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward():
        _accum(a, out.grad.reshape(a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward():
        _accum(a, out.grad.transpose(inv))

    out = _make(out_data, (a,), backward)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward():
        _accum(a, (1.0 - out_data**2) * out.grad)

    out = _make(out_data, (a,), backward)
    return out


def texp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward():
        _accum(a, out_data * out.grad)

    out = _make(out_data, (a,), backward)
    return out


def tlog(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward():
        _accum(a, out.grad / a.data)

    out = _make(out_data, (a,), backward)
    return out


def pick(a, index) -> Tensor:
    """Select one entry along the last axis per leading position.

    For a [..., C] input and integer indices shaped like the leading axes,
    returns out[...] = a[..., index[...]].
    """
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    lead = np.indices(idx.shape, sparse=True)
    out_data = a.data[(*lead, idx)]

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, (*lead, idx), out.grad)
        _accum(a, g)

    out = _make(out_data, (a,), backward)
    return out


# -- neural-layer primitives ---------------------------------------------

def softmax(a, axis=-1) -> Tensor:
    """Normalized exponentials along `axis`, computed with max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out.grad
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    out = _make(out_data, (a,), backward)
    return out


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward():
        g = out.grad
        soft = np.exp(out_data)
        _accum(a, g - soft * g.sum(axis=axis, keepdims=True))

    out = _make(out_data, (a,), backward)
    return out


def squash(a, axis=-1) -> Tensor:
    """Capsule nonlinearity: rescale each vector along `axis` to norm n^2/(1+n^2).

    Direction is preserved; the zero vector maps to zero with zero gradient
    (the continuity limit).
    """
    a = as_tensor(a)
    norm = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    factor = norm / (1.0 + norm**2)
    out_data = a.data * factor

    def backward():
        g = out.grad
        dot = (g * a.data).sum(axis=axis, keepdims=True)
        denom = np.where(norm > 0.0, norm * (1.0 + norm**2) ** 2, 1.0)
        coef = np.where(norm > 0.0, (1.0 - norm**2) / denom, 0.0)
        _accum(a, g * factor + a.data * (dot * coef))

    out = _make(out_data, (a,), backward)
    return out


def dropout(a, p: float, rng: Rng, train: bool) -> Tensor:
    """Inverted dropout: zero with probability p and scale survivors by 1/(1-p)."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    a = as_tensor(a)
    if not train or p == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out_data = a.data * mask

    def backward():
        _accum(a, out.grad * mask)

    out = _make(out_data, (a,), backward)
    return out


def linear(x, w, b) -> Tensor:
    """Affine map: out = x @ w.T + b with w shaped [m, n]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.shape[-1] != w.data.shape[1] or w.data.shape[0] != b.data.shape[0]:
        raise ValueError(
            f"linear shape mismatch: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    out_data = x.data @ w.data.T + b.data

    def backward():
        g = out.grad
        if x.data.ndim == 1:
            _accum(w, np.outer(g, x.data))
            _accum(b, g)
            _accum(x, g @ w.data)
        else:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.data.shape[-1])
            _accum(w, g2.T @ x2)
            _accum(b, g2.sum(axis=0))
            _accum(x, (g @ w.data).reshape(x.data.shape))

    out = _make(out_data, (x, w, b), backward)
    return out


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    """Valid-convolution output extent: floor((size - kernel) / stride) + 1."""
    if kernel > size:
        raise ValueError(f"kernel {kernel} larger than input extent {size}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return (size - kernel) // stride + 1


def conv2d(x, k, b, strides=(1, 1)) -> Tensor:
    """Valid (no-padding) 2-D convolution.

    x: [B, C_in, H, W]; k: [C_out, C_in, kh, kw]; b: [C_out];
    returns [B, C_out, H', W'] with H' = floor((H-kh)/sh)+1 and likewise W'.
    """
    x, k, b = as_tensor(x), as_tensor(k), as_tensor(b)
    bs, c_in, h, w = x.data.shape
    c_out, c_in_k, kh, kw = k.data.shape
    sh, sw = strides
    if c_in_k != c_in:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, kernel {c_in_k}")
    hp = conv_output_size(h, kh, sh)
    wp = conv_output_size(w, kw, sw)
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]
    out_data = np.einsum("bcijpq,ocpq->boij", windows, k.data, optimize=True)
    out_data += b.data[None, :, None, None]

    def backward():
        g = out.grad
        _accum(k, np.einsum("boij,bcijpq->ocpq", g, windows, optimize=True))
        _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for p in range(kh):
                for q in range(kw):
                    contrib = np.einsum("boij,oc->bcij", g, k.data[:, :, p, q], optimize=True)
                    dx[:, :, p : p + hp * sh : sh, q : q + wp * sw : sw] += contrib
            _accum(x, dx)

    out = _make(out_data, (x, k, b), backward)
    return out


def conv2d_tanh(x, k, b, strides=(1, 1)) -> Tensor:
    """Single-channel convolution with tanh: [H, W] input, [M, kh, kw] kernels."""
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 2 or k.data.ndim != 3:
        raise ValueError(
            f"conv2d_tanh expects a 2-D input and 3-D kernels, got {x.data.shape}, {k.data.shape}"
        )
    x4 = reshape(x, (1, 1) + x.data.shape)
    k4 = reshape(k, (k.data.shape[0], 1) + k.data.shape[1:])
    out = tanh(conv2d(x4, k4, b, strides))
    return reshape(out, out.data.shape[1:])


# -- optimizer ------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators and step counter for Adam."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: list[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p) for p in params]
    state.v = [np.zeros_like(p) for p in params]
    return state


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: parameter/gradient/state length mismatch")
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g**2
        m_hat = state.m[i] / (1.0 - state.beta1**t)
        v_hat = state.v[i] / (1.0 - state.beta2**t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def glorot_uniform(rng: Rng, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


# -- checkpoint container --------------------------------------------------

_MAGIC = b"GCAPSBIN"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write named arrays plus a JSON manifest to one file, bit-exactly.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then raw little-endian value blocks in manifest order.
    """
    entries = []
    blocks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        raw = a.astype(dt, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dt.str,
                "shape": list(a.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blocks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blocks:
            f.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by save_checkpoint; inverse bit-exactly."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a gridcaps checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        body = f.read()
    arrays = {}
    for e in header["tensors"]:
        raw = body[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.copy()
    return arrays, header["meta"]
