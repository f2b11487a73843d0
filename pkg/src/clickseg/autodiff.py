"""Dense float64 tensors with tape-based reverse-mode differentiation.

This module is deliberately small: it implements exactly the operations the
segmentation networks need, each with an analytic vector-Jacobian product
that is validated against central finite differences (see ``gradcheck``).

Two conventions are fixed here and relied on by every other module:

* **Precision.** All tensor data is float64.  Gradient checks at 1e-4
  relative tolerance are not reliable in float32, and at desk scale the
  memory cost is irrelevant.

* **Bilinear resampling is corner-aligned.**  A resample from ``n_in`` to
  ``n_out`` samples the source at ``linspace(lo, hi, n_out)`` where
  ``lo``/``hi`` are the first/last source coordinates (0 and ``n_in - 1``
  for a plain upsample).  Source corners map exactly onto output corners.
  ``linear_resample_matrix`` is the single implementation of this rule;
  both feature upsampling and the zoom crop/remap build on it, which is
  what makes the crop -> remap round trip testable.

Checkpoint format ``CPKT1`` (all integers little-endian):

    magic    5 bytes  b"CPKT1"
    version  u32      currently 1
    count    u64      number of tensors
    then per tensor:
      name_len u32, name UTF-8, rank u32, extents rank*u64, data f64[]

The byte stream round-trips bit-exactly.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError

Array = np.ndarray

__all__ = [
    "Tensor", "Tape", "backward", "AdamState", "adam_step", "zero_grads",
    "relu", "sigmoid", "log", "pow_const", "clamp_min", "matmul",
    "transpose", "reshape", "concat", "gather_rows", "sum_all", "mean_all",
    "channel_sum",
    "softmax_rows", "conv2d", "bias_add", "bilinear_upsample",
    "linear_resample_matrix", "save_checkpoint", "load_checkpoint",
]


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape.

    Tensors are immutable after construction except for gradient
    accumulation; ops never write into their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar.  Non-Tensor operands are treated as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __pow__(self, exponent):
        return pow_const(self, exponent)


def _wrap(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _TapeStacks(threading.local):
    # one recording stack per thread: independent tapes over shared
    # read-only parameters may run concurrently
    def __init__(self):
        self.stack: list["Tape"] = []


_STACKS = _TapeStacks()


class Tape:
    """Ordered record of executed ops.

    Execution order is the topological order: every op's inputs were
    produced (or existed as leaves) before the op ran, so replaying the
    records in reverse propagates gradients to every reachable tensor.
    A tape is single-threaded; independent tapes over shared read-only
    parameters may run concurrently.
    """

    def __init__(self):
        # (output, inputs, vjp) where vjp(g) yields one cotangent per input
        # (None for inputs that need no gradient).
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self._by_id: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _STACKS.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _STACKS.stack.pop()
        assert popped is self

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._nodes.append((out, inputs, vjp))
        self._tracked.add(id(out))
        self._by_id[id(out)] = out
        for t in inputs:
            self._by_id.setdefault(id(t), t)

    def __len__(self) -> int:
        return len(self._nodes)


def _active_tape() -> Tape | None:
    stack = _STACKS.stack
    return stack[-1] if stack else None


def _emit(out_data: Array, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape._record(out, inputs, vjp)
    return out


def backward(loss: Tensor, tape: Tape, seed: float = 1.0) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every tensor with
    ``requires_grad`` reachable from ``loss`` through ``tape``.

    Gradients add onto whatever is already stored, so several backward
    passes accumulate (callers average a batch by seeding 1/batch_size).
    Non-trainable tensors are left untouched.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, Array] = {id(loss): np.full(loss.shape, float(seed))}
    for out, inputs, vjp in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, contrib in zip(inputs, vjp(g)):
            if contrib is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    for key, g in grads.items():
        t = tape._by_id.get(key)
        if t is None or not t.requires_grad:
            continue
        t.grad = g if t.grad is None else t.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    out = a.data / b.data
    return _emit(out, (a, b),
                 lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    """Natural log; inputs must be strictly positive."""
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def pow_const(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    if p == 0.0:
        # a**0 == 1 exactly, with zero derivative (avoids 0 * a**-1 = nan).
        return _emit(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(g),))
    out = a.data ** p
    return _emit(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    mask = a.data > floor
    return _emit(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape and a.data.ndim > 0 and b.data.ndim > 0:
        raise DimensionError(
            f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# Shape / indexing ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.data.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got rank {a.data.ndim}")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate(datas, axis=axis), tuple(parts), vjp)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of a matrix; the adjoint scatter-adds them back."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got rank {a.data.ndim}")

    def vjp(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _emit(a.data[idx], (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _emit(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy() if np.ndim(g) == 0
                            else np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), Tensor(1.0 / a.data.size))


def channel_sum(a: Tensor) -> Tensor:
    """Reduce a CxHxW map over its channel axis to HxW."""
    if a.data.ndim != 3:
        raise DimensionError(f"channel_sum expects CxHxW, got rank {a.data.ndim}")
    c = a.data.shape[0]
    return _emit(a.data.sum(axis=0), (a,),
                 lambda g: (np.broadcast_to(g, (c,) + g.shape).copy(),))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, max-subtracted for stability."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit(out, (a,), vjp)


# ---------------------------------------------------------------------------
# Linear algebra / convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects matrices")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner axes disagree, {a.data.shape} @ {b.data.shape}")
    return _emit(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, dilation: int = 1,
           pad: int = 0) -> Tensor:
    """2-D cross-correlation of a CxHxW input with a OxCxKxK kernel.

    K must be odd; output height is (H + 2*pad - dilation*(K-1) - 1)//stride + 1
    and must be >= 1.  Differentiable w.r.t. both input and kernel.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv2d: input must be CxHxW, got rank {x.data.ndim}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be OxCxKxK, got rank {kernel.data.ndim}")
    cin, h, w = x.data.shape
    cout, kc, kh, kw = kernel.data.shape
    if kh != kw:
        raise DimensionError(f"conv2d: kernel window {kh}x{kw} is not square")
    if kh % 2 != 1:
        raise ValueError(f"conv2d: kernel size {kh} must be odd")
    if kc != cin:
        raise DimensionError(
            f"conv2d: input channel axis has {cin} channels, kernel axis 1 expects {kc}")
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, pad >= 0")
    k, d = kh, dilation
    hc = (h + 2 * pad - d * (k - 1) - 1) // stride + 1
    wc = (w + 2 * pad - d * (k - 1) - 1) // stride + 1
    if hc < 1 or wc < 1:
        raise ValueError(f"conv2d: empty output {hc}x{wc} for input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((cin, k, k, hc, wc), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, ki * d: ki * d + (hc - 1) * stride + 1: stride,
                                     kj * d: kj * d + (wc - 1) * stride + 1: stride]
    cols2 = cols.reshape(cin * k * k, hc * wc)
    km = kernel.data.reshape(cout, cin * k * k)
    out = (km @ cols2).reshape(cout, hc, wc)

    def vjp(g):
        gm = g.reshape(cout, hc * wc)
        dk = (gm @ cols2.T).reshape(kernel.data.shape)
        dcols = (km.T @ gm).reshape(cin, k, k, hc, wc)
        dxp = np.zeros((cin, h + 2 * pad, w + 2 * pad), dtype=np.float64)
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki * d: ki * d + (hc - 1) * stride + 1: stride,
                        kj * d: kj * d + (wc - 1) * stride + 1: stride] += dcols[:, ki, kj]
        dx = dxp[:, pad: pad + h, pad: pad + w] if pad else dxp
        return (dx, dk)

    return _emit(out, (x, kernel), vjp)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias: CxHxW + (C,), or a per-column bias NxC + (C,)."""
    if b.data.ndim != 1:
        raise DimensionError("bias_add: bias must be a vector")
    if x.data.ndim == 3:
        if x.data.shape[0] != b.data.shape[0]:
            raise DimensionError(
                f"bias_add: {x.data.shape[0]} channels vs bias length {b.data.shape[0]}")
        return _emit(x.data + b.data[:, None, None], (x, b),
                     lambda g: (g, g.sum(axis=(1, 2))))
    if x.data.ndim == 2:
        if x.data.shape[1] != b.data.shape[0]:
            raise DimensionError(
                f"bias_add: {x.data.shape[1]} columns vs bias length {b.data.shape[0]}")
        return _emit(x.data + b.data[None, :], (x, b),
                     lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"bias_add: unsupported input rank {x.data.ndim}")


# ---------------------------------------------------------------------------
# Bilinear resampling (corner-aligned), shared by upsampling and the zoom ops
# ---------------------------------------------------------------------------

def linear_resample_matrix(n_out: int, n_in: int, lo: float | None = None,
                           hi: float | None = None) -> Array:
    """Dense (n_out, n_in) matrix of corner-aligned linear interpolation
    weights sampling source coordinates ``linspace(lo, hi, n_out)``.

    Defaults lo=0, hi=n_in-1 give a plain resize.  Rows sum to 1, so
    constants are preserved exactly.
    """
    if n_out < 1 or n_in < 1:
        raise ValueError("resample sizes must be >= 1")
    lo = 0.0 if lo is None else float(lo)
    hi = float(n_in - 1) if hi is None else float(hi)
    if n_out == 1:
        pos = np.array([(lo + hi) / 2.0])
    else:
        pos = np.linspace(lo, hi, n_out)
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def _apply_resample(data: Array, rmat: Array, cmat: Array) -> Array:
    # (C,H,W) -> (C, rout, cout) via out[c] = rmat @ data[c] @ cmat.T
    a = np.tensordot(data, cmat, axes=([2], [1]))        # (C, H, cout)
    return np.tensordot(a, rmat, axes=([1], [1])).transpose(0, 2, 1)


def bilinear_upsample(t: Tensor, factor: int) -> Tensor:
    """Corner-aligned bilinear upsampling of a CxHxW map by an integer
    factor.  factor=1 is the identity."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if t.data.ndim != 3:
        raise DimensionError(f"bilinear_upsample expects CxHxW, got rank {t.data.ndim}")
    if factor == 1:
        return _emit(t.data.copy(), (t,), lambda g: (g,))
    _, h, w = t.data.shape
    rmat = linear_resample_matrix(factor * h, h)
    cmat = linear_resample_matrix(factor * w, w)
    out = _apply_resample(t.data, rmat, cmat)

    def vjp(g):
        return (_apply_resample(g, rmat.T, cmat.T),)

    return _emit(out, (t,), vjp)


def resample_plane(plane: Array, rmat: Array, cmat: Array) -> Array:
    """Non-differentiable helper: resample a 2-D array with prebuilt
    row/column weight matrices (used by the zoom crop and remap)."""
    return rmat @ plane @ cmat.T


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment estimates keyed by parameter name."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over ``params``, in place.

    Every parameter must carry a gradient; parameter grads are consumed
    (zeroed) by the update.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter '{name}' has no gradient")
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CPKT1"
_CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, "Tensor | Array"]) -> None:
    """Write named tensors in the CPKT1 layout documented at module top."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<Q", len(tensors)))
        for name, t in tensors.items():
            # asarray keeps 0-d arrays 0-d (ascontiguousarray would not).
            arr = np.asarray(t.data if isinstance(t, Tensor) else t,
                             dtype="<f8", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, Array]:
    """Read a CPKT1 file back into name -> float64 array."""
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if bytes(view[:5]) != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a CPKT1 checkpoint")
    off = 5
    (version,) = struct.unpack_from("<I", view, off)
    off += 4
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", view, off)
    off += 8
    out: dict[str, Array] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off:off + name_len]).decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", view, off)
            off += 4
            extents = struct.unpack_from(f"<{rank}Q", view, off)
            off += 8 * rank
            n = int(np.prod(extents)) if rank else 1
            arr = np.frombuffer(view, dtype="<f8", count=n, offset=off).copy()
            off += 8 * n
            out[name] = arr.reshape(extents)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after payload")
    return out
