"""Rank-4 dense tensors with reverse-mode automatic differentiation.

Everything is laid out batch/channel/height/width, row-major. Scalars are
(1,1,1,1) tensors so a single code path covers losses and feature maps.
Float32 is the working precision; float64 exists for finite-difference
gradient checks, which are hopeless in single precision.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class TensorError(Exception):
    """Base class for tensor-module failures."""


class DimensionError(TensorError):
    """Operand shapes are incompatible with the requested operation."""


class ArgumentError(TensorError):
    """A non-shape argument (stride, kind, ...) is invalid."""


class GradientStateError(TensorError):
    """Backward called on an unsuitable or already-consumed graph."""


_grad_enabled = True
_node_counter = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A rank-4 array plus the bookkeeping needed for reverse mode.

    ``_inputs``/``_vjp`` link a non-leaf tensor to the operation that
    produced it; ``backward`` walks those links. Leaves created with
    ``requires_grad=True`` accumulate into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_vjp", "_order", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        global _node_counter
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise DimensionError(f"tensors are rank-4, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ArgumentError("tensor data contains NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._inputs: tuple = ()
        self._vjp: Optional[Callable] = None
        self._order = _node_counter
        _node_counter += 1
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # a few dunders keep network code readable; they map onto module ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, alpha):
        if isinstance(alpha, Tensor):
            return mul(self, alpha)
        return scale(self, alpha)

    __rmul__ = __mul__


def scalar_tensor(value: float, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, recording the adjoint rule when grads are live.

    Skips the constructor's finiteness/rank validation: op outputs have
    known rank, and finite-in/finite-out is a tested invariant, not a
    per-op runtime scan (which would dominate large forward passes)."""
    global _node_counter
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._inputs = ()
    out._vjp = None
    out._order = _node_counter
    _node_counter += 1
    out._consumed = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._vjp = vjp
    return out


class Tape:
    """Topologically ordered record of the operations below a tensor.

    Replaying adjoints in reverse order visits every recorded node once;
    that is exactly what ``backward`` does.
    """

    def __init__(self, root: Tensor):
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                nodes.append(node)
                continue
            stack.append((node, True))
            for parent in node._inputs:
                if id(parent) not in seen and parent._vjp is not None:
                    stack.append((parent, False))
        self.nodes = nodes  # creation order: inputs before outputs

    def replay(self, root: Tensor, seed: np.ndarray, hook=None) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if hook is not None:
                hook(node)
            for parent, pgrad in zip(node._inputs, node._vjp(g)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent._vjp is None:  # leaf: accumulate into .grad
                    if parent.grad is None:
                        parent.grad = pgrad.copy()
                    else:
                        parent.grad += pgrad
                else:
                    if id(parent) in grads:
                        grads[id(parent)] += pgrad
                    else:
                        grads[id(parent)] = pgrad.copy() if pgrad.base is not None else pgrad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise GradientStateError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradientStateError("backward called twice on the same graph without reset")
    if loss._vjp is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        loss._consumed = True
        return
    tape = Tape(loss)
    tape.replay(loss, np.ones_like(loss.data))
    loss._consumed = True


# ---------------------------------------------------------------------------
# convolution internals
#
# Forward convolutions take two routes: strided convs go through im2col and
# one GEMM; stride-1 convs do one small GEMM per kernel tap over the padded
# plane and accumulate shifted views, which avoids the big column copy.
# Transposed convolution decomposes into output phases (one stride-1-style
# accumulation per phase). The input-gradient of conv2d deliberately uses a
# separate per-tap scatter so the transposed-conv/adjoint equivalence test
# compares two genuinely different code paths.
# ---------------------------------------------------------------------------


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _fold_batch(x: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> contiguous (c, n*h*w): batch becomes GEMM columns."""
    n, c, h, w = x.shape
    if n == 1:
        return np.ascontiguousarray(x.reshape(c, h * w))
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def _unfold_batch(x: np.ndarray, n: int) -> np.ndarray:
    """(c, n, h, w) -> contiguous (n, c, h, w)."""
    if n == 1:
        c, _, h, w = x.shape
        return x.reshape(1, c, h, w)
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Column matrix (c*kh*kw, n*oh*ow) plus the output extents."""
    n, c, h, w = x.shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(w, kw, stride, pad)
    xp = _pad_nchw(x, pad)
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        (c, kh, kw, n, oh, ow),
        (s[1], s[2], s[3], s[0], s[2] * stride, s[3] * stride),
    )
    cols = np.ascontiguousarray(windows).reshape(c * kh * kw, n * oh * ow)
    return cols, oh, ow


def _conv_forward(x: np.ndarray, k: np.ndarray, bias: Optional[np.ndarray],
                  stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    outc, inc, kh, kw = k.shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(w, kw, stride, pad)
    # pick the route that allocates less scratch: the tap path needs a kernel
    # permutation plus one plane buffer, im2col needs the full column matrix
    tap_scratch = outc * inc * kh * kw + outc * n * (h + 2 * pad) * (w + 2 * pad)
    im2col_scratch = inc * kh * kw * n * oh * ow
    if stride == 1 and tap_scratch <= im2col_scratch:
        # wide spatial extent: one dense GEMM per kernel tap over the padded
        # plane plus shifted accumulation, avoiding the big column copy
        xp = _pad_nchw(x, pad)
        ph, pw = xp.shape[2], xp.shape[3]
        flat = _fold_batch(xp)
        taps = np.ascontiguousarray(k.transpose(2, 3, 0, 1))
        acc = np.zeros((outc, n, oh, ow), dtype=x.dtype)
        plane = np.empty((outc, n * ph * pw), dtype=x.dtype)
        for dy in range(kh):
            for dx in range(kw):
                np.matmul(taps[dy, dx], flat, out=plane)
                acc += plane.reshape(outc, n, ph, pw)[:, :, dy:dy + oh, dx:dx + ow]
        out = _unfold_batch(acc, n)
    else:
        cols, oh, ow = _im2col(x, kh, kw, stride, pad)
        out = _unfold_batch((k.reshape(outc, inc * kh * kw) @ cols).reshape(outc, n, oh, ow), n)
    if bias is not None:
        out += bias.reshape(1, outc, 1, 1)
    return out


def _conv_input_grad(g: np.ndarray, k: np.ndarray, stride: int, pad: int,
                     in_shape) -> np.ndarray:
    # scatter into the padded input gradient, channel-major during accumulation
    n, c, h, w = in_shape
    outc, inc, kh, kw = k.shape
    _, _, oh, ow = g.shape
    dxp = np.zeros((inc, n, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
    gf = _fold_batch(g)
    if n * oh * ow >= inc * kh * kw:
        taps = np.ascontiguousarray(k.transpose(2, 3, 1, 0))  # (kh, kw, inc, outc)
        for dy in range(kh):
            for dx in range(kw):
                tap = np.matmul(taps[dy, dx], gf).reshape(inc, n, oh, ow)
                dxp[:, :, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride] += tap
    else:
        # one GEMM builds all tap planes at once (BLAS takes the transposed view)
        cols = (k.reshape(outc, inc * kh * kw).T @ gf).reshape(inc, kh, kw, n, oh, ow)
        for dy in range(kh):
            for dx in range(kw):
                dxp[:, :, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride] += cols[:, dy, dx]
    dxp = _unfold_batch(dxp, n)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, stride: int, pad: int,
                      k_shape) -> np.ndarray:
    outc, inc, kh, kw = k_shape
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    dk = _fold_batch(g) @ cols.T
    return dk.reshape(outc, inc, kh, kw)


def _conv_transpose_forward(x: np.ndarray, k: np.ndarray, bias: Optional[np.ndarray],
                            stride: int, pad: int) -> np.ndarray:
    """Transposed convolution via phase decomposition.

    Output position y = stride*i - pad + dy, so taps sharing (dy - pad) mod
    stride feed one interleaved output phase; each phase is a dense
    shift-accumulate like the stride-1 forward.
    """
    n, inc, h, w = x.shape
    kc, outc, kh, kw = k.shape
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (w - 1) * stride - 2 * pad + kw
    flat = _fold_batch(x)
    # one GEMM per kernel row into a reused slab keeps scratch memory small
    k_rows = np.ascontiguousarray(k.transpose(2, 1, 3, 0))  # (kh, outc, kw, inc)
    slab = np.empty((outc * kw, n * h * w), dtype=x.dtype)
    even = oh % stride == 0 and ow % stride == 0
    if even:
        # all phases share one extent; interleave once at the end
        stacked = np.zeros((stride, stride, outc, n, oh // stride, ow // stride), dtype=x.dtype)
        phases = {(ry, rx): stacked[ry, rx]
                  for ry in range(stride) for rx in range(stride)}
    else:
        out = np.zeros((outc, n, oh, ow), dtype=x.dtype)
        phases = {}
        for ry in range(min(stride, oh)):
            for rx in range(min(stride, ow)):
                ph = (oh - 1 - ry) // stride + 1
                pw = (ow - 1 - rx) // stride + 1
                phases[(ry, rx)] = np.zeros((outc, n, ph, pw), dtype=x.dtype)
    for dy in range(kh):
        np.matmul(k_rows[dy].reshape(outc * kw, inc), flat, out=slab)
        taps = slab.reshape(outc, kw, n, h, w)
        ry = (dy - pad) % stride
        iy = (ry + pad - dy) // stride
        for dx in range(kw):
            rx = (dx - pad) % stride
            phase = phases.get((ry, rx))
            if phase is None:
                continue
            ix = (rx + pad - dx) // stride
            ph, pw = phase.shape[2], phase.shape[3]
            # phase row m holds y = ry + stride*m, fed by input row m + iy
            ms, me = max(0, -iy), min(ph, h - iy)
            ns, ne = max(0, -ix), min(pw, w - ix)
            if ms < me and ns < ne:
                phase[:, :, ms:me, ns:ne] += taps[:, dx, :, ms + iy:me + iy, ns + ix:ne + ix]
    if even:
        out = np.ascontiguousarray(stacked.transpose(2, 3, 4, 0, 5, 1)).reshape(outc, n, oh, ow)
    else:
        for (ry, rx), phase in phases.items():
            out[:, :, ry::stride, rx::stride] = phase
    out = _unfold_batch(out, n)
    if bias is not None:
        out += bias.reshape(1, outc, 1, 1)
    return out


def _conv_transpose_kernel_grad(x: np.ndarray, g: np.ndarray, stride: int, pad: int,
                                k_shape) -> np.ndarray:
    inc, outc, kh, kw = k_shape
    n, _, h, w = x.shape
    gp = _pad_nchw(g, pad)
    dk = np.zeros(k_shape, dtype=x.dtype)
    xf = _fold_batch(x)
    for dy in range(kh):
        for dx in range(kw):
            tap = gp[:, :, dy:dy + stride * h:stride, dx:dx + stride * w:stride]
            dk[:, :, dy, dx] = xf @ _fold_batch(np.ascontiguousarray(tap)).T
    return dk


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    """Cross-correlate ``x`` with ``kernel`` (outC,inC,kH,kW) plus bias."""
    if stride < 1:
        raise ArgumentError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ArgumentError(f"padding must be non-negative, got {padding}")
    n, c, h, w = x.shape
    outc, inc, kh, kw = kernel.shape
    if c != inc:
        raise DimensionError(f"input has {c} channels, kernel expects {inc}")
    if bias.shape != (1, outc, 1, 1) and bias.numel() != outc:
        raise DimensionError(f"bias must hold {outc} values, got shape {bias.shape}")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv output extent {oh}x{ow} is empty for input {h}x{w}")
    b = bias.data.reshape(outc)
    out = _conv_forward(x.data, kernel.data, b, stride, padding)

    def vjp(g):
        gx = _conv_input_grad(g, kernel.data, stride, padding, x.shape) if x.requires_grad else None
        gk = _conv_kernel_grad(x.data, g, stride, padding, kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape) if bias.requires_grad else None
        return gx, gk, gb

    return _result(out, (x, kernel, bias), vjp)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    """Transposed convolution; kernel laid out (inC,outC,kH,kW)."""
    if stride < 1:
        raise ArgumentError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ArgumentError(f"padding must be non-negative, got {padding}")
    n, c, h, w = x.shape
    inc, outc, kh, kw = kernel.shape
    if c != inc:
        raise DimensionError(f"input has {c} channels, kernel expects {inc}")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise DimensionError(f"transposed conv output extent {oh}x{ow} is empty")
    b = bias.data.reshape(outc)
    out = _conv_transpose_forward(x.data, kernel.data, b, stride, padding)

    def vjp(g):
        # gather: the adjoint of scatter is a strided convolution
        gx = _conv_forward(g, kernel.data, None, stride, padding) if x.requires_grad else None
        gk = _conv_transpose_kernel_grad(x.data, g, stride, padding, kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape) if bias.requires_grad else None
        return gx, gk, gb

    return _result(out, (x, kernel, bias), vjp)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, epsilon: float = 1e-5) -> Tensor:
    """Per-channel normalization; train mode also updates the running stats in place."""
    n, c, h, w = x.shape
    if gamma.numel() != c or beta.numel() != c:
        raise DimensionError(f"gamma/beta must hold {c} values")
    gam = gamma.data.reshape(1, c, 1, 1)
    bet = beta.data.reshape(1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean.reshape(c)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.reshape(c)
    else:
        mean = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype, copy=False)
    recording = _grad_enabled and (x.requires_grad or gamma.requires_grad or beta.requires_grad)
    if not training and not recording:
        # inference fast path: one fused per-channel affine
        scale_c = gam * inv_std
        out = x.data * scale_c
        out += bet - mean.astype(x.dtype) * scale_c
        return _result(out, (x, gamma, beta), None)
    xhat = (x.data - mean) * inv_std
    out = gam * xhat + bet

    def vjp(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)).reshape(beta.shape) if beta.requires_grad else None
        if x.requires_grad:
            if training:
                m = n * h * w
                gxhat = g * gam
                gx = (inv_std / m) * (m * gxhat
                                      - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                                      - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            else:
                gx = g * gam * inv_std
            gx = gx.astype(x.dtype)
        else:
            gx = None
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), vjp)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} needs matching shapes, got {a.shape} vs {b.shape}")


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # exact match, or one side is a scalar tensor (relativistic mean shifts)
    if a.shape == b.shape or a.numel() == 1 or b.numel() == 1:
        return
    raise DimensionError(f"{op} needs matching shapes, got {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return g.sum(axis=(0, 1, 2, 3), keepdims=True)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    d = x.data
    out = np.maximum(d, d * d.dtype.type(slope))  # exact for slope in [0,1)

    def vjp(g):
        # recomputed on demand so inference pays nothing for it
        factor = np.where(d >= 0, d.dtype.type(1.0), d.dtype.type(slope))
        return (g * factor,)

    return _result(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _result(out, (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), vjp)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "subtract")
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                -_unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product (scalar-tensor broadcast allowed)."""
    _binary_shapes(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), vjp)


def scale(x: Tensor, alpha: float) -> Tensor:
    a = x.data.dtype.type(alpha)
    out = x.data * a

    def vjp(g):
        return (g * a,)

    return _result(out, (x,), vjp)


def clamped_log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero on the clamped region."""
    f = x.data.dtype.type(floor)
    clamped = np.maximum(x.data, f)
    out = np.log(clamped)
    live = x.data > f

    def vjp(g):
        return (np.where(live, g / clamped, 0.0).astype(x.dtype),)

    return _result(out, (x,), vjp)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ArgumentError("concat_channels needs at least one tensor")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != n or t.shape[2] != h or t.shape[3] != w:
            raise DimensionError(f"concat spatial/batch mismatch: {t.shape} vs {inputs[0].shape}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    splits = [t.shape[1] for t in inputs]

    def vjp(g):
        grads = []
        start = 0
        for t, width in zip(inputs, splits):
            grads.append(np.ascontiguousarray(g[:, start:start + width]) if t.requires_grad else None)
            start += width
        return tuple(grads)

    return _result(out, tuple(inputs), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise DimensionError(f"channel slice [{start}:{stop}) outside 0..{x.shape[1]}")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result(out, (x,), vjp)


def mean(x: Tensor) -> Tensor:
    if x.numel() == 0:
        raise DimensionError("mean of an empty tensor")
    out = np.full((1, 1, 1, 1), x.data.mean(dtype=x.dtype), dtype=x.dtype)
    inv = x.data.dtype.type(1.0 / x.numel())

    def vjp(g):
        return (np.full_like(x.data, g.reshape(-1)[0] * inv),)

    return _result(out, (x,), vjp)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute elementwise difference (subgradient 0 at ties)."""
    _same_shape(a, b, "l1_distance")
    if a.numel() == 0:
        raise DimensionError("l1_distance of empty tensors")
    diff = a.data - b.data
    out = np.full((1, 1, 1, 1), np.abs(diff).mean(dtype=a.dtype), dtype=a.dtype)
    sgn = np.sign(diff) / a.numel()

    def vjp(g):
        g0 = g.reshape(-1)[0]
        ga = (g0 * sgn).astype(a.dtype) if a.requires_grad else None
        gb = (-g0 * sgn).astype(b.dtype) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def finite_difference_check(fn: Callable[[], Tensor], leaves: Iterable[Tensor],
                            samples_per_leaf: int = 8, step: float = 1e-5,
                            rng: Optional[np.random.Generator] = None):
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the given float64 leaves on every
    call. Returns (max_relative_error, per-leaf list). Relative error uses
    a 1e-6 floor so exactly-zero gradients compare on absolute terms.

    Coordinates whose half-step and full-step central differences disagree
    are skipped: the interval straddles a kink (abs/leaky corners), where
    a difference quotient says nothing about the subgradient. The filter
    cannot hide analytic bugs — a wrong gradient still mismatches the
    self-consistent FD estimate everywhere else.
    """
    rng = rng or np.random.default_rng(0)
    leaves = list(leaves)
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise ArgumentError("finite differences need float64 leaves")
        leaf.zero_grad()
    loss = fn()
    backward(loss)
    analytic = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
                for leaf in leaves]

    def probe(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            hi = fn().item()
        flat[i] = orig - h
        with no_grad():
            lo = fn().item()
        flat[i] = orig
        return (hi - lo) / (2.0 * h)

    report = []
    worst = 0.0
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        count = min(samples_per_leaf, flat.size)
        idx = rng.choice(flat.size, size=count, replace=False)
        leaf_worst = 0.0
        for i in idx:
            fd = probe(flat, i, step)
            fd_half = probe(flat, i, step / 2.0)
            scale = max(abs(fd), abs(fd_half), 1e-6)
            if abs(fd - fd_half) / scale > 1e-6:
                continue  # kink inside the FD interval
            an = ana.reshape(-1)[i]
            rel = abs(an - fd_half) / max(abs(an), abs(fd_half), 1e-6)
            leaf_worst = max(leaf_worst, rel)
        report.append(leaf_worst)
        worst = max(worst, leaf_worst)
    return worst, report
