"""Dense float64 tensors with a reverse-mode gradient tape.

Everything runs on contiguous 64-bit numpy buffers. Operations record
onto an explicitly opened :class:`Tape`; with no tape open they are plain
forward computations. The 3D convolution family ships two routes: a naive
looped reference kernel and a vectorized im2col fast path. The fast path
is the one wired into the ops; the reference kernel exists so tests can
cross-check the two within 1e-12.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeEntry",
    "backward",
    "add",
    "scalar_mul",
    "elementwise_mul",
    "tensor_sum",
    "tensor_mean",
    "relu",
    "sigmoid",
    "bce",
    "concat_channels",
    "channel_slice",
    "conv3d",
    "conv3d_transpose",
    "conv3d_output_shape",
    "conv3d_transpose_output_shape",
    "conv3d_reference",
    "conv3d_transpose_reference",
]

BCE_EPS = 1e-7


class Tensor:
    """A dense array with an optional gradient buffer.

    ``data`` is always float64 and C-contiguous. ``grad``, once populated,
    has the same shape as ``data``. Tensors are treated as immutable after
    creation except for the grad buffer; optimizers that update parameters
    in place own that mutation.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    """One recorded operation: where its data came from and how to push grads back."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: object  # callable(out_grad: np.ndarray) -> None


class Tape:
    """Ordered record of operations, replayed in reverse by :func:`backward`.

    Entries are appended in execution order, so the list is topologically
    sorted by construction. A tape can drive one backward pass; call
    :meth:`reset` (or build a fresh tape) before reusing it.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.used = False

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward_fn))

    def reset(self) -> None:
        self.entries.clear()
        self.used = False

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tapes().pop()

    def __len__(self) -> int:
        return len(self.entries)


_tape_stack = threading.local()


def _active_tapes() -> list[Tape]:
    stack = getattr(_tape_stack, "stack", None)
    if stack is None:
        stack = []
        _tape_stack.stack = stack
    return stack


def _current_tape() -> Tape | None:
    stack = _active_tapes()
    return stack[-1] if stack else None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make_output(data: np.ndarray, inputs: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(i.requires_grad for i in inputs))
    tape = _current_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar produced through ``tape``. Each entry is
    visited exactly once, in reverse execution order. A tape drives one
    pass; a second call without reset() raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.used:
        raise RuntimeError("tape already consumed by a backward pass; reset() it or build a new one")
    if not any(e.output is loss for e in tape.entries):
        raise RuntimeError("loss tensor is detached: it was not produced through this tape")
    tape.used = True
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is None:
            continue
        entry.backward_fn(g)


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make_output(a.data + b.data, (a, b), "add", _bw)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def _bw(g):
        _accumulate(x, g * c)

    return _make_output(x.data * c, (x,), "scalar_mul", _bw)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"elementwise_mul: shape mismatch {a.shape} vs {b.shape}")

    def _bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make_output(a.data * b.data, (a, b), "elementwise_mul", _bw)


def tensor_sum(x: Tensor) -> Tensor:
    def _bw(g):
        _accumulate(x, np.full_like(x.data, g.item()))

    return _make_output(np.asarray(x.data.sum()), (x,), "sum", _bw)


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size

    def _bw(g):
        _accumulate(x, np.full_like(x.data, g.item() / n))

    return _make_output(np.asarray(x.data.mean()), (x,), "mean", _bw)


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = x.data > 0.0

    def _bw(g):
        _accumulate(x, g * mask)

    return _make_output(np.where(mask, x.data, 0.0), (x,), "relu", _bw)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)

    def _bw(g):
        _accumulate(x, g * y * (1.0 - y))

    return _make_output(y, (x,), "sigmoid", _bw)


def bce(prob: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy over all voxels.

    Probabilities are clamped to [BCE_EPS, 1-BCE_EPS] before the logs; the
    clamp contributes zero gradient outside that band. Targets must be
    exactly 0 or 1.
    """
    if prob.shape != target.shape:
        raise ValueError(f"bce: prob shape {prob.shape} != target shape {target.shape}")
    t = target.data
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce: target must be binary (values exactly 0 or 1)")
    p = np.clip(prob.data, BCE_EPS, 1.0 - BCE_EPS)
    inside = (prob.data > BCE_EPS) & (prob.data < 1.0 - BCE_EPS)
    n = p.size
    val = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()

    def _bw(g):
        gp = g.item() * ((p - t) / (p * (1.0 - p))) / n
        _accumulate(prob, gp * inside)

    return _make_output(np.asarray(val), (prob, target), "bce", _bw)


def concat_channels(parts: list[Tensor] | tuple[Tensor, ...]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels: need at least one tensor")
    spatial = parts[0].shape[1:]
    for i, p in enumerate(parts):
        if p.shape[1:] != spatial:
            raise ValueError(
                f"concat_channels: tensor {i} has spatial shape {p.shape[1:]}, expected {spatial}"
            )
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi])

    return _make_output(np.concatenate([p.data for p in parts], axis=0), tuple(parts), "concat_channels", _bw)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[0]
    if not (0 <= start < stop <= c):
        raise ValueError(f"channel_slice: [{start}:{stop}] out of range for {c} channels")

    def _bw(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[start:stop] += g

    return _make_output(x.data[start:stop].copy(), (x,), "channel_slice", _bw)


# ---------------------------------------------------------------------------
# 3D convolution family
#
# conv3d is cross-correlation (no kernel flip). conv3d_transpose computes the
# adjoint map: with a conv kernel K[C_out, C_in, k, k, k], feeding the conv's
# output through conv3d_transpose with the same array (read as
# [C_in', C_out', k, k, k]) applies the transpose of the convolution matrix.


def conv3d_output_shape(dims: tuple[int, int, int], k: int, stride: int, padding: int) -> tuple[int, int, int]:
    return tuple((d + 2 * padding - k) // stride + 1 for d in dims)


def conv3d_transpose_output_shape(dims: tuple[int, int, int], k: int, stride: int, padding: int) -> tuple[int, int, int]:
    return tuple((d - 1) * stride - 2 * padding + k for d in dims)


def _check_conv_args(stride: int, padding: int) -> None:
    if stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided view of all k-cubed windows: (C, D', H', W', k, k, k)."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    return v[:, ::stride, ::stride, ::stride]


def _conv3d_forward_fast(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int, padding: int):
    c_out, c_in, ks = k.shape[0], k.shape[1], k.shape[2]
    p = padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p))) if p else x
    win = _windows(xp, ks, stride)
    od, oh, ow = win.shape[1:4]
    # (C_in*k^3, N) column matrix, cached for the backward pass
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c_in * ks**3, od * oh * ow)
    cols = np.ascontiguousarray(cols)
    kmat = k.reshape(c_out, c_in * ks**3)
    out = kmat @ cols + b[:, None]
    return out.reshape(c_out, od, oh, ow), cols


def _scatter_windows(prod: np.ndarray, raw_dims: tuple[int, int, int], k: int, stride: int) -> np.ndarray:
    """Adjoint of _windows: scatter-add (C, k, k, k, D, H, W) taps into a raw buffer."""
    c = prod.shape[0]
    d, h, w = prod.shape[4:]
    raw = np.zeros((c,) + raw_dims, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                raw[:, i : i + stride * d : stride, j : j + stride * h : stride, l : l + stride * w : stride] += prod[:, i, j, l]
    return raw


def conv3d(input: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 3D cross-correlation, differentiable in input, kernel, and bias."""
    _check_conv_args(stride, padding)
    if input.data.ndim != 4:
        raise ValueError(f"conv3d: input must be [C_in, D, H, W], got shape {input.shape}")
    if kernel.data.ndim != 5:
        raise ValueError(f"conv3d: kernel must be [C_out, C_in, k, k, k], got shape {kernel.shape}")
    c_out, c_in, kd, kh, kw = kernel.shape
    if not (kd == kh == kw):
        raise ValueError(f"conv3d: kernel must be cubic, got {kd}x{kh}x{kw}")
    if kd % 2 != 1:
        raise ValueError(f"conv3d: kernel size must be odd, got {kd}")
    if input.shape[0] != c_in:
        raise ValueError(
            f"conv3d: input has {input.shape[0]} channels but kernel expects C_in={c_in}"
        )
    if bias.shape != (c_out,):
        raise ValueError(f"conv3d: bias shape {bias.shape} != (C_out,)=({c_out},)")
    dims = input.shape[1:]
    out_dims = conv3d_output_shape(dims, kd, stride, padding)
    for ax, od in zip("DHW", out_dims):
        if od < 1:
            raise ValueError(
                f"conv3d: output dimension {ax} would be {od} (input {dims}, k={kd}, "
                f"stride={stride}, padding={padding})"
            )

    out_data, cols = _conv3d_forward_fast(input.data, kernel.data, bias.data, stride, padding)
    n = out_data[0].size
    ks3 = kd**3

    def _bw(g):
        gmat = g.reshape(c_out, n)
        if bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=1))
        if kernel.requires_grad:
            _accumulate(kernel, (gmat @ cols.T).reshape(kernel.shape))
        if input.requires_grad:
            prod = (kernel.data.reshape(c_out, c_in * ks3).T @ gmat)
            prod = prod.reshape(c_in, kd, kd, kd, *out_dims)
            raw_dims = tuple((od - 1) * stride + kd for od in out_dims)
            raw = _scatter_windows(prod, raw_dims, kd, stride)
            p = padding
            gx = raw[:, p : p + dims[0], p : p + dims[1], p : p + dims[2]]
            # conv may not have consumed trailing voxels; pad the remainder with zeros
            if gx.shape[1:] != dims:
                full = np.zeros_like(input.data)
                full[:, : gx.shape[1], : gx.shape[2], : gx.shape[3]] = gx
                gx = full
            _accumulate(input, gx)

    return _make_output(out_data, (input, kernel, bias), "conv3d", _bw)


def conv3d_transpose(input: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 3D convolution: the adjoint of conv3d used as a forward op."""
    _check_conv_args(stride, padding)
    if input.data.ndim != 4:
        raise ValueError(f"conv3d_transpose: input must be [C_in, D, H, W], got shape {input.shape}")
    if kernel.data.ndim != 5:
        raise ValueError(
            f"conv3d_transpose: kernel must be [C_in, C_out, k, k, k], got shape {kernel.shape}"
        )
    c_in, c_out, kd, kh, kw = kernel.shape
    if not (kd == kh == kw):
        raise ValueError(f"conv3d_transpose: kernel must be cubic, got {kd}x{kh}x{kw}")
    if input.shape[0] != c_in:
        raise ValueError(
            f"conv3d_transpose: input has {input.shape[0]} channels but kernel expects C_in={c_in}"
        )
    if bias.shape != (c_out,):
        raise ValueError(f"conv3d_transpose: bias shape {bias.shape} != (C_out,)=({c_out},)")
    dims = input.shape[1:]
    out_dims = conv3d_transpose_output_shape(dims, kd, stride, padding)
    for ax, od in zip("DHW", out_dims):
        if od < 1:
            raise ValueError(
                f"conv3d_transpose: output dimension {ax} would be {od} (input {dims}, k={kd}, "
                f"stride={stride}, padding={padding})"
            )

    d, h, w = dims
    ks3 = kd**3
    xmat = input.data.reshape(c_in, d * h * w)
    prod = (kernel.data.reshape(c_in, c_out * ks3).T @ xmat).reshape(c_out, kd, kd, kd, d, h, w)
    raw_dims = tuple((dd - 1) * stride + kd for dd in dims)
    raw = _scatter_windows(prod, raw_dims, kd, stride)
    p = padding
    out_data = raw[:, p : p + out_dims[0], p : p + out_dims[1], p : p + out_dims[2]].copy()
    out_data += bias.data[:, None, None, None]

    def _bw(g):
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(1, 2, 3)))
        if not (kernel.requires_grad or input.requires_grad):
            return
        gp = np.pad(g, ((0, 0), (p, p), (p, p), (p, p))) if p else g
        win = _windows(gp, kd, stride)  # (C_out, D, H, W, k, k, k)
        if kernel.requires_grad:
            wmat = win.reshape(c_out, d * h * w, ks3)
            gk = xmat @ wmat.transpose(1, 0, 2).reshape(d * h * w, c_out * ks3)
            _accumulate(kernel, gk.reshape(kernel.shape))
        if input.requires_grad:
            cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c_out * ks3, d * h * w)
            gx = kernel.data.reshape(c_in, c_out * ks3) @ cols
            _accumulate(input, gx.reshape(input.shape))

    return _make_output(out_data, (input, kernel, bias), "conv3d_transpose", _bw)


# ---------------------------------------------------------------------------
# looped reference kernels (forward only; the oracle route for the fast path)


def conv3d_reference(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    c_out, c_in, ks = k.shape[0], k.shape[1], k.shape[2]
    p = padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    od, oh, ow = conv3d_output_shape(x.shape[1:], ks, stride, padding)
    out = np.zeros((c_out, od, oh, ow), dtype=np.float64)
    for co in range(c_out):
        for d in range(od):
            for h in range(oh):
                for w in range(ow):
                    acc = b[co]
                    for ci in range(c_in):
                        for i in range(ks):
                            for j in range(ks):
                                for l in range(ks):
                                    acc += xp[ci, d * stride + i, h * stride + j, w * stride + l] * k[co, ci, i, j, l]
                    out[co, d, h, w] = acc
    return out


def conv3d_transpose_reference(x: np.ndarray, k: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    c_in, c_out, ks = k.shape[0], k.shape[1], k.shape[2]
    d, h, w = x.shape[1:]
    raw_dims = tuple((dd - 1) * stride + ks for dd in (d, h, w))
    raw = np.zeros((c_out,) + raw_dims, dtype=np.float64)
    for ci in range(c_in):
        for dd in range(d):
            for hh in range(h):
                for ww in range(w):
                    v = x[ci, dd, hh, ww]
                    for co in range(c_out):
                        for i in range(ks):
                            for j in range(ks):
                                for l in range(ks):
                                    raw[co, dd * stride + i, hh * stride + j, ww * stride + l] += v * k[ci, co, i, j, l]
    p = padding
    out_dims = conv3d_transpose_output_shape((d, h, w), ks, stride, padding)
    out = raw[:, p : p + out_dims[0], p : p + out_dims[1], p : p + out_dims[2]].copy()
    return out + b[:, None, None, None]
