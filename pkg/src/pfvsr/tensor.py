"""Rank-4 tensors with reverse-mode autodiff on an explicit gradient tape.

Every value is a dense (batch, channels, height, width) array, float64 by
default (float32 opt-in for speed runs). Operations record onto the innermost
active ``GradientTape``; ``backward`` replays the tape in exact reverse
recording order, so gradient accumulation order is fixed and results are
bit-reproducible for identical inputs.
"""
from __future__ import annotations

import struct

import numpy as np

DEFAULT_DTYPE = np.float64
_ALLOWED_DTYPES = (np.float64, np.float32)

_TAPE_STACK: list["GradientTape"] = []
_DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Dimension mismatch; names the offending axis."""

    def __init__(self, axis, message):
        self.axis = axis
        super().__init__(f"[axis={axis}] {message}")


def set_debug_checks(enabled):
    """Toggle NaN/Inf screening of every op output (slow, for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _screen(arr, op):
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced a non-finite value")
    return arr


class Tensor:
    """A rank-4 array plus autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError("rank", f"tensors are rank-4, got rank {arr.ndim}")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError("batch", f"item() needs a scalar tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"


def zeros(shape, dtype=DEFAULT_DTYPE):
    return Tensor(np.zeros(shape, dtype=dtype))

def full(shape, value, dtype=DEFAULT_DTYPE):
    return Tensor(np.full(shape, value, dtype=dtype))

def constant(data, dtype=None):
    arr = np.asarray(data)
    return Tensor(arr.astype(dtype) if dtype is not None else arr)

def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)

def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("output", "inputs", "fn")

    def __init__(self, output, inputs, fn):
        self.output = output
        self.inputs = inputs
        self.fn = fn


class GradientTape:
    """Ordered log of executed ops, replayed backwards for gradients."""

    def __init__(self):
        self._records = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._records)

    def _push(self, output, inputs, fn):
        self._records.append(_Record(output, inputs, fn))


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out_data, inputs, fn, op):
    """Wrap an op result, recording it if a tape is listening."""
    _screen(out_data, op)
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape._push(out, tuple(inputs), fn)
    return out


def backward(tape, loss):
    """Populate ``.grad`` on every leaf tensor reachable from ``loss``.

    The tape is consumed: records are cleared and a second call raises.
    """
    if not isinstance(loss, Tensor) or loss.shape != (1, 1, 1, 1):
        got = getattr(loss, "shape", type(loss))
        raise ShapeError("batch", f"backward needs a (1,1,1,1) scalar loss, got {got}")
    if not tape._records:
        raise RuntimeError("backward on an empty tape (nothing was recorded)")
    grads = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    refs = {id(loss): loss}
    for rec in reversed(tape._records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.fn(g)):
            if gi is None or not t.requires_grad:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
                refs[tid] = t
    tape._records = []
    for tid, g in grads.items():
        refs[tid].grad = np.ascontiguousarray(g)


def _match_dtypes(op, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"{op}: mixed dtypes {dt.name} vs {t.dtype.name}")
    return dt


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    _match_dtypes("add", a, b)
    if a.shape != b.shape:
        raise ShapeError("channels", f"add needs identical shapes, got {a.shape} vs {b.shape}")
    return _finish(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _match_dtypes("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError("channels", f"sub needs identical shapes, got {a.shape} vs {b.shape}")
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _match_dtypes("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError("channels", f"mul needs identical shapes, got {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, s):
    s = float(s)
    return _finish(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a, s):
    s = float(s)
    return _finish(a.data + s, (a,), lambda g: (g,), "add_scalar")


def sqrt(a):
    out = np.sqrt(a.data)
    return _finish(out, (a,), lambda g: (g * (0.5 / out),), "sqrt")


def leaky_relu(a, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    mask = a.data >= 0
    gain = np.where(mask, a.dtype.type(1), a.dtype.type(slope))
    return _finish(a.data * gain, (a,), lambda g: (g * gain,), "leaky_relu")


# ---------------------------------------------------------------------------
# reductions

def sum_all(a):
    out = np.full((1, 1, 1, 1), a.data.sum(), dtype=a.dtype)
    shape = a.shape

    def back(g):
        return (np.broadcast_to(g.reshape(()), shape).astype(a.dtype, copy=True),)

    return _finish(out, (a,), back, "sum_all")


def mean_all(a):
    n = a.data.size
    out = np.full((1, 1, 1, 1), a.data.mean(), dtype=a.dtype)
    shape = a.shape

    def back(g):
        return (np.broadcast_to(g.reshape(()) / n, shape).astype(a.dtype, copy=True),)

    return _finish(out, (a,), back, "mean_all")


# ---------------------------------------------------------------------------
# structure ops

def concat_channels(parts):
    parts = list(parts)
    if not parts:
        raise ShapeError("channels", "concat_channels of zero tensors")
    _match_dtypes("concat_channels", *parts)
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeError("height", f"concat_channels spatial/batch mismatch: {base} vs {p.shape}")
    sizes = [p.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=1))

    return _finish(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back, "concat_channels")


def _shuffle_fwd(arr, r):
    b, c, h, w = arr.shape
    co = c // (r * r)
    out = arr.reshape(b, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out.reshape(b, co, h * r, w * r))


def _shuffle_inv(arr, r):
    b, c, h, w = arr.shape
    ho, wo = h // r, w // r
    out = arr.reshape(b, c, ho, r, wo, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out.reshape(b, c * r * r, ho, wo))


def pixel_shuffle(a, r):
    """Move an r*r channel block into an r x r spatial tile (row-major)."""
    r = int(r)
    if r < 1:
        raise ValueError(f"pixel_shuffle factor must be >= 1, got {r}")
    if a.shape[1] % (r * r) != 0:
        raise ShapeError("channels", f"pixel_shuffle needs channels divisible by {r * r}, got {a.shape[1]}")
    if r == 1:
        return _finish(a.data.copy(), (a,), lambda g: (g,), "pixel_shuffle")
    return _finish(_shuffle_fwd(a.data, r), (a,), lambda g: (_shuffle_inv(g, r),), "pixel_shuffle")


def pixel_unshuffle(a, r):
    """Inverse of pixel_shuffle: fold r x r tiles back into channels."""
    r = int(r)
    if r < 1:
        raise ValueError(f"pixel_unshuffle factor must be >= 1, got {r}")
    if a.shape[2] % r != 0 or a.shape[3] % r != 0:
        raise ShapeError("height", f"pixel_unshuffle needs spatial dims divisible by {r}, got {a.shape}")
    if r == 1:
        return _finish(a.data.copy(), (a,), lambda g: (g,), "pixel_unshuffle")
    return _finish(_shuffle_inv(a.data, r), (a,), lambda g: (_shuffle_fwd(g, r),), "pixel_unshuffle")


# ---------------------------------------------------------------------------
# convolution

def _conv_raw(x, w, pad):
    """Cross-correlation, stride 1, zero padding ``pad`` on each spatial edge."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k = w.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    # win: (B, C, H', W', k, k); contract channels and taps against (O, C, k, k)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, weight, bias=None, padding="same"):
    """2-D cross-correlation (no kernel flip), stride 1.

    ``weight`` is (out_channels, in_channels, k, k) with odd square k;
    ``bias`` is (1, out_channels, 1, 1) or None. ``padding`` is "same"
    (zero-pad, output spatial size preserved) or "valid".
    """
    tensors = (x, weight) if bias is None else (x, weight, bias)
    _match_dtypes("conv2d", *tensors)
    o, ci, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError("kernel", f"square kernels only, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ShapeError("kernel", f"odd kernels only, got {kh}")
    if x.shape[1] != ci:
        raise ShapeError("channels", f"input has {x.shape[1]} channels, weight expects {ci}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    k = kh
    pad = (k - 1) // 2 if padding == "same" else 0
    if padding == "valid" and (x.shape[2] < k or x.shape[3] < k):
        raise ShapeError("height", f"valid conv needs input >= {k}x{k}, got {x.shape[2]}x{x.shape[3]}")
    if bias is not None and bias.shape != (1, o, 1, 1):
        raise ShapeError("channels", f"bias must be (1,{o},1,1), got {bias.shape}")

    out = _conv_raw(x.data, weight.data, pad)
    if bias is not None:
        out = out + bias.data

    xd, wd = x.data, weight.data

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv_raw(g, flipped, k - 1 - pad)
        if weight.requires_grad:
            xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
            win = np.lib.stride_tricks.sliding_window_view(xp, g.shape[2:], axis=(2, 3))
            # win: (B, C, k, k, H', W'); contract batch and spatial against g
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 4, 5]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
        grads = (gx, gw) if bias is None else (gx, gw, gb)
        return grads

    return _finish(out, tensors, back, "conv2d")


# ---------------------------------------------------------------------------
# resampling primitives

def separable_transform(x, rows, cols):
    """Linear map ``rows @ x @ cols.T`` applied over the two spatial axes.

    ``rows`` is (H_out, H_in) and ``cols`` is (W_out, W_in); both are plain
    arrays (not differentiated). Used for blur and polynomial resampling.
    """
    rows = np.ascontiguousarray(rows, dtype=x.dtype)
    cols = np.ascontiguousarray(cols, dtype=x.dtype)
    if rows.shape[1] != x.shape[2]:
        raise ShapeError("height", f"row matrix expects height {rows.shape[1]}, got {x.shape[2]}")
    if cols.shape[1] != x.shape[3]:
        raise ShapeError("width", f"column matrix expects width {cols.shape[1]}, got {x.shape[3]}")
    out = np.matmul(rows, np.matmul(x.data, cols.T))

    def back(g):
        return (np.matmul(rows.T, np.matmul(g, cols)),)

    return _finish(np.ascontiguousarray(out), (x,), back, "separable_transform")


def downsample(x, factor):
    """Keep every ``factor``-th pixel starting at offset 0 on both axes."""
    f = int(factor)
    if f < 1:
        raise ValueError(f"downsample factor must be >= 1, got {f}")
    if x.shape[2] % f != 0 or x.shape[3] % f != 0:
        raise ShapeError("height", f"downsample by {f} needs divisible spatial dims, got {x.shape}")
    out = np.ascontiguousarray(x.data[:, :, ::f, ::f])
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, ::f, ::f] = g
        return (gx,)

    return _finish(out, (x,), back, "downsample")


# ---------------------------------------------------------------------------
# binary dump (magic "OVSRT1", four little-endian u32 dims, little-endian f64)

_MAGIC = b"OVSRT1"


def tensor_to_bytes(t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 4:
        raise ShapeError("rank", f"dump needs a rank-4 tensor, got rank {arr.ndim}")
    payload = np.ascontiguousarray(arr, dtype="<f8")
    return _MAGIC + struct.pack("<4I", *arr.shape) + payload.tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one dump starting at ``offset``; returns (array, next_offset)."""
    if buf[offset:offset + 6] != _MAGIC:
        raise ValueError("bad tensor dump: magic bytes missing")
    if len(buf) < offset + 6 + 16:
        raise ValueError("bad tensor dump: truncated shape header")
    dims = struct.unpack_from("<4I", buf, offset + 6)
    start = offset + 6 + 16
    count = int(np.prod(dims)) if all(dims) else 0
    end = start + 8 * count
    if end > len(buf):
        raise ValueError("bad tensor dump: truncated payload")
    arr = np.frombuffer(buf[start:end], dtype="<f8").reshape(dims)
    return arr.astype(np.float64), end


def save_tensor(t, path):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError("bad tensor dump: trailing bytes")
    return arr
