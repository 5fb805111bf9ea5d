"""Dense float64 tensors with reverse-mode automatic differentiation.

Kernels are numpy-backed; convolution goes through im2col plus one BLAS
matmul. A naive nested-loop convolution (`conv2d_reference`) is kept as
the in-repo oracle for tests. All spatial ops accept either a single
[C,H,W] tensor or a batched [N,C,H,W] one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "TapeNode",
    "add",
    "sub",
    "mul",
    "scale",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "matmul",
    "matvec",
    "conv2d",
    "conv2d_reference",
    "relu",
    "maxpool2d",
    "bilinear_upsample",
    "softmax_cross_entropy",
    "backward",
    "save_tensor",
    "load_tensor",
    "save_archive",
    "load_archive",
    "archive_bytes",
]

IGNORE_LABEL = 255
_MAGIC = b"PRK1"


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axes."""


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"non-finite values in {what}")


@dataclass
class TapeNode:
    """Autodiff graph record: op kind, input tensors, and a backward closure.

    The closure holds whatever intermediates the op saved; it maps the
    output gradient to per-input gradients (None where an input does not
    need one).
    """

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tensor:
    """A dense float64 array with an optional gradient slot.

    Tensors built from raw data are leaves; tensors produced by an op
    while any input needs a gradient carry a TapeNode. Leaf data must be
    finite.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _require_finite(arr, "tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not supported")

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _out(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    """Wrap an op result; attach a tape node only when gradients can flow."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.node = None
    t.requires_grad = False
    if any(_needs(i) for i in inputs):
        t.requires_grad = True
        t.node = TapeNode(op, inputs, bwd)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        ga = _unbroadcast(g, a.data.shape) if _needs(a) else None
        gb = _unbroadcast(g, b.data.shape) if _needs(b) else None
        return ga, gb

    return _out("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        ga = _unbroadcast(g, a.data.shape) if _needs(a) else None
        gb = _unbroadcast(-g, b.data.shape) if _needs(b) else None
        return ga, gb

    return _out("sub", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if _needs(a) else None
        gb = _unbroadcast(g * a.data, b.data.shape) if _needs(b) else None
        return ga, gb

    return _out("mul", out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        return (g * s,)

    return _out("scale", a.data * s, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _out("reshape", a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {a.shape}")

    def bwd(g):
        return (g.T.copy(),)

    return _out("transpose", a.data.T.copy(), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.full(a.data.shape, float(g)),)

    return _out("sum", np.asarray(a.data.sum()), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        return (np.full(a.data.shape, float(g) / n),)

    return _out("mean", np.asarray(a.data.mean()), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner axes differ: a has {a.data.shape[1]} columns, b has {b.data.shape[0]} rows"
        )
    out = a.data @ b.data
    _require_finite(out, "matmul output")

    def bwd(g):
        ga = g @ b.data.T if _needs(a) else None
        gb = a.data.T @ g if _needs(b) else None
        return ga, gb

    return _out("matmul", out, (a, b), bwd)


def matvec(w: Tensor, h: Tensor) -> Tensor:
    if w.data.ndim != 2 or h.data.ndim != 1:
        raise ShapeError(f"matvec expects [m,n] and [n], got {w.shape} and {h.shape}")
    if w.data.shape[1] != h.data.shape[0]:
        raise ShapeError(
            f"matvec inner axes differ: matrix has {w.data.shape[1]} columns, vector has {h.data.shape[0]}"
        )
    out = w.data @ h.data
    _require_finite(out, "matvec output")

    def bwd(g):
        gw = np.outer(g, h.data) if _needs(w) else None
        gh = w.data.T @ g if _needs(h) else None
        return gw, gh

    return _out("matvec", out, (w, h), bwd)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, xp_shape, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp_shape[:2]
    xp = np.zeros(xp_shape, dtype=np.float64)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, i, j]
    return xp


def _as_batched(t: Tensor, name: str) -> tuple[np.ndarray, bool]:
    if t.data.ndim == 3:
        return t.data[None], True
    if t.data.ndim == 4:
        return t.data, False
    raise ShapeError(f"{name} must be [C,H,W] or [N,C,H,W], got shape {t.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x with kernel w plus per-channel bias."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    xb, squeeze = _as_batched(x, "conv2d input")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be [C_out,C_in,kH,kW], got shape {w.shape}")
    n, ci, h, wd = xb.shape
    co, wci, kh, kw = w.data.shape
    if wci != ci:
        raise ShapeError(f"conv2d channel axes differ: input has {ci}, weight expects {wci}")
    if b.data.shape != (co,):
        raise ShapeError(f"conv2d bias must have shape ({co},), got {b.shape}")
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ShapeError(
            f"conv2d geometry not integral: input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: {ho}x{wo}")

    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(co, ci * kh * kw)
    out = np.matmul(w2, cols) + b.data[:, None]
    _require_finite(out, "conv2d output")
    out = out.reshape(n, co, ho, wo)

    def bwd(g):
        gf = (g[None] if squeeze else g).reshape(n, co, ho * wo)
        gw = gb = gx = None
        if _needs(w):
            # fold batch into the contraction axis: one big matmul
            gf2 = gf.transpose(1, 0, 2).reshape(co, n * ho * wo)
            cols2 = cols.transpose(1, 0, 2).reshape(ci * kh * kw, n * ho * wo)
            gw = (gf2 @ cols2.T).reshape(w.data.shape)
        if _needs(b):
            gb = gf.sum(axis=(0, 2))
        if _needs(x):
            dcols = np.matmul(w2.T, gf)
            gxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            if squeeze:
                gx = gx[0]
        return gx, gw, gb

    return _out("conv2d", out[0] if squeeze else out, (x, w, b), bwd)


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Naive nested-loop convolution, kept as the oracle for conv2d tests."""
    ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for r in range(ho):
            for c in range(wo):
                acc = b[o]
                for i in range(ci):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, i, u, v] * xp[i, r * stride + u, c * stride + v]
                out[o, r, c] = acc
    return out


# ---------------------------------------------------------------------------
# nonlinearity / pooling / upsampling


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _out("relu", np.maximum(x.data, 0.0), (x,), bwd)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Windowed max. Backward routes to the argmax, first index in row-major
    window order on ties."""
    xb, squeeze = _as_batched(x, "maxpool2d input")
    n, c, h, w = xb.shape
    if k < 1 or k > h or k > w:
        raise ShapeError(f"maxpool2d window {k} is empty or exceeds input {h}x{w}")
    if (h - k) % stride or (w - k) % stride:
        raise ShapeError(f"maxpool2d geometry not integral: input {h}x{w}, k={k}, stride={stride}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1

    # windows on the last axis so argmax scans contiguously in row-major order
    win = np.empty((n, c, ho, wo, k * k), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            win[..., i * k + j] = xb[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    taped = _needs(x)
    if taped:
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    else:
        out = win.max(axis=-1)

    def bwd(g):
        gb = g[None] if squeeze else g
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, arg[..., None], gb[..., None], axis=-1)
        gx = np.zeros(xb.shape)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[..., i * k + j]
        return (gx[0] if squeeze else gx,)

    return _out("maxpool2d", out[0] if squeeze else out, (x,), bwd)


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row-stochastic 1-d interpolation matrix, align-corners-false."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    xb, squeeze = _as_batched(x, "bilinear_upsample input")
    if factor == 1:
        def bwd_id(g):
            return (g[0] if squeeze else g,)

        return _out("upsample", (xb[0] if squeeze else xb).copy(), (x,), bwd_id)

    h, w = xb.shape[2:]
    uy = _interp_matrix(h, factor)
    ux = _interp_matrix(w, factor)
    out = np.matmul(uy, np.matmul(xb, ux.T))

    def bwd(g):
        gb = g[None] if squeeze else g
        gx = np.matmul(uy.T, np.matmul(gb, ux))
        return (gx[0] if squeeze else gx,)

    return _out("upsample", out[0] if squeeze else out, (x,), bwd)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, target, class_axis: int = 0) -> Tensor:
    """Mean negative log-likelihood over non-ignored positions.

    `target` is an integer class index (for 1-d logits) or an integer
    label array matching the non-class axes; label 255 is ignored.
    Stabilized by max subtraction.
    """
    z = logits.data
    tgt = np.asarray(target)
    if tgt.shape != z.shape[:class_axis] + z.shape[class_axis + 1 :]:
        raise ShapeError(
            f"target shape {tgt.shape} does not match logits {z.shape} without class axis {class_axis}"
        )
    n_classes = z.shape[class_axis]
    valid = tgt != IGNORE_LABEL
    if ((tgt < 0) | (tgt >= n_classes))[valid].any():
        bad = int(tgt[valid & ((tgt < 0) | (tgt >= n_classes))].flat[0])
        raise ValueError(f"label {bad} out of range for {n_classes} classes")

    zs = z - z.max(axis=class_axis, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=class_axis, keepdims=True))
    idx = np.expand_dims(np.where(valid, tgt, 0), class_axis)
    picked = np.take_along_axis(logp, idx, axis=class_axis).squeeze(class_axis)
    n_valid = int(valid.sum())
    loss = -(picked * valid).sum() / n_valid if n_valid else 0.0
    _require_finite(np.asarray(loss), "cross-entropy loss")

    def bwd(g):
        if n_valid == 0:
            return (np.zeros_like(z),)
        p = np.exp(logp)
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, idx, 1.0, axis=class_axis)
        gz = (p - onehot) * np.expand_dims(valid, class_axis)
        return (gz * (float(g) / n_valid),)

    return _out("softmax_ce", np.asarray(loss, dtype=np.float64), (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate gradients of every grad-requiring tensor reachable from loss."""
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    # iterative post-order: append order is a topological order of the tape
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in seen and _needs(inp):
                    stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad and t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not _needs(inp):
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# checkpoint format: magic "PRK1", u32 rank, u32 extents, raw f64 payload,
# all little-endian; an archive is (u32 name length, name, record) repeated


def save_tensor(stream, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    stream.write(_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        stream.write(struct.pack("<I", ext))
    stream.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensor(stream) -> np.ndarray:
    magic = stream.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor record magic {magic!r}")
    (rank,) = struct.unpack("<I", stream.read(4))
    shape = tuple(struct.unpack("<I", stream.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    _require_finite(arr, "tensor record")
    return arr


def save_archive(path, named: Mapping[str, Tensor | np.ndarray]) -> None:
    with open(path, "wb") as f:
        for name, t in named.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            save_tensor(f, t)


def _iter_archive(stream) -> Iterator[tuple[str, np.ndarray]]:
    while True:
        head = stream.read(4)
        if not head:
            return
        if len(head) != 4:
            raise ValueError("truncated archive entry header")
        (n,) = struct.unpack("<I", head)
        name = stream.read(n).decode("utf-8")
        yield name, load_tensor(stream)


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return dict(_iter_archive(f))


def archive_bytes(named: Mapping[str, Tensor | np.ndarray]) -> bytes:
    """Serialized archive contents, handy for byte-identity checks."""
    import io

    buf = io.BytesIO()
    for name, t in named.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        save_tensor(buf, t)
    return buf.getvalue()
