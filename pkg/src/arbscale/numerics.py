"""Tensor type, a reverse-mode gradient tape and the differentiable primitives.

Feature maps are channel-last: ``(H, W, C)`` or batched ``(N, H, W, C)``.
Every op accepts plain numpy arrays or :class:`Tensor` objects and keeps the
floating dtype of its inputs, so the same code runs in float32 for training
and float64 for the finite-difference oracles.

Gradients are only recorded while a :class:`GradTape` is active::

    w = Tensor(w0, requires_grad=True)
    with GradTape() as tape:
        loss = mean(square(conv2d(x, w, b)))
    (dw,) = tape.gradient(loss, [w])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

BICUBIC_A = -0.5


class ShapeError(ValueError):
    """Raised when operand shapes disagree; the message names the axis."""


class Tensor:
    """A floating-point array, optionally tracked by the active gradient tape."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def data_of(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# --------------------------------------------------------------------------
# Tape

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Record:
    name: str
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Records differentiable ops and replays them in reverse.

    One tape serves one record/gradient sequence. Tapes live in a per-thread
    stack, so independent tapes may be used from different threads.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, name: str, output: Tensor, inputs: tuple, backward) -> None:
        self.records.append(_Record(name, output, inputs, backward))

    @property
    def operations(self) -> list[str]:
        return [r.name for r in self.records]

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Reverse-mode gradient of ``target`` with respect to each source.

        ``target`` is normally a scalar; for other shapes pass ``seed`` (the
        output cotangent). Sources that do not influence the target receive
        zeros.
        """
        if seed is None:
            if target.data.size != 1:
                raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        keep = {id(s) for s in sources}
        for rec in reversed(self.records):
            key = id(rec.output)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            parts = rec.backward(g)
            for inp, gi in zip(rec.inputs, parts):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=s.dtype).reshape(s.shape))
        return out


def record_op(name: str, out_data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap ``out_data`` and, if a tape is active and any input is tracked, record it."""
    tape = active_tape()
    tracked = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        tape.record(name, out, inputs, backward)
    return out


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _result_dtype(*xs):
    """Dtype for mixed operands; tracked tensors decide, bare constants follow."""
    dts = [x.dtype for x in xs if isinstance(x, Tensor)]
    if not dts:
        dts = [np.asarray(x).dtype for x in xs if np.issubdtype(np.asarray(x).dtype, np.floating)]
    return np.result_type(*dts) if dts else np.float32


def _binary(a, b):
    dt = _result_dtype(a, b)
    return as_tensor(a, dt if not isinstance(a, Tensor) else None), as_tensor(b, dt if not isinstance(b, Tensor) else None)


# --------------------------------------------------------------------------
# Elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data + b.data
    return record_op("add", out, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data - b.data
    return record_op("sub", out, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if _needs(a) else None
        gb = _unbroadcast(g * a.data, b.shape) if _needs(b) else None
        return ga, gb

    return record_op("mul", out, (a, b), backward)


def square(x) -> Tensor:
    x = as_tensor(x)
    return record_op("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return record_op("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record_op("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record_op("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def softmax(v, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    v = as_tensor(v)
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op("softmax", y, (v,), backward)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record_op("sum", out, (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return record_op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, key) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return record_op("getitem", np.array(x.data[key]), (x,), backward)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    dt = _result_dtype(*parts)
    ts = tuple(as_tensor(p, dt) for p in parts)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op("concat", out, ts, backward)


# --------------------------------------------------------------------------
# Layers


def fully_connected(v, weights, bias=None) -> Tensor:
    """``weights @ v + bias`` applied over the last axis of ``v``.

    ``v`` is ``(..., n)``, ``weights`` is ``(m, n)`` and ``bias`` is ``(m,)``.
    """
    v, weights = as_tensor(v), as_tensor(weights)
    n = v.shape[-1] if v.ndim else 1
    if weights.ndim != 2 or weights.shape[1] != n:
        raise ShapeError(f"fully_connected: input axis -1 has {n} features, weights expect {weights.shape[1:] or ()}")
    out = v.data @ weights.data.T
    inputs = (v, weights)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weights.shape[0],):
            raise ShapeError(f"fully_connected: bias axis 0 has {bias.shape}, expected ({weights.shape[0]},)")
        out = out + bias.data
        inputs = inputs + (bias,)

    def backward(g):
        gv = g @ weights.data if _needs(v) else None
        gw = None
        if _needs(weights):
            gw = g.reshape(-1, g.shape[-1]).T @ v.data.reshape(-1, n)
        parts = [gv, gw]
        if bias is not None:
            parts.append(g.reshape(-1, g.shape[-1]).sum(axis=0) if _needs(bias) else None)
        return parts

    return record_op("fully_connected", out, inputs, backward)


def _edge_pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge")


def _fold_edge_pad(gp: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of edge padding: border cotangents collapse onto the edge pixels."""
    if p == 0:
        return gp
    gp = gp.copy()
    gp[:, p] += gp[:, :p].sum(axis=1)
    gp[:, -p - 1] += gp[:, -p:].sum(axis=1)
    gp = gp[:, p:-p]
    gp[:, :, p] += gp[:, :, :p].sum(axis=2)
    gp[:, :, -p - 1] += gp[:, :, -p:].sum(axis=2)
    return gp[:, :, p:-p]


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """``(N, h+k-1, w+k-1, C)`` -> ``(N*h*w, k*k*C)`` with columns ordered (ky, kx, C)."""
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, h, w, C, k, k) view
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv2d(x, kernel, bias=None) -> Tensor:
    """Same-size 2-D convolution (cross-correlation) with edge-replicated borders.

    ``x`` is ``(H, W, Cin)`` or ``(N, H, W, Cin)``; ``kernel`` is
    ``(k, k, Cin, Cout)`` with ``k`` odd; ``bias`` is ``(Cout,)``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be HxWxC or NxHxWxC, got rank {x.ndim}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ShapeError(f"conv2d: kernel axes 0/1 must be equal and odd, got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channel axis has {x.shape[-1]}, kernel axis 2 expects {cin}")
    xd = x.data if batched else x.data[None]
    n, h, w, _ = xd.shape
    p = k // 2
    cols = _im2col(_edge_pad(xd, p), k, h, w)
    wmat = kernel.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    inputs = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias axis 0 has {bias.shape}, expected ({cout},)")
        out += bias.data
        inputs = inputs + (bias,)
    out = out.reshape(n, h, w, cout)
    if not batched:
        out = out[0]

    def backward(g):
        g4 = g.reshape(n, h, w, cout)
        g2 = g4.reshape(n * h * w, cout)
        gx = gk = gb = None
        if _needs(x):
            # gradient w.r.t. the padded input is a full correlation with the flipped kernel
            gz = np.pad(g4, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
            flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            gp = (_im2col(gz, k, h + 2 * p, w + 2 * p) @ flipped).reshape(n, h + 2 * p, w + 2 * p, cin)
            gx = _fold_edge_pad(gp, p)
            if not batched:
                gx = gx[0]
        if _needs(kernel):
            gk = (cols.T @ g2).reshape(k, k, cin, cout)
        if bias is not None and _needs(bias):
            gb = g2.sum(axis=0)
        return gx, gk, gb

    return record_op("conv2d", out, inputs, backward)


# --------------------------------------------------------------------------
# Resampling


def _bilinear_matrices(h: int, w: int, xs: np.ndarray, ys: np.ndarray, batch: np.ndarray | None):
    """Sparse interpolation operators for a flat list of sample points.

    Returns ``A`` with ``A @ F_flat`` = samples, plus the partial-derivative
    operators with respect to x and y (zero where a coordinate was clamped).
    """
    m = xs.size
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xc - x0
    wy = yc - y0
    if w == 1:
        wx = np.zeros_like(wx)
    if h == 1:
        wy = np.zeros_like(wy)
    base = 0 if batch is None else batch * (h * w)
    idx = np.stack([base + y0 * w + x0, base + y0 * w + x1, base + y1 * w + x0, base + y1 * w + x1], axis=1)
    wts = np.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], axis=1)
    indptr = np.arange(0, 4 * m + 1, 4)
    ncols = h * w * (1 if batch is None else int(batch.max(initial=0)) + 1)
    return idx.ravel(), wts, indptr, ncols, (wx, wy, xs, ys)


def bilinear_sample(feat, x, y) -> Tensor:
    """Bilinear interpolation of a feature map at real-valued pixel coordinates.

    Pixel centers sit at integer coordinates. Coordinates outside the map are
    clamped to ``[0, W-1] x [0, H-1]``. ``feat`` is ``(H, W, C)`` (``x``/``y``
    of any common shape) or ``(N, H, W, C)`` (``x``/``y`` with leading axis N).
    The result has shape ``x.shape + (C,)`` and is differentiable with respect
    to the map and to both coordinates.
    """
    feat, x, y = as_tensor(feat), as_tensor(x), as_tensor(y)
    fd = feat.data
    batched = fd.ndim == 4
    if fd.ndim not in (3, 4):
        raise ShapeError(f"bilinear_sample: map must be HxWxC or NxHxWxC, got rank {fd.ndim}")
    h, w, c = fd.shape[-3:]
    xd, yd = np.broadcast_arrays(x.data, y.data)
    pshape = xd.shape
    batch = None
    if batched:
        if xd.ndim == 0 or xd.shape[0] != fd.shape[0]:
            raise ShapeError(f"bilinear_sample: coordinate axis 0 must match batch {fd.shape[0]}")
        batch = np.broadcast_to(np.arange(fd.shape[0]).reshape((-1,) + (1,) * (xd.ndim - 1)), pshape).ravel()
    xs = xd.astype(np.float64).ravel()
    ys = yd.astype(np.float64).ravel()
    idx, wts, indptr, ncols, (wx, wy, _, _) = _bilinear_matrices(h, w, xs, ys, batch)
    dt = fd.dtype
    ff = fd.reshape(-1, c)
    amat = sp.csr_matrix((wts.astype(dt).ravel(), idx, indptr), shape=(xs.size, ncols))
    out = np.asarray(amat @ ff).reshape(pshape + (c,))

    def backward(g):
        g2 = g.reshape(-1, c)
        gf = gx = gy = None
        if _needs(feat):
            gf = np.asarray(amat.T @ g2).reshape(fd.shape)
        if _needs(x):
            inside = ((xs >= 0) & (xs <= w - 1) & (w > 1)).astype(np.float64)
            dw = np.stack([-(1 - wy), 1 - wy, -wy, wy], axis=1) * inside[:, None]
            ax = sp.csr_matrix((dw.astype(dt).ravel(), idx, indptr), shape=amat.shape)
            gx = _unbroadcast(np.einsum("mc,mc->m", np.asarray(ax @ ff), g2).reshape(pshape), x.shape)
        if _needs(y):
            inside = ((ys >= 0) & (ys <= h - 1) & (h > 1)).astype(np.float64)
            dw = np.stack([-(1 - wx), -wx, 1 - wx, wx], axis=1) * inside[:, None]
            ay = sp.csr_matrix((dw.astype(dt).ravel(), idx, indptr), shape=amat.shape)
            gy = _unbroadcast(np.einsum("mc,mc->m", np.asarray(ay @ ff), g2).reshape(pshape), y.shape)
        return gf, gx, gy

    return record_op("bilinear_sample", out, (feat, x, y), backward)


def cubic_kernel(t, a: float = BICUBIC_A):
    """Keys cubic-convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_matrix(n_in: int, n_out: int, a: float = BICUBIC_A) -> np.ndarray:
    """Dense ``(n_out, n_in)`` resampling matrix for one axis.

    Uses the half-pixel mapping ``src = (i + 0.5) * n_in / n_out - 0.5`` and
    edge-clamped taps. When shrinking, the kernel is stretched by the scale
    factor (antialiasing, as in the usual ``imresize`` convention) and each
    row is renormalised to sum to one.
    """
    scale = n_out / n_in
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    mat = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    lo = np.floor(src - support).astype(np.int64) + 1
    rows = np.arange(n_out)
    for off in range(int(np.ceil(2 * support)) + 1):
        tap = lo + off
        wgt = cubic_kernel((src - tap) * stretch, a)
        np.add.at(mat, (rows, np.clip(tap, 0, n_in - 1)), wgt)
    return mat / mat.sum(axis=1, keepdims=True)


def bicubic_resize(feat, out_h: int, out_w: int) -> Tensor:
    """Separable cubic-convolution resize of ``(H, W, C)`` or ``(N, H, W, C)``."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bicubic_resize: output size must be positive, got {out_h}x{out_w}")
    feat = as_tensor(feat)
    fd = feat.data
    batched = fd.ndim == 4
    xd = fd if batched else fd[None]
    n, h, w, c = xd.shape
    if (h, w) == (out_h, out_w):
        return record_op("bicubic_resize", fd.copy(), (feat,), lambda g: (g,))
    ry = bicubic_matrix(h, out_h).astype(fd.dtype)
    rx = bicubic_matrix(w, out_w).astype(fd.dtype)
    t = np.matmul(ry, xd.reshape(n, h, w * c)).reshape(n * out_h, w, c)
    out = np.matmul(rx, t).reshape(n, out_h, out_w, c)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g.reshape(n * out_h, out_w, c)
        gt = np.matmul(rx.T, gb).reshape(n, out_h, w * c)
        gx = np.matmul(ry.T, gt).reshape(n, h, w, c)
        return (gx if batched else gx[0],)

    return record_op("bicubic_resize", out, (feat,), backward)


# --------------------------------------------------------------------------
# Finite-difference oracle


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst: tuple[int, int] | None
    per_input: list[float]
    message: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} worst={self.worst} {self.message}".rstrip()


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-6,
    tol: float = 1e-5,
    dtype=np.float64,
    max_elements: int | None = 64,
    floor_ratio: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    The reverse-mode pass runs in ``dtype``; the central differences
    ``(f(x+h) - f(x-h)) / 2h`` are always evaluated in float64 so that single
    precision paths are checked against an accurate reference. Non-scalar
    outputs are reduced by a fixed random projection. Per-element relative
    error is ``|ad - fd| / max(|ad|, |fd|, floor_ratio * max|fd|)``; at most
    ``max_elements`` randomly chosen entries of each input are probed.
    """
    rng = np.random.default_rng(seed)
    base = [np.asarray(a, dtype=np.float64) for a in inputs]
    proj: list[np.ndarray] = []

    def scalar(out: Tensor) -> Tensor:
        if out.data.size == 1:
            return reshape(out, ())
        if not proj:
            proj.append(np.random.default_rng(seed + 1).standard_normal(out.shape))
        return sum_(mul(out, proj[0].astype(out.dtype)))

    tensors = [Tensor(a.astype(dtype), requires_grad=True) for a in base]
    with GradTape() as tape:
        loss = scalar(fn(*tensors))
    if not np.isfinite(loss.data).all():
        return GradCheckReport(False, np.inf, None, [], "non-finite output")
    analytic = tape.gradient(loss, tensors)

    def f64(arrs) -> float:
        return float(scalar(fn(*[Tensor(a) for a in arrs])).data)

    per_input, worst, worst_err = [], None, 0.0
    for i, a in enumerate(base):
        ga = analytic[i].astype(np.float64).ravel()
        if not np.isfinite(ga).all():
            loc = int(np.flatnonzero(~np.isfinite(ga))[0])
            return GradCheckReport(False, np.inf, (i, loc), per_input, "non-finite gradient")
        picks = np.arange(a.size)
        if max_elements is not None and a.size > max_elements:
            picks = rng.choice(a.size, size=max_elements, replace=False)
        fd = np.empty(len(picks))
        for j, e in enumerate(picks):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[i].flat[e] += h
            minus[i].flat[e] -= h
            fd[j] = (f64(plus) - f64(minus)) / (2 * h)
        if not np.isfinite(fd).all():
            loc = int(picks[np.flatnonzero(~np.isfinite(fd))[0]])
            return GradCheckReport(False, np.inf, (i, loc), per_input, "non-finite finite difference")
        ad = ga[picks]
        floor = floor_ratio * max(np.abs(fd).max(initial=0.0), 1e-300)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)
        rel = np.abs(ad - fd) / denom
        m = float(rel.max(initial=0.0))
        per_input.append(m)
        if m >= worst_err:
            worst_err = m
            worst = (i, int(picks[int(np.argmax(rel))]) if len(rel) else 0)
    return GradCheckReport(worst_err <= tol, worst_err, worst, per_input)
