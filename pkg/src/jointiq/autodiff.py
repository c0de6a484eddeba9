"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 or float64) and record the operations
that produced them, so a scalar loss can be differentiated with respect to
every parameter tensor by a single reverse sweep.  Feature maps use
(channel, height, width) order.

Design constraints honoured throughout:

* reductions use a fixed (row-major) summation order, so repeated runs on
  one build produce bitwise identical results;
* no implicit broadcasting beyond bias-add -- elementwise ops require
  matching shapes, anything else goes through explicit reshapes;
* gradient accumulation order is the reverse of construction order.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import ndtr

from .errors import DataError, NumericError, ShapeError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """Dense n-d array node in a compute graph.

    ``requires_grad`` marks trainable leaves; any node downstream of one
    participates in backward.  ``grad`` is populated by ``backward`` and has
    the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_needs")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None
        self._needs = self.requires_grad

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, vjp):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = False
        out.grad = None
        needs = any(p._needs for p in parents)
        out._parents = tuple(parents) if needs else ()
        out._vjp = vjp if needs else None
        out._needs = needs
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic -----------------------------------------------------------

    def _binary(self, other, fwd, vjp_pair):
        if isinstance(other, Tensor):
            if other.data.shape != self.data.shape:
                # scalars and size-1-axis alignment only; anything fancier
                # must go through explicit reshapes
                try:
                    np.broadcast_shapes(self.data.shape, other.data.shape)
                except ValueError:
                    raise ShapeError(
                        f"elementwise op on shapes {self.data.shape} vs "
                        f"{other.data.shape}") from None
            o = other
        else:
            o = Tensor(np.asarray(other, dtype=self.data.dtype))
        out_data = fwd(self.data, o.data)
        return Tensor._from_op(out_data, (self, o), vjp_pair(self, o, out_data))

    def __add__(self, other):
        return self._binary(other, np.add,
                            lambda a, b, y: lambda g: (_unbroadcast(g, a.shape),
                                                       _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract,
                            lambda a, b, y: lambda g: (_unbroadcast(g, a.shape),
                                                       _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        return self._binary(other, np.multiply,
                            lambda a, b, y: lambda g: (_unbroadcast(g * b.data, a.shape),
                                                       _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, np.divide,
                            lambda a, b, y: lambda g: (
                                _unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __getitem__(self, key):
        out_data = self.data[key]

        def vjp(g):
            gx = np.zeros_like(self.data)
            gx[key] = g
            return (gx,)

        return Tensor._from_op(np.ascontiguousarray(out_data), (self,), vjp)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out_data = self.data.reshape(shape)
        return Tensor._from_op(out_data, (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.full_like(self.data, 1.0) * g,)
            ge = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(ge, self.data.shape).copy(),)

        return Tensor._from_op(np.asarray(out_data), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def backward(self) -> None:
        """Reverse sweep from a scalar; accumulates ``grad`` on every node
        reachable from a requires_grad leaf.  Deterministic accumulation
        order (reverse topological, fixed by construction order)."""
        if self.data.size != 1:
            raise ShapeError("backward requires a scalar loss")
        topo = topo_order(self)
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent._needs:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, copy=True)
                else:
                    parent.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to ``shape`` (only scalar/bias broadcast)."""
    if g.shape == tuple(shape):
        return g
    if shape == ():
        return np.asarray(g.sum())
    # bias-add case: shape is a suffix of g.shape
    extra = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def topo_order(root: Tensor) -> list:
    """Topologically ordered compute graph below ``root`` (inputs first)."""
    topo: list = []
    visited: set = set()
    stack = [(root, iter(root._parents))]
    on_stack = {id(root)}
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in visited and id(parent) not in on_stack:
                stack.append((parent, iter(parent._parents)))
                on_stack.add(id(parent))
                advanced = True
                break
        if not advanced:
            stack.pop()
            on_stack.discard(id(node))
            visited.add(id(node))
            topo.append(node)
    return topo


# -- activations and pointwise functions --------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return Tensor._from_op(out, (x,), lambda g: (g * (x.data > 0),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(x.data > 0, x.data, slope * x.data)
    return Tensor._from_op(out, (x,),
                           lambda g: (g * np.where(x.data > 0, 1.0, slope),))


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x), computed stably for large |x|
    out = np.logaddexp(0.0, x.data)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor._from_op(out, (x,), lambda g: (g * sig,))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(np.maximum(x.data, 0.0))

    def vjp(g):
        return (g * 0.5 / np.maximum(out, 1e-12),)

    return Tensor._from_op(out, (x,), vjp)


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def pow_const(x: Tensor, p: float) -> Tensor:
    """x**p for positive x (used for weighted geometric means)."""
    out = np.power(x.data, p)
    return Tensor._from_op(out, (x,),
                           lambda g: (g * p * np.power(x.data, p - 1.0),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(out, (x,), lambda g: (g * inside,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    out = np.maximum(x.data, lo)
    return Tensor._from_op(out, (x,), lambda g: (g * (x.data >= lo),))


def normal_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF; gradient is the normal pdf."""
    out = ndtr(x.data)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * pdf,))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]),
                                         axis=axis))
            for i in range(len(ts)))

    return Tensor._from_op(out, ts, vjp)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return Tensor._from_op(out, (x,),
                           lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def stack(tensors, axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis))
                     for i in range(len(ts)))

    return Tensor._from_op(out, ts, vjp)


def gather_columns(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select columns of a 2-d tensor: out[:, j] = x[:, idx[j]].

    Duplicate indices accumulate in the backward pass.
    """
    if x.data.ndim != 2:
        raise ShapeError("gather_columns expects a 2-d tensor")
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[:, idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx.T, idx, g.T)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), vjp)


def pad_edge_br(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Replicate the bottom row / rightmost column of a (C,H,W) map."""
    if pad_h == 0 and pad_w == 0:
        return x
    C, H, W = x.data.shape
    out = np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")

    def vjp(g):
        gx = np.array(g[:, :H, :W], copy=True)
        if pad_h:
            gx[:, H - 1, :] += g[:, H:, :W].sum(axis=1)
        if pad_w:
            gx[:, :, W - 1] += g[:, :H, W:].sum(axis=2)
        if pad_h and pad_w:
            gx[:, H - 1, W - 1] += g[:, H:, W:].sum(axis=(1, 2))
        return (gx,)

    return Tensor._from_op(out, (x,), vjp)


# -- dense and convolution layers ----------------------------------------------

def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ W.T + b with x of shape (..., n) and W of shape (m, n)."""
    if x.data.shape[-1] != weights.data.shape[1]:
        raise ShapeError(
            f"dense: input dim {x.data.shape[-1]} vs weight dim {weights.data.shape[1]}")
    out = x.data @ weights.data.T
    if bias is not None:
        if bias.data.shape != (weights.data.shape[0],):
            raise ShapeError("dense: bias shape mismatch")
        out = out + bias.data

    m, n = weights.data.shape

    def vjp(g):
        g2 = g.reshape(-1, m)
        x2 = x.data.reshape(-1, n)
        gw = g2.T @ x2
        gx = (g2 @ weights.data).reshape(x.data.shape)
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    parents = (x, weights) if bias is None else (x, weights, bias)
    return Tensor._from_op(out, parents, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return Tensor._from_op(out, (a, b), vjp)


def _same_pad_amounts(k: int) -> tuple[int, int]:
    return (k - 1) // 2, k - 1 - (k - 1) // 2


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    C, H, W = x.shape
    pt, pb = _same_pad_amounts(kh)
    pl, pr = _same_pad_amounts(kw)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    Ho = -(-H // stride)
    Wo = -(-W // stride)
    cols = np.empty((C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + (Ho - 1) * stride + 1:stride,
                               j:j + (Wo - 1) * stride + 1:stride]
    return cols, (Ho, Wo), (pt, pl)


def _col2im(gcols: np.ndarray, shape, kh: int, kw: int, stride: int) -> np.ndarray:
    C, H, W = shape
    pt, pb = _same_pad_amounts(kh)
    pl, pr = _same_pad_amounts(kw)
    Ho = -(-H // stride)
    Wo = -(-W // stride)
    gxp = np.zeros((C, H + pt + pb, W + pl + pr), dtype=gcols.dtype)
    gc = gcols.reshape(C, kh, kw, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + (Ho - 1) * stride + 1:stride,
                j:j + (Wo - 1) * stride + 1:stride] += gc[:, i, j]
    return gxp[:, pt:pt + H, pl:pl + W]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1,
           mask: np.ndarray | None = None) -> Tensor:
    """2-d convolution over a (C,H,W) map with zero 'same' padding.

    ``kernel`` has shape (O,C,kh,kw); output spatial extents are
    ceil(H/stride) x ceil(W/stride).  An optional constant ``mask``
    (broadcastable to the kernel shape) zeroes taps before use, which makes
    causally masked convolutions a property of the layer rather than of the
    engine.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects (C,H,W) input and (O,C,kh,kw) kernel")
    O, Ck, kh, kw = kernel.data.shape
    if Ck != x.data.shape[0]:
        raise ShapeError(
            f"conv2d: input has {x.data.shape[0]} channels, kernel expects {Ck}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _check_finite(x.data, "conv2d input")
    _check_finite(kernel.data, "conv2d kernel")

    keff = kernel.data if mask is None else kernel.data * mask
    cols, (Ho, Wo), _ = _im2col(x.data, kh, kw, stride)
    cols2 = cols.reshape(Ck * kh * kw, Ho * Wo)
    out = (keff.reshape(O, -1) @ cols2).reshape(O, Ho, Wo)

    def vjp(g):
        g2 = g.reshape(O, -1)
        gk = (g2 @ cols2.T).reshape(kernel.data.shape)
        if mask is not None:
            gk = gk * mask
        gcols = keff.reshape(O, -1).T @ g2
        gx = _col2im(gcols, x.data.shape, kh, kw, stride)
        return (gx, gk)

    return Tensor._from_op(out, (x, kernel), vjp)


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Adjoint of ``conv2d`` with the same kernel and stride.

    Maps (O,h,w) to (C, h*stride, w*stride) for a kernel of shape
    (O,C,kh,kw); satisfies <transposed_conv2d(x), y> == <x, conv2d(y)>.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("transposed_conv2d expects (O,h,w) input and (O,C,kh,kw) kernel")
    O, C, kh, kw = kernel.data.shape
    if O != x.data.shape[0]:
        raise ShapeError(
            f"transposed_conv2d: input has {x.data.shape[0]} channels, kernel expects {O}")
    h, w = x.data.shape[1:]
    H, W = h * stride, w * stride

    def fwd(xd, kd):
        gcols = kd.reshape(O, -1).T @ xd.reshape(O, -1)
        return _col2im(gcols, (C, H, W), kh, kw, stride)

    out = fwd(x.data, kernel.data)

    def vjp(g):
        cols, _, _ = _im2col(g, kh, kw, stride)
        cols2 = cols.reshape(C * kh * kw, h * w)
        gx = (kernel.data.reshape(O, -1) @ cols2).reshape(x.data.shape)
        gk = (x.data.reshape(O, -1) @ cols2.T).reshape(kernel.data.shape)
        return (gx, gk)

    return Tensor._from_op(out, (x, kernel), vjp)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling (floor extents), used by the multiscale metric."""
    C, H, W = x.data.shape
    H2, W2 = H // 2, W // 2
    v = x.data[:, :H2 * 2, :W2 * 2].reshape(C, H2, 2, W2, 2)
    out = v.mean(axis=(2, 4))

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, :H2 * 2, :W2 * 2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (gx,)

    return Tensor._from_op(out, (x,), vjp)


# -- gradient verification -----------------------------------------------------

def grad_check(fn, params, h: float = 1e-4, tolerance: float = 1e-5,
               rel_floor: float = 1e-2) -> dict:
    """Compare reverse-mode gradients of ``fn()`` against central finite
    differences.

    ``fn`` must be deterministic and return a scalar Tensor built from the
    given parameter tensors.  Relative error uses a small floor so that
    elements whose true gradient is essentially zero are judged on an
    absolute scale.  Returns a report dict with per-parameter max relative
    errors and an overall pass flag.
    """
    loss = fn()
    loss.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            raise NumericError("parameter not reached by backward")
        _check_finite(p.grad, "analytic gradient")
        analytic.append(p.grad.copy())

    report = {"per_param": [], "max_rel_error": 0.0}
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * h)
        num = num.reshape(p.data.shape)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), rel_floor)
        err = float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0
        report["per_param"].append(err)
        report["max_rel_error"] = max(report["max_rel_error"], err)
    report["passed"] = report["max_rel_error"] < tolerance
    return report


# -- parameter checkpoint I/O ----------------------------------------------------

_CKPT_MAGIC = b"JIQW"
_CKPT_VERSION = 1


def save_checkpoint(path: str, params: dict) -> None:
    """Write named tensors to the binary checkpoint format.

    Layout: magic "JIQW", version u8, count u32, then per tensor
    (name length u16, name bytes, rank u8, extents u32 each, raw
    little-endian float32 values).  Entries are written in sorted name
    order so identical parameter sets produce identical files.
    """
    names = sorted(params)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<BI", _CKPT_VERSION, len(names)))
        for name in names:
            t = params[name]
            arr = np.ascontiguousarray(
                (t.data if isinstance(t, Tensor) else np.asarray(t)), dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for e in arr.shape:
                f.write(struct.pack("<I", e))
            f.write(arr.tobytes())


def load_checkpoint(path: str) -> dict:
    """Read a checkpoint back as a dict of float32 numpy arrays."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise DataError("bad checkpoint magic")
    version, count = struct.unpack_from("<BI", raw, 4)
    if version != _CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    off = 9
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        extents = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(extents)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(extents)
        off += 4 * n
        out[name] = arr.astype(np.float32)
    if off != len(raw):
        raise DataError("trailing bytes in checkpoint")
    return out
