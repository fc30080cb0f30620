"""Dense float64 tensors with reverse-mode automatic differentiation.

Every Tensor wraps a numpy float64 array. Operations build a graph: each
result keeps references to its parents and a closure that adds the result's
gradient contribution into them. `backward()` on a scalar seeds grad = 1 and
walks the graph once in reverse topological order; gradients accumulate
additively, so repeated calls without re-zeroing double them.

Broadcasting follows numpy's trailing-dimension rule (size-1 axes expand);
gradients of broadcast operands are summed back to the operand shape.
`detach` severs gradient flow while sharing the underlying buffer.

Composite layers (softmax with temperature, log-softmax, group norm) are
built from the primitive ops, so their gradients come from the same graph
machinery rather than hand-derived rules. conv3d and nearest upsampling are
primitive nodes with explicit backward kernels; both are plain offset loops
over the kernel footprint, vectorized per offset, with a fixed iteration
order so results are bit-reproducible run to run.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    DivisibilityError,
    GeometryError,
    InvalidAxisError,
    NonScalarLossError,
    ShapeMismatchError,
    TemperatureError,
)

Axes = "int | Sequence[int] | None"

_DIV_FLOOR = 1e-12


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None
        self._op = "leaf"

    # -- introspection --

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_scalar(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph plumbing --

    def detach(self) -> "Tensor":
        out = Tensor(self.data)
        out._op = "detach"
        return out

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar. Each call adds one full gradient
        into `.grad` of every reachable requires_grad tensor; repeated calls
        without re-zeroing therefore accumulate additively."""
        if self.size != 1:
            raise NonScalarLossError(
                f"backward() needs a scalar, got shape {self.shape}"
            )
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        # per-call gradients flow through this map; .grad only receives the total
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            node.grad = np.array(g) if node.grad is None else node.grad + g
            if node._vjp is not None:
                for parent, contrib in node._vjp(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    flowing[key] = contrib if key not in flowing else flowing[key] + contrib

    # -- operator sugar --

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    # -- method forms --

    def abs(self) -> "Tensor":
        return absolute(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def square(self) -> "Tensor":
        return square(self)

    def sum(self, axes: Axes = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes: Axes = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axes, keepdims)

    def max(self, axes: Axes = None, keepdims: bool = False) -> "Tensor":
        return reduce_max(self, axes, keepdims)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)


def _raise_scalar(t: Tensor):
    raise NonScalarLossError(f"item() needs a single element, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], op: str) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op
    if out.requires_grad:
        out._parents = parents
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g back down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# -- elementwise binary ops --


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _vjp(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))
        out._vjp = _vjp
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = _node(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _vjp(g):
            return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))
        out._vjp = _vjp
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _vjp(g):
            return (
                (a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)),
            )
        out._vjp = _vjp
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    bad = np.abs(b.data) < _DIV_FLOOR
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DegenerateInputError(
            f"div: {int(bad.sum())} denominator positions with |b| < {_DIV_FLOOR:g}, "
            f"first at index {first}"
        )
    out = _node(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _vjp(g):
            return (
                (a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
            )
        out._vjp = _vjp
    return out


# -- elementwise unary ops --


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.abs(a.data), (a,), "abs")
    if out.requires_grad:
        sign = np.sign(a.data)  # subgradient 0 at 0
        def _vjp(g):
            return ((a, g * sign),)
        out._vjp = _vjp
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        data = out.data  # closure must not capture `out`: graphs stay acyclic
        def _vjp(g):
            return ((a, g * data),)
        out._vjp = _vjp
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0.0).any():
        first = tuple(int(i) for i in np.argwhere(a.data <= 0.0)[0])
        raise DegenerateInputError(f"log: non-positive input, first at index {first}")
    out = _node(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def _vjp(g):
            return ((a, g / a.data),)
        out._vjp = _vjp
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        mask = (a.data > 0.0).astype(np.float64)
        def _vjp(g):
            return ((a, g * mask),)
        out._vjp = _vjp
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out = _node(a.data * a.data, (a,), "square")
    if out.requires_grad:
        def _vjp(g):
            return ((a, g * 2.0 * a.data),)
        out._vjp = _vjp
    return out


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a float constant p (positive base when p is fractional)."""
    a = as_tensor(a)
    p = float(p)
    if p != int(p) and (a.data <= 0.0).any():
        raise DegenerateInputError(f"power: fractional exponent {p} on non-positive base")
    out = _node(a.data**p, (a,), "pow")
    if out.requires_grad:
        def _vjp(g):
            return ((a, g * p * a.data ** (p - 1.0)),)
        out._vjp = _vjp
    return out


# -- reductions --


def _norm_axes(axes: Axes, ndim: int, op: str) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    else:
        axes = tuple(int(a) for a in axes)
    norm = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise InvalidAxisError(f"{op}: axis {a} out of range for {ndim}-d tensor")
        norm.append(a % ndim)
    if len(set(norm)) != len(norm):
        raise InvalidAxisError(f"{op}: repeated axes {axes}")
    return tuple(sorted(norm))


def _expand_reduced(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axes: Axes = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim, "sum")
    out = _node(a.data.sum(axis=ax, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _vjp(g):
            return ((a, np.ascontiguousarray(_expand_reduced(g, a.shape, ax, keepdims))),)
        out._vjp = _vjp
    return out


def reduce_mean(a, axes: Axes = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim, "mean")
    count = int(np.prod([a.shape[i] for i in ax], dtype=np.int64)) if ax else 1
    out = _node(a.data.mean(axis=ax, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        def _vjp(g):
            return ((a, _expand_reduced(g, a.shape, ax, keepdims) / count),)
        out._vjp = _vjp
    return out


def reduce_max(a, axes: Axes = None, keepdims: bool = False) -> Tensor:
    """Max over axes; the gradient goes to the first maximal position in
    row-major order over the reduced axes (ties broken by first index)."""
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim, "max")
    out = _node(a.data.max(axis=ax, keepdims=keepdims), (a,), "max")
    if out.requires_grad:
        kept = tuple(i for i in range(a.ndim) if i not in ax)
        perm = kept + ax
        kept_shape = tuple(a.shape[i] for i in kept)
        red_shape = tuple(a.shape[i] for i in ax)
        moved = a.data.transpose(perm).reshape(
            int(np.prod(kept_shape, dtype=np.int64)) if kept_shape else 1, -1
        )
        argmax = moved.argmax(axis=1)  # first occurrence
        inv_perm = np.argsort(perm)
        def _vjp(g):
            if keepdims:
                g = g.reshape(kept_shape)
            buf = np.zeros_like(moved)
            buf[np.arange(buf.shape[0]), argmax] = g.reshape(-1)
            return ((a, buf.reshape(kept_shape + red_shape).transpose(inv_perm)),)
        out._vjp = _vjp
    return out


# -- shape ops --


def reshape(a, shape: Sequence[int]) -> Tensor:
    """Row-major reshape; one dimension may be -1 and is inferred."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) > 1:
        raise ShapeMismatchError(f"reshape: more than one -1 in {shape}")
    if shape.count(-1) == 1:
        known = int(np.prod([s for s in shape if s != -1], dtype=np.int64))
        if known <= 0 or a.size % known != 0:
            raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}")
    out = _node(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def _vjp(g):
            return ((a, g.reshape(a.shape)),)
        out._vjp = _vjp
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat: empty tensor list")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise InvalidAxisError(f"concat: axis {axis} out of range for {ndim}-d tensors")
    axis = axis % ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if t.ndim != ndim or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeMismatchError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _vjp(g):
            pairs = []
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * ndim
                sl[axis] = slice(int(lo), int(hi))
                pairs.append((t, g[tuple(sl)]))
            return tuple(pairs)
        out._vjp = _vjp
    return out


# -- composites --


def softmax_temperature(a, axes: Axes = None, temperature: float = 1.0) -> Tensor:
    """softmax(a / temperature) jointly over `axes`, with max subtraction for
    stability. The subtracted max is detached; softmax is shift invariant, so
    the gradient is unchanged."""
    a = as_tensor(a)
    if not temperature > 0.0:
        raise TemperatureError(f"temperature must be > 0, got {temperature}")
    if not np.isfinite(a.data).all():
        raise DegenerateInputError("softmax_temperature: non-finite input")
    z = a * (1.0 / temperature)
    m = z.max(axes, keepdims=True).detach()
    e = (z - m).exp()
    return e / e.sum(axes, keepdims=True)


def log_softmax(a, axes: Axes = None) -> Tensor:
    """log(softmax(a)) over `axes` without materializing small probabilities."""
    a = as_tensor(a)
    if not np.isfinite(a.data).all():
        raise DegenerateInputError("log_softmax: non-finite input")
    m = a.max(axes, keepdims=True).detach()
    z = a - m
    return z - z.exp().sum(axes, keepdims=True).log()


def group_norm(x, groups: int, gain, bias, eps: float = 1e-5) -> Tensor:
    """Group normalization over [N, C, D, H, W]: per (sample, group) mean and
    variance over the group's channels and all voxels, then channelwise affine.
    Built from primitive ops, so the gradient needs no hand-derived rule."""
    x = as_tensor(x)
    gain, bias = as_tensor(gain), as_tensor(bias)
    if x.ndim != 5:
        raise ShapeMismatchError(f"group_norm: expected 5-d input, got {x.shape}")
    n, c = x.shape[0], x.shape[1]
    if groups < 1 or c % groups != 0:
        raise DivisibilityError(f"group_norm: {groups} groups do not divide {c} channels")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeMismatchError(
            f"group_norm: gain {gain.shape} / bias {bias.shape} must be ({c},)"
        )
    if not eps > 0.0:
        raise DegenerateInputError(f"group_norm: eps must be > 0, got {eps}")
    grouped = x.reshape((n, groups, -1))
    mu = grouped.mean(axes=2, keepdims=True)
    centered = grouped - mu
    var = centered.square().mean(axes=2, keepdims=True)
    normed = centered / (var + eps) ** 0.5
    normed = normed.reshape(x.shape)
    return normed * gain.reshape((1, c, 1, 1, 1)) + bias.reshape((1, c, 1, 1, 1))


# -- spatial ops --


def _triple(v, name: str) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise GeometryError(f"{name} must be an int or length-3 tuple, got {v}")
    return v


def conv3d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """3-d cross-correlation. x: [N, C, D, H, W], w: [O, C, kd, kh, kw],
    optional b: [O]. Zero padding, floor-division output sizes; every output
    dimension must be >= 1."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatchError(f"conv3d: need 5-d input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(
            f"conv3d: input channels {x.shape[1]} != kernel channels {w.shape[1]}"
        )
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if min(stride) < 1:
        raise GeometryError(f"conv3d: stride must be >= 1, got {stride}")
    if min(padding) < 0:
        raise GeometryError(f"conv3d: padding must be >= 0, got {padding}")
    spatial = x.shape[2:]
    kernel = w.shape[2:]
    out_spatial = tuple(
        (spatial[i] + 2 * padding[i] - kernel[i]) // stride[i] + 1 for i in range(3)
    )
    if min(out_spatial) < 1:
        raise GeometryError(
            f"conv3d: empty output {out_spatial} for input {spatial}, "
            f"kernel {kernel}, stride {stride}, padding {padding}"
        )
    xp = np.pad(
        x.data,
        ((0, 0), (0, 0)) + tuple((p, p) for p in padding),
    )
    out_data = _conv3d_forward(xp, w.data, stride, out_spatial)
    out = _node(out_data, (x, w), "conv3d")
    if out.requires_grad:
        def _vjp(g):
            gl = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
            pairs = []
            if x.requires_grad:
                dxp = _conv3d_backward_x(gl, w.data, xp.shape, stride)
                pd, ph, pw = padding
                d, h, wd_ = spatial
                pairs.append((x, dxp[:, :, pd:pd + d, ph:ph + h, pw:pw + wd_]))
            if w.requires_grad:
                pairs.append((w, _conv3d_backward_w(gl, xp, w.shape, stride)))
            return tuple(pairs)
        out._vjp = _vjp
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeMismatchError(f"conv3d: bias {b.shape} must be ({w.shape[0]},)")
        out = out + b.reshape((1, w.shape[0], 1, 1, 1))
    return out


def _offset_slices(i: int, j: int, k: int, stride: tuple, out_spatial: tuple) -> tuple:
    sd, sh, sw = stride
    do, ho, wo = out_spatial
    return (
        slice(i, i + sd * do, sd),
        slice(j, j + sh * ho, sh),
        slice(k, k + sw * wo, sw),
    )


def _conv3d_forward(xp: np.ndarray, wd: np.ndarray, stride: tuple, out_spatial: tuple) -> np.ndarray:
    n = xp.shape[0]
    o, _, kd, kh, kw = wd.shape
    acc = np.zeros((n,) + out_spatial + (o,))
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                sd_, sh_, sw_ = _offset_slices(i, j, k, stride, out_spatial)
                xs = xp[:, :, sd_, sh_, sw_]
                acc += np.tensordot(xs, wd[:, :, i, j, k], axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(0, 4, 1, 2, 3))


def _conv3d_backward_x(gl: np.ndarray, wd: np.ndarray, xp_shape: tuple, stride: tuple) -> np.ndarray:
    _, _, kd, kh, kw = wd.shape
    out_spatial = gl.shape[1:4]
    dxp = np.zeros(xp_shape)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                sd_, sh_, sw_ = _offset_slices(i, j, k, stride, out_spatial)
                contrib = np.tensordot(gl, wd[:, :, i, j, k], axes=([4], [0]))
                dxp[:, :, sd_, sh_, sw_] += contrib.transpose(0, 4, 1, 2, 3)
    return dxp


def _conv3d_backward_w(gl: np.ndarray, xp: np.ndarray, w_shape: tuple, stride: tuple) -> np.ndarray:
    o, c, kd, kh, kw = w_shape
    out_spatial = gl.shape[1:4]
    dw = np.zeros(w_shape)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                sd_, sh_, sw_ = _offset_slices(i, j, k, stride, out_spatial)
                xs = xp[:, :, sd_, sh_, sw_]
                dw[:, :, i, j, k] = np.tensordot(gl, xs, axes=([0, 1, 2, 3], [0, 2, 3, 4]))
    return dw


def upsample_nearest(x, factor) -> Tensor:
    """Nearest-neighbor upsampling of [N, C, D, H, W] by integer factors."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeMismatchError(f"upsample_nearest: expected 5-d input, got {x.shape}")
    factor = _triple(factor, "factor")
    if min(factor) < 1:
        raise GeometryError(f"upsample_nearest: factor must be >= 1, got {factor}")
    d = x.data
    for axis, f in zip((2, 3, 4), factor):
        if f > 1:
            d = np.repeat(d, f, axis=axis)
    out = _node(d, (x,), "upsample")
    if out.requires_grad:
        n, c, dd, hh, ww = x.shape
        fd, fh, fw = factor
        def _vjp(g):
            blocks = g.reshape(n, c, dd, fd, hh, fh, ww, fw)
            return ((x, blocks.sum(axis=(3, 5, 7))),)
        out._vjp = _vjp
    return out


def upsample_conv(x, factor, w, b=None, padding=1) -> Tensor:
    """Learned upsampling: nearest-neighbor upsample then conv3d (stride 1)."""
    return conv3d(upsample_nearest(x, factor), w, b, stride=1, padding=padding)
