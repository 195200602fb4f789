"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the matching network and its losses are
provided.  Every op takes and returns :class:`Tensor`; an op records its
parents and a backward closure only when at least one input requires a
gradient, so inference code builds no graph.

Binary elementwise ops require identical shapes.  Use :func:`broadcast_to`
to make broadcasting explicit.  Python scalars are accepted as constants.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericalError, RangeError, ShapeError

PRELU_INIT = 0.25


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError("non-finite value produced in forward pass")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Topologically ordered record of the graph that produced ``loss``.

    ``backward`` visits every node once, in reverse order, and adds the
    resulting gradients into ``.grad`` of each leaf that requires one.
    Running it twice accumulates twice; construct with ``accumulate=False``
    to make a second call raise instead.
    """

    def __init__(self, loss: Tensor, accumulate: bool = True):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.loss = loss
        self.accumulate = accumulate
        self.nodes: list[Tensor] = _toposort(loss)
        self.runs = 0

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def backward(self) -> list[Tensor]:
        if self.runs and not self.accumulate:
            raise ContractError("tape already consumed and accumulation is disabled")
        self.runs += 1
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return self.leaves


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Backpropagate from a scalar ``loss``; returns the leaves that received gradients."""
    return Tape(loss).backward()


# ---------------------------------------------------------------------------
# Elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data - c, (a,), lambda g: (g,))
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data / c, (a,), lambda g: (g / c,))
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (0.5 * g / y,))


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (last axis)."""
    if slope.shape != (a.shape[-1],):
        raise ShapeError(f"prelu slope shape {slope.shape} does not match channels {a.shape[-1]}")
    x, s = a.data, slope.data
    neg_mask = x < 0
    y = np.where(neg_mask, x * s, x)

    def bw(g):
        gx = np.where(neg_mask, g * s, g)
        gs = (g * x * neg_mask).reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gs

    return _make(y, (a, slope), bw)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "exp": exp,
    "prelu": prelu,
}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name; ``prelu`` takes the slope vector as ``b``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {kind!r}") from None
    if kind in ("sigmoid", "exp"):
        return fn(a)
    if b is None:
        raise ContractError(f"{kind} needs a second operand")
    return fn(a, b)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    y = a.data.reshape(shape)
    return _make(y, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        y = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make(y, (a,), bw)


def getitem(a: Tensor, index) -> Tensor:
    y = a.data[index]
    if not isinstance(y, np.ndarray):
        y = np.array(y)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(y, dtype=np.float64), (a,), bw)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis`` (a permutation or any index list)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    y = np.take(a.data, indices, axis=axis)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(y, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(y, tensors, bw)


def pad_end(a: Tensor, target: Sequence[int]) -> Tensor:
    """Zero-pad each axis at its end up to ``target``."""
    widths = [(0, t - s) for s, t in zip(a.shape, target)]
    if any(w[1] < 0 for w in widths):
        raise ShapeError(f"cannot pad {a.shape} down to {tuple(target)}")
    shape = a.shape
    crop = tuple(slice(0, s) for s in shape)
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[crop],))


def crop_end(a: Tensor, target: Sequence[int]) -> Tensor:
    if any(t > s for s, t in zip(a.shape, target)):
        raise ShapeError(f"cannot crop {a.shape} up to {tuple(target)}")
    crop = tuple(slice(0, t) for t in target)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[crop] = g
        return (full,)

    return _make(a.data[crop].copy(), (a,), bw)


# ---------------------------------------------------------------------------
# Contractions and reductions


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Differentiable ``np.einsum`` restricted to explicit ``->`` form.

    Repeated indices inside one operand (diagonals) are not supported.
    """
    operands = tuple(as_tensor(o) for o in operands)
    spec = subscripts.replace(" ", "")
    if "->" not in spec:
        raise ContractError("einsum needs an explicit output ('->')")
    lhs, out_sub = spec.split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError("einsum operand count mismatch")
    for s in in_subs:
        if len(set(s)) != len(s):
            raise ContractError(f"repeated index in operand {s!r}")
    try:
        y = np.einsum(spec, *(o.data for o in operands), optimize=len(operands) > 2)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def bw(g):
        grads = []
        for k, op in enumerate(operands):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [m for m in range(len(operands)) if m != k]
            avail = set(out_sub).union(*(in_subs[m] for m in others)) if others else set(out_sub)
            sub_k = in_subs[k]
            present = "".join(ch for ch in sub_k if ch in avail)
            expr = ",".join([out_sub] + [in_subs[m] for m in others]) + "->" + present
            gk = np.einsum(expr, g, *(operands[m].data for m in others),
                           optimize=len(others) > 1)
            if present != sub_k:
                for pos, ch in enumerate(sub_k):
                    if ch not in avail:
                        gk = np.expand_dims(gk, pos)
                gk = np.broadcast_to(gk, op.shape).copy()
            grads.append(gk)
        return grads

    return _make(np.asarray(y, dtype=np.float64), operands, bw)


def _norm_axes(x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"axis {ax} invalid for rank {x.ndim}")
        out.append(ax % x.ndim)
    if len(set(out)) != len(out):
        raise ShapeError("duplicate reduction axis")
    return tuple(sorted(out))


def reduce(kind: str, x: Tensor, axes=None, weights: Tensor | np.ndarray | None = None) -> Tensor:
    """Sum, mean or weighted sum over ``axes`` (all axes when ``None``).

    For ``weighted-sum`` the weights either match ``x`` exactly or match the
    reduced axes only, in which case they broadcast over the kept axes.
    """
    axes = _norm_axes(x, axes)
    if kind == "sum":
        shape = x.shape
        return _make(x.data.sum(axis=axes), (x,),
                     lambda g: (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),))
    if kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        return mul(reduce("sum", x, axes), 1.0 / count)
    if kind == "weighted-sum":
        if weights is None:
            raise ContractError("weighted-sum needs weights")
        w = as_tensor(weights)
        red_shape = tuple(x.shape[a] for a in axes)
        if w.shape == x.shape:
            wb = w
        elif w.shape == red_shape:
            shape = [1] * x.ndim
            for a in axes:
                shape[a] = x.shape[a]
            wb = broadcast_to(reshape(w, shape), x.shape)
        else:
            raise ShapeError(f"weights {w.shape} not broadcastable over reduced axes {red_shape}")
        return reduce("sum", mul(x, wb), axes)
    raise ContractError(f"unknown reduction {kind!r}")


def softmax_axis(x: Tensor, axis: int = -1, channel_range: tuple[int, int] | None = None) -> Tensor:
    """Softmax along ``axis``; with ``channel_range=(lo, hi)`` only those
    channels are normalized and returned."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for rank {x.ndim}")
    axis = axis % x.ndim
    if channel_range is not None:
        lo, hi = channel_range
        if not 0 <= lo < hi <= x.shape[axis]:
            raise RangeError(f"empty or invalid channel range {channel_range}")
        x = take(x, np.arange(lo, hi), axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax_axis(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# 3D convolutions, layout [d, h, w, channels]


def _check_kernel(x: Tensor, kernels: Tensor) -> int:
    if x.ndim != 4 or kernels.ndim != 5:
        raise ShapeError("conv3d expects x[d,h,w,c] and kernels[k,k,k,cin,cout]")
    k = kernels.shape[0]
    if kernels.shape[:3] != (k, k, k):
        raise ShapeError(f"kernel must be cubic, got {kernels.shape[:3]}")
    if kernels.shape[3] != x.shape[3]:
        raise ShapeError(f"channel mismatch: input {x.shape[3]} vs kernel {kernels.shape[3]}")
    return k


def conv3d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """'Same'-padded 3D convolution (cross-correlation); output dims ceil(n / stride)."""
    k = _check_kernel(x, kernels)
    if k % 2 == 0:
        raise ShapeError("conv3d kernel size must be odd")
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2")
    p = (k - 1) // 2
    xd, kd = x.data, kernels.data
    dims = x.shape[:3]
    out_dims = tuple(-(-n // stride) for n in dims)
    xp = np.pad(xd, [(p, p)] * 3 + [(0, 0)])
    cout = kd.shape[4]
    out = np.zeros(out_dims + (cout,))
    offsets = [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]

    def window(arr, a, b, c):
        return arr[a:a + stride * (out_dims[0] - 1) + 1:stride,
                   b:b + stride * (out_dims[1] - 1) + 1:stride,
                   c:c + stride * (out_dims[2] - 1) + 1:stride]

    for a, b, c in offsets:
        out += window(xp, a, b, c) @ kd[a, b, c]

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(kd) if kernels.requires_grad else None
        g2 = g.reshape(-1, cout)
        for a, b, c in offsets:
            if gk is not None:
                gk[a, b, c] = window(xp, a, b, c).reshape(-1, xd.shape[3]).T @ g2
            if gxp is not None:
                window(gxp, a, b, c)[...] += g @ kd[a, b, c].T
        gx = None
        if gxp is not None:
            gx = gxp[p:p + dims[0], p:p + dims[1], p:p + dims[2]]
        return gx, gk

    return _make(out, (x, kernels), bw)


def transposed_conv3d(x: Tensor, kernels: Tensor, stride: int = 2,
                      output_shape: Sequence[int] | None = None) -> Tensor:
    """Stride-2 transposed convolution doubling every spatial dim.

    Input voxel ``i`` scatters ``x[i] @ K[a]`` to output ``2*i + a - p`` with
    ``p = (k - 2) // 2``; contributions falling outside ``[0, 2n)`` are dropped.
    ``output_shape`` (spatial dims) is validated against the doubled dims.
    """
    k = _check_kernel(x, kernels)
    if stride != 2:
        raise ShapeError("transposed_conv3d supports stride 2 only")
    dims = x.shape[:3]
    out_dims = tuple(2 * n for n in dims)
    if output_shape is not None and tuple(output_shape)[:3] != out_dims:
        raise ShapeError(f"upsampled dims {out_dims} do not match skip target {tuple(output_shape)[:3]}")
    p = max((k - 2) // 2, 0)
    xd, kd = x.data, kernels.data
    cout = kd.shape[4]
    full_dims = tuple(2 * n + k for n in dims)
    full = np.zeros(full_dims + (cout,))
    offsets = [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]

    def window(arr, a, b, c):
        return arr[a:a + 2 * dims[0]:2, b:b + 2 * dims[1]:2, c:c + 2 * dims[2]:2]

    for a, b, c in offsets:
        window(full, a, b, c)[...] += xd @ kd[a, b, c]
    crop = (slice(p, p + out_dims[0]), slice(p, p + out_dims[1]), slice(p, p + out_dims[2]))
    out = full[crop].copy()

    def bw(g):
        gfull = np.zeros(full_dims + (cout,))
        gfull[crop] = g
        gx = np.zeros_like(xd) if x.requires_grad else None
        gk = np.zeros_like(kd) if kernels.requires_grad else None
        x2 = xd.reshape(-1, xd.shape[3])
        for a, b, c in offsets:
            gw = window(gfull, a, b, c)
            if gx is not None:
                gx += gw @ kd[a, b, c].T
            if gk is not None:
                gk[a, b, c] = x2.T @ gw.reshape(-1, cout)
        return gx, gk

    return _make(out, (x, kernels), bw)


# ---------------------------------------------------------------------------
# Sampling


def bilinear_sample(image: np.ndarray, coords: Tensor) -> Tensor:
    """Bilinearly sample a constant 2D ``image`` at ``coords[..., 0:2]``.

    Coordinate 0 indexes the first image axis.  Coordinates are clamped to
    the image; the gradient flows to ``coords`` only.
    """
    image = np.asarray(image, dtype=np.float64)
    if coords.shape[-1] != 2:
        raise ShapeError("coords must end with a size-2 axis")
    rows, cols = image.shape
    c = coords.data
    x = np.clip(c[..., 0], 0.0, rows - 1.0)
    y = np.clip(c[..., 1], 0.0, cols - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(rows - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(cols - 2, 0))
    x1 = np.minimum(x0 + 1, rows - 1)
    y1 = np.minimum(y0 + 1, cols - 1)
    fx, fy = x - x0, y - y0
    i00, i01 = image[x0, y0], image[x0, y1]
    i10, i11 = image[x1, y0], image[x1, y1]
    val = (1 - fx) * (1 - fy) * i00 + (1 - fx) * fy * i01 + fx * (1 - fy) * i10 + fx * fy * i11
    inside_x = (c[..., 0] >= 0) & (c[..., 0] <= rows - 1)
    inside_y = (c[..., 1] >= 0) & (c[..., 1] <= cols - 1)

    def bw(g):
        dx = (1 - fy) * (i10 - i00) + fy * (i11 - i01)
        dy = (1 - fx) * (i01 - i00) + fx * (i11 - i10)
        return (np.stack([g * dx * inside_x, g * dy * inside_y], axis=-1),)

    return _make(val, (coords,), bw)


def bilinear_valid(mask: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """True where all four bilinear taps of ``coords`` fall on valid pixels."""
    rows, cols = mask.shape
    x = np.clip(coords[..., 0], 0.0, rows - 1.0)
    y = np.clip(coords[..., 1], 0.0, cols - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(rows - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(cols - 2, 0))
    x1 = np.minimum(x0 + 1, rows - 1)
    y1 = np.minimum(y0 + 1, cols - 1)
    return mask[x0, y0] & mask[x0, y1] & mask[x1, y0] & mask[x1, y1]


# ---------------------------------------------------------------------------
# Finite-difference checking


def gradcheck(fn: Callable[[], Tensor], params: Iterable[Tensor], n_probes: int,
              rng: np.random.Generator, step: float = 1e-5) -> float:
    """Largest ``|analytic - central| / max(1, |central|)`` over random probes.

    ``fn`` rebuilds the scalar loss from the current contents of ``params``.
    Probes are drawn uniformly over all entries of all parameters.
    """
    params = list(params)
    for p in params:
        p.grad = None
    Tape(fn()).backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    sizes = np.array([p.data.size for p in params])
    flat = rng.choice(int(sizes.sum()), size=min(n_probes, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for f in flat:
        which = int(np.searchsorted(bounds, f, side="right"))
        idx = int(f - (bounds[which - 1] if which else 0))
        p = params[which]
        view = p.data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + step
        up = fn().item()
        view[idx] = orig - step
        down = fn().item()
        view[idx] = orig
        central = (up - down) / (2 * step)
        err = abs(analytic[which].reshape(-1)[idx] - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def fan_in_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(shape))
