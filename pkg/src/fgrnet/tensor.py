"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the FGR-Net graph needs are implemented. Image tensors
are laid out as (batch, channel, height, width) everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import ContractError, DimensionError

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Records every operation executed while the tape is active.

    Nodes are appended in execution order, so the record is already in
    topological order and can be replayed backwards by :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def count(self, op: str) -> int:
        return sum(1 for n in self.nodes if n.op == op)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = False

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep this intermediate's gradient in ``.grad`` after backward."""
        self._retain = True
        return self

    def backward(self, tape: Tape | None = None):
        backward(self, tape)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    out.op = op
    out._retain = False
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].nodes.append(out)
    return out


def make_op(data, parents: Sequence[Tensor], backward_fn: Callable, op: str = "custom") -> Tensor:
    """Register a user-defined differentiable op.

    ``backward_fn(grad)`` must return one gradient (or ``None``) per parent.
    """
    return _node(np.asarray(data), tuple(parents), backward_fn, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None)

    return _node(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(a.data ** exponent, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a: Tensor) -> Tensor:
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    return _node(np.maximum(a.data, a.data.dtype.type(floor)), (a,), lambda g: (g * mask,), "clamp_min")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _node(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (a,), bw, "softmax")


# reductions and shape ------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.dtype, copy=False),)

    return _node(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index]), (a,), bw, "take")


# network layers ------------------------------------------------------------

def _require_ndim(t: Tensor, ndim: int, what: str):
    if t.ndim != ndim:
        raise DimensionError(f"{what} expects a {ndim}-d tensor, got shape {t.shape}", axis="rank")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``weight`` is laid out (out_channels, in_channels, k, k).
    """
    _require_ndim(x, 4, "conv2d input")
    _require_ndim(weight, 4, "conv2d weight")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise DimensionError(f"conv2d weight expects {Cw} input channels, input has {C}", axis="channel")
    if kh > H + 2 * padding:
        raise DimensionError(f"kernel {kh} exceeds padded height {H + 2 * padding}", axis="height")
    if kw > W + 2 * padding:
        raise DimensionError(f"kernel {kw} exceeds padded width {W + 2 * padding}", axis="width")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d bias must have shape ({O},), got {bias.shape}", axis="channel")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; ties send the gradient to the first cell in row-major order."""
    _require_ndim(x, 4, "maxpool2d input")
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise ContractError("maxpool2d needs positive kernel and stride")
    B, C, H, W = x.shape
    if kernel > H:
        raise DimensionError(f"pool kernel {kernel} exceeds height {H}", axis="height")
    if kernel > W:
        raise DimensionError(f"pool kernel {kernel} exceeds width {W}", axis="width")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g * hit
        return (gx,)

    return _node(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Rows hold linear-interpolation weights, half-pixel centres, clamped borders."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    _require_ndim(x, 4, "bilinear resize input")
    H, W = x.shape[2:]
    ry = interpolation_matrix(H, height, x.dtype)
    rx = interpolation_matrix(W, width, x.dtype)
    out = ry @ x.data @ rx.T

    def bw(g):
        return (ry.T @ g @ rx,)

    return _node(out, (x,), bw, "bilinear")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ContractError(f"upsample factor must be >= 1, got {factor}")
    _require_ndim(x, 4, "bilinear_upsample input")
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight laid out (in, out)."""
    _require_ndim(x, 2, "linear input")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear expects {weight.shape[0]} input features, got {x.shape[1]}", axis="feature")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear bias must have shape ({weight.shape[1]},)", axis="feature")
        out = out + bias.data

    def bw(g):
        return (g @ weight.data.T if x.requires_grad else None,
                x.data.T @ g if weight.requires_grad else None,
                g.sum(axis=0) if bias is not None and bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw, "linear")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_ndim(a, 4, "concat input")
    _require_ndim(b, 4, "concat input")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}", axis="batch")
    if a.shape[2] != b.shape[2]:
        raise DimensionError(f"heights differ: {a.shape[2]} vs {b.shape[2]}", axis="height")
    if a.shape[3] != b.shape[3]:
        raise DimensionError(f"widths differ: {a.shape[3]} vs {b.shape[3]}", axis="width")
    c1 = a.shape[1]

    def bw(g):
        return g[:, :c1], g[:, c1:]

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), bw, "concat")


def global_avg_pool(x: Tensor) -> Tensor:
    _require_ndim(x, 4, "global_avg_pool input")
    return tmean(x, axis=(2, 3))


# backward ------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p._backward is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf that requires grad.

    With a tape the recorded order is replayed; otherwise the graph reachable
    from ``loss`` is sorted topologically.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    if tape is not None:
        if not any(n is loss for n in tape.nodes):
            raise ContractError("loss was not recorded on the given tape")
        order = [n for n in tape.nodes if n.requires_grad]
    else:
        order = _topological(loss)

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = np.array(pg, dtype=parent.dtype) if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


# verification harness ------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: list[float]
    tolerance: float
    attempts: int = 1
    detail: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise discrepancy scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(
    op: Callable[..., Tensor],
    input_shapes: Sequence[tuple[int, ...]],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    seed: int = 0,
    inputs: Sequence[np.ndarray] | None = None,
    valid: Callable[[list[np.ndarray]], bool] | None = None,
    max_attempts: int = 20,
) -> GradCheckReport:
    """Compare analytic gradients of ``op`` with central differences.

    The op output is contracted against a fixed random projection so any
    output shape reduces to a scalar. Inputs are drawn in float64 unless
    given; ``valid`` rejects draws that sit too close to a kink.
    """
    rng = np.random.default_rng(seed)
    attempts = 0
    while True:
        attempts += 1
        if inputs is not None:
            arrays = [np.array(a, dtype=np.float64) for a in inputs]
        else:
            arrays = [rng.standard_normal(s) for s in input_shapes]
        if valid is None or valid(arrays) or inputs is not None:
            break
        if attempts >= max_attempts:
            raise ContractError("could not sample a differentiable point")

    out = op(*[Tensor(a) for a in arrays])
    proj = rng.standard_normal(out.shape)

    def scalar(arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * proj))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = tsum(mul(op(*leaves), Tensor(proj)))
    backward(loss)

    errors, detail = [], []
    for k, leaf in enumerate(leaves):
        numeric = np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = scalar(arrays)
            flat[i] = orig - step
            down = scalar(arrays)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(numeric)
        err = relative_error(analytic, numeric)
        errors.append(err)
        detail.append(f"input {k} shape {arrays[k].shape}: max rel err {err:.3e}")
    return GradCheckReport(errors=errors, tolerance=tolerance, attempts=attempts, detail=detail)
