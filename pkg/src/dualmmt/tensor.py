"""Dense tensors with reverse-mode automatic differentiation.

Every model computation in this package flows through `Tensor`. Values are
numpy arrays (float32 by default, float64 for gradient-check oracles); each
differentiable operation records its inputs and a backward rule, and
`backward()` walks the recorded graph in reverse topological order exactly
once, accumulating gradients additively into every reachable leaf.

Broadcasting is deliberately restricted: an elementwise pair is legal only
when the shapes match, one operand is a scalar, or one shape is a trailing
suffix of the other. Anything else raises `ShapeError` instead of silently
broadcasting.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

ArrayLike = Union[np.ndarray, float, int, Sequence]


def _is_scalar_shape(shape: tuple) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    """Restricted broadcast admissibility.

    Allowed: equal shapes; a scalar operand; a trailing-suffix match of
    unequal ranks; and equal-rank shapes where all size-1 expansions sit on
    a single operand (the keepdims pattern). Two-sided expansion such as
    (3,1) with (1,3) stays an error.
    """
    if sa == sb:
        return True
    if _is_scalar_shape(sa) or _is_scalar_shape(sb):
        return True
    if len(sa) == len(sb):
        a_expands = b_expands = False
        for da, db in zip(sa, sb):
            if da == db:
                continue
            if da == 1:
                a_expands = True
            elif db == 1:
                b_expands = True
            else:
                return False
        return not (a_expands and b_expands)
    short, long = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return long[len(long) - len(short):] == short


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy-backed tensor node in the reverse-mode graph.

    Gradients accumulate into `.grad` (same shape as `.data`) during
    `backward()`. Tensors are treated as immutable once created: ops always
    allocate new outputs, so read-only sharing across threads is safe.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_rule: Optional[Callable[[np.ndarray], None]] = None
        self.op: str = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def from_op(data: np.ndarray, parents: Iterable["Tensor"], op: str,
                backward_rule: Callable[[np.ndarray], None]) -> "Tensor":
        parents = tuple(parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.op = op
        if out.requires_grad:
            out._parents = parents
            out._backward_rule = backward_rule
        else:
            out._parents = ()
            out._backward_rule = None
        return out

    # -- basic protocol --------------------------------------------------------

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        out_data = self.data.astype(dtype)

        def rule(grad):
            _accumulate(self, grad.astype(self.data.dtype))

        return Tensor.from_op(out_data, (self,), "astype", rule)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op})"

    # -- gradient accumulation -------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar; fills `.grad` on reachable tensors."""
        if self.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward_rule is not None and node.grad is not None:
                node._backward_rule(node.grad)
                # Graph is single-use: free edges so memory is reclaimed.
                node._parents = ()
                node._backward_rule = None

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named trainable leaf; `grad` is kept allocated and zero-initialized."""

    __slots__ = ("name",)

    def __init__(self, data: ArrayLike, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.zero_grad()


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if grad.dtype != tensor.data.dtype:
        grad = grad.astype(tensor.data.dtype)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad += grad


def _topological_order(root: Tensor) -> list:
    """Reverse topological order via iterative DFS (graphs can be deep)."""
    order: list = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are neither equal, scalar, "
            "nor trailing-dimension compatible")


# -- elementwise arithmetic -----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    out_data = a.data + b.data

    def rule(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return Tensor.from_op(out_data, (a, b), "add", rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    out_data = a.data - b.data

    def rule(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(-grad, b.shape))

    return Tensor.from_op(out_data, (a, b), "sub", rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    out_data = a.data * b.data

    def rule(grad):
        _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    return Tensor.from_op(out_data, (a, b), "mul", rule)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "div")
    out_data = a.data / b.data

    def rule(grad):
        _accumulate(a, _unbroadcast(grad / b.data, a.shape))
        _accumulate(b, _unbroadcast(-grad * a.data / (b.data * b.data), b.shape))

    return Tensor.from_op(out_data, (a, b), "div", rule)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out_data = a.data ** exponent

    def rule(grad):
        _accumulate(a, grad * exponent * a.data ** (exponent - 1.0))

    return Tensor.from_op(out_data, (a,), "pow", rule)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def rule(grad):
        _accumulate(a, grad * out_data)

    return Tensor.from_op(out_data, (a,), "exp", rule)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log: input must be strictly positive")
    out_data = np.log(a.data)

    def rule(grad):
        _accumulate(a, grad / a.data)

    return Tensor.from_op(out_data, (a,), "log", rule)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def rule(grad):
        _accumulate(a, grad * (a.data > 0))

    return Tensor.from_op(out_data, (a,), "relu", rule)


# -- shape manipulation -----------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    out_data = a.data.reshape(shape)

    def rule(grad):
        _accumulate(a, grad.reshape(a.shape))

    return Tensor.from_op(out_data, (a,), "reshape", rule)


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = a.data.transpose(axes) if axes else a.data.transpose()
    inverse = np.argsort(axes) if axes else None

    def rule(grad):
        _accumulate(a, grad.transpose(inverse) if axes else grad.transpose())

    return Tensor.from_op(out_data, (a,), "transpose", rule)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def narrow(a: Tensor, key) -> Tensor:
    """Basic (view-style) slicing; integer/slice/tuple keys only."""
    out_data = a.data[key]

    def rule(grad):
        full = np.zeros_like(a.data)
        full[key] += grad
        _accumulate(a, full)

    return Tensor.from_op(np.ascontiguousarray(out_data), (a,), "slice", rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(grad):
        for t, piece in zip(tensors, np.split(grad, splits, axis=axis)):
            _accumulate(t, piece)

    return Tensor.from_op(out_data, tuple(tensors), "concat", rule)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(grad):
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return Tensor.from_op(out_data, (a,), "sum", rule)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def rule(grad):
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return Tensor.from_op(out_data, (a,), "mean", rule)


# -- linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional identical leading batch dimensions.

    Legal forms: [m,k]x[k,n]; [..,m,k]x[k,n]; [..,m,k]x[..,k,n] with equal
    batch prefixes. Backward follows dA = dC.B^T and dB = A^T.dC, summing
    over any batch dimensions the operand did not carry.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch prefixes differ for {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def rule(grad):
        ga = grad @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ grad
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return Tensor.from_op(out_data, (a, b), "matmul", rule)


# -- softmax family ---------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def rule(grad):
        inner = (grad * out_data).sum(axis=-1, keepdims=True)
        _accumulate(x, out_data * (grad - inner))

    return Tensor.from_op(out_data, (x,), "softmax", rule)


def log_softmax_rows(x: Tensor) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def rule(grad):
        softmax = np.exp(out_data)
        _accumulate(x, grad - softmax * grad.sum(axis=-1, keepdims=True))

    return Tensor.from_op(out_data, (x,), "log_softmax", rule)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True by `value` (no gradient there).

    The mask is constant data, so full numpy broadcasting applies to it.
    """
    try:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {np.shape(mask)} vs input {x.shape}")
    out_data = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)

    def rule(grad):
        _accumulate(x, np.where(mask, 0, grad))

    return Tensor.from_op(out_data, (x,), "masked_fill", rule)


# -- embedding / dropout ------------------------------------------------------------

def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: ids outside [0, {table.shape[0]})")
    out_data = table.data[ids]

    def rule(grad):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), grad.reshape(-1, table.shape[1]))
        _accumulate(table, full)

    return Tensor.from_op(out_data, (table,), "embedding", rule)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator],
            training: bool) -> Tensor:
    """Inverted dropout; the caller supplies the generator so runs replay."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: training mode requires an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    out_data = x.data * keep * scale

    def rule(grad):
        _accumulate(x, grad * keep * scale)

    return Tensor.from_op(out_data, (x,), "dropout", rule)


# -- convolution ---------------------------------------------------------------------

def _normalize_padding(padding) -> tuple:
    """Accepts int, (ph, pw), or ((pt, pb), (pl, pr)); returns the latter."""
    if isinstance(padding, int):
        return ((padding, padding), (padding, padding))
    if len(padding) == 2 and all(isinstance(p, int) for p in padding):
        return ((padding[0], padding[0]), (padding[1], padding[1]))
    (pt, pb), (pl, pr) = padding
    return ((int(pt), int(pb)), (int(pl), int(pr)))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding=0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation over [B, C_in, H, W] with grouped channels.

    Padding may be asymmetric per side, which keeps spatial extents intact
    for even kernel widths. stride applies to both spatial axes.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    batch, c_in, height, width = x.shape
    c_out, c_in_g, kh, kw = kernel.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(
            f"conv2d: channels in={c_in} out={c_out} not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"conv2d: kernel expects {c_in_g} channels/group, input provides "
            f"{c_in // groups}")
    (pt, pb), (pl, pr) = _normalize_padding(padding)
    if min(pt, pb, pl, pr) < 0 or stride < 1:
        raise ShapeError("conv2d: padding must be >=0 and stride >=1")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    h_out = (height + pt + pb - kh) // stride + 1
    w_out = (width + pl + pr - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{height + pt + pb}x{width + pl + pr}")

    cg_in, cg_out = c_in // groups, c_out // groups
    out_data = np.zeros((batch, c_out, h_out, w_out), dtype=x.dtype)
    for g in range(groups):
        xg = xp[:, g * cg_in:(g + 1) * cg_in]
        kg = kernel.data[g * cg_out:(g + 1) * cg_out]
        acc = out_data[:, g * cg_out:(g + 1) * cg_out]
        for u in range(kh):
            for v in range(kw):
                patch = xg[:, :, u:u + stride * h_out:stride,
                           v:v + stride * w_out:stride]
                acc += np.einsum("bcij,oc->boij", patch, kg[:, :, u, v])

    def rule(grad):
        gx_p = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for g in range(groups):
            xg = xp[:, g * cg_in:(g + 1) * cg_in]
            kg = kernel.data[g * cg_out:(g + 1) * cg_out]
            go = grad[:, g * cg_out:(g + 1) * cg_out]
            gxg = gx_p[:, g * cg_in:(g + 1) * cg_in]
            for u in range(kh):
                for v in range(kw):
                    patch = xg[:, :, u:u + stride * h_out:stride,
                               v:v + stride * w_out:stride]
                    gk[g * cg_out:(g + 1) * cg_out, :, u, v] += np.einsum(
                        "boij,bcij->oc", go, patch)
                    gxg[:, :, u:u + stride * h_out:stride,
                        v:v + stride * w_out:stride] += np.einsum(
                        "boij,oc->bcij", go, kg[:, :, u, v])
        gx = gx_p[:, :, pt:pt + height, pl:pl + width]
        _accumulate(x, gx)
        _accumulate(kernel, gk)

    return Tensor.from_op(out_data, (x, kernel), "conv2d", rule)


# -- gradient checking ----------------------------------------------------------------

def finite_difference(fn: Callable[[], Tensor], leaf: Tensor,
                      eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar `fn()` w.r.t. every leaf entry."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn().data)
        flat[i] = orig - eps
        lo = float(fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-4) -> float:
    """Worst-case |a - n| / max(|a|, |n|, floor) over all entries.

    The floor keeps near-zero gradients, where finite differences are pure
    rounding noise, from reporting spurious relative error.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor],
                    eps: float = 1e-4, floor: float = 1e-4) -> float:
    """Run `fn` once with autodiff and compare against finite differences.

    Returns the worst relative error across all leaves. Leaves should be
    float64 for the documented tolerances to be meaningful.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = finite_difference(fn, leaf, eps)
        worst = max(worst, max_relative_error(analytic, numeric, floor))
    return worst
