"""
Differentiable Array Core
Numpy-backed tensors with hand-derived backward rules for every operator the
depth pipeline uses, plus finite-difference gradient checking.
"""
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NdiffError(Exception):
    """Base class for errors raised by the differentiable core."""


class ShapeMismatchError(NdiffError, ValueError):
    """Operand shapes are incompatible. The message names the offending node."""


class NonDifferentiableError(NdiffError):
    """A gradient was requested through a forward-only construct (e.g. a mask)."""


_local = threading.local()


def default_dtype():
    """Floating type given to new leaves (float32 unless in double precision)."""
    return getattr(_local, "dtype", np.float32)


@contextmanager
def double_precision():
    """Create new leaves in 64-bit inside the block (gradient checks)."""
    previous = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int]

# name -> operator function; every entry has a backward rule
OPERATORS: Dict[str, Callable] = {}
# operators whose derivative jumps at x = 0
KINKED_OPS = ("leaky_relu", "abs")


def register(name: str):
    def wrap(fn):
        OPERATORS[name] = fn
        return fn
    return wrap


class Tensor:
    """A value in the operator graph together with the rule that pushes its gradient back."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.differentiable = True
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.data.dtype})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"{self.op}: item() needs a single value, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut from the graph (no gradient flows through)."""
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self, seed: Optional[np.ndarray] = None):
        """
        Propagate gradients from this node to every leaf that requires them.

        Args:
            seed: Gradient of the final objective w.r.t. this node. Defaults to
                ones for scalar outputs.
        """
        if not self.differentiable:
            raise NonDifferentiableError(f"{self.op}: forward-only node has no gradient")
        if seed is None:
            if self.data.size != 1:
                raise ShapeMismatchError(f"{self.op}: a seed is required for non-scalar output {self.shape}")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype)
        if seed.shape != self.data.shape:
            raise ShapeMismatchError(f"{self.op}: seed shape {seed.shape} does not match output {self.shape}")

        grads: Dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants as leaves; a `like` tensor fixes the dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def apply_op(op: str, value: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Create an op node. Used by the operators here and by geometry's sampler."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(value)
    out.grad = None
    out.op = op
    out.differentiable = True
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def iverson(condition: np.ndarray, like: Optional[Tensor] = None) -> Tensor:
    """A 0/1 mask from a boolean condition. Forward-only: carries no gradient."""
    dtype = like.data.dtype if like is not None else default_dtype()
    out = Tensor(np.asarray(condition).astype(dtype), dtype=dtype)
    out.op = "iverson"
    out.differentiable = False
    return out


def _pair(op: str, a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = as_tensor(a)
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------------

@register("add")
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair("add", a, b)
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


@register("sub")
def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair("sub", a, b)
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


@register("mul")
def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair("mul", a, b)
    return apply_op("mul", a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


@register("div")
def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair("div", a, b)
    out = a.data / b.data
    return apply_op("div", out, (a, b),
                    lambda g: (_unbroadcast(g / b.data, a.shape),
                               _unbroadcast(-g * out / b.data, b.shape)))


@register("neg")
def neg(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return apply_op("neg", -x.data, (x,), lambda g: (-g,))


@register("abs")
def abs_(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return apply_op("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


@register("exp")
def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return apply_op("exp", out, (x,), lambda g: (g * out,))


@register("log")
def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return apply_op("log", np.log(x.data), (x,), lambda g: (g / x.data,))


@register("sqrt")
def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return apply_op("sqrt", out, (x,), lambda g: (0.5 * g / out,))


@register("sin")
def sin(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return apply_op("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


@register("cos")
def cos(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return apply_op("cos", np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


@register("sigmoid")
def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60.0, 60.0)))
    return apply_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


@register("leaky_relu")
def leaky_relu(x: ArrayLike, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    out = np.where(positive, x.data, slope * x.data)
    return apply_op("leaky_relu", out, (x,), lambda g: (np.where(positive, g, slope * g),))


@register("clamp")
def clamp(x: ArrayLike, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    x = as_tensor(x)
    passed = np.ones(x.shape, dtype=bool)
    if lo is not None:
        passed &= x.data >= lo
    if hi is not None:
        passed &= x.data <= hi
    out = np.clip(x.data, lo, hi) if (lo is not None or hi is not None) else x.data.copy()
    return apply_op("clamp", out, (x,), lambda g: (g * passed,))


def _extremum(op: str, tensors: Sequence[ArrayLike], pick) -> Tensor:
    if not tensors:
        raise ShapeMismatchError(f"{op}: empty operand set")
    first = as_tensor(tensors[0])
    items = [as_tensor(t, like=first) for t in tensors]
    for t in items[1:]:
        if t.shape != first.shape:
            raise ShapeMismatchError(f"{op}: shapes {first.shape} and {t.shape} differ")
    stacked = np.stack([t.data for t in items])
    winner = pick(stacked, axis=0)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]
    return apply_op(op, out, items, lambda g: tuple(g * (winner == i) for i in range(len(items))))


@register("minimum")
def minimum(*tensors: ArrayLike) -> Tensor:
    """Elementwise minimum over a set; ties send the gradient to the first operand."""
    return _extremum("minimum", tensors, np.argmin)


@register("maximum")
def maximum(*tensors: ArrayLike) -> Tensor:
    return _extremum("maximum", tensors, np.argmax)


# -- reductions and shape ------------------------------------------------------

def _normalize_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register("sum")
def sum_(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("sum", out, (x,), backward)


@register("mean")
def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return apply_op("mean", out, (x,), backward)


@register("reshape")
def reshape(x: ArrayLike, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return apply_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


@register("transpose")
def transpose(x: ArrayLike, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return apply_op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


@register("getitem")
def getitem(x: ArrayLike, index) -> Tensor:
    x = as_tensor(x)
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return apply_op("getitem", x.data[index], (x,), backward)


@register("concat")
def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    """Channel (or any-axis) concatenation; backward splits the gradient."""
    first = as_tensor(tensors[0])
    items = [as_tensor(t, like=first) for t in tensors]
    axis = axis % first.ndim
    for t in items[1:]:
        if t.ndim != first.ndim or any(
                t.shape[d] != first.shape[d] for d in range(first.ndim) if d != axis):
            raise ShapeMismatchError(f"concat: shapes {first.shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in items]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in items], axis=axis)
    return apply_op("concat", out, items, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    first = as_tensor(tensors[0])
    expanded = []
    for t in tensors:
        t = as_tensor(t, like=first)
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def split(x: ArrayLike, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    """Inverse of concat along `axis`."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ShapeMismatchError(f"split: sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    parts, start = [], 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        parts.append(getitem(x, tuple(index)))
        start += size
    return parts


@register("matmul")
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    return apply_op("matmul", out, (a, b),
                    lambda g: (_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
                               _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)))


# -- spatial -------------------------------------------------------------------

def _reflect_index(size: int, before: int, after: int) -> np.ndarray:
    return np.pad(np.arange(size), (before, after), mode="reflect")


@register("pad2d")
def pad2d(x: ArrayLike, top: int, bottom: int, left: int, right: int, mode: str = "zero") -> Tensor:
    """Pad the last two axes with zeros or by reflection (edge pixel not repeated)."""
    x = as_tensor(x)
    height, width = x.shape[-2:]
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
        out = np.pad(x.data, widths)
        return apply_op("pad2d", out, (x,),
                        lambda g: (g[..., top:top + height, left:left + width],))
    if mode != "reflect":
        raise NdiffError(f"pad2d: unknown mode '{mode}'")
    if max(top, bottom) >= height or max(left, right) >= width:
        raise ShapeMismatchError(f"pad2d: reflection pad larger than input {x.shape}")
    rows = _reflect_index(height, top, bottom)
    cols = _reflect_index(width, left, right)
    out = x.data[..., rows[:, None], cols[None, :]]

    def backward(g):
        by_col = np.zeros(g.shape[:-1] + (width,), dtype=g.dtype)
        for j, src in enumerate(cols):
            by_col[..., src] += g[..., j]
        full = np.zeros_like(x.data)
        for i, src in enumerate(rows):
            full[..., src, :] += by_col[..., i, :]
        return (full,)

    return apply_op("pad2d", out, (x,), backward)


def _windows(data: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """N×C×H×W -> N×C×Ho×Wo×k×k view of sliding windows."""
    view = sliding_window_view(data, (kernel, kernel), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _scatter_windows(grad_windows: np.ndarray, shape, kernel: int, stride: int) -> np.ndarray:
    """Adjoint of `_windows`: sum window gradients back onto the input grid."""
    out = np.zeros(shape, dtype=grad_windows.dtype)
    out_h, out_w = grad_windows.shape[2:4]
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += grad_windows[..., i, j]
    return out


@register("conv2d")
def conv2d(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    2D cross-correlation with zero padding.

    Args:
        x: N×C×H×W input
        weight: O×C×k×k kernel
        bias: Optional O-vector
        stride: Step between windows
        padding: Zero border added on every side

    Returns:
        N×O×Ho×Wo tensor with Ho = (H + 2·padding − k) // stride + 1
    """
    x = as_tensor(x, like=weight if isinstance(weight, Tensor) else None)
    weight = as_tensor(weight, like=x)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeMismatchError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    kernel = weight.shape[2]
    n, _, height, width = x.shape
    if height + 2 * padding < kernel or width + 2 * padding < kernel:
        raise ShapeMismatchError(f"conv2d: input {x.shape} smaller than kernel {kernel}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(padded, kernel, stride)
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias, like=x)
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatchError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        grad_w = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        grad_x = None
        if x.requires_grad:
            grad_win = np.tensordot(g, weight.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            grad_padded = _scatter_windows(grad_win, padded.shape, kernel, stride)
            grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return apply_op("conv2d", out, parents, backward)


@register("avg_pool2d")
def avg_pool2d(x: ArrayLike, kernel: int, stride: int = 1) -> Tensor:
    """Unpadded average pooling over k×k windows (pad first if needed)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeMismatchError(f"avg_pool2d: input {x.shape} too small for kernel {kernel}")
    win = _windows(x.data, kernel, stride)
    out = win.mean(axis=(-2, -1))

    def backward(g):
        grad_win = np.broadcast_to((g / (kernel * kernel))[..., None, None], win.shape)
        return (_scatter_windows(grad_win, x.shape, kernel, stride),)

    return apply_op("avg_pool2d", out, (x,), backward)


@register("upsample_nearest")
def upsample_nearest(x: ArrayLike, scale: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.repeat(scale, axis=2).repeat(scale, axis=3)
    return apply_op("upsample_nearest", out, (x,),
                    lambda g: (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),))


# -- graphs --------------------------------------------------------------------

@dataclass
class OpGraph:
    """A function of named inputs with declared shapes, evaluated as an operator graph."""
    name: str
    fn: Callable[..., Tensor]
    input_shapes: Dict[str, Tuple[int, ...]]

    def check_inputs(self, inputs: Dict[str, np.ndarray]):
        for key, shape in self.input_shapes.items():
            if key not in inputs:
                raise ShapeMismatchError(f"{self.name}: missing input '{key}'")
            if tuple(np.shape(inputs[key])) != tuple(shape):
                raise ShapeMismatchError(
                    f"{self.name}: input '{key}' has shape {np.shape(inputs[key])}, expected {tuple(shape)}")
        extra = set(inputs) - set(self.input_shapes)
        if extra:
            raise ShapeMismatchError(f"{self.name}: unexpected inputs {sorted(extra)}")

    def _leaves(self, inputs: Dict[str, np.ndarray], requires_grad: bool) -> Dict[str, Tensor]:
        leaves = {}
        for key, value in inputs.items():
            value = np.asarray(value)
            dtype = value.dtype if np.issubdtype(value.dtype, np.floating) else None
            leaves[key] = Tensor(value, requires_grad=requires_grad, dtype=dtype)
        return leaves


def forward(graph: OpGraph, inputs: Dict[str, np.ndarray]) -> np.ndarray:
    graph.check_inputs(inputs)
    return graph.fn(**graph._leaves(inputs, requires_grad=False)).data


def backward(graph: OpGraph, inputs: Dict[str, np.ndarray],
             output_seed: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Gradients of <output, seed> with respect to every named input."""
    graph.check_inputs(inputs)
    leaves = graph._leaves(inputs, requires_grad=True)
    out = graph.fn(**leaves)
    out.backward(output_seed)
    return {key: (t.grad if t.grad is not None else np.zeros_like(t.data)) for key, t in leaves.items()}


def grad(output: Tensor, wrt: Sequence[Tensor], seed: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """Gradients of `output` w.r.t. the given leaves. Masks cannot be differentiated."""
    for t in wrt:
        if not t.differentiable:
            raise NonDifferentiableError(f"{t.op}: masks are constants and have no gradient")
        if not t.requires_grad:
            raise NdiffError("grad: leaf was created without requires_grad=True")
        t.grad = None
    output.backward(seed)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def kink_margin(graph: OpGraph, inputs: Dict[str, np.ndarray]) -> float:
    """Smallest |x| over the inputs of every kinked node (leaky_relu, abs) in a 64-bit evaluation."""
    graph.check_inputs(inputs)
    with double_precision():
        values = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        out = graph.fn(**graph._leaves(values, requires_grad=True))
    margin = np.inf
    for node in _topological_order(out):
        if node.op in KINKED_OPS and node._parents:
            margin = min(margin, float(np.min(np.abs(node._parents[0].data))))
    return margin


@dataclass
class GradCheckReport:
    """Per-input max relative error between analytic and central-difference gradients."""
    name: str
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_error <= tolerance


def grad_check(graph: OpGraph, inputs: Dict[str, np.ndarray], step: float = 1e-4,
               wrt: Optional[Sequence[str]] = None, max_probes: Optional[int] = None,
               directional: bool = False, seed: int = 0) -> GradCheckReport:
    """
    Compare analytic gradients to central finite differences in 64-bit.

    Non-scalar outputs are reduced to <output, r> with a fixed random r.
    Coordinate mode reports max|a − n| / max(max|a|, 1e-8) over the probed
    coordinates. Directional mode perturbs a whole input along
    v = â + 0.5·u (â the unit analytic gradient, u a random unit vector) and
    reports |a·v − n| / max(|a·v|, 1e-8); use it for inputs with many entries.

    Args:
        graph: Graph under test
        inputs: Values for every declared input (must avoid kinks by ≥ 10·step)
        step: Finite-difference step
        wrt: Inputs to check (default: all)
        max_probes: Coordinates probed per input in coordinate mode (default: all)
        directional: Use directional probes
        seed: Seed for the projection and probe choice

    Returns:
        GradCheckReport with one error per checked input
    """
    report = GradCheckReport(graph.name)
    rng = np.random.default_rng(seed)
    with double_precision():
        values = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        out = forward(graph, values)
        projection = np.ones_like(out) if out.size == 1 else rng.standard_normal(out.shape)

        def objective(vals):
            return float(np.sum(forward(graph, vals) * projection))

        analytic = backward(graph, values, projection)
        for key in (wrt or list(values)):
            a = analytic[key]
            if directional:
                u = rng.standard_normal(a.shape)
                u /= np.linalg.norm(u) or 1.0
                norm = np.linalg.norm(a)
                v = (a / norm if norm > 0 else 0.0) + 0.5 * u
                plus, minus = dict(values), dict(values)
                plus[key] = values[key] + step * v
                minus[key] = values[key] - step * v
                numeric = (objective(plus) - objective(minus)) / (2 * step)
                expected = float(np.sum(a * v))
                report.errors[key] = abs(expected - numeric) / max(abs(expected), 1e-8)
                continue
            count = a.size
            probes = np.arange(count)
            if max_probes is not None and max_probes < count:
                probes = np.sort(rng.choice(count, size=max_probes, replace=False))
            worst = 0.0
            for flat in probes:
                plus, minus = dict(values), dict(values)
                plus[key] = values[key].copy()
                minus[key] = values[key].copy()
                plus[key].flat[flat] += step
                minus[key].flat[flat] -= step
                numeric = (objective(plus) - objective(minus)) / (2 * step)
                worst = max(worst, abs(a.flat[flat] - numeric))
            scale = float(np.max(np.abs(a.reshape(-1)[probes]))) if count else 0.0
            report.errors[key] = worst / max(scale, 1e-8)
    return report
