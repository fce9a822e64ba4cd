# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
Minimal reverse-mode differentiation over dense float64 arrays.

Values are DenseArray nodes. Operations record themselves on the active Tape
only when at least one input requires a gradient; with no tape active every
op is a plain forward computation. Nodes are appended in creation order, so
walking the tape backwards is a valid reverse topological order.

    with Tape() as tape:
        loss = mean_all(relu(dense(x, w, b)))
    grads = backward(tape, loss)

No broadcasting is performed beyond scalar multiplication; use bias_add and
reshape to make shapes explicit.
"""

from __future__ import annotations

import logging
from contextvars import ContextVar
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from lifseg.errors import NotScalarLoss, ShapeMismatch

logger = logging.getLogger(__name__)

_active_tape: ContextVar[Optional["Tape"]] = ContextVar("lifseg_active_tape", default=None)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DenseArray:
    """A float64 array that may carry a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple[DenseArray, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"DenseArray(op={self.op}, shape={self.shape}{label})"


ArrayLike = Union[DenseArray, np.ndarray, float]


class Tape:
    """Records operations while active; usable as a context manager."""

    def __init__(self):
        self.nodes: List[DenseArray] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)


def parameter(data, name: Optional[str] = None) -> DenseArray:
    """A trainable leaf owning its own copy of data."""
    return DenseArray(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> DenseArray:
    return data if isinstance(data, DenseArray) else DenseArray(data)


def make_node(data: np.ndarray, parents: Sequence[DenseArray], backward_fn: BackwardFn, op: str) -> DenseArray:
    """
    Wrap a forward result as a graph node.

    backward_fn receives the gradient of the output and returns one gradient
    (or None) per parent, in order. Fused operations such as the losses use
    this directly to supply an analytic backward.
    """
    out = DenseArray(data)
    out.op = op
    tape = _active_tape.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def matmul(a: ArrayLike, b: ArrayLike) -> DenseArray:
    a, b = constant(a), constant(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    av, bv = a.data, b.data

    def backward_fn(g):
        return g @ bv.T, av.T @ g

    return make_node(av @ bv, (a, b), backward_fn, "matmul")


def bias_add(x: ArrayLike, bias: ArrayLike) -> DenseArray:
    """x + bias along the last axis."""
    x, bias = constant(x), constant(bias)
    if bias.data.ndim != 1 or x.data.ndim < 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeMismatch("bias_add", x.shape, bias.shape)
    lead = x.data.ndim - 1

    def backward_fn(g):
        return g, g.sum(axis=tuple(range(lead))) if lead else g

    return make_node(x.data + bias.data, (x, bias), backward_fn, "bias_add")


def dense(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> DenseArray:
    out = matmul(x, weight)
    return bias_add(out, bias) if bias is not None else out


def _im2col_3x3(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    shifts = [padded[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
    return np.stack(shifts, axis=3).reshape(n, h, w, 9 * c)


def conv2d_3x3(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> DenseArray:
    """
    Stride-1, zero-padded 3x3 cross-correlation.

    x is n x H x W x Cin, weight is 3 x 3 x Cin x Cout, bias (optional) is Cout.
    out[y, x] = sum over (dy, dx) of in[y + dy - 1, x + dx - 1] . weight[dy, dx].
    """
    x, weight = constant(x), constant(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.shape[:2] != (3, 3) or weight.shape[2] != x.shape[3]:
        raise ShapeMismatch("conv2d_3x3", x.shape, weight.shape)
    n, h, w, cin = x.shape
    cout = weight.shape[3]
    cols = _im2col_3x3(x.data).reshape(-1, 9 * cin)
    kernel = weight.data.reshape(9 * cin, cout)
    out = (cols @ kernel).reshape(n, h, w, cout)

    def backward_fn(g):
        g2 = g.reshape(-1, cout)
        grad_weight = (cols.T @ g2).reshape(3, 3, cin, cout)
        gcols = (g2 @ kernel.T).reshape(n, h, w, 9, cin)
        grad_padded = np.zeros((n, h + 2, w + 2, cin))
        for k in range(9):
            dy, dx = divmod(k, 3)
            grad_padded[:, dy:dy + h, dx:dx + w, :] += gcols[:, :, :, k, :]
        return grad_padded[:, 1:-1, 1:-1, :], grad_weight

    result = make_node(out, (x, weight), backward_fn, "conv2d_3x3")
    return bias_add(result, bias) if bias is not None else result


def conv2d_1x1(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> DenseArray:
    """Per-pixel linear map; weight is Cin x Cout."""
    x, weight = constant(x), constant(weight)
    if x.data.ndim != 4 or weight.data.ndim != 2 or weight.shape[0] != x.shape[3]:
        raise ShapeMismatch("conv2d_1x1", x.shape, weight.shape)
    n, h, w, cin = x.shape
    flat = reshape(x, (n * h * w, cin))
    out = reshape(matmul(flat, weight), (n, h, w, weight.shape[1]))
    return bias_add(out, bias) if bias is not None else out


def relu(x: ArrayLike) -> DenseArray:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    x = constant(x)
    positive = x.data > 0

    def backward_fn(g):
        return (g * positive,)

    return make_node(np.where(positive, x.data, 0.0), (x,), backward_fn, "relu")


def softmax_rows(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim(x: ArrayLike) -> DenseArray:
    x = constant(x)
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeMismatch("softmax_lastdim", x.shape, ("last axis", ">=1"))
    s = softmax_rows(x.data)

    def backward_fn(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return make_node(s, (x,), backward_fn, "softmax_lastdim")


def concat_lastdim(parts: Sequence[ArrayLike]) -> DenseArray:
    parts = [constant(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat_lastdim", (), ())
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.data.ndim != parts[0].data.ndim or p.shape[:-1] != lead:
            raise ShapeMismatch("concat_lastdim", parts[0].shape, p.shape)
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward_fn(g):
        return [g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return make_node(np.concatenate([p.data for p in parts], axis=-1), parts, backward_fn, "concat_lastdim")


def gather_rows(x: ArrayLike, index: np.ndarray) -> DenseArray:
    """
    out[i] = x[index[i]] along axis 0; index -1 yields a zero row.

    Repeated indices accumulate their gradients.
    """
    x = constant(x)
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim < 1 or index.ndim != 1:
        raise ShapeMismatch("gather_rows", x.shape, index.shape)
    rows = x.shape[0]
    valid = index >= 0
    if np.any(index >= rows):
        raise ShapeMismatch("gather_rows", x.shape, (int(index.max()) + 1,))
    out = np.zeros((index.shape[0],) + x.shape[1:])
    out[valid] = x.data[index[valid]]

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index[valid], g[valid])
        return (grad,)

    return make_node(out, (x,), backward_fn, "gather_rows")


def scatter_rows_mean(x: ArrayLike, index: np.ndarray, bucket_count: int) -> DenseArray:
    """
    Mean of the rows of x sharing each bucket id; empty buckets are zero.

    Rows whose index is -1 are ignored.
    """
    x = constant(x)
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeMismatch("scatter_rows_mean", x.shape, index.shape)
    if index.size and index.max() >= bucket_count:
        raise ShapeMismatch("scatter_rows_mean", (bucket_count,), (int(index.max()) + 1,))
    valid = index >= 0
    counts = np.bincount(index[valid], minlength=bucket_count).astype(np.float64)
    sums = np.zeros((bucket_count, x.shape[1]))
    np.add.at(sums, index[valid], x.data[valid])
    safe = np.where(counts > 0, counts, 1.0)
    out = sums / safe[:, None]

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        grad[valid] = g[index[valid]] / safe[index[valid], None]
        return (grad,)

    return make_node(out, (x,), backward_fn, "scatter_rows_mean")


def add(a: ArrayLike, b: ArrayLike) -> DenseArray:
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise ShapeMismatch("add", a.shape, b.shape)

    def backward_fn(g):
        return g, g

    return make_node(a.data + b.data, (a, b), backward_fn, "add")


def mul_scalar(a: ArrayLike, scalar: float) -> DenseArray:
    a = constant(a)
    scalar = float(scalar)

    def backward_fn(g):
        return (g * scalar,)

    return make_node(a.data * scalar, (a,), backward_fn, "mul_scalar")


def mean_all(a: ArrayLike) -> DenseArray:
    a = constant(a)
    size = a.data.size
    if size == 0:
        raise ShapeMismatch("mean_all", a.shape, ("size", ">=1"))

    def backward_fn(g):
        return (np.full(a.shape, float(g) / size),)

    return make_node(np.asarray(a.data.mean()), (a,), backward_fn, "mean_all")


def reshape(a: ArrayLike, shape: Sequence[int]) -> DenseArray:
    a = constant(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeMismatch("reshape", a.shape, shape)
    source = a.shape

    def backward_fn(g):
        return (g.reshape(source),)

    return make_node(a.data.reshape(shape), (a,), backward_fn, "reshape")


def backward(tape: Tape, loss: DenseArray) -> Dict[DenseArray, np.ndarray]:
    """
    Propagate d(loss)/d(node) through the tape.

    Returns:
        {leaf: gradient} for every leaf with requires_grad that the loss
        depends on. Each leaf's .grad is set as well.

    Raises:
        NotScalarLoss: if loss does not hold exactly one value.
    """
    if loss.data.size != 1:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, DenseArray] = {}
    if loss.requires_grad and loss._backward is None:
        leaves[id(loss)] = loss

    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else np.array(pg, dtype=np.float64)
            if parent._backward is None:
                leaves[key] = parent

    result = {}
    for key, leaf in leaves.items():
        leaf.grad = pending.get(key, np.zeros_like(leaf.data)).reshape(leaf.shape)
        result[leaf] = leaf.grad
    return result


def sgd_step(params: Union[Mapping[str, DenseArray], Iterable[DenseArray]],
             grads: Mapping[DenseArray, np.ndarray], lr: float):
    """
    p <- p - lr * g for every parameter; parameters without a gradient are left alone.

    Raises:
        ShapeMismatch: if a gradient's shape differs from its parameter's.
    """
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        g = grads.get(p)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch("sgd_step", p.shape, g.shape)
        p.data = p.data - lr * g
    return params


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int,
                   name: Optional[str] = None) -> DenseArray:
    """Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=tuple(shape)), name=name)


def zeros_parameter(shape: Sequence[int], name: Optional[str] = None) -> DenseArray:
    return parameter(np.zeros(tuple(shape)), name=name)


def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[[], DenseArray], params: Sequence[DenseArray], h: float = 1e-5,
                    max_entries: Optional[int] = None, seed: int = 0, floor: float = 1e-5) -> float:
    """
    Compare backward() against central finite differences.

    Args:
        fn: zero-argument callable returning a scalar loss built from params.
        params: leaves to check; their data is perturbed in place and restored.
        max_entries: when set, check at most this many randomly chosen entries per parameter.

    Returns:
        The largest relative error over every checked entry. An entry failing
        at 1e-4 is re-checked with h = 1e-6 to step inside ReLU kinks.
    """
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)

    def numeric(p, flat_index, step):
        flat = p.data.reshape(-1)
        original = flat[flat_index]
        flat[flat_index] = original + step
        f_plus = float(fn().data)
        flat[flat_index] = original - step
        f_minus = float(fn().data)
        flat[flat_index] = original
        return (f_plus - f_minus) / (2.0 * step)

    worst = 0.0
    for p in params:
        if not p.data.flags.writeable or not p.data.flags.c_contiguous:
            p.data = np.array(p.data, dtype=np.float64)
        analytic = grads.get(p, np.zeros_like(p.data)).reshape(-1)
        entries = np.arange(p.data.size)
        if max_entries is not None and entries.size > max_entries:
            entries = np.sort(rng.choice(entries, size=max_entries, replace=False))
        for flat_index in entries:
            err = _relative_error(analytic[flat_index], numeric(p, flat_index, h), floor)
            if err > 1e-4:
                err = min(err, _relative_error(analytic[flat_index], numeric(p, flat_index, h / 10.0), floor))
            if err > worst:
                logger.debug(f"check_gradients: {p.name or p.op}[{flat_index}] relative error {err:.3e}")
            worst = max(worst, err)
    return worst
