"""Dense float64 tensors with reverse-mode automatic differentiation.

Storage is contiguous row-major numpy float64; structural ops (reshape,
transpose, slicing, concat) copy rather than alias. Every operation whose
inputs participate in gradient tracking records its inputs and a local
gradient rule on the output; calling ``backward()`` on a scalar walks the
recorded graph once, in reverse topological order, and accumulates ``grad``
on every reachable tensor with ``requires_grad``. Gradients of broadcast
operands are summed over the broadcast axes so ``grad`` always matches
``data`` in shape.

A graph supports exactly one ``backward()``; a second call raises unless
``reset_grads`` was invoked on the root first. Silent double accumulation is
the classic correctness trap this guards against.
"""

import numpy as np

_grad_enabled = True
_corrupt_op = None


class no_grad:
    """Context manager that disables graph recording (pure evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled():
    return _grad_enabled


def set_gradient_corruption(op_tag):
    """Test hook: scale the output gradient of nodes tagged ``op_tag`` by 1.5.

    Deliberately breaks the chain rule for one primitive so the gradient
    checker can demonstrate that it catches wrong gradients. Pass ``None``
    to restore correct behaviour. Never enable outside that negative control.
    """
    global _corrupt_op
    _corrupt_op = op_tag


def _contig(a):
    # ascontiguousarray would promote 0-d arrays to shape (1,); avoid that
    return a if a.flags["C_CONTIGUOUS"] else np.ascontiguousarray(a)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` over axes introduced or stretched by broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _accum(t, g):
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_op", "_backward_ran")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        self.data = _contig(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = ""
        self._backward_ran = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        """Copy of the underlying array, detached from any graph."""
        return self.data.copy()

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) on every reachable leaf with requires_grad.

        ``self`` must be a scalar. Raises on a second call for the same graph;
        call ``reset_grads(self)`` first if a fresh accumulation is wanted.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        if self._backward_ran:
            raise RuntimeError(
                "backward() already ran for this graph; rebuild the graph or "
                "call reset_grads(root) before running it again")
        self._backward_ran = True
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            fn = node._backward
            if fn is None:
                continue
            if _corrupt_op is not None and node._op == _corrupt_op and node.grad is not None:
                node.grad = node.grad * 1.5
            if node.grad is None:
                continue
            fn()

    # -- operator overloads ---------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # method-style spellings used all over the package
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def relu(self):
        return relu(self)

    def silu(self):
        return silu(self)

    def softplus(self):
        return softplus(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def graph_op(data, parents, op_tag):
    """Create an op-output tensor; caller attaches ``out._backward`` after.

    Records ``parents`` only when gradient mode is on and at least one parent
    takes gradients, so pure evaluation builds no graph.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op_tag
    return out


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def reset_grads(root):
    """Clear grads over the whole graph and re-arm ``backward`` on the root."""
    for node in _toposort(root):
        node.grad = None
    root._backward_ran = False


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# -- elementwise primitives -------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    out = graph_op(np.add(a.data, b.data), (a, b), "add")
    if out._parents:
        def bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))
        out._backward = bw
    return out


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = graph_op(np.subtract(a.data, b.data), (a, b), "sub")
    if out._parents:
        def bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.data.shape))
        out._backward = bw
    return out


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = graph_op(np.multiply(a.data, b.data), (a, b), "mul")
    if out._parents:
        def bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))
        out._backward = bw
    return out


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = graph_op(np.divide(a.data, b.data), (a, b), "div")
    if out._parents:
        def bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        out._backward = bw
    return out


def neg(a):
    out = graph_op(np.negative(a.data), (a,), "neg")
    if out._parents:
        def bw():
            _accum(a, -out.grad)
        out._backward = bw
    return out


def exp(a):
    out = graph_op(np.exp(a.data), (a,), "exp")
    if out._parents:
        def bw():
            _accum(a, out.grad * out.data)
        out._backward = bw
    return out


def log(a):
    out = graph_op(np.log(a.data), (a,), "log")
    if out._parents:
        def bw():
            _accum(a, out.grad / a.data)
        out._backward = bw
    return out


def sqrt(a):
    out = graph_op(np.sqrt(a.data), (a,), "sqrt")
    if out._parents:
        def bw():
            _accum(a, out.grad * 0.5 / out.data)
        out._backward = bw
    return out


def sin(a):
    out = graph_op(np.sin(a.data), (a,), "sin")
    if out._parents:
        def bw():
            _accum(a, out.grad * np.cos(a.data))
        out._backward = bw
    return out


def cos(a):
    out = graph_op(np.cos(a.data), (a,), "cos")
    if out._parents:
        def bw():
            _accum(a, -out.grad * np.sin(a.data))
        out._backward = bw
    return out


def relu(a):
    out = graph_op(np.maximum(a.data, 0.0), (a,), "relu")
    if out._parents:
        def bw():
            _accum(a, out.grad * (a.data > 0.0))
        out._backward = bw
    return out


def silu(a):
    """x * sigmoid(x); smooth gate used by the sequence blocks."""
    s = _sigmoid(a.data)
    out = graph_op(a.data * s, (a,), "silu")
    if out._parents:
        def bw():
            _accum(a, out.grad * (s * (1.0 + a.data * (1.0 - s))))
        out._backward = bw
    return out


def softplus(a):
    out = graph_op(np.logaddexp(0.0, a.data), (a,), "softplus")
    if out._parents:
        def bw():
            _accum(a, out.grad * _sigmoid(a.data))
        out._backward = bw
    return out


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "exp": exp, "log": log, "sqrt": sqrt, "sin": sin, "cos": cos,
    "relu": relu, "silu": silu, "softplus": softplus,
}


def elementwise(op, *args):
    """Dispatch an elementwise op by name (used by the gradient-check CLI)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- matrix products ---------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = graph_op(a.data @ b.data, (a, b), "matmul")
    if out._parents:
        def bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        out._backward = bw
    return out


def bmm(a, b):
    """Batched matmul: [n,p,q] @ [n,q,r] -> [n,p,r]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm expects [n,p,q]@[n,q,r], got {a.shape} and {b.shape}")
    out = graph_op(a.data @ b.data, (a, b), "bmm")
    if out._parents:
        def bw():
            g = out.grad
            if a.requires_grad:
                _accum(a, g @ b.data.swapaxes(-1, -2))
            if b.requires_grad:
                _accum(b, a.data.swapaxes(-1, -2) @ g)
        out._backward = bw
    return out


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate reduction axes {axis}")
    return axes


def _check_nonempty(t, axes):
    for ax in axes:
        if t.data.shape[ax] == 0:
            raise ValueError(f"cannot reduce over empty axis {ax} of shape {t.shape}")


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def reduce_sum(t, axis=None, keepdims=False):
    axes = _norm_axes(axis, t.ndim)
    _check_nonempty(t, axes)
    out_data = t.data.sum(axis=axes if axes else None, keepdims=keepdims)
    out = graph_op(out_data, (t,), "sum")
    if out._parents:
        kshape = _keepdims_shape(t.data.shape, axes)
        def bw():
            g = out.grad.reshape(kshape)
            _accum(t, np.broadcast_to(g, t.data.shape).copy())
        out._backward = bw
    return out


def reduce_mean(t, axis=None, keepdims=False):
    axes = _norm_axes(axis, t.ndim)
    _check_nonempty(t, axes)
    count = 1
    for ax in axes:
        count *= t.data.shape[ax]
    out_data = t.data.mean(axis=axes if axes else None, keepdims=keepdims)
    out = graph_op(out_data, (t,), "mean")
    if out._parents:
        kshape = _keepdims_shape(t.data.shape, axes)
        def bw():
            g = out.grad.reshape(kshape) / count
            _accum(t, np.broadcast_to(g, t.data.shape).copy())
        out._backward = bw
    return out


def reduce_max(t, axis=None, keepdims=False):
    """Max over ``axis``; gradient routes to the first maximal element.

    Ties send the whole gradient to the lowest linear index of the reduced
    slice, so the subgradient choice is deterministic and testable.
    """
    axes = _norm_axes(axis, t.ndim)
    _check_nonempty(t, axes)
    out_data = t.data.max(axis=axes if axes else None, keepdims=keepdims)
    out = graph_op(out_data, (t,), "max")
    if out._parents:
        kept = tuple(i for i in range(t.ndim) if i not in axes)
        kshape = _keepdims_shape(t.data.shape, axes)
        def bw():
            g = out.grad.reshape([t.data.shape[i] for i in kept] or [1])
            moved = np.moveaxis(t.data, axes, range(len(kept), t.ndim))
            kept_shape = moved.shape[:len(kept)]
            flat = moved.reshape(kept_shape + (-1,))
            idx = flat.argmax(axis=-1)
            buf = np.zeros_like(flat)
            np.put_along_axis(buf, idx[..., None],
                              g.reshape(kept_shape + (1,)), axis=-1)
            buf = buf.reshape(moved.shape)
            _accum(t, np.moveaxis(buf, range(len(kept), t.ndim), axes))
        out._backward = bw
    return out


_REDUCTIONS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op, t, axis=None, keepdims=False):
    """Dispatch a reduction by name (used by the gradient-check CLI)."""
    try:
        fn = _REDUCTIONS[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return fn(t, axis, keepdims)


# -- movement -----------------------------------------------------------------

def reshape(t, shape):
    out = graph_op(_contig(t.data.reshape(shape)), (t,), "reshape")
    if out._parents:
        def bw():
            _accum(t, out.grad.reshape(t.data.shape))
        out._backward = bw
    return out


def transpose(t, axes=None):
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(a % t.ndim for a in axes)
    out = graph_op(_contig(np.transpose(t.data, axes)), (t,), "transpose")
    if out._parents:
        inv = np.argsort(axes)
        def bw():
            _accum(t, _contig(np.transpose(out.grad, inv)))
        out._backward = bw
    return out


def getitem(t, key):
    out = graph_op(_contig(t.data[key]), (t,), "getitem")
    if out._parents:
        def bw():
            buf = np.zeros_like(t.data)
            np.add.at(buf, key, out.grad)
            _accum(t, buf)
        out._backward = bw
    return out


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = graph_op(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), "concat")
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        def bw():
            offset = 0
            for t, n in zip(tensors, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * out.ndim
                    sl[axis] = slice(offset, offset + n)
                    _accum(t, _contig(out.grad[tuple(sl)]))
                offset += n
        out._backward = bw
    return out


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = graph_op(np.stack([t.data for t in tensors], axis=axis),
                   tuple(tensors), "stack")
    if out._parents:
        def bw():
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    _accum(t, _contig(np.take(out.grad, i, axis=axis)))
        out._backward = bw
    return out


def pad(t, pads):
    """Zero-pad; ``pads`` is a (before, after) pair per axis."""
    pads = tuple((int(b), int(a)) for b, a in pads)
    out = graph_op(np.pad(t.data, pads), (t,), "pad")
    if out._parents:
        core = tuple(slice(b, b + n) for (b, _), n in zip(pads, t.data.shape))
        def bw():
            _accum(t, _contig(out.grad[core]))
        out._backward = bw
    return out
