"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable quantity in the fitting pipeline is a ``Tensor``
wrapping a float64 ndarray.  Operations record their inputs and a
vector-Jacobian product on the node, so the executed graph is the tape.
``backward`` walks the tape once in reverse topological order and
accumulates adjoints additively; running the same subgraph twice and
summing therefore doubles every gradient, and parameters keep their
``.grad`` buffer until ``zero_grad``.

Only the ops the renderer/extractor/losses need are implemented; all of
them are array-valued so a fit step records hundreds of nodes, not
millions.
"""

from __future__ import annotations

import numpy as np


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Node of the tape: a float64 array plus optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    # keep numpy from broadcasting into object arrays; reflected
    # operators on Tensor handle ndarray-Tensor arithmetic instead
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = _as_array(data)
        self.grad = None
        needs = requires_grad or any(p.requires_grad for p in parents)
        self.requires_grad = needs
        # Constants do not need their history kept alive.
        self._parents = parents if needs else ()
        self._vjp = vjp if needs else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(astensor(other), -1.0))

    def __rsub__(self, other):
        return add(astensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- backward ------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate adjoints into ``.grad`` of every reachable grad leaf.

        The loss must be scalar unless an explicit `seed` adjoint of the
        same shape is supplied.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward requires a scalar loss, got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        order = _topo_order(self)
        adjoint = {id(self): _as_array(seed)}
        for node in reversed(order):
            adj = adjoint.pop(id(node), None)
            if adj is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = adj.copy()
                    else:
                        node.grad += adj
                continue
            for parent, pgrad in zip(node._parents, node._vjp(adj)):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pgrad
                else:
                    adjoint[key] = pgrad


def _topo_order(root: Tensor) -> list:
    """Iterative DFS postorder (graphs are deep enough to break recursion)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def backprop(loss: Tensor, params=None) -> dict:
    """Run the tape backward and return {parameter: gradient array}.

    When `params` is omitted the gradients of every grad-enabled leaf
    reached from `loss` are returned (keyed by the Tensor object).
    """
    loss.backward()
    if params is None:
        params = [n for n in _topo_order(loss) if n._vjp is None and n.requires_grad]
    return {p: (np.zeros_like(p.data) if p.grad is None else p.grad) for p in params}


# -- elementwise binary ops ---------------------------------------------


def add(a, b):
    a, b = astensor(a), astensor(b)
    out = Tensor(
        a.data + b.data,
        parents=(a, b),
        vjp=lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )
    return out


def mul(a, b):
    a, b = astensor(a), astensor(b)
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = astensor(a), astensor(b)
    return Tensor(
        a.data / b.data,
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a, p: float):
    a = astensor(a)
    p = float(p)
    return Tensor(
        a.data**p,
        parents=(a,),
        vjp=lambda g: (g * p * a.data ** (p - 1.0),),
    )


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = astensor(a), astensor(b)
    take_a = a.data >= b.data
    return Tensor(
        np.maximum(a.data, b.data),
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        ),
    )


def minimum(a, b):
    a, b = astensor(a), astensor(b)
    take_a = a.data <= b.data
    return Tensor(
        np.minimum(a.data, b.data),
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        ),
    )


def where(cond, a, b):
    """`cond` is a plain boolean array, never differentiated."""
    cond = np.asarray(cond, dtype=bool)
    a, b = astensor(a), astensor(b)
    return Tensor(
        np.where(cond, a.data, b.data),
        parents=(a, b),
        vjp=lambda g: (
            _unbroadcast(g * cond, a.data.shape),
            _unbroadcast(g * ~cond, b.data.shape),
        ),
    )


# -- elementwise unary ops ------------------------------------------------


def exp(a):
    a = astensor(a)
    val = np.exp(a.data)
    return Tensor(val, parents=(a,), vjp=lambda g: (g * val,))


def log(a):
    a = astensor(a)
    return Tensor(np.log(a.data), parents=(a,), vjp=lambda g: (g / a.data,))


def sqrt(a):
    a = astensor(a)
    val = np.sqrt(a.data)
    return Tensor(val, parents=(a,), vjp=lambda g: (g * 0.5 / val,))


def tanh(a):
    a = astensor(a)
    val = np.tanh(a.data)
    return Tensor(val, parents=(a,), vjp=lambda g: (g * (1.0 - val * val),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = astensor(a)
    val = _sigmoid(a.data)
    return Tensor(val, parents=(a,), vjp=lambda g: (g * val * (1.0 - val),))


def softplus_values(x: np.ndarray) -> np.ndarray:
    """max(x,0) + log1p(exp(-|x|)) with in-place intermediates.

    Matches logaddexp(0, x) to the last couple of ulps but runs several
    times faster on large arrays; stable in both tails.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    np.abs(x, out=out)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(x, 0.0)
    return out


def softplus(a):
    a = astensor(a)
    val = softplus_values(a.data)
    return Tensor(val, parents=(a,), vjp=lambda g: (g * _sigmoid(a.data),))


def absolute(a):
    a = astensor(a)
    sign = np.sign(a.data)
    return Tensor(np.abs(a.data), parents=(a,), vjp=lambda g: (g * sign,))


def clip(a, lo: float, hi: float):
    """Clamp with pass-through gradient on the closed interval [lo, hi]."""
    a = astensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor(
        np.clip(a.data, lo, hi), parents=(a,), vjp=lambda g: (g * inside,)
    )


# -- reductions and shape ops ---------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    val = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return Tensor(val, parents=(a,), vjp=vjp)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def cumsum(a, axis: int):
    a = astensor(a)

    def vjp(g):
        flipped = np.flip(g, axis=axis)
        return (np.flip(np.cumsum(flipped, axis=axis), axis=axis),)

    return Tensor(np.cumsum(a.data, axis=axis), parents=(a,), vjp=vjp)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-d operands only")
    return Tensor(
        a.data @ b.data,
        parents=(a, b),
        vjp=lambda g: (g @ b.data.T, a.data.T @ g),
    )


def reshape(a, shape):
    a = astensor(a)
    old = a.data.shape
    return Tensor(
        a.data.reshape(shape), parents=(a,), vjp=lambda g: (g.reshape(old),)
    )


def getitem(a, key):
    """Basic slicing and integer-array indexing; scatter-add on the way back."""
    a = astensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return Tensor(a.data[key], parents=(a,), vjp=vjp)


def take(a, index: np.ndarray):
    """Gather rows along axis 0 with a fast bincount backward."""
    a = astensor(a)
    index = np.asarray(index, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.data)
        flat_idx = index.ravel()
        if a.data.ndim == 1:
            out[:] = np.bincount(flat_idx, weights=g.ravel(), minlength=a.data.shape[0])
        elif a.data.ndim == 2:
            g2 = g.reshape(-1, a.data.shape[1])
            for c in range(a.data.shape[1]):
                out[:, c] = np.bincount(
                    flat_idx, weights=g2[:, c], minlength=a.data.shape[0]
                )
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor(a.data[index], parents=(a,), vjp=vjp)


def segment_sum(a, segment_ids: np.ndarray, num_segments: int):
    """out[s] = sum of rows of `a` whose segment id is s."""
    a = astensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    if a.data.ndim == 1:
        val = np.bincount(segment_ids, weights=a.data, minlength=num_segments)
    else:
        val = np.empty((num_segments, a.data.shape[1]))
        for c in range(a.data.shape[1]):
            val[:, c] = np.bincount(
                segment_ids, weights=a.data[:, c], minlength=num_segments
            )
    return Tensor(val, parents=(a,), vjp=lambda g: (g[segment_ids],))


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        vjp=vjp,
    )


def stack(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor(
        np.stack([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        vjp=vjp,
    )


def scatter_set(base, index: np.ndarray, src):
    """Copy of `base` with rows at `index` replaced by `src`.

    Rows of `base` that were overwritten receive zero adjoint; `index`
    must not contain duplicates for the forward/backward pair to agree.
    """
    base, src = astensor(base), astensor(src)
    index = np.asarray(index, dtype=np.intp)
    val = base.data.copy()
    val[index] = src.data

    def vjp(g):
        gb = g.copy()
        gb[index] = 0.0
        return (gb, g[index])

    return Tensor(val, parents=(base, src), vjp=vjp)


def dot_rows(a, b):
    """Row-wise dot product of two (N, D) tensors -> (N,)."""
    return tsum(mul(a, b), axis=1)


def norm_rows(a, eps: float = 0.0):
    """Row-wise Euclidean norm of an (N, D) tensor -> (N,)."""
    sq = tsum(mul(a, a), axis=1)
    if eps:
        sq = add(sq, eps)
    return sqrt(sq)
