"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: each operation stores its parent tensors
and a vector-Jacobian closure on the output, and :func:`backward` replays the
recorded nodes exactly once in reverse topological order, accumulating
gradients additively across fan-out. Complex values are carried as
(real, imaginary) plane pairs so one set of real-valued rules covers all the
complex arithmetic used by the rest of the package.

Everything computes in double precision; gradient checks against central
finite differences are part of the test suite and rely on that.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateVectorError,
    DimensionError,
    IterationLimitError,
    SymmetryError,
    UnsupportedOpError,
)


class Tensor:
    """A float64 array node in the autodiff graph.

    Leaf tensors created with ``requires_grad=True`` receive a ``.grad``
    array after :func:`backward`. Interior nodes keep references to their
    parents plus the closure that maps the output adjoint to parent adjoints;
    that record *is* the gradient tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __neg__(self):
        return neg(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A non-differentiable tensor (graph leaf with no gradient slot)."""
    return Tensor(x, requires_grad=False)


def _node(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum the adjoint ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def relu(a) -> Tensor:
    """Elementwise max(0, x). Idempotent; callers apply it per complex plane."""
    a = as_tensor(a)
    mask = a.data > 0

    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _node(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def clamp_min(a, floor: float) -> Tensor:
    """max(x, floor) elementwise, with zero gradient on the clamped entries."""
    a = as_tensor(a)
    mask = a.data > floor
    return _node(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def softmax(a, axis=-1) -> Tensor:
    """Shift-stabilized softmax along ``axis``; empty input is rejected."""
    a = as_tensor(a)
    if a.data.size == 0:
        raise DimensionError("softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (a,), vjp)


# ---------------------------------------------------------------------------
# composed operations used throughout the model
# ---------------------------------------------------------------------------


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale ``v`` to unit Euclidean norm; raises on a near-zero vector."""
    v = as_tensor(v)
    norm = float(np.linalg.norm(v.data))
    if norm <= eps:
        raise DegenerateVectorError(f"cannot normalize vector with norm {norm:.3e}")
    return v * (1.0 / norm) if not v.requires_grad else v / sqrt(tsum(v * v))


def kl_divergence(p: Tensor, q: Tensor, floor: float = 1e-12) -> Tensor:
    """KL(p || q) = sum p * log(p / q), with both logs floored at ``floor``.

    The p-side floor only matters when a softmax output underflows to an
    exact zero; the term then contributes 0 * log(floor) = 0 instead of NaN.
    """
    return tsum(p * (log(clamp_min(p, floor)) - log(clamp_min(q, floor))))


def cross_entropy_logits(logits: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of a logit vector against an integer label."""
    z = logits.reshape(-1)
    n = z.data.size
    if not 0 <= label < n:
        raise DimensionError(f"label {label} out of range for {n} logits")
    shift = float(z.data.max())
    lse = log(tsum(exp(z - shift))) + shift
    onehot = np.zeros(n)
    onehot[label] = 1.0
    return lse - tsum(z * constant(onehot))


def frobenius_norm(a: Tensor, eps: float = 0.0) -> Tensor:
    """sqrt(sum x^2 + eps^2) - eps; the eps > 0 variant is smooth at zero."""
    s = tsum(a * a)
    if eps == 0.0:
        return sqrt(s)
    return sqrt(s + eps * eps) - eps


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    na2 = tsum(a * a)
    nb2 = tsum(b * b)
    if float(na2.data) <= eps * eps or float(nb2.data) <= eps * eps:
        raise DegenerateVectorError("cosine similarity of a near-zero vector")
    return tsum(a * b) / sqrt(na2 * nb2)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor):
    order = []
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss, accumulating into leaf ``.grad``."""
    if loss.data.size != 1:
        raise DimensionError("backward expects a scalar loss")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if not node._parents:
            continue
        if node._vjp is None:
            raise UnsupportedOpError("graph node has parents but no gradient rule")
        if node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
        # interior adjoints are scratch state; clearing them lets a subgraph
        # (e.g. a cached fractional matrix) be swept again later
        node.grad = None


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# dense symmetric eigensolver (plan construction, not on the gradient path)
# ---------------------------------------------------------------------------


def sym_eig(m: np.ndarray, sym_tol: float = 1e-12):
    """Eigendecompose a real symmetric matrix.

    Returns (eigenvalues ascending, orthonormal eigenvector columns).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DimensionError("matrix has non-finite entries")
    if np.abs(m - m.T).max() > sym_tol:
        raise SymmetryError("matrix is not symmetric within tolerance")
    try:
        w, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise IterationLimitError(f"eigensolver did not converge: {exc}") from exc
    return w, v


# ---------------------------------------------------------------------------
# complex values as paired real planes
# ---------------------------------------------------------------------------


class ComplexTensor:
    """A complex array held as two real tensors (real plane, imaginary plane).

    Real linear maps act identically on both planes, which is why the model
    never needs complex-valued autodiff rules.
    """

    __slots__ = ("re", "im")

    def __init__(self, re: Tensor, im: Tensor):
        re, im = as_tensor(re), as_tensor(im)
        if re.shape != im.shape:
            raise DimensionError(f"plane shapes differ: {re.shape} vs {im.shape}")
        self.re = re
        self.im = im

    @property
    def shape(self):
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    def __add__(self, other: "ComplexTensor") -> "ComplexTensor":
        return ComplexTensor(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "ComplexTensor") -> "ComplexTensor":
        return ComplexTensor(self.re - other.re, self.im - other.im)


def complex_from_real(t) -> ComplexTensor:
    t = as_tensor(t)
    return ComplexTensor(t, constant(np.zeros_like(t.data)))


def complex_constant(z: np.ndarray) -> ComplexTensor:
    z = np.asarray(z)
    return ComplexTensor(constant(z.real.astype(np.float64)), constant(z.imag.astype(np.float64)))


def cscale(x: ComplexTensor, s: Tensor) -> ComplexTensor:
    """Multiply both planes by a real (broadcastable) factor."""
    return ComplexTensor(mul(s, x.re), mul(s, x.im))


def cmatmul_real(x: ComplexTensor, w: Tensor) -> ComplexTensor:
    """x @ w for real ``w``: the same matmul on each plane."""
    return ComplexTensor(matmul(x.re, w), matmul(x.im, w))


def cmatmul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """Full complex product a @ b from four real matmuls."""
    re = matmul(a.re, b.re) - matmul(a.im, b.im)
    im = matmul(a.re, b.im) + matmul(a.im, b.re)
    return ComplexTensor(re, im)


def cmatmul_hermitian(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """a @ conj(b).T, the score product used by attention."""
    re = matmul(a.re, b.re.T) + matmul(a.im, b.im.T)
    im = matmul(a.im, b.re.T) - matmul(a.re, b.im.T)
    return ComplexTensor(re, im)


def crelu(x: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(relu(x.re), relu(x.im))


def cmean_rows(x: ComplexTensor) -> ComplexTensor:
    return ComplexTensor(tmean(x.re, axis=0, keepdims=True), tmean(x.im, axis=0, keepdims=True))


def cflatten(x: ComplexTensor) -> Tensor:
    """Concatenate [Re; Im] into one real vector."""
    return concat([x.re.reshape(-1), x.im.reshape(-1)])
