"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: each operation records its parent tensors and a closure
that maps the output gradient onto parent-gradient contributions.
``backward`` walks the recorded graph exactly once in reverse
topological order and accumulates into ``Tensor.grad``.

Shape discipline is strict: binary elementwise ops require equal shapes,
the only implicit broadcast is scalar-with-tensor.  Everything else is a
named structured op (``add_rowvec``, ``scale_rows``, ...) whose shape
contract is part of its signature.  Every forward result is checked for
NaN/Inf and raises NumericError immediately, so a diverging computation
fails at the op that produced it rather than at the loss.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_node_ids = itertools.count()


class Tensor:
    """A dense float64 array plus its position in the current graph.

    ``grad`` is populated on leaves by backward() and accumulates across
    repeated backward calls until ``zero_grad`` resets it.  ``_cot`` is
    the per-pass cotangent buffer; it never outlives one backward call.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward_fn", "_op", "_cot")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values produced by '{_op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward_fn = _backward
        self._op = _op
        self._cot: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no graph history, no gradient requirement."""
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def _accum_cot(self, g: np.ndarray) -> None:
        if self._cot is None:
            self._cot = np.zeros_like(self.data)
        self._cot += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, id={self.node_id})"

    # Operator sugar for the common arithmetic; scalars auto-wrap.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar loss.

    Visits each node exactly once in reverse topological order; repeated
    calls without zero_grad accumulate.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen and p.requires_grad:
                stack.append((p, False))

    loss._accum_cot(np.ones_like(loss.data))
    for node in reversed(order):
        g = node._cot
        node._cot = None
        if g is None:
            continue
        if node._backward_fn is None:
            # Leaf: transfer this pass's cotangent into the persistent grad.
            if node.requires_grad:
                node.accumulate_grad(g)
        else:
            node._backward_fn(g)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _check_binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # Equal shapes, or one side is a scalar (the only implicit broadcast).
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Undo scalar broadcasting when accumulating into a scalar operand.
    if shape == ():
        return np.asarray(g.sum())
    return g


def _binary(a, b, fwd, da, db, name: str) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a, b, name)
    # Overflow/zero-division surface as NumericError via the finiteness
    # check in the constructor; numpy's own warning is redundant here.
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out = Tensor(fwd(a.data, b.data), _parents=(a, b), _op=name)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot(_reduce_to(da(g, a.data, b.data), a.shape))
        if b.requires_grad:
            b._accum_cot(_reduce_to(db(g, a.data, b.data), b.shape))

    out._backward_fn = bwd
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary(
        a, b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
        "div",
    )


def _unary(a: Tensor, fwd, dfn, name: str) -> Tensor:
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out = Tensor(fwd(a.data), _parents=(a,), _op=name)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot(dfn(g, a.data, out.data))

    out._backward_fn = bwd
    return out


def neg(a: Tensor) -> Tensor:
    return _unary(a, lambda x: -x, lambda g, x, y: -g, "neg")


def exp(a: Tensor) -> Tensor:
    return _unary(a, np.exp, lambda g, x, y: g * y, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log of non-positive value")
    return _unary(a, np.log, lambda g, x, y: g / x, "log")


def relu(a: Tensor) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0.0), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    # Subgradient at 0 follows the negative branch (slope), like the relu 0.
    return _unary(
        a,
        lambda x: np.where(x > 0.0, x, slope * x),
        lambda g, x, y: g * np.where(x > 0.0, 1.0, slope),
        "leaky_relu",
    )


def tanh(a: Tensor) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y), "tanh")


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # Two-branch form: never exponentiates a large positive argument.
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    return _unary(a, _sigmoid_values, lambda g, x, y: g * y * (1.0 - y), "sigmoid")


def absolute(a: Tensor) -> Tensor:
    # Subgradient of |x| at 0 is taken as 0.
    return _unary(a, np.abs, lambda g, x, y: g * np.sign(x), "abs")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    # Gradient passes only strictly inside the interval.
    return _unary(
        a,
        lambda x: np.clip(x, lo, hi),
        lambda g, x, y: g * ((x > lo) & (x < hi)),
        "clip",
    )


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape), _parents=(a,), _op="reshape")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot(g.reshape(a.shape))

    out._backward_fn = bwd
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T, _parents=(a,), _op="transpose")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot(g.T)

    out._backward_fn = bwd
    return out


def stack_cols(vectors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors [n] into a matrix [n x K]."""
    n = vectors[0].data.shape
    for v in vectors:
        if v.ndim != 1 or v.shape != n:
            raise ShapeError("stack_cols expects equal-length vectors")
    out = Tensor(np.stack([v.data for v in vectors], axis=1), _parents=tuple(vectors), _op="stack_cols")

    def bwd(g: np.ndarray) -> None:
        for j, v in enumerate(vectors):
            if v.requires_grad:
                v._accum_cot(g[:, j])

    out._backward_fn = bwd
    return out


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product [m x k] @ [k x n]; backward dA = g Bᵀ, dB = Aᵀ g."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), _op="matmul")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot(g @ b.data.T)
        if b.requires_grad:
            b._accum_cot(a.data.T @ g)

    out._backward_fn = bwd
    return out


def tensor_sum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), _parents=(a,), _op="sum")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot(np.broadcast_to(g, a.shape).copy())

    out._backward_fn = bwd
    return out


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean(), _parents=(a,), _op="mean")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot(np.broadcast_to(g / n, a.shape).copy())

    out._backward_fn = bwd
    return out


def sum_axis(a: Tensor, axis: int) -> Tensor:
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"sum_axis: axis {axis} out of range for shape {a.shape}")
    out = Tensor(a.data.sum(axis=axis), _parents=(a,), _op="sum_axis")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    out._backward_fn = bwd
    return out


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a vector [d] to every row of a matrix [n x d]."""
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: incompatible shapes {x.shape} and {v.shape}")
    out = Tensor(x.data + v.data[None, :], _parents=(x, v), _op="add_rowvec")

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accum_cot(g)
        if v.requires_grad:
            v._accum_cot(g.sum(axis=0))

    out._backward_fn = bwd
    return out


def sub_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Subtract a vector [d] from every row of a matrix [n x d]."""
    return add_rowvec(x, neg(v))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a matrix [n x d] by scalar s[i]."""
    if x.ndim != 2 or s.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows: incompatible shapes {x.shape} and {s.shape}")
    out = Tensor(x.data * s.data[:, None], _parents=(x, s), _op="scale_rows")

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accum_cot(g * s.data[:, None])
        if s.requires_grad:
            s._accum_cot((g * x.data).sum(axis=1))

    out._backward_fn = bwd
    return out


def select_col(x: Tensor, j: int) -> Tensor:
    """Column j of a matrix [n x K] as a vector [n]."""
    if x.ndim != 2 or not (0 <= j < x.shape[1]):
        raise ShapeError(f"select_col: column {j} of shape {x.shape}")
    out = Tensor(x.data[:, j].copy(), _parents=(x,), _op="select_col")

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, j] = g
            x._accum_cot(full)

    out._backward_fn = bwd
    return out


def take(x: Tensor, i: int) -> Tensor:
    """Element i of a vector [n] as a scalar."""
    if x.ndim != 1 or not (0 <= i < x.shape[0]):
        raise ShapeError(f"take: index {i} of shape {x.shape}")
    out = Tensor(x.data[i], _parents=(x,), _op="take")

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[i] = g
            x._accum_cot(full)

    out._backward_fn = bwd
    return out


def diag_part(a: Tensor) -> Tensor:
    """Diagonal of a square matrix as a vector."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag_part expects a square matrix, got {a.shape}")
    out = Tensor(np.diagonal(a.data).copy(), _parents=(a,), _op="diag_part")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.fill_diagonal(full, g)
            a._accum_cot(full)

    out._backward_fn = bwd
    return out


def symmetrize(a: Tensor) -> Tensor:
    """(A + Aᵀ)/2; linear and self-adjoint, so backward is itself."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"symmetrize expects a square matrix, got {a.shape}")
    out = Tensor((a.data + a.data.T) / 2.0, _parents=(a,), _op="symmetrize")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot((g + g.T) / 2.0)

    out._backward_fn = bwd
    return out


def _cholesky_or_raise(a: np.ndarray, op: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as err:
        raise NumericError(f"{op}: matrix is not positive definite") from err


def matrix_inverse_psd(a: Tensor) -> Tensor:
    """Inverse of a positive-definite matrix.

    Positive definiteness is checked with a Cholesky factorization, but
    value and gradient use general-matrix semantics (d(A⁻¹) = -A⁻¹ dA A⁻¹
    with transposes), so every matrix entry is an independent variable.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix_inverse_psd expects a square matrix, got {a.shape}")
    _cholesky_or_raise(a.data, "matrix_inverse_psd")
    inv = np.linalg.inv(a.data)
    out = Tensor(inv, _parents=(a,), _op="matrix_inverse_psd")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot(-inv.T @ g @ inv.T)

    out._backward_fn = bwd
    return out


def logdet_psd(a: Tensor) -> Tensor:
    """log|A| for a positive-definite matrix; backward is A⁻ᵀ."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"logdet_psd expects a square matrix, got {a.shape}")
    _cholesky_or_raise(a.data, "logdet_psd")
    sign, ld = np.linalg.slogdet(a.data)
    if sign <= 0.0:
        raise NumericError("logdet_psd: non-positive determinant")
    out = Tensor(ld, _parents=(a,), _op="logdet_psd")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum_cot(float(g) * np.linalg.inv(a.data).T)

    out._backward_fn = bwd
    return out


# ---------------------------------------------------------------------------
# row-structured nonlinearities
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of [n x K], stabilized by row-max subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, _parents=(x,), _op="softmax_rows")

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            x._accum_cot(y * (g - dot))

    out._backward_fn = bwd
    return out


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of [n x K] as a vector [n]; backward is softmax."""
    if x.ndim != 2:
        raise ShapeError(f"logsumexp_rows expects a matrix, got shape {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = Tensor((m + np.log(s)).reshape(-1), _parents=(x,), _op="logsumexp_rows")

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accum_cot(g[:, None] * (e / s))

    out._backward_fn = bwd
    return out


def l2_norm_rows(x: Tensor) -> Tensor:
    """Euclidean norm of each row of [n x d]; subgradient 0 at zero rows."""
    if x.ndim != 2:
        raise ShapeError(f"l2_norm_rows expects a matrix, got shape {x.shape}")
    r = np.sqrt((x.data * x.data).sum(axis=1))
    out = Tensor(r, _parents=(x,), _op="l2_norm_rows")

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            safe = np.where(r > 0.0, r, 1.0)
            x._accum_cot(np.where(r[:, None] > 0.0, g[:, None] * x.data / safe[:, None], 0.0))

    out._backward_fn = bwd
    return out


def _as_batch(a: Tensor) -> Tensor:
    # A rank-1 tensor is a single sample, not a batch of scalars.
    return reshape(a, (1, a.shape[0])) if a.ndim == 1 else a


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the batch of the per-sample sum of absolute differences."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shape mismatch {a.shape} vs {b.shape}")
    d = _as_batch(sub(a, b))
    return mean(sum_axis(absolute(d), 1))


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the batch of the per-sample Euclidean distance."""
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance: shape mismatch {a.shape} vs {b.shape}")
    d = _as_batch(sub(a, b))
    return mean(l2_norm_rows(d))


# ---------------------------------------------------------------------------
# numeric differentiation (used by the verify command and the test suite)
# ---------------------------------------------------------------------------

def numeric_gradient(f: Callable[[], Tensor], wrt: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. one tensor.

    ``f`` must rebuild its graph from the current leaf values on every
    call; entries of ``wrt.data`` are perturbed in place.
    """
    base = wrt.data
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f().item()
        flat[i] = keep - h
        lo = f().item()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def gradient_check(f: Callable[[], Tensor], wrt: Tensor, h: float = 1e-5) -> float:
    """Max relative error |analytic - numeric| / max(1, |analytic|)."""
    zero_grad([wrt])
    loss = f()
    backward(loss)
    analytic = wrt.grad if wrt.grad is not None else np.zeros_like(wrt.data)
    numeric = numeric_gradient(f, wrt, h=h)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
