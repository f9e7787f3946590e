"""Dense float64 tensors with reverse-mode automatic differentiation.

Covers exactly the operation set the model and losses need: elementwise
arithmetic with broadcasting, matmul (batched), reductions, softmax,
row-wise cosine, sample covariance, Gaussian and discrete KL divergences.
Gradients accumulate into leaves flagged ``requires_grad``; frozen leaves
simply carry ``requires_grad=False`` and are pruned from the graph.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateInputError,
    InsufficientSamplesError,
    NumericalError,
    ShapeError,
    SimplexError,
    UsageError,
)

ROW_NORM_EPS = 1e-12
PD_JITTER = 1e-6
PROB_FLOOR = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the backward closure that produced it.

    Values are treated as immutable after construction; reassigning
    ``.data`` is reserved for the optimizer, which only touches leaves
    between graph builds.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents

    # ------------------------------------------------------------------ basic

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    # ------------------------------------------------------------- graph core

    def backward(self):
        """Reverse-mode pass from a scalar node; accumulates into leaves."""
        if self.size != 1:
            raise UsageError("backward requires a scalar root")
        if not np.isfinite(self.data):
            raise NumericalError("backward from a non-finite scalar")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            g = node.grad
            for parent, fn in node._parents:
                if not parent.requires_grad:
                    continue
                contrib = fn(g)
                if parent.grad is None:
                    parent.grad = contrib.copy() if contrib.base is not None else contrib
                else:
                    parent.grad = parent.grad + contrib

    # ------------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data
        return _node(out_data, [
            (self, lambda g: _unbroadcast(g, self.shape)),
            (other, lambda g: _unbroadcast(g, other.shape)),
        ])

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        out_data = self.data - other.data
        return _node(out_data, [
            (self, lambda g: _unbroadcast(g, self.shape)),
            (other, lambda g: _unbroadcast(-g, other.shape)),
        ])

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data
        return _node(out_data, [
            (self, lambda g: _unbroadcast(g * other.data, self.shape)),
            (other, lambda g: _unbroadcast(g * self.data, other.shape)),
        ])

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data
        return _node(out_data, [
            (self, lambda g: _unbroadcast(g / other.data, self.shape)),
            (other, lambda g: _unbroadcast(-g * self.data / other.data ** 2,
                                           other.shape)),
        ])

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _node(-self.data, [(self, lambda g: -g)])

    def __pow__(self, p):
        p = float(p)
        out_data = self.data ** p
        return _node(out_data, [
            (self, lambda g: g * p * self.data ** (p - 1.0)),
        ])

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul requires >= 2-d operands")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul inner extents differ: {a.shape} @ {b.shape}")
        out_data = np.matmul(a, b)
        return _node(out_data, [
            (self, lambda g: _unbroadcast(
                np.matmul(g, b.swapaxes(-1, -2)), a.shape)),
            (other, lambda g: _unbroadcast(
                np.matmul(a.swapaxes(-1, -2), g), b.shape)),
        ])

    def __getitem__(self, idx):
        out_data = self.data[idx]
        shape = self.shape

        def back(g):
            z = np.zeros(shape, dtype=np.float64)
            np.add.at(z, idx, g)
            return z

        return _node(out_data, [(self, back)])

    # -------------------------------------------------------------- reshaping

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _node(self.data.reshape(shape),
                     [(self, lambda g: g.reshape(old))])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _node(self.data.transpose(axes),
                     [(self, lambda g: g.transpose(inv))])

    @property
    def T(self):
        return self.transpose()

    # ------------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return _node(out_data, [(self, back)])

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ------------------------------------------------------------- elementwise

    def exp(self):
        out_data = np.exp(self.data)
        return _node(out_data, [(self, lambda g: g * out_data)])

    def log(self):
        out_data = np.log(self.data)
        return _node(out_data, [(self, lambda g: g / self.data)])

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return _node(out_data, [(self, lambda g: g * 0.5 / out_data)])

    def relu(self):
        mask = self.data > 0.0
        return _node(np.where(mask, self.data, 0.0),
                     [(self, lambda g: g * mask)])

    def clamp_min(self, floor: float):
        mask = self.data > floor
        return _node(np.where(mask, self.data, floor),
                     [(self, lambda g: g * mask)])


def _node(data: np.ndarray, srcs) -> Tensor:
    parents = tuple((t, fn) for t, fn in srcs if t.requires_grad)
    if parents:
        return Tensor(data, requires_grad=True, _parents=parents)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ------------------------------------------------------------------ operations


def matmul(a, b) -> Tensor:
    return as_tensor(a) @ as_tensor(b)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically safe softmax along ``axis`` (max subtraction)."""
    x = as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _node(y, [(x, back)])


def mean(x, axis=None, keepdims=False) -> Tensor:
    return as_tensor(x).mean(axis=axis, keepdims=keepdims)


def rowwise_cosine(a, b) -> Tensor:
    """Per-row cosine similarity between two B x D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"rowwise_cosine expects equal 2-d shapes, "
                         f"got {a.shape} and {b.shape}")
    na2 = (a * a).sum(axis=1)
    nb2 = (b * b).sum(axis=1)
    if (na2.data < ROW_NORM_EPS ** 2).any() or (nb2.data < ROW_NORM_EPS ** 2).any():
        raise DegenerateInputError("rowwise_cosine: near-zero row norm")
    return (a * b).sum(axis=1) / (na2.sqrt() * nb2.sqrt())


def covariance(x) -> Tensor:
    """Unbiased sample covariance (N-1 divisor) of an N x D tensor.

    Symmetrized explicitly so the output is bitwise symmetric.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"covariance expects an N x D tensor, got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise InsufficientSamplesError("covariance needs at least 2 rows")
    xc = x - x.mean(axis=0, keepdims=True)
    m = (xc.T @ xc) * (1.0 / (n - 1))
    return (m + m.T) * 0.5


def gaussian_kl(sigma1, sigma2) -> Tensor:
    """KL between zero-mean Gaussians with the given covariance matrices.

    Both inputs are symmetrized and jittered by ``PD_JITTER`` * I before
    factorization; the gradient is of this regularized function.
    """
    sigma1, sigma2 = as_tensor(sigma1), as_tensor(sigma2)
    if (sigma1.ndim != 2 or sigma1.shape[0] != sigma1.shape[1]
            or sigma1.shape != sigma2.shape):
        raise ShapeError("gaussian_kl expects two equal square matrices")
    d = sigma1.shape[0]
    eye = np.eye(d)
    a = 0.5 * (sigma1.data + sigma1.data.T) + PD_JITTER * eye
    b = 0.5 * (sigma2.data + sigma2.data.T) + PD_JITTER * eye
    try:
        la = np.linalg.cholesky(a)
        lb = np.linalg.cholesky(b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"gaussian_kl factorization failed: {exc}") from exc
    logdet_a = 2.0 * np.log(np.diag(la)).sum()
    logdet_b = 2.0 * np.log(np.diag(lb)).sum()
    a_inv = np.linalg.inv(a)
    b_inv = np.linalg.inv(b)
    val = 0.5 * (np.trace(b_inv @ a) - d + logdet_b - logdet_a)

    def back_1(g):
        grad = 0.5 * (b_inv - a_inv)
        return float(g) * 0.5 * (grad + grad.T)

    def back_2(g):
        grad = 0.5 * (b_inv - b_inv @ a @ b_inv)
        return float(g) * 0.5 * (grad + grad.T)

    return _node(np.float64(val), [(sigma1, back_1), (sigma2, back_2)])


def kl_discrete(p, q, simplex_tol: float = 1e-6) -> Tensor:
    """KL(p || q) for discrete distributions, with 0 * log 0 = 0."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError("kl_discrete expects two equal 1-d tensors")
    for name, v in (("p", p.data), ("q", q.data)):
        if abs(v.sum() - 1.0) > simplex_tol or (v < -simplex_tol).any():
            raise SimplexError(f"kl_discrete: {name} is not on the simplex")
    qf = np.maximum(q.data, PROB_FLOOR)
    pos = p.data > 0.0
    log_ratio = np.where(pos, np.log(np.maximum(p.data, PROB_FLOOR)) - np.log(qf), 0.0)
    val = np.float64((p.data * log_ratio).sum())

    def back_p(g):
        return float(g) * np.where(pos, log_ratio + 1.0, 0.0)

    def back_q(g):
        return float(g) * np.where(q.data > PROB_FLOOR, -p.data / qf, 0.0)

    return _node(val, [(p, back_p), (q, back_q)])


def finite_diff_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Richardson-extrapolated central-difference gradient of a scalar
    function, one element at a time.

    Combining central differences at steps ``h`` and ``h/2`` as
    ``(4 D(h/2) - D(h)) / 3`` cancels the leading O(h^2) truncation term.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)

    def central(i: int, step: float) -> float:
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        return (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * step)

    for i in range(x.size):
        flat[i] = (4.0 * central(i, h / 2.0) - central(i, h)) / 3.0
    return grad
