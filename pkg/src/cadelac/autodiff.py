"""Vectorized forward-mode differentiation.

A :class:`Dual` carries a value array ``val`` of shape ``S`` and a tangent
array ``tan`` of shape ``S + (D,)`` holding ``D`` directional derivatives.
The module-level functions dispatch on type so the same dynamics code runs
on plain ``ndarray`` inputs (fast path) or on ``Dual`` inputs (exact
Jacobians).
"""
from __future__ import annotations

import numpy as np

_TAN = "Z"


class Dual:
    __slots__ = ("val", "tan")
    __array_priority__ = 1000

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=float)
        self.tan = np.asarray(tan, dtype=float)

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def n_dirs(self):
        return self.tan.shape[-1]

    def __repr__(self):
        return f"Dual(shape={self.val.shape}, n_dirs={self.n_dirs})"

    def _bcast(self, shape):
        if self.val.shape == shape:
            return self.tan
        return np.broadcast_to(self.tan, shape + (self.n_dirs,))

    def __add__(self, other):
        if isinstance(other, Dual):
            val = self.val + other.val
            return Dual(val, self._bcast(val.shape) + other._bcast(val.shape))
        val = self.val + other
        return Dual(val, self._bcast(val.shape))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            val = self.val - other.val
            return Dual(val, self._bcast(val.shape) - other._bcast(val.shape))
        val = self.val - other
        return Dual(val, self._bcast(val.shape))

    def __rsub__(self, other):
        val = other - self.val
        return Dual(val, -self._bcast(val.shape))

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.tan * other.val[..., None] + self.val[..., None] * other.tan)
        other = np.asarray(other, dtype=float)
        return Dual(self.val * other, self.tan * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            return self * Dual(inv, -other.tan * (inv * inv)[..., None])
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        return Dual(other * inv, -(other * inv * inv)[..., None] * self.tan)

    def __pow__(self, p):
        return Dual(self.val ** p, (p * self.val ** (p - 1))[..., None] * self.tan)

    def __matmul__(self, other):
        if isinstance(other, Dual) or np.ndim(other) != 2:
            raise TypeError("Dual @ only supports a constant 2-D right operand; use einsum")
        return einsum("...k,km->...m", self, other)

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.val[idx], self.tan[idx + (slice(None),)])

    def sum(self, axis=None):
        if axis is None:
            return Dual(self.val.sum(), self.tan.reshape(-1, self.n_dirs).sum(0))
        axis = _norm_axis(axis, self.val.ndim)
        return Dual(self.val.sum(axis), self.tan.sum(axis))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        val = self.val.reshape(shape)
        return Dual(val, self.tan.reshape(val.shape + (self.n_dirs,)))


def _norm_axis(axis, ndim):
    return axis + ndim if axis < 0 else axis


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def seed(x, n_dirs=None, offset=0):
    """Lift ``x`` (shape ``(..., k)``) to a Dual seeded with unit directions.

    Direction ``offset + j`` is the derivative with respect to ``x[..., j]``.
    """
    x = np.asarray(x, dtype=float)
    k = x.shape[-1]
    n_dirs = k if n_dirs is None else n_dirs
    tan = np.zeros(x.shape + (n_dirs,))
    tan[..., np.arange(k), offset + np.arange(k)] = 1.0
    return Dual(x, tan)


def _unary(x, f, df):
    if isinstance(x, Dual):
        v = f(x.val)
        return Dual(v, df(x.val, v)[..., None] * x.tan)
    return f(x)


def sin(x):
    return _unary(x, np.sin, lambda a, v: np.cos(a))


def cos(x):
    return _unary(x, np.cos, lambda a, v: -np.sin(a))


def tanh(x):
    return _unary(x, np.tanh, lambda a, v: 1.0 - v * v)


def exp(x):
    return _unary(x, np.exp, lambda a, v: v)


def sqrt(x):
    return _unary(x, np.sqrt, lambda a, v: 0.5 / v)


def sigmoid_np(a):
    out = np.empty_like(a, dtype=float)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def softplus_np(a):
    a = np.asarray(a, dtype=float)
    # log(1 + exp(a)) overflows for large a; the function is the identity there
    return np.where(a > 30.0, a, np.log1p(np.exp(np.minimum(a, 30.0))))


def sigmoid(x):
    return _unary(x, sigmoid_np, lambda a, v: v * (1.0 - v))


def softplus(x):
    return _unary(x, softplus_np, lambda a, v: sigmoid_np(a))


def einsum(subscripts: str, *operands):
    """``np.einsum`` with the product rule applied to every Dual operand.

    Subscripts must spell out the output (``'...ij,...j->...i'``).
    """
    duals = [i for i, op in enumerate(operands) if isinstance(op, Dual)]
    if not duals:
        return np.einsum(subscripts, *operands)
    vals = [op.val if isinstance(op, Dual) else op for op in operands]
    out = np.einsum(subscripts, *vals)
    inputs, output = subscripts.replace(" ", "").split("->")
    inputs = inputs.split(",")
    tan = None
    for i in duals:
        ins = list(inputs)
        ins[i] = ins[i] + _TAN
        ops = list(vals)
        ops[i] = operands[i].tan
        term = np.einsum(",".join(ins) + "->" + output + _TAN, *ops)
        tan = term if tan is None else tan + term
    return Dual(out, np.broadcast_to(tan, out.shape + (tan.shape[-1],)))


def stack(arrays, axis=0):
    if not any(isinstance(a, Dual) for a in arrays):
        return np.stack(arrays, axis=axis)
    n_dirs = next(a.n_dirs for a in arrays if isinstance(a, Dual))
    vals = [value(a) for a in arrays]
    out = np.stack(vals, axis=axis)
    axis = _norm_axis(axis, out.ndim)
    tans = [a.tan if isinstance(a, Dual) else np.zeros(np.shape(a) + (n_dirs,)) for a in arrays]
    shape = np.broadcast_shapes(*[t.shape for t in tans])
    tans = [np.broadcast_to(t, shape) for t in tans]
    return Dual(out, np.stack(tans, axis=axis))


def concatenate(arrays, axis=-1):
    if not any(isinstance(a, Dual) for a in arrays):
        return np.concatenate(arrays, axis=axis)
    n_dirs = next(a.n_dirs for a in arrays if isinstance(a, Dual))
    vals = [value(a) for a in arrays]
    out = np.concatenate(vals, axis=axis)
    axis = _norm_axis(axis, out.ndim)
    tans = [a.tan if isinstance(a, Dual) else np.zeros(np.shape(a) + (n_dirs,)) for a in arrays]
    return Dual(out, np.concatenate(tans, axis=axis))


def zeros_like(x):
    if isinstance(x, Dual):
        return Dual(np.zeros_like(x.val), np.zeros_like(x.tan))
    return np.zeros_like(x, dtype=float)


def solve(a, b):
    """Solve ``a @ x = b`` for a batch of square matrices and vectors ``b[..., n]``."""
    av = value(a)
    x = np.linalg.solve(av, value(b)[..., None])[..., 0]
    if not (isinstance(a, Dual) or isinstance(b, Dual)):
        return x
    rhs = b.tan if isinstance(b, Dual) else 0.0
    if isinstance(a, Dual):
        rhs = rhs - np.einsum("...ijZ,...j->...iZ", a.tan, x)
    rhs = np.broadcast_to(rhs, x.shape + (rhs.shape[-1],))
    return Dual(x, np.linalg.solve(av, rhs))


def cho_solve(a, b):
    """Solve with a symmetric positive definite ``a``.

    Raises ``numpy.linalg.LinAlgError`` when ``a`` is not positive definite.
    """
    av = value(a)
    chol = np.linalg.cholesky(av)
    if isinstance(a, Dual) or isinstance(b, Dual):
        return solve(a, b)
    y = np.linalg.solve(chol, np.asarray(b, dtype=float)[..., None])
    return np.linalg.solve(np.swapaxes(chol, -1, -2), y)[..., 0]


def jacobian(f, x):
    """Value and Jacobian ``df/dx`` of ``f`` at ``x`` (last axis of ``x`` is the input)."""
    out = f(seed(x))
    if not isinstance(out, Dual):
        v = np.asarray(out, dtype=float)
        return v, np.zeros(v.shape + (np.shape(x)[-1],))
    return out.val, out.tan
