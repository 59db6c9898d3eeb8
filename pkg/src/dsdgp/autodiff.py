"""A small reverse-mode differentiation tape over numpy arrays.

Only the handful of primitives the models need are supported. Every op
accepts plain ``numpy`` arrays as well as :class:`Var` nodes; when none of
the inputs is a ``Var`` the op simply returns the numpy result, so the same
model code runs at full speed for prediction and records a graph when it is
called under :func:`gradient_of`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import special

from .errors import UnregisteredParameter


class Var:
    """A node in the computation graph holding an ``ndarray`` value."""

    # make numpy defer to our reflected operators (ndarray + Var -> Var)
    __array_ufunc__ = None
    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape})"

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def primitive(value, parents, vjp):
    """Wrap ``value`` in a node when any of ``parents`` is a ``Var``.

    ``vjp(g)`` maps the output cotangent to a tuple aligned with
    ``parents``; entries for non-``Var`` parents are ignored and may be
    ``None``.
    """
    if not is_var(*parents):
        return value
    return Var(value, tuple(parents), vjp)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return primitive(out, (a, b), lambda g: (unbroadcast(g, np.shape(av)), unbroadcast(g, np.shape(bv))))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return primitive(out, (a, b), lambda g: (unbroadcast(g, np.shape(av)), unbroadcast(-g, np.shape(bv))))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv

    def vjp(g):
        ga = unbroadcast(g * bv, np.shape(av)) if isinstance(a, Var) else None
        gb = unbroadcast(g * av, np.shape(bv)) if isinstance(b, Var) else None
        return ga, gb

    return primitive(out, (a, b), vjp)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv

    def vjp(g):
        ga = unbroadcast(g / bv, np.shape(av)) if isinstance(a, Var) else None
        gb = unbroadcast(-g * out / bv, np.shape(bv)) if isinstance(b, Var) else None
        return ga, gb

    return primitive(out, (a, b), vjp)


def neg(a):
    return primitive(-value_of(a), (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(value_of(a))
    return primitive(out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    return primitive(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(value_of(a))
    return primitive(out, (a,), lambda g: (0.5 * g / out,))


def square(a):
    av = value_of(a)
    return primitive(av * av, (a,), lambda g: (2.0 * g * av,))


def power(a, p):
    av = value_of(a)
    return primitive(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` for a constant ``floor``."""
    av = value_of(a)
    keep = av >= floor
    return primitive(np.where(keep, av, floor), (a,), lambda g: (g * keep,))


def log_ndtr(a):
    """log of the standard normal CDF."""
    av = value_of(a)
    out = special.log_ndtr(av)

    def vjp(g):
        # d/dx log Phi(x) = phi(x) / Phi(x), evaluated in log space
        log_pdf = -0.5 * av * av - 0.5 * np.log(2.0 * np.pi)
        return (g * np.exp(log_pdf - out),)

    return primitive(out, (a,), vjp)


# reductions and shape ------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return primitive(out, (a,), vjp)


def reshape(a, shape):
    av = value_of(a)
    return primitive(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a):
    return swapaxes(a, -1, -2)


def swapaxes(a, i, j):
    av = value_of(a)
    return primitive(np.swapaxes(av, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a, idx):
    av = value_of(a)
    out = av[idx]

    def vjp(g):
        full = np.zeros_like(av)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return primitive(out, (a,), vjp)


def concatenate(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return primitive(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def diagonal(a):
    """Main diagonal of the last two axes."""
    av = value_of(a)
    n = av.shape[-1]

    def vjp(g):
        full = np.zeros_like(av)
        idx = np.arange(n)
        full[..., idx, idx] = g
        return (full,)

    return primitive(np.diagonal(av, axis1=-2, axis2=-1).copy(), (a,), vjp)


# linear algebra ------------------------------------------------------------

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if isinstance(a, Var) else None
        gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if isinstance(b, Var) else None
        return ga, gb

    return primitive(out, (a, b), vjp)


def tril_indices(n):
    return np.tril_indices(n)


def tril_factor(packed, n, stacked_transpose=False):
    """Lower-triangular factors from packed rows with log-diagonal entries.

    ``packed`` has shape ``(D, n(n+1)/2)`` holding each lower triangle in
    row-major order (``numpy.tril_indices``); diagonal entries are stored as
    logarithms so every factor has a strictly positive diagonal. Returns
    ``(D, n, n)`` factors, or with ``stacked_transpose`` the transposes
    stacked into one ``(D * n, n)`` matrix.
    """
    pv = value_of(packed)
    d = pv.shape[0]
    rows, cols = np.tril_indices(n)
    on_diag = rows == cols
    raw = np.where(on_diag, np.exp(pv), pv)
    flat = (cols * n + rows) if stacked_transpose else (rows * n + cols)
    out = np.zeros((d, n * n))
    out[:, flat] = raw
    out = out.reshape((d * n, n) if stacked_transpose else (d, n, n))

    def vjp(g):
        gp = g.reshape(d, n * n)[:, flat]
        return (np.where(on_diag, gp * raw, gp),)

    return primitive(out, (packed,), vjp)


# driver --------------------------------------------------------------------

def _toposort(root):
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
        for p in node.parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(node) for every node; keyed by ``id(node)``."""
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(_toposort(root)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if not isinstance(p, Var) or gp is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                # vjps never write into their outputs, so sharing is safe
                grads[id(p)] = gp
    return grads


@dataclass
class GradientTape:
    """Scalar objective value and one gradient per registered parameter."""

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    aux: object = None

    def __getitem__(self, name):
        try:
            return self.grads[name]
        except KeyError:
            raise UnregisteredParameter(name) from None

    def __contains__(self, name):
        return name in self.grads

    def names(self):
        return list(self.grads)


def gradient_of(objective: Callable, params: Mapping[str, np.ndarray], has_aux=False) -> GradientTape:
    """Evaluate ``objective`` once and differentiate it w.r.t. ``params``.

    ``objective`` receives a dict of leaf ``Var`` nodes with the same keys as
    ``params`` and must return a scalar (or ``(scalar, aux)`` when
    ``has_aux``). Parameters the objective does not touch get zero
    gradients. Any randomness must be fixed by the caller, this function
    evaluates exactly once.
    """
    leaves = {name: Var(np.array(v, dtype=np.float64)) for name, v in params.items()}
    result = objective(leaves)
    aux = None
    if has_aux:
        result, aux = result
    if np.size(value_of(result)) != 1:
        raise ValueError(f"objective must be scalar, got shape {np.shape(value_of(result))}")
    value = float(np.reshape(value_of(result), ()))
    if isinstance(result, Var):
        grads = backward(result)
    else:
        grads = {}
    out = {
        name: np.reshape(grads.get(id(leaf), np.zeros_like(leaf.value)), leaf.shape).copy()
        for name, leaf in leaves.items()
    }
    return GradientTape(value=value, grads=out, aux=aux)
