"""Cholesky with escalating jitter and triangular solves, both differentiable."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import linalg as sla

from . import autodiff as ad
from .autodiff import Var, primitive, value_of
from .errors import DimensionMismatch, JitterExhausted

JITTER_LEVELS = 9  # base_jitter * 10**k for k = 0..8
# pivots below this fraction of the mean diagonal are treated as a failed
# factorization: they are dominated by round-off
MIN_RELATIVE_PIVOT = 1e-12


class JitteredCholesky(NamedTuple):
    factor: object  # ndarray or Var, lower triangular
    jitter: float


def _try_cholesky(a, scale):
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None
    d = np.diagonal(L)
    if not np.all(np.isfinite(L)) or np.min(d * d) <= MIN_RELATIVE_PIVOT * scale:
        return None
    return L


def _find_jitter(av, base_jitter):
    n = av.shape[0]
    scale = float(np.mean(np.diagonal(av)))
    if not np.isfinite(scale) or scale <= 0:
        raise JitterExhausted(f"matrix diagonal mean is {scale}; cannot factorize")
    L = _try_cholesky(av, scale)
    if L is not None:
        return L, 0.0
    eye = np.eye(n)
    for k in range(JITTER_LEVELS):
        jitter = base_jitter * 10.0**k * scale
        L = _try_cholesky(av + jitter * eye, scale)
        if L is not None:
            return L, jitter
    raise JitterExhausted(
        f"Cholesky failed for a {n}x{n} matrix even with jitter {jitter:.3g}",
        max_jitter=jitter,
    )


def cholesky_with_jitter(a, base_jitter: float = 1e-6) -> JitteredCholesky:
    """Lower Cholesky factor of ``a + jitter * I``.

    The jitter is the first of ``0, base_jitter * 10**k * mean(diag(a))``,
    ``k = 0..8``, for which the factorization succeeds. The jitter is a
    constant of the graph: gradients flow to ``a`` only.
    """
    av = value_of(a)
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {av.shape}")
    asym = np.max(np.abs(av - av.T), initial=0.0)
    if asym > 1e-10 * max(np.max(np.abs(av), initial=0.0), 1e-300):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    L, jitter = _find_jitter(av, base_jitter)

    def vjp(g):
        # adjoint of A = L L^T:  A_bar = L^-T Phi(L^T L_bar) L^-1, symmetrized
        P = np.tril(L.T @ g)
        P[np.diag_indices_from(P)] *= 0.5
        tmp = sla.solve_triangular(L, P, trans="T", lower=True, check_finite=False)
        tmp = sla.solve_triangular(L, tmp.T, trans="T", lower=True, check_finite=False).T
        return (0.5 * (tmp + tmp.T),)

    return JitteredCholesky(primitive(L, (a,), vjp), jitter)


def tri_solve(l, b, transposed: bool = False):
    """Solve ``L x = b`` (or ``L^T x = b``) for lower-triangular ``L``."""
    lv, bv = value_of(l), value_of(b)
    if lv.ndim != 2 or lv.shape[0] != lv.shape[1] or bv.shape[0] != lv.shape[0]:
        raise DimensionMismatch(f"cannot solve {lv.shape} against {bv.shape}")
    trans = "T" if transposed else "N"
    x = sla.solve_triangular(lv, bv, lower=True, trans=trans, check_finite=False)

    def vjp(g):
        gb = sla.solve_triangular(lv, g, lower=True, trans="N" if transposed else "T", check_finite=False)
        gl = None
        if isinstance(l, Var):
            g2 = gb.reshape(len(gb), -1)
            x2 = x.reshape(len(x), -1)
            gl = -np.tril(x2 @ g2.T if transposed else g2 @ x2.T)
        return gl, gb

    return primitive(x, (l, b), vjp)


def logdet_from_cholesky(l):
    """log det(L L^T) = 2 sum(log diag L)."""
    return 2.0 * ad.sum_(ad.log(ad.diagonal(l)))
