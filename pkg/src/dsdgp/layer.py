"""A sparse variational GP layer with per-point marginals."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .errors import DimensionMismatch
from .kernels import LinearMean, NoisyKernel, RbfArd, ZeroMean, gram, gram_diag
from .linalg import cholesky_with_jitter, logdet_from_cholesky, tri_solve

DEFAULT_JITTER = 1e-6
VARIANCE_FLOOR = 1e-12


def packed_size(m: int) -> int:
    return m * (m + 1) // 2


def packed_diag_positions(m: int) -> np.ndarray:
    i = np.arange(m)
    return i * (i + 3) // 2


def pack_lower(factors) -> np.ndarray:
    """(D, M, M) lower factors with positive diagonals -> packed log-diag rows."""
    factors = np.asarray(factors, dtype=float)
    m = factors.shape[-1]
    rows, cols = np.tril_indices(m)
    packed = factors[..., rows, cols].copy()
    diag = packed_diag_positions(m)
    packed[..., diag] = np.log(packed[..., diag])
    return packed


@dataclass(frozen=True)
class MarginalGaussians:
    mean: object  # (N, D_out)
    variance: object  # (N, D_out), strictly positive


@dataclass(frozen=True)
class GPLayer:
    """One layer of independent GPs sharing inducing inputs and a kernel.

    ``q_sqrt`` holds, per output dimension, the packed lower-triangular
    Cholesky factor of ``S_d`` with its diagonal stored as logarithms.
    """

    z: object  # (M, D_in)
    q_mu: object  # (M, D_out)
    q_sqrt: object  # (D_out, M(M+1)/2)
    kernel: RbfArd | NoisyKernel
    mean_fn: ZeroMean | LinearMean

    def __post_init__(self):
        m, d_in = np.shape(value_of(self.z))
        if np.shape(value_of(self.q_mu)) != (m, self.d_out):
            raise DimensionMismatch(f"q_mu shape {np.shape(value_of(self.q_mu))} != {(m, self.d_out)}")
        if np.shape(value_of(self.q_sqrt)) != (self.d_out, packed_size(m)):
            raise DimensionMismatch("q_sqrt does not match (D_out, M(M+1)/2)")
        if self.kernel.input_dim != d_in:
            raise DimensionMismatch("kernel input dim differs from inducing inputs")

    @classmethod
    def create(cls, z, kernel, mean_fn, d_out: int, q_mu=None, q_sqrt_scale: float = 1.0):
        z = np.array(z, dtype=float)
        m = z.shape[0]
        if q_mu is None:
            q_mu = np.zeros((m, d_out))
        factors = np.broadcast_to(np.sqrt(q_sqrt_scale) * np.eye(m), (d_out, m, m))
        return cls(z, np.array(q_mu, dtype=float), pack_lower(factors), kernel, mean_fn)

    @property
    def num_inducing(self) -> int:
        return np.shape(value_of(self.z))[0]

    @property
    def d_in(self) -> int:
        return np.shape(value_of(self.z))[1]

    @property
    def d_out(self) -> int:
        return np.shape(value_of(self.q_mu))[1]

    @property
    def noisy(self) -> bool:
        return isinstance(self.kernel, NoisyKernel)

    def q_sqrt_factors(self):
        """(D_out, M, M) lower-triangular factors of S_d."""
        return ad.tril_factor(self.q_sqrt, self.num_inducing)

    def stacked_factors_t(self):
        """``L_d^T`` stacked row-wise: shape (D_out * M, M)."""
        return ad.tril_factor(self.q_sqrt, self.num_inducing, stacked_transpose=True)

    def params(self) -> dict:
        out = {"z": self.z, "q_mu": self.q_mu, "q_sqrt": self.q_sqrt}
        out.update({f"kernel.{k}": v for k, v in self.kernel.params().items()})
        return out

    def bind(self, values: Mapping) -> "GPLayer":
        kernel = self.kernel.bind({k[len("kernel."):]: v for k, v in values.items() if k.startswith("kernel.")})
        return replace(self, z=values["z"], q_mu=values["q_mu"], q_sqrt=values["q_sqrt"], kernel=kernel)

    def prior_factor(self, base_jitter: float = DEFAULT_JITTER):
        """Cholesky factor of k(Z, Z) (with noise on the diagonal if noisy)."""
        return cholesky_with_jitter(gram(self.kernel, self.z, same_set=True), base_jitter).factor


class LayerFactors(NamedTuple):
    """Per-evaluation quantities shared by the marginals and the KL term."""

    lz: object  # Cholesky factor of k(Z, Z)
    lz_inv: object  # its inverse
    s_factors_t: object  # stacked L_d^T, (D_out * M, M)


def layer_factors(layer: GPLayer) -> LayerFactors:
    lz = layer.prior_factor()
    # one O(M^3) triangular inverse turns every later solve into a matmul
    lz_inv = tri_solve(lz, np.eye(layer.num_inducing))
    return LayerFactors(lz, lz_inv, layer.stacked_factors_t())


def _sq_norms_by_block(lt, alpha, d: int):
    """``out[n, j] = |(lt @ alpha)[j*M:(j+1)*M, n]|^2`` with a fused adjoint."""
    ltv, av = value_of(lt), value_of(alpha)
    m = ltv.shape[1]
    b = (ltv @ av).reshape(d, m, -1)
    out = np.einsum("jmn,jmn->nj", b, b)

    def vjp(g):
        gb = (2.0 * b * g.T[:, None, :]).reshape(d * m, -1)
        g_lt = gb @ av.T if isinstance(lt, ad.Var) else None
        g_alpha = ltv.T @ gb if isinstance(alpha, ad.Var) else None
        return g_lt, g_alpha

    return ad.primitive(out, (lt, alpha), vjp)


def marginal_posterior(layer: GPLayer, x, factors: LayerFactors | None = None) -> MarginalGaussians:
    """Per-point mean and variance of q(f) at the rows of ``x``."""
    if np.shape(value_of(x))[1] != layer.d_in:
        raise DimensionMismatch(f"inputs have {np.shape(value_of(x))[1]} columns, layer expects {layer.d_in}")
    if factors is None:
        factors = layer_factors(layer)
    kzx = gram(layer.kernel, layer.z, x)
    a = factors.lz_inv @ kzx  # L^-1 k(Z, x)
    alpha = ad.transpose(factors.lz_inv) @ a  # k(Z,Z)^-1 k(Z, x)

    mean = layer.mean_fn(x) + ad.transpose(alpha) @ (layer.q_mu - layer.mean_fn(layer.z))
    # alpha^T S_d alpha = |L_d^T alpha|^2
    s_term = _sq_norms_by_block(factors.s_factors_t, alpha, layer.d_out)
    prior_var = gram_diag(layer.kernel, x, same_set=True) - ad.sum_(ad.square(a), axis=0)
    var = prior_var.reshape(-1, 1) + s_term
    return MarginalGaussians(mean, ad.maximum(var, VARIANCE_FLOOR))


def sample_through(layer: GPLayer, x_hat, eps, factors: LayerFactors | None = None):
    """Reparameterized draw ``mean + eps * sqrt(var)`` at each row of ``x_hat``."""
    marg = marginal_posterior(layer, x_hat, factors)
    if np.shape(eps) != np.shape(value_of(marg.mean)):
        raise DimensionMismatch(f"eps shape {np.shape(eps)} != {np.shape(value_of(marg.mean))}")
    return marg.mean + eps * ad.sqrt(marg.variance)


def kl_to_prior(layer: GPLayer, factors: LayerFactors | None = None):
    """Sum over output dims of KL[N(m_d, S_d) || N(m(Z), k(Z, Z))]."""
    if factors is None:
        factors = layer_factors(layer)
    m, d = layer.num_inducing, layer.d_out
    trace = ad.sum_(ad.square(factors.lz_inv @ ad.transpose(factors.s_factors_t)))
    diff = layer.mean_fn(layer.z) - layer.q_mu
    maha = ad.sum_(ad.square(factors.lz_inv @ diff))
    logdet_s = 2.0 * ad.sum_(layer.q_sqrt[:, packed_diag_positions(m)])
    return 0.5 * (trace + maha - d * m + d * logdet_from_cholesky(factors.lz) - logdet_s)
