"""Shared builders and oracles for the test suite."""

import numpy as np

from dsdgp.kernels import LinearMean, NoisyKernel, RbfArd, ZeroMean, build_inner_mean
from dsdgp.layer import GPLayer, pack_lower
from dsdgp.likelihoods import Gaussian
from dsdgp.model import DGPModel


def random_lower(rng, d, m, scale=0.3):
    f = np.tril(rng.normal(scale=scale, size=(d, m, m)), -1)
    idx = np.arange(m)
    f[:, idx, idx] = rng.uniform(0.3, 1.2, size=(d, m))
    return f


def random_layer(rng, m, d_in, d_out, noisy=False, linear_mean=False):
    z = rng.normal(size=(m, d_in))
    base = RbfArd.create(rng.uniform(0.5, 2.0), rng.uniform(0.7, 2.0, size=d_in))
    kernel = NoisyKernel.create(base, rng.uniform(0.01, 0.1)) if noisy else base
    if linear_mean:
        mean_fn = build_inner_mean(rng.normal(size=(20, d_in)), d_out)
    else:
        mean_fn = ZeroMean(d_out)
    q_mu = rng.normal(size=(m, d_out))
    return GPLayer(z, q_mu, pack_lower(random_lower(rng, d_out, m)), kernel, mean_fn)


def random_model(rng, dims, m, num_data, noise=0.3):
    """Stack of random layers with widths ``dims = [D0, D1, ..., DL]``."""
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        inner = i < len(dims) - 2
        layers.append(random_layer(rng, m, a, b, noisy=inner, linear_mean=inner))
    return DGPModel(tuple(layers), Gaussian.create(noise), num_data)


def finite_difference(f, params, step=1e-5):
    """Central differences of scalar ``f(params)`` for every entry of every array."""
    out = {}
    for name, v in params.items():
        v = np.asarray(v, dtype=float)
        g = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            up = {k: np.array(p, dtype=float) for k, p in params.items()}
            dn = {k: np.array(p, dtype=float) for k, p in params.items()}
            up[name][i] += step
            dn[name][i] -= step
            g[i] = (f(up) - f(dn)) / (2 * step)
        out[name] = g
    return out


def assert_grads_close(tape, fd, rtol=1e-4):
    for name, g in fd.items():
        err = np.abs(tape[name] - g) / np.maximum(1.0, np.abs(g))
        assert err.max() <= rtol, f"{name}: max rel error {err.max():.2e}"


def rbf(a, b, variance, lengthscales):
    d = (a[:, None, :] - b[None, :, :]) / lengthscales
    return variance * np.exp(-0.5 * np.sum(d * d, axis=-1))


def exact_gp_lml(x, y, variance, lengthscales, noise):
    """log N(y | 0, K + noise I) via a Cholesky factor."""
    n = len(x)
    k = rbf(x, x, variance, lengthscales) + noise * np.eye(n)
    l = np.linalg.cholesky(k)
    a = np.linalg.solve(l, y)
    return float(-0.5 * np.sum(a * a) - np.sum(np.log(np.diag(l))) - 0.5 * n * np.log(2 * np.pi))


def optimal_single_layer(x, y, variance, lengthscale, noise):
    """L=1 model with Z = X and q(u) at the exact GP posterior over f(X)."""
    from dsdgp.layer import GPLayer, pack_lower

    n = len(x)
    k = rbf(x, x, variance, np.atleast_1d(lengthscale))
    a = k @ np.linalg.inv(k + noise * np.eye(n))
    s = k - a @ k
    s = 0.5 * (s + s.T)
    layer = GPLayer(x, a @ y, pack_lower(np.linalg.cholesky(s)[None]), RbfArd.create(variance, np.atleast_1d(lengthscale)), ZeroMean(1))
    return DGPModel((layer,), Gaussian.create(noise), n)


def hidden_quadrature_data_fit(model, x, y, order=50):
    """Data-fit term of a 2-layer model with a 1-D hidden layer by Gauss-Hermite over f^1."""
    from dsdgp.layer import marginal_posterior

    first, last = model.layers
    h = marginal_posterior(first, x)
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    total = 0.0
    for i in range(len(x)):
        f1 = (h.mean[i, 0] + np.sqrt(2.0 * h.variance[i, 0]) * nodes)[:, None]
        out = marginal_posterior(last, f1)
        ell = model.likelihood.expected_log_lik(out.mean, out.variance, np.repeat(y[[i]], order, axis=0))
        total += np.sum(weights * ell) / np.sqrt(np.pi)
    return total * model.num_data / len(x)


def sampled_data_fits(model, x, y, eps):
    """Per-draw data fit for inner noise ``eps`` of shape (S, N, 1)."""
    from dsdgp.model import final_marginals

    s, n = eps.shape[:2]
    marg = final_marginals(model, x, [eps], s)
    ell = model.likelihood.expected_log_lik(marg.mean, marg.variance, np.tile(y, (s, 1)))
    return ell.reshape(s, n).sum(axis=1) * model.num_data / n
