"""Deep GP: a stack of sparse variational layers trained on a sampled ELBO."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import gradient_of, value_of
from .errors import DimensionMismatch
from .kernels import LinearMean, NoisyKernel, RbfArd, ZeroMean
from .layer import GPLayer, MarginalGaussians, kl_to_prior, layer_factors, marginal_posterior, sample_through
from .likelihoods import Bernoulli, Gaussian
from .rng import RngStream

CHECKPOINT_FORMAT = "dsdgp-checkpoint"
PREDICT_ROW_BUDGET = 20_000  # rows (samples x points) evaluated per chunk


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    data_fit: float
    kl_sum: float
    samples_used: int


@dataclass(frozen=True)
class DGPModel:
    layers: tuple
    likelihood: Gaussian | Bernoulli
    num_data: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.d_out != nxt.d_in:
                raise DimensionMismatch(f"layer output dim {prev.d_out} feeds a layer expecting {nxt.d_in}")
        for layer in self.layers[:-1]:
            if not (isinstance(layer.kernel, NoisyKernel) and isinstance(layer.mean_fn, LinearMean)):
                raise ValueError("inner layers need a noisy kernel and a linear mean function")
        last = self.layers[-1]
        if isinstance(last.kernel, NoisyKernel) or not isinstance(last.mean_fn, ZeroMean):
            raise ValueError("the output layer needs a plain kernel and a zero mean function")

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].d_out

    @property
    def depth(self) -> int:
        return len(self.layers)

    def params(self) -> dict:
        """Flat name -> unconstrained array mapping of every trainable value."""
        out = {}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.params().items()})
        out.update({f"likelihood.{k}": v for k, v in self.likelihood.params().items()})
        return out

    def bind(self, values: Mapping) -> "DGPModel":
        """Copy of the model with parameters taken from ``values`` (arrays or Vars)."""
        layers = []
        for i, layer in enumerate(self.layers):
            prefix = f"layers.{i}."
            layers.append(layer.bind({k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}))
        lik = self.likelihood.bind({k[len("likelihood."):]: v for k, v in values.items() if k.startswith("likelihood.")})
        return replace(self, layers=tuple(layers), likelihood=lik)

    # checkpoints ------------------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            kern = layer.kernel
            base = kern.base if isinstance(kern, NoisyKernel) else kern
            kd = {
                "log_variance": float(value_of(base.log_variance)),
                "log_lengthscales": np.asarray(value_of(base.log_lengthscales)).tolist(),
            }
            if isinstance(kern, NoisyKernel):
                kd["log_noise"] = float(value_of(kern.log_noise))
            if isinstance(layer.mean_fn, LinearMean):
                mean = {"type": "linear", "W": layer.mean_fn.W.tolist()}
            else:
                mean = {"type": "zero"}
            layers.append({
                "d_in": layer.d_in,
                "d_out": layer.d_out,
                "num_inducing": layer.num_inducing,
                "z": np.asarray(value_of(layer.z)).tolist(),
                "q_mu": np.asarray(value_of(layer.q_mu)).tolist(),
                "q_sqrt": np.asarray(value_of(layer.q_sqrt)).tolist(),
                "kernel": kd,
                "mean_function": mean,
            })
        if isinstance(self.likelihood, Gaussian):
            lik = {"type": "gaussian", "log_variance": float(value_of(self.likelihood.log_variance))}
        else:
            lik = {"type": "bernoulli", "quadrature_order": self.likelihood.quadrature_order}
        return {"format": CHECKPOINT_FORMAT, "version": 1, "num_data": self.num_data, "likelihood": lik, "layers": layers}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DGPModel":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a dsdgp checkpoint document")
        layers = []
        for ld in doc["layers"]:
            kd = ld["kernel"]
            kern = RbfArd(np.array(kd["log_variance"]), np.array(kd["log_lengthscales"], dtype=float))
            if "log_noise" in kd:
                kern = NoisyKernel(kern, np.array(kd["log_noise"]))
            md = ld["mean_function"]
            mean = LinearMean(np.array(md["W"], dtype=float)) if md["type"] == "linear" else ZeroMean(ld["d_out"])
            m = ld["num_inducing"]
            layers.append(GPLayer(
                np.array(ld["z"], dtype=float).reshape(m, ld["d_in"]),
                np.array(ld["q_mu"], dtype=float).reshape(m, ld["d_out"]),
                np.array(ld["q_sqrt"], dtype=float).reshape(ld["d_out"], -1),
                kern,
                mean,
            ))
        lik_doc = doc["likelihood"]
        if lik_doc["type"] == "gaussian":
            lik = Gaussian(np.array(lik_doc["log_variance"]))
        else:
            lik = Bernoulli(lik_doc["quadrature_order"])
        return cls(tuple(layers), lik, doc["num_data"])

    def save(self, path) -> None:
        # json writes floats with repr(), the shortest string that round-trips exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DGPModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# sampling ------------------------------------------------------------------

def draw_eps(model: DGPModel, rng: RngStream, n_rows: int, num_layers: int | None = None, samples: int = 1) -> list:
    """Standard normals for ``num_layers`` leading layers, shape (samples, n_rows, D_l) each."""
    if num_layers is None:
        num_layers = model.depth
    return [rng.standard_normal((samples, n_rows, layer.d_out)) for layer in model.layers[:num_layers]]


def prior_factors(model: DGPModel) -> list:
    """Per-layer factors shared by all terms of one evaluation."""
    return [layer_factors(layer) for layer in model.layers]


def _flatten_eps(eps, rows):
    return np.reshape(eps, (rows, -1))


def propagate(model: DGPModel, x, rng: RngStream | None = None, eps: Sequence | None = None, factors=None) -> list:
    """Draw f^1..f^L at each row of ``x`` layer by layer.

    Fresh noise comes from ``rng`` unless ``eps`` (one ``(N, D_l)`` array per
    layer) is supplied.
    """
    n = np.shape(value_of(x))[0]
    if eps is None:
        if rng is None:
            raise ValueError("either rng or eps is required")
        eps = [e[0] for e in draw_eps(model, rng, n)]
    if len(eps) < model.depth:
        raise ValueError(f"need eps for {model.depth} layers, got {len(eps)}")
    factors = factors or prior_factors(model)
    out, h = [], x
    for layer, e, fac in zip(model.layers, eps, factors):
        h = sample_through(layer, h, _flatten_eps(e, n), fac)
        out.append(h)
    return out


def final_marginals(model: DGPModel, x, eps: Sequence, samples: int, factors=None) -> MarginalGaussians:
    """Output-layer marginals given sampled inner layers, over ``samples`` tiled copies of ``x``.

    Row ``s * N + i`` of the result belongs to sample ``s`` and point ``i``;
    ``eps`` holds one ``(samples, N, D_l)`` array per inner layer.
    """
    n = np.shape(value_of(x))[0]
    h = x if samples == 1 else np.tile(x, (samples, 1))
    factors = factors or prior_factors(model)
    for layer, e, fac in zip(model.layers[:-1], eps, factors):
        h = sample_through(layer, h, _flatten_eps(e, samples * n), fac)
    return marginal_posterior(model.layers[-1], h, factors[-1])


# objective -----------------------------------------------------------------

def elbo_terms(model: DGPModel, x, y, eps: Sequence, samples: int = 1):
    """``(data_fit, kl_sum)`` of the doubly stochastic bound; may be graph nodes."""
    b = np.shape(value_of(x))[0]
    factors = prior_factors(model)
    marg = final_marginals(model, x, eps, samples, factors)
    y_rep = np.tile(np.asarray(y, dtype=float).reshape(b, -1), (samples, 1))
    fit = ad.sum_(model.likelihood.expected_log_lik(marg.mean, marg.variance, y_rep))
    data_fit = fit * (model.num_data / (b * samples))
    kl = None
    for layer, fac in zip(model.layers, factors):
        term = kl_to_prior(layer, fac)
        kl = term if kl is None else kl + term
    return data_fit, kl


def _resolve_eps(model, rng, eps, rows, samples):
    if eps is not None:
        return [np.reshape(e, (samples, rows, -1)) for e in eps]
    if rng is None:
        raise ValueError("either rng or eps is required")
    return draw_eps(model, rng, rows, model.depth - 1, samples)


def elbo(model: DGPModel, x_batch, y_batch, rng: RngStream | None = None, mc_samples: int = 1, eps=None) -> ElboEstimate:
    """Unbiased estimate of the bound from one minibatch.

    ``eps`` optionally fixes the inner-layer noise: one array per inner
    layer, shaped ``(mc_samples, B, D_l)``.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    x_batch = np.asarray(x_batch, dtype=float)
    eps = _resolve_eps(model, rng, eps, len(x_batch), mc_samples)
    data_fit, kl = elbo_terms(model, x_batch, y_batch, eps, mc_samples)
    data_fit, kl = float(data_fit), float(kl)
    return ElboEstimate(data_fit - kl, data_fit, kl, mc_samples)


def elbo_and_gradient(model: DGPModel, x_batch, y_batch, rng: RngStream | None = None, mc_samples: int = 1, eps=None):
    """ELBO estimate plus its gradient w.r.t. ``model.params()`` at fixed noise."""
    x_batch = np.asarray(x_batch, dtype=float)
    eps = _resolve_eps(model, rng, eps, len(x_batch), mc_samples)

    def objective(p):
        data_fit, kl = elbo_terms(model.bind(p), x_batch, y_batch, eps, mc_samples)
        return data_fit - kl, (float(value_of(data_fit)), float(value_of(kl)))

    tape = gradient_of(objective, model.params(), has_aux=True)
    data_fit, kl = tape.aux
    return ElboEstimate(tape.value, data_fit, kl, mc_samples), tape


# prediction ----------------------------------------------------------------

def log_mean_exp(a, axis=0):
    """``log(mean(exp(a)))`` along ``axis`` without overflow."""
    return logsumexp(a, axis=axis) - np.log(np.shape(a)[axis])


def mixture_moments(means, variances):
    """Mean and variance of an equally weighted mixture; components on axis 0."""
    mu = np.mean(means, axis=0)
    return mu, np.mean(variances, axis=0) + np.mean((means - mu) ** 2, axis=0)


def _component_marginals(model, x_star, rng, samples, eps):
    """Yield ``(rows, mean, var)`` with mean/var shaped (samples, len(rows), D_L)."""
    x_star = np.asarray(x_star, dtype=float)
    t = len(x_star)
    factors = prior_factors(model)
    chunk = max(1, PREDICT_ROW_BUDGET // samples)
    for start in range(0, t, chunk):
        rows = np.arange(start, min(t, start + chunk))
        if eps is not None:
            e = [np.reshape(np.asarray(v)[:, rows], (samples, len(rows), -1)) for v in eps]
        else:
            e = draw_eps(model, rng, len(rows), model.depth - 1, samples)
        marg = final_marginals(model, x_star[rows], e, samples, factors)
        shape = (samples, len(rows), model.output_dim)
        yield rows, marg.mean.reshape(shape), marg.variance.reshape(shape)


def predict_density(model: DGPModel, x_star, y_star, rng: RngStream | None = None, mc_samples: int = 100, eps=None) -> np.ndarray:
    """log q(y*) under the equally weighted Gaussian mixture over samples."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    y_star = np.asarray(y_star, dtype=float).reshape(len(x_star), -1)
    out = np.empty(len(x_star))
    for rows, mean, var in _component_marginals(model, x_star, rng, mc_samples, eps):
        comp = np.stack([model.likelihood.predictive_log_density(mean[s], var[s], y_star[rows]) for s in range(mc_samples)])
        out[rows] = log_mean_exp(comp, axis=0)
    return out


def predict_moments(model: DGPModel, x_star, rng: RngStream | None = None, mc_samples: int = 100, eps=None):
    """Mean and variance of the predictive mixture (observation noise included)."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    t = len(x_star)
    mean_out = np.empty((t, model.output_dim))
    var_out = np.empty((t, model.output_dim))
    for rows, mean, var in _component_marginals(model, x_star, rng, mc_samples, eps):
        mean_out[rows], var_out[rows] = mixture_moments(*model.likelihood.predictive_moments(mean, var))
    return mean_out, var_out


def predict_proba(model: DGPModel, x_star, rng: RngStream | None = None, mc_samples: int = 100, eps=None) -> np.ndarray:
    """Mixture probability of label 1 (Bernoulli likelihood only)."""
    if not isinstance(model.likelihood, Bernoulli):
        raise TypeError("predict_proba needs a Bernoulli likelihood")
    out = np.empty((len(x_star), model.output_dim))
    for rows, mean, var in _component_marginals(model, x_star, rng, mc_samples, eps):
        out[rows] = model.likelihood.predict_proba(mean, var).mean(axis=0)
    return out
