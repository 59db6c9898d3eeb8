"""Initialization protocol, Adam, and the minibatch training loop."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import DegenerateData, JitterExhausted, NonFiniteLoss, UnregisteredParameter
from .kernels import NoisyKernel, RbfArd, ZeroMean, build_inner_mean
from .layer import GPLayer
from .likelihoods import Bernoulli, Gaussian
from .model import DGPModel, elbo_and_gradient
from .rng import RngStream

log = logging.getLogger(__name__)

# initial values used for every model
KERNEL_VARIANCE = 2.0
KERNEL_LENGTHSCALE = 2.0
LIKELIHOOD_VARIANCE = 0.01
INNER_NOISE = 1e-5
INNER_Q_VARIANCE = 1e-5
MAX_INNER_WIDTH = 30
KMEANS_ITERATIONS = 20


def inner_width(input_dim: int) -> int:
    return min(MAX_INNER_WIDTH, input_dim)


def kmeans_centroids(x, k: int, rng: RngStream) -> np.ndarray:
    """``k`` distinct centroids: Lloyd's algorithm (20 iterations) from a k-means++ start.

    Falls back to ``k`` distinct data rows when clustering leaves duplicate
    centroids (empty clusters).
    """
    x = np.asarray(x, dtype=float)
    distinct = np.unique(x, axis=0)
    if len(distinct) < k:
        raise DegenerateData(f"{k} inducing points requested but data has {len(distinct)} distinct rows")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # empty-cluster warnings are handled below
        centroids, _ = kmeans2(x, k, iter=KMEANS_ITERATIONS, minit="++", rng=rng.generator)
    if len(np.unique(centroids, axis=0)) < k or not np.all(np.isfinite(centroids)):
        log.info("k-means produced duplicate centroids; using distinct data rows")
        centroids = distinct[rng.generator.choice(len(distinct), size=k, replace=False)]
    return centroids


def initialize(x_train, y_train, num_layers: int, num_inducing: int, seed=0, likelihood: str = "gaussian") -> DGPModel:
    """Build a model with the standard initialization.

    Inner layers get width ``min(30, D)``, a noisy RBF kernel and a fixed
    identity/PCA mean; their inducing inputs are the first-layer k-means
    centroids mapped through the preceding mean functions.
    """
    x = np.asarray(x_train, dtype=float)
    y = np.asarray(y_train, dtype=float).reshape(len(x), -1)
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)

    z = kmeans_centroids(x, num_inducing, rng)
    width = inner_width(x.shape[1])
    layers = []
    h = x
    for _ in range(num_layers - 1):
        mean_fn = build_inner_mean(h, width)
        kernel = NoisyKernel.create(RbfArd.create(KERNEL_VARIANCE, KERNEL_LENGTHSCALE, h.shape[1]), INNER_NOISE)
        layers.append(GPLayer.create(z, kernel, mean_fn, width, q_sqrt_scale=INNER_Q_VARIANCE))
        z, h = mean_fn(z), mean_fn(h)
    kernel = RbfArd.create(KERNEL_VARIANCE, KERNEL_LENGTHSCALE, h.shape[1])
    layers.append(GPLayer.create(z, kernel, ZeroMean(y.shape[1]), y.shape[1]))

    if likelihood == "gaussian":
        lik = Gaussian.create(LIKELIHOOD_VARIANCE)
    elif likelihood == "bernoulli":
        lik = Bernoulli()
    else:
        raise ValueError(f"unknown likelihood {likelihood!r}")
    return DGPModel(tuple(layers), lik, len(x))


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(state: AdamState, grads, params: Mapping[str, np.ndarray], maximize: bool = True):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    ``grads`` is a :class:`~dsdgp.autodiff.GradientTape` or a plain mapping.
    With ``maximize`` the step ascends (the ELBO); inputs are not mutated.
    """
    step = state.step + 1
    m1, m2 = {}, {}
    new = {}
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    for name, p in params.items():
        try:
            g = grads[name]
        except KeyError:
            raise UnregisteredParameter(name) from None
        if maximize:
            g = -g
        m = state.beta1 * state.first_moment.get(name, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment.get(name, 0.0) + (1.0 - state.beta2) * (g * g)
        m1[name], m2[name] = m, v
        new[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.epsilon, step, m1, m2)
    return new, new_state


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20_000
    minibatch_size: int = 10_000
    lr: float = 0.01
    mc_samples: int = 1
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.minibatch_size < 1 or self.mc_samples < 1 or self.log_every < 1:
            raise ValueError("minibatch_size, mc_samples and log_every must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass(frozen=True)
class TraceRow:
    step: int
    elbo: float
    data_fit: float
    kl: float


@dataclass
class TrainResult:
    model: DGPModel
    trace: list
    adam: AdamState


class EpochBatcher:
    """Yields minibatch index arrays, reshuffling at every epoch boundary."""

    def __init__(self, n: int, batch_size: int, rng: RngStream):
        self.n, self.batch = n, min(batch_size, n)
        self.rng = rng
        self._perm, self._pos = None, n

    def next(self) -> np.ndarray:
        if self._pos + self.batch > self.n:
            self._perm, self._pos = self.rng.permutation(self.n), 0
        idx = self._perm[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return idx


def train(model: DGPModel, x, y, config: TrainConfig = TrainConfig(), rng: RngStream | None = None, progress=None) -> TrainResult:
    """Maximize the ELBO with Adam over reshuffled minibatches.

    Sampling noise and epoch shuffling use separate substreams of ``rng``
    (default: a stream seeded from ``config.seed``). ``progress``, if given,
    is called with each recorded :class:`TraceRow`.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(len(x), -1)
    rng = rng or RngStream(config.seed)
    sample_rng, shuffle_rng = rng.spawn(2)
    batcher = EpochBatcher(len(x), config.minibatch_size, shuffle_rng)
    state = AdamState(lr=config.lr)
    trace = []

    for step in range(1, config.iterations + 1):
        idx = batcher.next()
        try:
            est, tape = elbo_and_gradient(model, x[idx], y[idx], sample_rng, config.mc_samples)
        except JitterExhausted as exc:
            raise NonFiniteLoss(f"kernel matrix could not be factorized at step {step}", step, model.to_dict()) from exc
        if not np.isfinite(est.value) or not all(np.all(np.isfinite(g)) for g in tape.grads.values()):
            raise NonFiniteLoss(f"non-finite ELBO or gradient at step {step}", step, model.to_dict())
        params, state = adam_step(state, tape, model.params())
        model = model.bind(params)

        if step % config.log_every == 0 or step == config.iterations:
            row = TraceRow(step, est.value, est.data_fit, est.kl_sum)
            trace.append(row)
            if progress is not None:
                progress(row)
    return TrainResult(model, trace, state)


def moving_average(trace, window: int = 10) -> np.ndarray:
    vals = np.array([r.elbo for r in trace])
    if len(vals) < window:
        window = max(1, len(vals))
    return np.convolve(vals, np.ones(window) / window, mode="valid")


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "elbo", "data_fit", "kl"])
        for r in trace:
            w.writerow([r.step, repr(r.elbo), repr(r.data_fit), repr(r.kl)])
