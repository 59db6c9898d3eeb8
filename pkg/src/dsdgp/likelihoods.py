"""Observation models p(y | f) for the output layer."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .errors import QuadratureOrderInvalid
from .layer import MarginalGaussians

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Gaussian:
    log_variance: object

    @classmethod
    def create(cls, variance: float = 0.01):
        if variance <= 0:
            raise ValueError("likelihood variance must be positive")
        return cls(np.array(np.log(variance)))

    @property
    def variance(self) -> float:
        return float(np.exp(value_of(self.log_variance)))

    def params(self) -> dict:
        return {"log_variance": self.log_variance}

    def bind(self, values: Mapping):
        return replace(self, log_variance=values["log_variance"])

    def expected_log_lik(self, mean, var, y):
        noise = ad.exp(self.log_variance)
        ll = -0.5 * LOG_2PI - 0.5 * self.log_variance - 0.5 * (ad.square(y - mean) + var) / noise
        return ad.sum_(ll, axis=1)

    def predictive_log_density(self, mean, var, y):
        total = var + self.variance
        return np.sum(-0.5 * (LOG_2PI + np.log(total) + (y - mean) ** 2 / total), axis=1)

    def predictive_moments(self, mean, var):
        return mean, var + self.variance


@dataclass(frozen=True)
class Bernoulli:
    """Binary labels in {0, 1} with a probit link."""

    quadrature_order: int = 20

    def __post_init__(self):
        if self.quadrature_order < 1:
            raise QuadratureOrderInvalid(f"quadrature order must be >= 1, got {self.quadrature_order}")

    def params(self) -> dict:
        return {}

    def bind(self, values: Mapping):
        return self

    def expected_log_lik(self, mean, var, y):
        y = np.asarray(y)
        if np.any((y != 0) & (y != 1)):
            raise ValueError("Bernoulli targets must be 0 or 1")
        nodes, weights = np.polynomial.hermite.hermgauss(self.quadrature_order)
        n, d = np.shape(value_of(mean))
        sign = (2.0 * y - 1.0).reshape(n, d, 1)
        f = mean.reshape(n, d, 1) + ad.sqrt(2.0 * var).reshape(n, d, 1) * nodes
        vals = ad.log_ndtr(sign * f) * (weights / np.sqrt(np.pi))
        return ad.sum_(ad.sum_(vals, axis=2), axis=1)

    def predictive_log_density(self, mean, var, y):
        sign = 2.0 * np.asarray(y) - 1.0
        return np.sum(ad.log_ndtr(sign * mean / np.sqrt(1.0 + var)), axis=1)

    def predictive_moments(self, mean, var):
        return mean, var

    def predict_proba(self, mean, var):
        return np.exp(ad.log_ndtr(mean / np.sqrt(1.0 + var)))


def expected_log_lik(likelihood, marginal: MarginalGaussians, y):
    """E_{N(f | mean, var)}[log p(y | f)] per row, summed over output dims."""
    return likelihood.expected_log_lik(marginal.mean, marginal.variance, y)
