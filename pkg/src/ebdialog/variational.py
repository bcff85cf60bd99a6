"""Scalar mean-field Gaussian machinery: softplus parameterization,
reparameterized sampling and the closed-form Gaussian KL divergence.

Everything here works on Python floats (IEEE double) regardless of the
storage precision used by the tensor backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class InvalidArgument(ValueError):
    """Raised when a numeric argument is outside an operation's domain."""


def _require_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise InvalidArgument(f"{name} must be finite, got {value!r}")
    return value


def softplus(rho: float) -> float:
    """ln(1 + e^rho), evaluated as max(rho, 0) + log1p(e^-|rho|)."""
    rho = _require_finite("rho", rho)
    return max(rho, 0.0) + math.log1p(math.exp(-abs(rho)))


def inverse_softplus(sigma: float) -> float:
    """ln(e^sigma - 1), the rho whose softplus is ``sigma``."""
    sigma = _require_finite("sigma", sigma)
    if sigma <= 0.0:
        raise InvalidArgument(f"sigma must be > 0, got {sigma!r}")
    # ln(e^s - 1) = s + ln(1 - e^-s); expm1 keeps precision for tiny s
    if sigma > 20.0:
        return sigma + math.log1p(-math.exp(-sigma))
    return math.log(math.expm1(sigma))


def softplus_array(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    return np.maximum(rho, 0.0) + np.log1p(np.exp(-np.abs(rho)))


def inverse_softplus_array(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0.0)) or not np.all(np.isfinite(sigma)):
        raise InvalidArgument("sigma must be finite and > 0")
    big = sigma > 20.0
    out = np.empty_like(sigma)
    out[big] = sigma[big] + np.log1p(-np.exp(-sigma[big]))
    out[~big] = np.log(np.expm1(sigma[~big]))
    return out


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Derivative of softplus; split by sign to avoid overflow."""
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class VariationalGaussian:
    """Trainable (mu, rho) pair of one Bayesian scalar; sigma = softplus(rho)."""

    mu: float
    rho: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu", _require_finite("mu", self.mu))
        object.__setattr__(self, "rho", _require_finite("rho", self.rho))

    @property
    def sigma(self) -> float:
        return softplus(self.rho)

    @classmethod
    def from_sigma(cls, mu: float, sigma: float) -> "VariationalGaussian":
        return cls(mu, inverse_softplus(sigma))


@dataclass(frozen=True)
class GaussianPrior:
    mean: float
    sigma: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _require_finite("mean", self.mean))
        sigma = _require_finite("sigma", self.sigma)
        if sigma <= 0.0:
            raise InvalidArgument(f"prior sigma must be > 0, got {sigma!r}")
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class NoiseDraw:
    epsilon: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "epsilon", _require_finite("epsilon", self.epsilon))

    @classmethod
    def stream(cls, seed: int):
        """Reproducible sequence of standard-normal draws."""
        rng = np.random.default_rng(seed)
        while True:
            yield cls(float(rng.standard_normal()))


def sample_weight(vg: VariationalGaussian, noise: NoiseDraw) -> float:
    return vg.mu + softplus(vg.rho) * noise.epsilon


def kl_gaussian(q: VariationalGaussian, p: GaussianPrior) -> float:
    """KL(q || p) for two univariate Gaussians."""
    sq = softplus(q.rho)
    diff = q.mu - p.mean
    return math.log(p.sigma / sq) + (sq * sq + diff * diff) / (2.0 * p.sigma * p.sigma) - 0.5


def kl_gaussian_array(mu, rho, prior_mean, prior_sigma) -> np.ndarray:
    """Elementwise KL(N(mu, softplus(rho)^2) || N(prior_mean, prior_sigma^2)) in float64."""
    mu = np.asarray(mu, dtype=np.float64)
    sq = softplus_array(rho)
    ps = np.asarray(prior_sigma, dtype=np.float64)
    diff = mu - np.asarray(prior_mean, dtype=np.float64)
    return np.log(ps / sq) + (sq * sq + diff * diff) / (2.0 * ps * ps) - 0.5


def kl_monte_carlo(q: VariationalGaussian, p: GaussianPrior, n: int, seed: int) -> float:
    """E_q[ln q(w) - ln p(w)] estimated from ``n`` draws; a check on the closed form."""
    rng = np.random.default_rng(seed)
    sq = softplus(q.rho)
    w = q.mu + sq * rng.standard_normal(n)
    log_q = -0.5 * ((w - q.mu) / sq) ** 2 - math.log(sq)
    log_p = -0.5 * ((w - p.mean) / p.sigma) ** 2 - math.log(p.sigma)
    return float(np.mean(log_q - log_p))
