"""Empirical Bayes construction of posterior initializations and priors.

Every Bayesian scalar is anchored at its pretrained (MLE) value: the
posterior mean starts there and the prior is centred there. Standard
deviations shrink with the depth of the transformer block the scalar
lives in.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from .variational import (
    GaussianPrior,
    InvalidArgument,
    VariationalGaussian,
    inverse_softplus,
    inverse_softplus_array,
    softplus,
)

if TYPE_CHECKING:
    from .model import BayesianParameterSet, LayerBayesFlags, MleCheckpoint


class ConfigurationError(ValueError):
    pass


class StructuralError(ValueError):
    pass


class ScheduleKind(str, enum.Enum):
    BODEB_G = "bodeb-g"
    BODEB_M = "bodeb-m"
    MOPED = "moped"
    OPPOSITE = "opposite"
    WEIGHTS_ONLY = "weights-only"
    BIAS_ONLY = "bias-only"
    NONE_VARIANT = "none"

    @classmethod
    def parse(cls, value: "str | ScheduleKind") -> "ScheduleKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"none-variant": "none", "bodebg": "bodeb-g", "bodebm": "bodeb-m"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ConfigurationError(f"schedule.kind: unknown schedule {value!r} (choose from {choices})") from None


class PriorProvenance(str, enum.Enum):
    GAUSSIAN_DEPTH = "gaussian"
    MIXTURE_SPIKE_SLAB = "mixture"
    MOPED_BASELINE = "moped"


@dataclass(frozen=True)
class DepthIndex:
    """1-based block position; the LM head sits at ``n_layers``."""

    pos: int
    n_layers: int

    def __post_init__(self) -> None:
        if self.n_layers < 1 or not 1 <= self.pos <= self.n_layers:
            raise InvalidArgument(f"depth pos={self.pos} outside [1, {self.n_layers}]")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: ScheduleKind = ScheduleKind.BODEB_M
    alpha: float = 5e-2
    eta: float = 0.5
    sigma_floor: float = 1e-6
    moped_delta: float | None = None  # None: same as alpha

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScheduleKind.parse(self.kind))
        if not (math.isfinite(self.alpha) and self.alpha >= 0.0):
            raise ConfigurationError(f"schedule.alpha must be >= 0, got {self.alpha!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"schedule.eta must lie in [0, 1], got {self.eta!r}")
        if not self.sigma_floor > 0.0:
            raise ConfigurationError(f"schedule.sigma_floor must be > 0, got {self.sigma_floor!r}")
        if self.moped_delta is not None and not self.moped_delta >= 0.0:
            raise ConfigurationError(f"schedule.moped_delta must be >= 0, got {self.moped_delta!r}")

    @property
    def delta(self) -> float:
        return self.alpha if self.moped_delta is None else self.moped_delta

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "alpha": self.alpha,
            "eta": self.eta,
            "sigma_floor": self.sigma_floor,
            "moped_delta": self.moped_delta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        known = {"kind", "alpha", "eta", "sigma_floor", "moped_delta"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"schedule: unknown key(s) {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PriorSpec:
    mean: float
    sigma: float
    provenance: PriorProvenance
    components: tuple[tuple[float, float], tuple[float, float]] | None = field(default=None)

    def as_gaussian(self) -> GaussianPrior:
        return GaussianPrior(self.mean, self.sigma)

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "provenance": self.provenance.value,
            "components": [list(c) for c in self.components] if self.components else None,
        }

    @classmethod
    def from_dict(cls, d: dict, mean: float = 0.0) -> "PriorSpec":
        comps = d.get("components")
        return cls(
            mean=mean,
            sigma=float(d["sigma"]),
            provenance=PriorProvenance(d["provenance"]),
            components=tuple(tuple(float(x) for x in c) for c in comps) if comps else None,
        )


# -- per-scalar rules ---------------------------------------------------------

def _depth_scaled(kind: ScheduleKind, is_bias: bool) -> bool:
    """Whether the posterior std follows the depth-scaled rule (else the MOPED rule)."""
    if kind in (ScheduleKind.BODEB_G, ScheduleKind.BODEB_M, ScheduleKind.OPPOSITE):
        return True
    if kind is ScheduleKind.WEIGHTS_ONLY:
        return not is_bias
    if kind is ScheduleKind.BIAS_ONLY:
        return is_bias
    return False


def posterior_scale(depth: DepthIndex, cfg: ScheduleConfig, is_bias: bool) -> float:
    """Multiplier c such that sigma_init = max(|mle| * c, sigma_floor)."""
    if not isinstance(cfg.kind, ScheduleKind):
        raise ConfigurationError(f"unknown schedule kind {cfg.kind!r}")
    if not _depth_scaled(cfg.kind, is_bias):
        return cfg.delta
    if cfg.kind is ScheduleKind.OPPOSITE:
        return (depth.pos / depth.n_layers) * cfg.alpha
    return (1.0 / depth.pos) * cfg.alpha


def init_posterior(
    mle_value: float, depth: DepthIndex, cfg: ScheduleConfig, is_bias: bool = False
) -> VariationalGaussian:
    sigma = max(abs(float(mle_value)) * posterior_scale(depth, cfg, is_bias), cfg.sigma_floor)
    return VariationalGaussian(float(mle_value), inverse_softplus(sigma))


def _prior_family(kind: ScheduleKind) -> PriorProvenance:
    if kind is ScheduleKind.BODEB_G:
        return PriorProvenance.GAUSSIAN_DEPTH
    if kind is ScheduleKind.MOPED:
        return PriorProvenance.MOPED_BASELINE
    # opposite, weights-only, bias-only and none only change the posterior rule
    return PriorProvenance.MIXTURE_SPIKE_SLAB


def build_prior(mle_value: float, depth: DepthIndex, cfg: ScheduleConfig) -> PriorSpec:
    family = _prior_family(cfg.kind)
    mean = float(mle_value)
    if family is PriorProvenance.GAUSSIAN_DEPTH:
        return PriorSpec(mean, softplus(1.0 / depth.pos), family)
    if family is PriorProvenance.MOPED_BASELINE:
        return PriorSpec(mean, 1.0, family)
    slab = softplus(1.0)
    spike = softplus(1.0 / depth.pos**2)
    eta = cfg.eta
    sigma = math.sqrt(eta * slab * slab + (1.0 - eta) * spike * spike)
    return PriorSpec(mean, sigma, family, ((slab, eta), (spike, 1.0 - eta)))


# -- whole-model conversion ------------------------------------------------------

def init_posterior_arrays(
    mle: np.ndarray, depth: DepthIndex, cfg: ScheduleConfig, is_bias: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`init_posterior`; returns (mu, rho) in float64."""
    mle = np.asarray(mle, dtype=np.float64)
    sigma = np.maximum(np.abs(mle) * posterior_scale(depth, cfg, is_bias), cfg.sigma_floor)
    return mle.copy(), inverse_softplus_array(sigma)


def bayesianize(
    mle: "MleCheckpoint", layer_flags: "LayerBayesFlags", cfg: ScheduleConfig
) -> "BayesianParameterSet":
    """Turn every tensor of a flagged layer into a (posterior, prior) slot."""
    from .model import BayesianParameterSet, BayesianSlot, DeterministicSlot, flagged_slot_names

    config = mle.config
    flagged = set(flagged_slot_names(config, layer_flags))
    missing = set(mle.tensors) ^ set(BayesianParameterSet.expected_shapes(config))
    if missing:
        raise StructuralError(f"checkpoint does not match model config; mismatched slots: {sorted(missing)}")
    slots = {}
    for name, value in mle.tensors.items():
        depth_pos = mle.depths.get(name)
        if name not in flagged:
            slots[name] = DeterministicSlot(np.array(value, copy=True), depth_pos)
            continue
        if depth_pos is None:
            raise StructuralError(f"layer {name!r} is flagged Bayesian but has no depth assignment")
        depth = DepthIndex(depth_pos, config.n_layers)
        is_bias = name.endswith(".bias")
        mu, rho = init_posterior_arrays(value, depth, cfg, is_bias)
        prior = build_prior(0.0, depth, cfg)
        slots[name] = BayesianSlot(
            mu=mu.astype(value.dtype),
            rho=rho.astype(value.dtype),
            prior_mean=np.array(value, copy=True),
            prior=replace(prior, mean=0.0),
            depth=depth_pos,
        )
    return BayesianParameterSet(
        config=config, slots=slots, flags=layer_flags, schedule=cfg, vocab=list(mle.vocab)
    )
