"""Deterministic pretraining and ELBO finetuning with the reparameterization trick."""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import DialogueSample, IngestionError, Tokenizer, pad_batch
from .model import (
    BayesianParameterSet,
    BayesianSlot,
    DeterministicSlot,
    MleCheckpoint,
    ModelConfig,
    derive_seed,
    forward_tensors,
    init_weights,
    slot_noise,
)
from .variational import InvalidArgument

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 16
    epochs: int = 3
    weight_decay: float = 0.0
    kl_weight_mode: str = "per_batch_count"  # or "fixed"
    kl_weight: float = 1.0  # used when kl_weight_mode == "fixed"
    mc_samples_per_batch: int = 1
    seed: int = 0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    zero_noise: bool = False  # debug: force every epsilon to 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise InvalidArgument("train.learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgument("train.batch_size and train.epochs must be >= 1")
        if self.mc_samples_per_batch < 1:
            raise InvalidArgument("train.mc_samples_per_batch must be >= 1")
        if self.kl_weight_mode not in ("per_batch_count", "fixed"):
            raise InvalidArgument(f"train.kl_weight_mode: unknown mode {self.kl_weight_mode!r}")
        if self.weight_decay < 0 or self.kl_weight < 0 or self.warmup_steps < 0:
            raise InvalidArgument("train.weight_decay, kl_weight and warmup_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"train config: unknown key(s) {sorted(unknown)}")
        return cls(**d)

    def kl_scale(self, batches_per_epoch: int) -> float:
        if self.kl_weight_mode == "fixed":
            return self.kl_weight
        return 1.0 / max(batches_per_epoch, 1)


@dataclass(frozen=True)
class ElboBreakdown:
    nll: float
    kl_total: float
    kl_scale: float

    @property
    def loss(self) -> float:
        return self.nll + self.kl_scale * self.kl_total

    def to_dict(self) -> dict:
        return {"nll": self.nll, "kl_total": self.kl_total, "kl_scale": self.kl_scale, "loss": self.loss}


class ParameterTensors:
    """Leaf tensors for one parameter set.

    Deterministic slots appear under their slot name; a Bayesian slot
    contributes ``<slot>.mu`` and ``<slot>.rho``.
    """

    def __init__(self, params: BayesianParameterSet):
        self.params = params
        self.leaves: "OrderedDict[str, nx.Tensor]" = OrderedDict()
        for name, slot in params.slots.items():
            if isinstance(slot, DeterministicSlot):
                self.leaves[name] = nx.Tensor(slot.value, requires_grad=True, name=name, dtype=slot.value.dtype)
            else:
                self.leaves[name + ".mu"] = nx.Tensor(slot.mu, True, name + ".mu", dtype=slot.mu.dtype)
                self.leaves[name + ".rho"] = nx.Tensor(slot.rho, True, name + ".rho", dtype=slot.rho.dtype)

    def bayesian(self) -> list[tuple[str, BayesianSlot]]:
        return [(n, s) for n, s in self.params.slots.items() if isinstance(s, BayesianSlot)]

    def weights(self, noise_seed: int | None) -> dict[str, nx.Tensor]:
        """Weight tensors for a forward pass; ``noise_seed=None`` means zero noise."""
        out = {}
        for name, slot in self.params.slots.items():
            if isinstance(slot, DeterministicSlot):
                out[name] = self.leaves[name]
            else:
                shape = slot.mu.shape
                eps = np.zeros(shape) if noise_seed is None else slot_noise(noise_seed, name, shape)
                out[name] = nx.reparameterize(self.leaves[name + ".mu"], self.leaves[name + ".rho"], eps)
        return out

    def kl(self) -> nx.Tensor | None:
        total = None
        for name, slot in self.bayesian():
            term = nx.kl_gaussian_sum(
                self.leaves[name + ".mu"], self.leaves[name + ".rho"], slot.prior_mean, slot.prior.sigma
            )
            total = term if total is None else nx.add(total, term)
        return total

    def to_parameter_set(self) -> BayesianParameterSet:
        slots = OrderedDict()
        for name, slot in self.params.slots.items():
            if isinstance(slot, DeterministicSlot):
                slots[name] = DeterministicSlot(self.leaves[name].data.copy(), slot.depth)
            else:
                slots[name] = BayesianSlot(
                    self.leaves[name + ".mu"].data.copy(),
                    self.leaves[name + ".rho"].data.copy(),
                    slot.prior_mean.copy(),
                    slot.prior,
                    slot.depth,
                )
        p = self.params
        return BayesianParameterSet(p.config, slots, p.flags, p.schedule, list(p.vocab))


def sample_seed(noise_seed: int, sample: int) -> int:
    return derive_seed(noise_seed, "mc", sample)


def elbo_terms(
    tensors: ParameterTensors,
    ids: np.ndarray,
    targets: np.ndarray,
    noise_seed: int,
    cfg: TrainConfig,
    kl_scale: float,
) -> tuple[nx.Tensor, ElboBreakdown]:
    """Negative ELBO for one batch as a differentiable scalar plus its breakdown."""
    if len(ids) == 0:
        raise InvalidArgument("empty batch")
    config = tensors.params.config
    nll = None
    for s in range(cfg.mc_samples_per_batch):
        seed = None if cfg.zero_noise else sample_seed(noise_seed, s)
        logits = forward_tensors(config, tensors.weights(seed), ids)
        ce = nx.cross_entropy(logits, targets)
        nll = ce if nll is None else nx.add(nll, ce)
    nll = nx.scale(nll, 1.0 / cfg.mc_samples_per_batch)
    kl = tensors.kl()
    if kl is None:
        return nll, ElboBreakdown(nll.item(), 0.0, kl_scale)
    loss = nx.add(nll, nx.scale(kl, kl_scale))
    return loss, ElboBreakdown(nll.item(), kl.item(), kl_scale)


def elbo_loss(
    params: BayesianParameterSet,
    batch: Sequence[DialogueSample],
    noise_seed: int,
    cfg: TrainConfig,
    batches_per_epoch: int = 1,
    response_only: bool = True,
) -> tuple[ElboBreakdown, dict[str, np.ndarray]]:
    """Evaluate the negative ELBO on ``batch`` and return it with its gradients."""
    if not batch:
        raise InvalidArgument("empty batch")
    tok = Tokenizer(params.vocab)
    ids, targets = pad_batch(
        [tok.encode_example(s, params.config.max_seq_len, response_only) for s in batch], tok.pad_id
    )
    tensors = ParameterTensors(params.copy())
    loss, breakdown = elbo_terms(tensors, ids, targets, noise_seed, cfg, cfg.kl_scale(batches_per_epoch))
    return breakdown, nx.backward(loss, tensors.leaves)


class AdamW:
    """Adam with decoupled weight decay; ``decay`` names which leaves decay."""

    def __init__(self, cfg: TrainConfig, leaves: Mapping[str, nx.Tensor], decay: set[str]):
        self.cfg = cfg
        self.decay = decay
        self.m = {k: np.zeros(t.shape, dtype=np.float64) for k, t in leaves.items()}
        self.v = {k: np.zeros(t.shape, dtype=np.float64) for k, t in leaves.items()}
        self.t = 0

    def lr(self) -> float:
        if self.cfg.warmup_steps and self.t <= self.cfg.warmup_steps:
            return self.cfg.learning_rate * self.t / self.cfg.warmup_steps
        return self.cfg.learning_rate

    def step(self, leaves: Mapping[str, nx.Tensor], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c = self.cfg
        lr = self.lr()
        b1c = 1.0 - c.beta1**self.t
        b2c = 1.0 - c.beta2**self.t
        for name, leaf in leaves.items():
            g = grads[name].astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p = leaf.data.astype(np.float64)
            if name in self.decay and c.weight_decay:
                p -= lr * c.weight_decay * p
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + c.adam_eps)
            leaf.data[...] = p


@dataclass
class TrainingLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(s, sort_keys=True) + "\n" for s in self.steps)

    def epoch_losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng(derive_seed(seed, "epoch", epoch)).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def run_training(
    params: BayesianParameterSet,
    samples: Sequence[DialogueSample],
    cfg: TrainConfig,
    response_only: bool = True,
) -> tuple[BayesianParameterSet, TrainingLog]:
    """Shared loop for pretraining (no Bayesian slots) and ELBO finetuning."""
    if not samples:
        raise IngestionError("corpus is empty")
    tok = Tokenizer(params.vocab)
    max_len = params.config.max_seq_len
    encoded = [tok.encode_example(s, max_len, response_only) for s in samples]
    tensors = ParameterTensors(params.copy())
    decay = {k for k in tensors.leaves if not k.endswith(".rho")}
    opt = AdamW(cfg, tensors.leaves, decay)
    n_batches = math.ceil(len(encoded) / cfg.batch_size)
    kl_scale = cfg.kl_scale(n_batches)
    history = TrainingLog()
    step = 0
    for epoch in range(cfg.epochs):
        acc = {"nll": 0.0, "kl_total": 0.0, "loss": 0.0}
        for batch_idx in _batches(len(encoded), cfg.batch_size, cfg.seed, epoch):
            ids, targets = pad_batch([encoded[i] for i in batch_idx], tok.pad_id)
            loss, br = elbo_terms(tensors, ids, targets, derive_seed(cfg.seed, "noise", step), cfg, kl_scale)
            if not math.isfinite(br.loss):
                raise TrainingDivergence(f"non-finite loss {br.loss!r} at step {step} (epoch {epoch})")
            grads = nx.backward(loss, tensors.leaves)
            opt.step(tensors.leaves, grads)
            rec = {"step": step, "epoch": epoch, **br.to_dict()}
            history.steps.append(rec)
            for k in acc:
                acc[k] += rec[k]
            step += 1
        n = len(history.steps) - sum(1 for s in history.steps if s["epoch"] < epoch)
        history.epochs.append({"epoch": epoch, **{k: v / n for k, v in acc.items()}, "kl_scale": kl_scale})
        log.info("epoch %d: loss %.4f nll %.4f kl %.2f", epoch, *(history.epochs[-1][k] for k in ("loss", "nll", "kl_total")))
    return tensors.to_parameter_set(), history


def pretrain_deterministic(
    corpus: Sequence[DialogueSample], model_cfg: ModelConfig, train_cfg: TrainConfig
) -> tuple[MleCheckpoint, TrainingLog]:
    """Train the all-deterministic model on every token of the corpus.

    The vocabulary is built from the corpus and ``vocab_size`` follows it.
    """
    if not corpus:
        raise IngestionError("corpus is empty")
    tok = Tokenizer.build(corpus)
    model_cfg = replace(model_cfg, vocab_size=len(tok))
    mle = MleCheckpoint.from_weights(model_cfg, init_weights(model_cfg, train_cfg.seed), tok.vocab)
    trained, history = run_training(mle.to_parameter_set(), corpus, train_cfg, response_only=False)
    return trained.to_mle(), history


def finetune(
    bayes_params: BayesianParameterSet, corpus: Sequence[DialogueSample], train_cfg: TrainConfig
) -> tuple[BayesianParameterSet, TrainingLog]:
    """Maximize the ELBO on reference responses; deterministic tensors train too."""
    return run_training(bayes_params, corpus, train_cfg, response_only=True)
