"""Decoder-only causal transformer with optional Bayesian layers.

Blocks are pre-LN (GPT-2 ordering) with learned positional embeddings.
Slot names are stable and used verbatim in checkpoints:

    embed.token, embed.pos
    blocks.{i}.ln1.{weight|bias}, blocks.{i}.attn.qkv.{weight|bias},
    blocks.{i}.attn.proj.{weight|bias}, blocks.{i}.ln2.{weight|bias},
    blocks.{i}.ff.fc1.{weight|bias}, blocks.{i}.ff.proj.{weight|bias}
    ln_f.{weight|bias}, lm_head.weight

Linear weights are stored (in_features, out_features).
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Mapping, Union

import numpy as np

from . import numerics as nx
from .schedules import DepthIndex, PriorSpec, ScheduleConfig
from .variational import InvalidArgument, softplus_array


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    d_ff: int | None = None  # None: 4 * d_model
    vocab_size: int = 128
    max_seq_len: int = 64

    def __post_init__(self) -> None:
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for key in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, key)) < 1:
                raise InvalidArgument(f"model.{key} must be >= 1")
        if self.d_model % self.n_heads:
            raise InvalidArgument(f"model.n_heads={self.n_heads} does not divide d_model={self.d_model}")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"model config: unknown key(s) {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerBayesFlags:
    """Which layer groups are converted to Bayesian layers."""

    attn_qkv: bool = True
    ff_first: bool = True
    lm_head: bool = True
    proj: bool = False

    _ALIASES = {
        "attn": "attn_qkv",
        "qkv": "attn_qkv",
        "attn_qkv": "attn_qkv",
        "fc": "ff_first",
        "ff": "ff_first",
        "fc1": "ff_first",
        "ff_first": "ff_first",
        "lm_head": "lm_head",
        "lmhead": "lm_head",
        "head": "lm_head",
        "proj": "proj",
    }

    @classmethod
    def none(cls) -> "LayerBayesFlags":
        return cls(False, False, False, False)

    @classmethod
    def parse(cls, text: str) -> "LayerBayesFlags":
        """'default', 'none', 'all', a list like 'attn,fc', or edits like '-lm_head,+proj'."""
        text = (text or "default").strip().lower()
        if text in ("default", ""):
            return cls()
        if text == "none":
            return cls.none()
        if text == "all":
            return cls(True, True, True, True)
        items = [t.strip() for t in text.split(",") if t.strip()]
        edits = all(t[0] in "+-" for t in items)
        values = cls().to_dict() if edits else cls.none().to_dict()
        for item in items:
            on = not item.startswith("-")
            key = cls._ALIASES.get(item.lstrip("+-").replace("-", "_").replace(" ", "_"))
            if key is None:
                raise InvalidArgument(f"flags: unknown layer group {item!r}")
            values[key] = on
        return cls(**values)

    def to_dict(self) -> dict:
        return {"attn_qkv": self.attn_qkv, "ff_first": self.ff_first, "lm_head": self.lm_head, "proj": self.proj}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerBayesFlags":
        return cls(**{k: bool(v) for k, v in d.items()})


# -- slot layout -------------------------------------------------------------------

def slot_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["embed.token"] = (v, d)
    shapes["embed.pos"] = (config.max_seq_len, d)
    for i in range(config.n_layers):
        p = f"blocks.{i}"
        shapes[f"{p}.ln1.weight"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        shapes[f"{p}.attn.qkv.weight"] = (d, 3 * d)
        shapes[f"{p}.attn.qkv.bias"] = (3 * d,)
        shapes[f"{p}.attn.proj.weight"] = (d, d)
        shapes[f"{p}.attn.proj.bias"] = (d,)
        shapes[f"{p}.ln2.weight"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ff.fc1.weight"] = (d, f)
        shapes[f"{p}.ff.fc1.bias"] = (f,)
        shapes[f"{p}.ff.proj.weight"] = (f, d)
        shapes[f"{p}.ff.proj.bias"] = (d,)
    shapes["ln_f.weight"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["lm_head.weight"] = (d, v)
    return shapes


def layer_of(slot: str) -> str:
    """'blocks.0.attn.qkv.weight' -> 'blocks.0.attn.qkv'; 'embed.token' stays."""
    head, _, tail = slot.rpartition(".")
    return head if tail in ("weight", "bias") else slot


def depth_of(slot: str, config: ModelConfig) -> int | None:
    if slot.startswith("blocks."):
        return int(slot.split(".")[1]) + 1
    if slot.startswith("lm_head."):
        return config.n_layers
    return None


def flagged_slot_names(config: ModelConfig, flags: LayerBayesFlags) -> list[str]:
    names = []
    for name in slot_shapes(config):
        layer = layer_of(name)
        if flags.attn_qkv and layer.endswith(".attn.qkv"):
            names.append(name)
        elif flags.ff_first and layer.endswith(".ff.fc1"):
            names.append(name)
        elif flags.proj and (layer.endswith(".attn.proj") or layer.endswith(".ff.proj")):
            names.append(name)
        elif flags.lm_head and layer == "lm_head":
            names.append(name)
    return names


def init_weights(config: ModelConfig, seed: int, dtype=np.float32) -> "OrderedDict[str, np.ndarray]":
    """GPT-2 style initialization: N(0, 0.02), residual projections scaled down."""
    rng = np.random.default_rng(seed)
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    proj_std = 0.02 / math.sqrt(2 * config.n_layers)
    for name, shape in slot_shapes(config).items():
        if name.endswith(("ln1.weight", "ln2.weight")) or name == "ln_f.weight":
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name.endswith("proj.weight"):
            arr = rng.normal(0.0, proj_std, size=shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        out[name] = arr.astype(dtype)
    return out


# -- parameter containers ------------------------------------------------------

@dataclass
class DeterministicSlot:
    value: np.ndarray
    depth: int | None = None

    kind = "det"


@dataclass
class BayesianSlot:
    """Posterior (mu, rho) plus the fixed prior anchored at the MLE values."""

    mu: np.ndarray
    rho: np.ndarray
    prior_mean: np.ndarray
    prior: PriorSpec  # sigma/components shared by the slot; mean comes from prior_mean
    depth: int

    kind = "bayes"

    def __post_init__(self) -> None:
        if not (self.mu.shape == self.rho.shape == self.prior_mean.shape):
            raise InvalidArgument("mu, rho and prior_mean must share one shape")

    @property
    def sigma(self) -> np.ndarray:
        return softplus_array(self.rho)

    def prior_at(self, index) -> PriorSpec:
        return replace(self.prior, mean=float(self.prior_mean[index]))


Slot = Union[DeterministicSlot, BayesianSlot]


@dataclass
class MleCheckpoint:
    """Deterministic pretrained tensors with their depth assignments."""

    config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]"
    depths: dict[str, int]
    vocab: list[str] = field(default_factory=list)

    @classmethod
    def from_weights(cls, config: ModelConfig, tensors: Mapping[str, np.ndarray], vocab=()) -> "MleCheckpoint":
        ordered = OrderedDict((name, np.asarray(tensors[name])) for name in slot_shapes(config))
        depths = {n: d for n in ordered if (d := depth_of(n, config)) is not None}
        return cls(config, ordered, depths, list(vocab))

    def to_parameter_set(self) -> "BayesianParameterSet":
        slots = OrderedDict(
            (n, DeterministicSlot(np.array(v, copy=True), self.depths.get(n))) for n, v in self.tensors.items()
        )
        return BayesianParameterSet(self.config, slots, LayerBayesFlags.none(), None, list(self.vocab))


@dataclass
class BayesianParameterSet:
    config: ModelConfig
    slots: "OrderedDict[str, Slot]"
    flags: LayerBayesFlags = field(default_factory=LayerBayesFlags.none)
    schedule: ScheduleConfig | None = None
    vocab: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        expected = self.expected_shapes(self.config)
        if list(self.slots) != list(expected):
            self.slots = OrderedDict((n, self.slots[n]) for n in expected if n in self.slots)
        for name, shape in expected.items():
            slot = self.slots.get(name)
            if slot is None:
                raise InvalidArgument(f"parameter set is missing slot {name!r}")
            got = slot.value.shape if isinstance(slot, DeterministicSlot) else slot.mu.shape
            if got != shape:
                raise InvalidArgument(f"slot {name!r} has shape {got}, expected {shape}")

    @staticmethod
    def expected_shapes(config: ModelConfig):
        return slot_shapes(config)

    @property
    def bayesian_names(self) -> list[str]:
        return [n for n, s in self.slots.items() if isinstance(s, BayesianSlot)]

    def mean_weights(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (n, s.value if isinstance(s, DeterministicSlot) else s.mu) for n, s in self.slots.items()
        )

    def to_mle(self) -> MleCheckpoint:
        """Collapse to point estimates (posterior means) for use as a new anchor."""
        depths = {n: s.depth for n, s in self.slots.items() if s.depth is not None}
        return MleCheckpoint(self.config, self.mean_weights(), depths, list(self.vocab))

    def copy(self) -> "BayesianParameterSet":
        slots = OrderedDict()
        for n, s in self.slots.items():
            if isinstance(s, DeterministicSlot):
                slots[n] = DeterministicSlot(s.value.copy(), s.depth)
            else:
                slots[n] = BayesianSlot(s.mu.copy(), s.rho.copy(), s.prior_mean.copy(), s.prior, s.depth)
        return BayesianParameterSet(self.config, slots, self.flags, self.schedule, list(self.vocab))


# -- sampling --------------------------------------------------------------------

def derive_seed(*parts) -> int:
    """Stable 63-bit seed from an arbitrary tuple of ints/strings."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def slot_noise(seed: int, slot: str, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normals for one slot, from a Philox stream keyed by (seed, slot).

    Scalar ``k`` (row-major flat index) always receives the k-th draw of its
    slot's stream, so the result does not depend on slot visiting order.
    """
    digest = hashlib.sha256(f"{seed}\x1f{slot}".encode()).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal(int(np.prod(shape))).reshape(shape)


@dataclass(frozen=True)
class WeightRealization:
    weights: Mapping[str, np.ndarray]
    seed: int | None
    config: ModelConfig


def realize(params: BayesianParameterSet, seed: int, zero_noise: bool = False) -> WeightRealization:
    """One concrete weight draw w = mu + softplus(rho) * eps for every Bayesian scalar."""
    weights: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, slot in params.slots.items():
        if isinstance(slot, DeterministicSlot):
            weights[name] = slot.value
        elif zero_noise:
            weights[name] = slot.mu
        else:
            eps = slot_noise(seed, name, slot.mu.shape)
            w = slot.mu.astype(np.float64) + softplus_array(slot.rho) * eps
            weights[name] = w.astype(slot.mu.dtype)
    return WeightRealization(weights, None if zero_noise else seed, params.config)


# -- forward ------------------------------------------------------------------------

def _linear(x: nx.Tensor, weights: Mapping[str, nx.Tensor], prefix: str) -> nx.Tensor:
    out = nx.matmul(x, weights[f"{prefix}.weight"])
    bias = weights.get(f"{prefix}.bias")
    return nx.add(out, bias) if bias is not None else out


def forward_tensors(config: ModelConfig, weights: Mapping[str, nx.Tensor], ids: np.ndarray) -> nx.Tensor:
    """Logits (B, T, V) for a batch of token ids (B, T)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise InvalidArgument(f"expected a (batch, time) id array, got shape {ids.shape}")
    b, t = ids.shape
    if t > config.max_seq_len:
        raise InvalidArgument(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    if t == 0:
        raise InvalidArgument("empty sequence")
    d, h = config.d_model, config.n_heads
    hd = d // h
    x = nx.add(
        nx.embedding_lookup(weights["embed.token"], ids),
        nx.take(weights["embed.pos"], slice(0, t), axis=0),
    )
    inv_sqrt = 1.0 / math.sqrt(hd)
    for i in range(config.n_layers):
        p = f"blocks.{i}"
        a = nx.layer_norm(x, weights[f"{p}.ln1.weight"], weights[f"{p}.ln1.bias"])
        qkv = _linear(a, weights, f"{p}.attn.qkv")  # (b, t, 3d)
        qkv = nx.transpose(nx.reshape(qkv, (b, t, 3, h, hd)), (2, 0, 3, 1, 4))  # (3, b, h, t, hd)
        q = nx.take(qkv, 0)
        k = nx.take(qkv, 1)
        v = nx.take(qkv, 2)
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        att = nx.softmax(nx.causal_mask_fill(scores))
        ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        x = nx.add(x, _linear(ctx, weights, f"{p}.attn.proj"))
        m = nx.layer_norm(x, weights[f"{p}.ln2.weight"], weights[f"{p}.ln2.bias"])
        m = nx.gelu(_linear(m, weights, f"{p}.ff.fc1"))
        x = nx.add(x, _linear(m, weights, f"{p}.ff.proj"))
    x = nx.layer_norm(x, weights["ln_f.weight"], weights["ln_f.bias"])
    return nx.matmul(x, weights["lm_head.weight"])


WeightSource = Union[WeightRealization, BayesianParameterSet, MleCheckpoint, Mapping[str, np.ndarray]]


def _weight_arrays(source: WeightSource) -> tuple[ModelConfig | None, Mapping[str, np.ndarray]]:
    if isinstance(source, WeightRealization):
        return source.config, source.weights
    if isinstance(source, BayesianParameterSet):
        # posterior means; draw a realization first for a stochastic forward
        return source.config, source.mean_weights()
    if isinstance(source, MleCheckpoint):
        return source.config, source.tensors
    return None, source


def forward(source: WeightSource, token_ids, config: ModelConfig | None = None) -> np.ndarray:
    """Logits for one sequence (T, V) or a batch (B, T, V), no gradient recording."""
    cfg, arrays = _weight_arrays(source)
    cfg = cfg or config
    if cfg is None:
        raise InvalidArgument("a ModelConfig is required for raw weight mappings")
    ids = np.asarray(token_ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InvalidArgument(f"token ids must lie in [0, {cfg.vocab_size})")
    with nx.no_grad():
        tensors = {n: nx.Tensor(a, dtype=a.dtype) for n, a in arrays.items()}
        logits = forward_tensors(cfg, tensors, ids).data
    return logits[0] if single else logits


# -- reporting ------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterReport:
    deterministic: int
    bayesian: int
    per_layer: dict[str, dict]

    @property
    def stored_total(self) -> int:
        return self.deterministic + 2 * self.bayesian

    def to_dict(self) -> dict:
        return {
            "deterministic_scalars": self.deterministic,
            "bayesian_scalars": self.bayesian,
            "stored_scalars": self.stored_total,
            "per_layer": self.per_layer,
        }

    def format(self) -> str:
        lines = [
            f"deterministic scalars: {self.deterministic}",
            f"bayesian scalars:      {self.bayesian}",
            f"stored scalars:        {self.stored_total}  (deterministic + 2 x bayesian)",
        ]
        bayes_layers = [(k, v) for k, v in self.per_layer.items() if v["kind"] == "bayes"]
        if bayes_layers:
            lines.append("bayesian layers:")
            lines += [f"  {k:<24} {v['scalars']:>8}  pos={v['depth']}" for k, v in bayes_layers]
        return "\n".join(lines)


def parameter_report(params: BayesianParameterSet) -> ParameterReport:
    det = bayes = 0
    per_layer: dict[str, dict] = {}
    for name, slot in params.slots.items():
        layer = layer_of(name)
        if isinstance(slot, BayesianSlot):
            n = int(slot.mu.size)
            bayes += n
        else:
            n = int(slot.value.size)
            det += n
        entry = per_layer.setdefault(layer, {"kind": slot.kind, "scalars": 0, "depth": slot.depth})
        entry["scalars"] += n
    return ParameterReport(det, bayes, per_layer)


def depth_index(slot: BayesianSlot, config: ModelConfig) -> DepthIndex:
    return DepthIndex(slot.depth, config.n_layers)
