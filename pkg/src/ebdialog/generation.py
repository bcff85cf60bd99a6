"""Autoregressive response generation with per-context weight sampling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Tokenizer
from .model import BayesianParameterSet, derive_seed, forward, realize
from .variational import InvalidArgument


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"  # or "temperature"
    temperature: float = 1.0
    max_new_tokens: int = 16
    stop_token_id: int | None = None  # None: the tokenizer's [EOS]
    resample_granularity: str = "per_context"  # or "per_token"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in ("greedy", "temperature"):
            raise InvalidArgument(f"decode.strategy: unknown strategy {self.strategy!r}")
        if self.strategy == "temperature" and not self.temperature > 0:
            raise InvalidArgument("decode.temperature must be > 0")
        if self.max_new_tokens < 1:
            raise InvalidArgument("decode.max_new_tokens must be >= 1")
        if self.resample_granularity not in ("per_context", "per_token"):
            raise InvalidArgument(f"decode.resample_granularity: unknown value {self.resample_granularity!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DecodeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"decode config: unknown key(s) {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class GenerationRecord:
    context: list[str]
    response: str
    seed: int
    decode: dict

    def to_json(self) -> str:
        return json.dumps(
            {"context": self.context, "response": self.response, "seed": self.seed, "decode": self.decode},
            sort_keys=True,
        )

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenerationRecord":
        return cls(list(d["context"]), d["response"], int(d["seed"]), dict(d.get("decode", {})))


def greedy_pick(logits: np.ndarray) -> int:
    """argmax with ties broken toward the lowest token id."""
    return int(np.argmax(logits))  # np.argmax returns the first maximal index


def temperature_pick(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    z = logits.astype(np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def generate_ids(
    params: BayesianParameterSet, context_ids: Sequence[int], cfg: DecodeConfig, seed: int, stop_id: int
) -> list[int]:
    config = params.config
    if len(context_ids) + cfg.max_new_tokens > config.max_seq_len:
        raise InvalidArgument(
            f"context of {len(context_ids)} tokens does not fit max_seq_len {config.max_seq_len} "
            f"with max_new_tokens {cfg.max_new_tokens}"
        )
    has_bayes = bool(params.bayesian_names)
    weights = realize(params, seed) if has_bayes else realize(params, seed, zero_noise=True)
    rng = np.random.default_rng(derive_seed(seed, "decode"))
    seq = list(context_ids)
    out: list[int] = []
    for step in range(cfg.max_new_tokens):
        if has_bayes and cfg.resample_granularity == "per_token" and step > 0:
            weights = realize(params, derive_seed(seed, "token", step))
        logits = forward(weights, seq)[-1]
        if cfg.strategy == "greedy":
            nxt = greedy_pick(logits)
        else:
            nxt = temperature_pick(logits, cfg.temperature, rng)
        if nxt == stop_id:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


def generate(
    params: BayesianParameterSet, context: Sequence[str], cfg: DecodeConfig, seed: int | None = None
) -> GenerationRecord:
    """Draw one weight realization for the context, then decode."""
    seed = cfg.seed if seed is None else seed
    tok = Tokenizer(params.vocab)
    stop = tok.eos_id if cfg.stop_token_id is None else cfg.stop_token_id
    ids = generate_ids(params, tok.encode_context(context), cfg, seed, stop)
    return GenerationRecord(list(context), tok.decode(ids), seed, cfg.to_dict())


def context_seed(base_seed: int, index: int) -> int:
    return derive_seed(base_seed, "context", index)


def generate_batch(
    params: BayesianParameterSet, contexts: Sequence[Sequence[str]], cfg: DecodeConfig
) -> list[GenerationRecord]:
    """Seeds travel with positions: context ``i`` always uses ``context_seed(cfg.seed, i)``,
    so reordering the inputs changes which seed each context receives."""
    records = []
    for i, ctx in enumerate(contexts):
        try:
            records.append(generate(params, ctx, cfg, seed=context_seed(cfg.seed, i)))
        except InvalidArgument as exc:
            raise InvalidArgument(f"context {i}: {exc}") from None
    return records


def write_records(records: Iterable[GenerationRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[GenerationRecord]:
    with open(path, encoding="utf-8") as fh:
        return [GenerationRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
