"""Dialogue corpora, the whitespace tokenizer and sequence packing."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, SEP, EOS, UNK = "[PAD]", "[BOS]", "[SEP]", "[EOS]", "[UNK]"
SPECIALS = (PAD, BOS, SEP, EOS, UNK)
IGNORE = -100


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class DialogueSample:
    """K >= 2 utterances; the last one is the reference response."""

    utterances: tuple[str, ...]

    def __post_init__(self) -> None:
        utts = tuple(self.utterances)
        object.__setattr__(self, "utterances", utts)
        if len(utts) < 2:
            raise IngestionError("a dialogue needs at least 2 utterances")
        if any(not isinstance(u, str) or not u.split() for u in utts):
            raise IngestionError("utterances must be non-empty strings")

    @property
    def context(self) -> tuple[str, ...]:
        return self.utterances[:-1]

    @property
    def reference(self) -> str:
        return self.utterances[-1]


def _parse_line(line: str, lineno: int, key_options=("utterances",)) -> list[str]:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise IngestionError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise IngestionError(f"line {lineno}: expected a JSON object")
    for key in key_options:
        if key in obj:
            utts = obj[key]
            break
    else:
        raise IngestionError(f"line {lineno}: missing key {key_options[0]!r}")
    if not isinstance(utts, list) or not all(isinstance(u, str) for u in utts):
        raise IngestionError(f"line {lineno}: {key!r} must be a list of strings")
    return utts


def load_corpus(path: str | Path) -> list[DialogueSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            utts = _parse_line(line, lineno)
            try:
                samples.append(DialogueSample(tuple(utts)))
            except IngestionError as exc:
                raise IngestionError(f"line {lineno}: {exc}") from None
    if not samples:
        raise IngestionError(f"{path}: corpus is empty")
    return samples


def load_contexts(path: str | Path) -> list[tuple[str, ...]]:
    """Contexts for generation: ``{"context": [...]}`` lines are used as-is,
    ``{"utterances": [...]}`` lines drop their final (reference) utterance."""
    contexts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                obj = None
            if isinstance(obj, dict) and "context" in obj:
                utts = _parse_line(line, lineno, ("context",))
                if not utts:
                    raise IngestionError(f"line {lineno}: empty context")
                contexts.append(tuple(utts))
            else:
                utts = _parse_line(line, lineno)
                try:
                    contexts.append(DialogueSample(tuple(utts)).context)
                except IngestionError as exc:
                    raise IngestionError(f"line {lineno}: {exc}") from None
    if not contexts:
        raise IngestionError(f"{path}: no contexts")
    return contexts


def write_corpus(samples: Iterable[DialogueSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"utterances": list(s.utterances)}) + "\n")


class Tokenizer:
    """Lowercased whitespace tokenizer with a fixed special-token set."""

    def __init__(self, vocab: Sequence[str]):
        vocab = list(vocab)
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.pad_id, self.bos_id, self.sep_id, self.eos_id, self.unk_id = range(len(SPECIALS))

    @classmethod
    def build(cls, samples: Iterable[DialogueSample]) -> "Tokenizer":
        words = set()
        for s in samples:
            for u in s.utterances:
                words.update(u.lower().split())
        return cls(list(SPECIALS) + sorted(words - set(SPECIALS)))

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in text.lower().split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids if i >= len(SPECIALS) or i == self.unk_id)

    def encode_context(self, utterances: Sequence[str]) -> list[int]:
        ids = [self.bos_id]
        for u in utterances:
            ids += self.encode(u) + [self.sep_id]
        return ids

    def encode_example(self, sample: DialogueSample, max_len: int, response_only: bool = True):
        """(input ids, target ids) for next-token training.

        Targets cover the reference tokens and [EOS]; with ``response_only``
        off, every position is supervised. Oldest context tokens are dropped
        when the packed sequence would exceed ``max_len``.
        """
        ctx = self.encode_context(sample.context)
        resp = self.encode(sample.reference) + [self.eos_id]
        if not resp[:-1]:
            raise IngestionError("reference response is empty after tokenization")
        overflow = len(ctx) + len(resp) - 1 - max_len
        if overflow > 0:
            if overflow >= len(ctx) - 1:
                raise IngestionError("reference response alone exceeds max_seq_len")
            ctx = [self.bos_id] + ctx[1 + overflow:]
        seq = ctx + resp
        inputs = seq[:-1]
        targets = seq[1:]
        if response_only:
            targets = [IGNORE] * (len(ctx) - 1) + targets[len(ctx) - 1:]
        return inputs, targets


def pad_batch(pairs: Sequence[tuple[list[int], list[int]]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad; padded positions never influence earlier ones under causal attention."""
    t = max(len(i) for i, _ in pairs)
    ids = np.full((len(pairs), t), pad_id, dtype=np.int64)
    tgt = np.full((len(pairs), t), IGNORE, dtype=np.int64)
    for r, (i, y) in enumerate(pairs):
        ids[r, : len(i)] = i
        tgt[r, : len(y)] = y
    return ids, tgt
