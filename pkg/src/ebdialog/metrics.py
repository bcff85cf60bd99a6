"""Response diversity (Distinct-n, MATTR, MTLD, HD-D) and utterance entailment.

Distinct-n pools n-grams across all responses; MATTR, MTLD and HD-D are
computed per response and averaged over responses where they are defined.
"""

from __future__ import annotations

import json
import math
import re
import shlex
import subprocess
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

ENTAIL, CONTRADICT, NEUTRAL = "ENTAIL", "CONTRADICT", "NEUTRAL"
LABEL_SCORE = {ENTAIL: 1, CONTRADICT: -1, NEUTRAL: 0}
_LABEL_ALIASES = {
    "entail": ENTAIL,
    "entailment": ENTAIL,
    "contradict": CONTRADICT,
    "contradiction": CONTRADICT,
    "neutral": NEUTRAL,
}


class UndefinedMetric(ValueError):
    pass


class MetricError(RuntimeError):
    pass


_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and detach punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class MetricConfig:
    mattr_window: int = 50
    mtld_threshold: float = 0.72
    hdd_sample: int = 42

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"metric config: unknown key(s) {sorted(unknown)}")
        return cls(**d)


def ttr(tokens: Sequence[str]) -> float:
    if not tokens:
        raise UndefinedMetric("TTR of an empty stream")
    return len(set(tokens)) / len(tokens)


def distinct_n(responses: Iterable[Sequence[str]], n: int) -> float:
    grams: Counter = Counter()
    for toks in responses:
        grams.update(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))
    total = sum(grams.values())
    if total == 0:
        raise UndefinedMetric(f"no {n}-grams in any response")
    return len(grams) / total


def mattr(tokens: Sequence[str], window: int = 50) -> float:
    """Mean TTR over every length-``window`` sliding window (stride 1)."""
    n = len(tokens)
    if n == 0:
        raise UndefinedMetric("MATTR of an empty stream")
    if n <= window:
        return ttr(tokens)
    counts = Counter(tokens[:window])
    total = len(counts)
    for i in range(window, n):
        counts[tokens[i]] += 1
        old = tokens[i - window]
        counts[old] -= 1
        if counts[old] == 0:
            del counts[old]
        total += len(counts)
    return total / (window * (n - window + 1))


def _mtld_pass(tokens: Sequence[str], threshold: float) -> float:
    factors = 0.0
    types: set[str] = set()
    length = 0
    for tok in tokens:
        types.add(tok)
        length += 1
        if len(types) / length < threshold:
            factors += 1.0
            types = set()
            length = 0
    if length:
        factors += (1.0 - len(types) / length) / (1.0 - threshold)
    if factors == 0.0:
        return float(len(tokens))
    return len(tokens) / factors


def mtld(tokens: Sequence[str], threshold: float = 0.72) -> float:
    """Bidirectional MTLD with partial final factors."""
    if not tokens:
        raise UndefinedMetric("MTLD of an empty stream")
    return 0.5 * (_mtld_pass(tokens, threshold) + _mtld_pass(list(reversed(tokens)), threshold))


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def hdd(tokens: Sequence[str], sample: int = 42) -> float:
    """Expected TTR of a ``sample``-token draw without replacement (analytic)."""
    n_tok = len(tokens)
    if n_tok < sample:
        raise UndefinedMetric(f"HD-D needs at least {sample} tokens, got {n_tok}")
    log_all = _log_comb(n_tok, sample)
    total = 0.0
    for freq in Counter(tokens).values():
        rest = n_tok - freq
        miss = 0.0 if rest < sample else math.exp(_log_comb(rest, sample) - log_all)
        total += 1.0 - miss
    # expected number of types in the draw, divided once so integer cases stay exact
    return total / sample


# -- utterance entailment --------------------------------------------------------

class EntailmentOracle(Protocol):
    def __call__(self, premise: str, hypothesis: str) -> str: ...


_SENT_RE = re.compile(r"[^.!?]*[.!?]+|[^.!?]+$")


def split_sentences(utterance: str) -> list[str]:
    return [s.strip() for s in _SENT_RE.findall(utterance) if s.strip()]


def ue_sentences(context: Sequence[str], min_words: int = 4) -> list[str]:
    """Context sentences that survive the short-sentence filter."""
    return [s for u in context for s in split_sentences(u) if len(s.split()) >= min_words]


def normalize_label(label) -> str:
    key = str(label).strip()
    if key in LABEL_SCORE:
        return key
    try:
        return _LABEL_ALIASES[key.lower()]
    except KeyError:
        raise MetricError(f"unknown entailment label {label!r}") from None


@dataclass(frozen=True)
class UEResult:
    score: float | None
    pairs: int


def ue_detail(response: str, context: Sequence[str], oracle: EntailmentOracle) -> UEResult:
    sentences = ue_sentences(context)
    if not sentences:
        return UEResult(None, 0)
    total = 0
    for sent in sentences:
        try:
            label = normalize_label(oracle(sent, response))
        except Exception as exc:
            raise MetricError(f"oracle failed on premise={sent!r} hypothesis={response!r}: {exc}") from exc
        total += LABEL_SCORE[label]
    return UEResult(total / len(sentences), len(sentences))


def ue_score(response: str, context: Sequence[str], oracle: EntailmentOracle) -> float | None:
    """Mean of +1/-1/0 over filtered context sentences; None when nothing survives."""
    return ue_detail(response, context, oracle).score


_STOPWORDS = frozenset(
    "a an the is are was were be been am i you he she it we they me my your our their to of in on at "
    "for with and or but so that this these those do does did have has had will would can could "
    "about what why how there here very really too also just".split()
)
_NEGATIONS = frozenset({"not", "no", "never", "n't", "nobody", "nothing", "neither", "nor"})


class LexicalOverlapOracle:
    """Deterministic stand-in for an NLI model; exercises the UE plumbing only.

    CONTRADICT when exactly one side is negated and they share a content
    word; ENTAIL when >= 60% of the hypothesis' content words appear in the
    premise; NEUTRAL otherwise.
    """

    thread_safe = True

    def __init__(self, overlap: float = 0.6):
        self.overlap = overlap

    @staticmethod
    def _content(tokens: Iterable[str]) -> set[str]:
        return {t for t in tokens if t.isalnum() and t not in _STOPWORDS and t not in _NEGATIONS}

    def __call__(self, premise: str, hypothesis: str) -> str:
        p_tok = tokenize(premise.replace("n't", " n't"))
        h_tok = tokenize(hypothesis.replace("n't", " n't"))
        p, h = self._content(p_tok), self._content(h_tok)
        shared = p & h
        if shared and (bool(_NEGATIONS & set(p_tok)) != bool(_NEGATIONS & set(h_tok))):
            return CONTRADICT
        if h and len(shared) / len(h) >= self.overlap:
            return ENTAIL
        return NEUTRAL


class SubprocessOracle:
    """Talks to an external NLI process over newline-delimited JSON.

    Each request is ``{"premise": ..., "hypothesis": ...}``; the process
    answers each with one line ``{"label": "ENTAIL"|"CONTRADICT"|"NEUTRAL"}``.
    """

    thread_safe = False

    def __init__(self, command: str | Sequence[str]):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
        )
        self._lock = threading.Lock()

    def __call__(self, premise: str, hypothesis: str) -> str:
        with self._lock:
            if self.proc.poll() is not None:
                raise MetricError(f"oracle process exited with code {self.proc.returncode}")
            self.proc.stdin.write(json.dumps({"premise": premise, "hypothesis": hypothesis}) + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
        if not line:
            raise MetricError("oracle process closed its output")
        try:
            return normalize_label(json.loads(line)["label"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MetricError(f"malformed oracle reply {line.strip()!r}") from exc

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# -- corpus report --------------------------------------------------------------------

@dataclass
class MetricsReport:
    distinct_1: float | None
    distinct_2: float | None
    mattr: float | None
    mtld: float | None
    hdd: float | None
    ue_score: float | None
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _mean(values: list[float]) -> float | None:
    # fsum keeps the average independent of record order
    return math.fsum(values) / len(values) if values else None


def evaluate_corpus(
    responses: Sequence[str],
    contexts: Sequence[Sequence[str]] | None,
    cfg: MetricConfig = MetricConfig(),
    oracle: EntailmentOracle | None = None,
) -> MetricsReport:
    if not responses:
        raise UndefinedMetric("no records to evaluate")
    if contexts is not None and len(contexts) != len(responses):
        raise ValueError(f"{len(responses)} responses but {len(contexts)} contexts")
    streams = [tokenize(r) for r in responses]
    if not any(streams):
        raise UndefinedMetric("every response is empty")

    def maybe(fn, *args):
        try:
            return fn(*args)
        except UndefinedMetric:
            return None

    per = {"mattr": [], "mtld": [], "hdd": []}
    for toks in streams:
        for key, fn, arg in (
            ("mattr", mattr, cfg.mattr_window),
            ("mtld", mtld, cfg.mtld_threshold),
            ("hdd", hdd, cfg.hdd_sample),
        ):
            v = maybe(fn, toks, arg)
            if v is not None:
                per[key].append(v)

    ue_values: list[float] = []
    pairs = 0
    skipped = 0
    if oracle is None or contexts is None:
        skipped = len(responses)
    else:
        for resp, ctx in zip(responses, contexts):
            res = ue_detail(resp, ctx, oracle)
            pairs += res.pairs
            if res.score is None:
                skipped += 1
            else:
                ue_values.append(res.score)

    return MetricsReport(
        distinct_1=maybe(distinct_n, streams, 1),
        distinct_2=maybe(distinct_n, streams, 2),
        mattr=_mean(per["mattr"]),
        mtld=_mean(per["mtld"]),
        hdd=_mean(per["hdd"]),
        ue_score=_mean(ue_values),
        counts={
            "responses": len(responses),
            "empty_responses": sum(1 for s in streams if not s),
            "mattr_defined": len(per["mattr"]),
            "mtld_defined": len(per["mtld"]),
            "hdd_defined": len(per["hdd"]),
            "hdd_skipped": len(streams) - len(per["hdd"]),
            "ue_pairs": pairs,
            "ue_contexts_scored": len(ue_values),
            "ue_contexts_skipped": skipped,
        },
        config=asdict(cfg),
    )
