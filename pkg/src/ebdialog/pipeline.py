"""End-to-end runs: bayesianize -> finetune -> generate -> evaluate."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

from .data import DialogueSample
from .generation import DecodeConfig, GenerationRecord, generate_batch
from .metrics import EntailmentOracle, MetricConfig, MetricsReport, evaluate_corpus
from .model import BayesianParameterSet, LayerBayesFlags, MleCheckpoint, ParameterReport, parameter_report
from .schedules import ScheduleConfig, bayesianize
from .training import TrainConfig, TrainingLog, finetune

SWEEP_COLUMNS = ("alpha", "distinct_1", "distinct_2", "mattr", "mtld", "hdd", "ue_score")
DEFAULT_ALPHAS = (0.0, 0.01, 0.05, 0.1, 0.5)


@dataclass
class RunResult:
    params: BayesianParameterSet
    log: TrainingLog
    records: list[GenerationRecord]
    report: MetricsReport
    parameters: ParameterReport


def run_variant(
    mle: MleCheckpoint,
    corpus: Sequence[DialogueSample],
    contexts: Sequence[Sequence[str]],
    schedule: ScheduleConfig,
    flags: LayerBayesFlags,
    train_cfg: TrainConfig,
    decode_cfg: DecodeConfig,
    metric_cfg: MetricConfig = MetricConfig(),
    oracle: EntailmentOracle | None = None,
) -> RunResult:
    params = bayesianize(mle, flags, schedule)
    tuned, log = finetune(params, corpus, train_cfg)
    records = generate_batch(tuned, contexts, decode_cfg)
    report = evaluate_corpus([r.response for r in records], [r.context for r in records], metric_cfg, oracle)
    return RunResult(tuned, log, records, report, parameter_report(tuned))


def run_baseline(mle, corpus, contexts, train_cfg, decode_cfg, metric_cfg=MetricConfig(), oracle=None) -> RunResult:
    """Deterministic finetuning of the MLE model (no Bayesian layers)."""
    return run_variant(
        mle, corpus, contexts, ScheduleConfig(), LayerBayesFlags.none(), train_cfg, decode_cfg, metric_cfg, oracle
    )


def sweep_alpha(
    mle: MleCheckpoint,
    corpus: Sequence[DialogueSample],
    contexts: Sequence[Sequence[str]],
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    schedule: ScheduleConfig = ScheduleConfig(),
    flags: LayerBayesFlags = LayerBayesFlags(),
    train_cfg: TrainConfig = TrainConfig(),
    decode_cfg: DecodeConfig = DecodeConfig(),
    metric_cfg: MetricConfig = MetricConfig(),
    oracle: EntailmentOracle | None = None,
) -> tuple[dict[float, RunResult], dict[float, str]]:
    """One full pipeline run per alpha; failures are collected, not raised."""
    results: dict[float, RunResult] = {}
    failures: dict[float, str] = {}
    for alpha in alphas:
        try:
            results[alpha] = run_variant(
                mle, corpus, contexts, replace(schedule, alpha=alpha), flags, train_cfg, decode_cfg, metric_cfg, oracle
            )
        except (ValueError, RuntimeError) as exc:
            failures[alpha] = f"{type(exc).__name__}: {exc}"
    return results, failures


def sweep_table(results: dict[float, RunResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for alpha in sorted(results):
        rep = results[alpha].report
        row = [repr(float(alpha))]
        for col in SWEEP_COLUMNS[1:]:
            v = getattr(rep, col)
            row.append("" if v is None else repr(v))
        writer.writerow(row)
    return buf.getvalue()
