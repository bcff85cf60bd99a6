"""ebdialog command line: pretrain -> bayesianize -> finetune -> generate -> evaluate.

Exit codes: 0 ok, 1 bad input (files, configs, flags), 2 runtime failure
(training divergence, oracle crash, every sweep point failing).
Diagnostics go to stderr; results go to the paths given on the command line.

Package imports are deferred until after BODEB_THREADS has been applied to
the BLAS thread variables, which only take effect before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class InputError(ValueError):
    pass


def _apply_thread_cap() -> None:
    raw = os.environ.get("BODEB_THREADS")
    if raw is None:
        return
    if not raw.isdigit() or int(raw) < 1:
        raise InputError(f"BODEB_THREADS must be a positive integer, got {raw!r}")
    for var in _THREAD_VARS:
        os.environ[var] = raw


def _read_json(path: str | None, what: str) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise InputError(f"{what} {path}: expected a JSON object")
    return obj


def _train_config(args):
    from .training import TrainConfig

    d = _read_json(args.train_config, "train config")
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _decode_config(args):
    from .generation import DecodeConfig

    d = _read_json(args.decode_config, "decode config")
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    return DecodeConfig.from_dict(d)


def _metric_config(args):
    from .metrics import MetricConfig

    return MetricConfig.from_dict(_read_json(args.metric_config, "metric config"))


def _schedule_config(args):
    from .schedules import ScheduleConfig, ScheduleKind

    return ScheduleConfig(
        kind=ScheduleKind.parse(args.schedule),
        alpha=args.alpha,
        eta=args.eta,
        sigma_floor=args.sigma_floor,
        moped_delta=args.moped_delta,
    )


def _flags(args):
    from .model import LayerBayesFlags

    return LayerBayesFlags.parse(args.flags)


def _write_log(log, path: Path) -> None:
    path.write_text(log.to_jsonl(), encoding="utf-8")


def _log_path(args) -> Path:
    return Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")


# -- commands ---------------------------------------------------------------------------


def cmd_make_corpus(args) -> int:
    from .data import write_corpus
    from .toycorpus import make_corpus

    write_corpus(make_corpus(args.n, args.seed), args.out)
    return 0


def cmd_pretrain(args) -> int:
    from . import checkpoint
    from .data import load_corpus
    from .model import ModelConfig
    from .training import pretrain_deterministic

    corpus = load_corpus(args.corpus)
    model_cfg = ModelConfig.from_dict(_read_json(args.model_config, "model config"))
    train_cfg = _train_config(args)
    mle, log = pretrain_deterministic(corpus, model_cfg, train_cfg)
    checkpoint.save(mle, args.out)
    if args.log:
        _write_log(log, Path(args.log))
    print(f"final loss: {log.epochs[-1]['loss']:.6f}")
    return 0


def cmd_bayesianize(args) -> int:
    from . import checkpoint
    from .model import parameter_report
    from .schedules import bayesianize

    mle = checkpoint.load_mle(args.mle)
    params = bayesianize(mle, _flags(args), _schedule_config(args))
    checkpoint.save(params, args.out)
    print(parameter_report(params).format())
    return 0


def cmd_finetune(args) -> int:
    from . import checkpoint
    from .data import load_corpus
    from .training import finetune

    params = checkpoint.load(args.checkpoint)
    corpus = load_corpus(args.corpus)
    tuned, log = finetune(params, corpus, _train_config(args))
    checkpoint.save(tuned, args.out)
    _write_log(log, _log_path(args))
    last = log.epochs[-1]
    print(f"final loss: {last['loss']:.6f} (nll {last['nll']:.6f}, kl_total {last['kl_total']:.3f})")
    return 0


def cmd_generate(args) -> int:
    from . import checkpoint
    from .data import load_contexts
    from .generation import generate_batch, write_records

    params = checkpoint.load(args.checkpoint)
    records = generate_batch(params, load_contexts(args.contexts), _decode_config(args))
    write_records(records, args.out)
    print(f"wrote {len(records)} generations", file=sys.stderr)
    return 0


def _open_oracle(args):
    from .metrics import LexicalOverlapOracle, SubprocessOracle

    if getattr(args, "stub_oracle", False):
        return LexicalOverlapOracle()
    if args.oracle_cmd:
        return SubprocessOracle(args.oracle_cmd)
    return None


def _close_oracle(oracle) -> None:
    if hasattr(oracle, "close"):
        oracle.close()


def cmd_evaluate(args) -> int:
    from .data import load_contexts
    from .generation import read_records
    from .metrics import evaluate_corpus

    try:
        records = read_records(args.generations)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{args.generations}: malformed generation record ({exc})") from None
    if args.contexts:
        contexts = load_contexts(args.contexts)
        if len(contexts) != len(records):
            raise InputError(f"{len(records)} generations but {len(contexts)} contexts")
    else:
        contexts = [r.context for r in records]
    oracle = _open_oracle(args)
    try:
        report = evaluate_corpus([r.response for r in records], contexts, _metric_config(args), oracle)
    finally:
        _close_oracle(oracle)
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    return 0


def _parse_alphas(text: str) -> list[float]:
    try:
        alphas = [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise InputError(f"--alphas: cannot parse {text!r}") from None
    if not alphas:
        raise InputError("--alphas: empty list")
    return alphas


def cmd_sweep_alpha(args) -> int:
    from . import checkpoint, pipeline
    from .data import load_contexts, load_corpus

    mle = checkpoint.load_mle(args.mle)
    corpus = load_corpus(args.corpus)
    contexts = load_contexts(args.contexts) if args.contexts else [s.context for s in corpus]
    alphas = _parse_alphas(args.alphas)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    oracle = _open_oracle(args)
    try:
        results, failures = pipeline.sweep_alpha(
            mle,
            corpus,
            contexts,
            alphas,
            schedule=_schedule_config(args),
            flags=_flags(args),
            train_cfg=_train_config(args),
            decode_cfg=_decode_config(args),
            metric_cfg=_metric_config(args),
            oracle=oracle,
        )
    finally:
        _close_oracle(oracle)
    for alpha, res in results.items():
        (out_dir / f"report_alpha_{alpha:g}.json").write_text(res.report.to_json(), encoding="utf-8")
    (out_dir / "sweep.csv").write_text(pipeline.sweep_table(results), encoding="utf-8")
    for alpha, msg in failures.items():
        print(f"alpha {alpha:g} failed: {msg}", file=sys.stderr)
    if not results:
        print("error: every alpha failed", file=sys.stderr)
        return 2
    print(pipeline.sweep_table(results), end="")
    return 0


# -- parser ---------------------------------------------------------------------------


def _add_schedule_args(p: argparse.ArgumentParser, alpha_required: bool = False) -> None:
    p.add_argument("--schedule", default="bodeb-m",
                   help="bodeb-g | bodeb-m | moped | opposite | weights-only | bias-only | none")
    if not alpha_required:
        p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--sigma-floor", type=float, default=1e-6)
    p.add_argument("--moped-delta", type=float, default=None)
    p.add_argument("--flags", default="default",
                   help="default | none | all | comma list of attn,fc,lm_head,proj | +x/-x edits "
                        "(write edits as --flags=-lm_head)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebdialog", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="write a synthetic template dialogue corpus")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("pretrain", help="train the deterministic (MLE) model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="optional JSONL step log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("bayesianize", help="attach priors and posteriors to an MLE checkpoint")
    p.add_argument("--mle", required=True)
    _add_schedule_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bayesianize)

    p = sub.add_parser("finetune", help="maximize the ELBO on a dialogue corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-config")
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="JSONL step log (default: <out>.log.jsonl)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("generate", help="decode one response per context")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--contexts", required=True)
    p.add_argument("--decode-config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="diversity metrics and utterance entailment")
    p.add_argument("--generations", required=True)
    p.add_argument("--contexts", help="override the contexts stored in the generation records")
    p.add_argument("--metric-config")
    p.add_argument("--oracle-cmd", help="NLI process speaking NDJSON on stdin/stdout")
    p.add_argument("--stub-oracle", action="store_true", help="use the built-in lexical-overlap oracle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-alpha", help="full pipeline per alpha; one report each plus a CSV")
    p.add_argument("--mle", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--contexts", help="evaluation contexts (default: contexts of the corpus)")
    p.add_argument("--alphas", default="0,0.01,0.05,0.1,0.5")
    _add_schedule_args(p, alpha_required=True)
    p.add_argument("--train-config")
    p.add_argument("--decode-config")
    p.add_argument("--metric-config")
    p.add_argument("--seed", type=int, help="overrides both train and decode seeds")
    p.add_argument("--oracle-cmd")
    p.add_argument("--stub-oracle", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep_alpha, alpha=0.05)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; here 2 is reserved for runtime failures
        return 1 if exc.code == 2 else int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap()
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    from .metrics import MetricError
    from .training import TrainingDivergence

    try:
        return args.func(args)
    except (TrainingDivergence, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        # ingestion, checkpoint, schedule/flag and config validation errors all derive from ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
