import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ebdialog import checkpoint
from ebdialog.cli import main

MODEL = {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "max_seq_len": 48}
TRAIN = {"learning_rate": 3e-3, "batch_size": 16, "epochs": 1}
DECODE = {"max_new_tokens": 8}


def _write(path: Path, obj) -> str:
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """A small workspace: corpus, configs and a pretrained MLE checkpoint."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["make-corpus", "--n", "48", "--seed", "2", "--out", str(d / "corpus.jsonl")]) == 0
    _write(d / "model.json", MODEL)
    _write(d / "train.json", TRAIN)
    _write(d / "decode.json", DECODE)
    args = ["pretrain", "--corpus", str(d / "corpus.jsonl"), "--model-config", str(d / "model.json"),
            "--train-config", str(d / "train.json"), "--seed", "0", "--out", str(d / "mle.ckpt")]
    assert main(args) == 0
    return d


def _pipeline(ws: Path, out: Path, tag: str) -> dict[str, bytes]:
    """bayesianize -> finetune -> generate -> evaluate; returns every produced file."""
    p = {k: out / f"{tag}.{k}" for k in ("bayes", "tuned", "gen", "report")}
    assert main(["bayesianize", "--mle", str(ws / "mle.ckpt"), "--alpha", "0.1", "--out", str(p["bayes"])]) == 0
    assert main(["finetune", "--checkpoint", str(p["bayes"]), "--corpus", str(ws / "corpus.jsonl"),
                 "--train-config", str(ws / "train.json"), "--seed", "1", "--out", str(p["tuned"])]) == 0
    assert main(["generate", "--checkpoint", str(p["tuned"]), "--contexts", str(ws / "corpus.jsonl"),
                 "--decode-config", str(ws / "decode.json"), "--seed", "3", "--out", str(p["gen"])]) == 0
    assert main(["evaluate", "--generations", str(p["gen"]), "--stub-oracle", "--out", str(p["report"])]) == 0
    files = sorted(out.glob(f"{tag}.*"))
    return {f.name.split(".", 1)[1]: f.read_bytes() for f in files}


def test_replay_is_byte_identical(ws, tmp_path):
    a = _pipeline(ws, tmp_path, "a")
    b = _pipeline(ws, tmp_path, "b")
    assert set(a) == {"bayes", "tuned", "tuned.log.jsonl", "gen", "report"}
    assert a == b


def test_pretrain_replay(ws, tmp_path):
    args = ["pretrain", "--corpus", str(ws / "corpus.jsonl"), "--model-config", str(ws / "model.json"),
            "--train-config", str(ws / "train.json"), "--seed", "0", "--log", str(tmp_path / "log.jsonl"),
            "--out", str(tmp_path / "again.ckpt")]
    assert main(args) == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (ws / "mle.ckpt").read_bytes()
    assert (tmp_path / "log.jsonl").read_text().count("\n") == 3


def test_make_corpus_replay(tmp_path):
    for name in ("x", "y"):
        assert main(["make-corpus", "--n", "20", "--seed", "4", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "x").read_bytes() == (tmp_path / "y").read_bytes()


def test_bad_corpus_line_names_line(ws, tmp_path, capsys):
    lines = (ws / "corpus.jsonl").read_text().splitlines()[:20]
    lines[16] = '{"utterances": "not a list"}'
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    args = ["finetune", "--checkpoint", str(ws / "mle.ckpt"), "--corpus", str(tmp_path / "bad.jsonl"),
            "--out", str(tmp_path / "o.ckpt")]
    assert main(args) == 1
    assert "line 17" in capsys.readouterr().err


@pytest.mark.parametrize("extra,needle", [
    (["--schedule", "bodeb-x"], "bodeb-x"),
    (["--flags=-bogus"], "bogus"),
    (["--eta", "2"], "eta"),
])
def test_bad_schedule_or_flag(ws, tmp_path, capsys, extra, needle):
    rc = main(["bayesianize", "--mle", str(ws / "mle.ckpt"), *extra, "--out", str(tmp_path / "o")])
    assert rc == 1
    assert needle in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_unknown_config_key(ws, tmp_path, capsys):
    bad = _write(tmp_path / "t.json", {"lr": 1.0})
    rc = main(["finetune", "--checkpoint", str(ws / "mle.ckpt"), "--corpus", str(ws / "corpus.jsonl"),
               "--train-config", bad, "--out", str(tmp_path / "o")])
    assert rc == 1 and "lr" in capsys.readouterr().err


def test_usage_error_is_input_error(capsys):
    assert main(["bayesianize", "--out", "x"]) == 1
    assert "--mle" in capsys.readouterr().err


def test_missing_file(tmp_path):
    assert main(["generate", "--checkpoint", str(tmp_path / "nope"), "--contexts", "x", "--out", "y"]) == 1


def test_divergence_exit_code(ws, tmp_path, capsys):
    params = checkpoint.load(ws / "mle.ckpt")
    params.slots["lm_head.weight"].value[0, 0] = np.nan
    checkpoint.save(params, tmp_path / "nan.ckpt")
    with np.errstate(all="ignore"):
        rc = main(["finetune", "--checkpoint", str(tmp_path / "nan.ckpt"), "--corpus", str(ws / "corpus.jsonl"),
                   "--out", str(tmp_path / "o")])
    assert rc == 2 and "step 0" in capsys.readouterr().err


def test_flags_none_reports_zero(ws, tmp_path, capsys):
    assert main(["bayesianize", "--mle", str(ws / "mle.ckpt"), "--flags", "none", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "bayesian scalars:      0" in out
    assert checkpoint.load(tmp_path / "o").bayesian_names == []


def test_evaluate_without_oracle(ws, tmp_path):
    gen = tmp_path / "gen.jsonl"
    assert main(["generate", "--checkpoint", str(ws / "mle.ckpt"), "--contexts", str(ws / "corpus.jsonl"),
                 "--decode-config", str(ws / "decode.json"), "--out", str(gen)]) == 0
    assert main(["evaluate", "--generations", str(gen), "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["ue_score"] is None
    assert rep["counts"]["ue_contexts_skipped"] == 48


def test_evaluate_with_stub_process(ws, tmp_path):
    gen = tmp_path / "gen.jsonl"
    main(["generate", "--checkpoint", str(ws / "mle.ckpt"), "--contexts", str(ws / "corpus.jsonl"),
          "--decode-config", str(ws / "decode.json"), "--out", str(gen)])
    cmd = f"{sys.executable} -m ebdialog.stub_oracle"
    assert main(["evaluate", "--generations", str(gen), "--oracle-cmd", cmd, "--out", str(tmp_path / "a")]) == 0
    assert main(["evaluate", "--generations", str(gen), "--stub-oracle", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_sweep_alpha(ws, tmp_path):
    out = tmp_path / "sweep"
    rc = main(["sweep-alpha", "--mle", str(ws / "mle.ckpt"), "--corpus", str(ws / "corpus.jsonl"),
               "--alphas", "0,0.1", "--train-config", str(ws / "train.json"),
               "--decode-config", str(ws / "decode.json"), "--stub-oracle", "--out-dir", str(out)])
    assert rc == 0
    rows = list(csv.reader((out / "sweep.csv").open()))
    assert rows[0][:3] == ["alpha", "distinct_1", "distinct_2"]
    assert [r[0] for r in rows[1:]] == ["0.0", "0.1"]
    assert (out / "report_alpha_0.json").exists() and (out / "report_alpha_0.1.json").exists()


def test_sweep_bad_alphas(ws, tmp_path):
    rc = main(["sweep-alpha", "--mle", str(ws / "mle.ckpt"), "--corpus", str(ws / "corpus.jsonl"),
               "--alphas", "a,b", "--out-dir", str(tmp_path)])
    assert rc == 1


def _run(args, env_extra):
    env = dict(os.environ, **env_extra)
    return subprocess.run([sys.executable, "-m", "ebdialog.cli", *args], env=env, capture_output=True, text=True)


def test_thread_cap_env(tmp_path):
    bad = _run(["make-corpus", "--n", "3", "--out", str(tmp_path / "c")], {"BODEB_THREADS": "zero"})
    assert bad.returncode == 1 and "BODEB_THREADS" in bad.stderr
    ok = _run(["make-corpus", "--n", "3", "--out", str(tmp_path / "c")], {"BODEB_THREADS": "1"})
    assert ok.returncode == 0 and (tmp_path / "c").read_text().count("\n") == 3


def test_help_lists_commands():
    res = _run(["--help"], {})
    for cmd in ("make-corpus", "pretrain", "bayesianize", "finetune", "generate", "evaluate", "sweep-alpha"):
        assert cmd in res.stdout
