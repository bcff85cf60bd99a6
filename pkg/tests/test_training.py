import math
from dataclasses import replace

import numpy as np
import pytest
from _support import TINY, elbo_closure, generic_point, tiny_batch, tiny_mle

from ebdialog import numerics as nx
from ebdialog.data import DialogueSample, IngestionError
from ebdialog.model import BayesianSlot, LayerBayesFlags, ModelConfig
from ebdialog.schedules import ScheduleConfig, bayesianize
from ebdialog.toycorpus import make_corpus
from ebdialog.training import (
    ParameterTensors,
    TrainConfig,
    TrainingDivergence,
    elbo_loss,
    finetune,
    pretrain_deterministic,
    run_training,
)
from ebdialog.variational import InvalidArgument, kl_gaussian_array

# one layer, d_model 4: every leaf can be finite-differenced in a few seconds
MICRO = ModelConfig(n_layers=1, d_model=4, n_heads=2, d_ff=8, vocab_size=50, max_seq_len=12)


def test_elbo_gradient_matches_finite_differences():
    params = generic_point(bayesianize(tiny_mle(0, MICRO), LayerBayesFlags(proj=True), ScheduleConfig()))
    batch = tiny_batch(np.random.default_rng(0), config=MICRO)
    f, grad_f, point = elbo_closure(params, batch, 123, TrainConfig(), 1e-3, np.float64)
    err = nx.gradcheck(f, grad_f, point, scale_floor=0.1, order=4)
    assert err < 1e-5


class TestKL:
    def test_zero_bayesian_slots(self):
        params = bayesianize(tiny_mle(), LayerBayesFlags.none(), ScheduleConfig())
        br, _ = elbo_loss(params, tiny_batch(np.random.default_rng(1)), 0, TrainConfig())
        assert br.kl_total == 0.0
        assert br.loss == br.nll

    def test_closed_form_after_bayesianize(self):
        params = bayesianize(tiny_mle(scale=3.0), LayerBayesFlags(), ScheduleConfig(kind="bodeb-g"))
        expected = 0.0
        for name in params.bayesian_names:
            s = params.slots[name]
            expected += kl_gaussian_array(s.mu, s.rho, s.prior_mean, s.prior.sigma).sum()
        with nx.no_grad():
            got = ParameterTensors(params).kl().item()
        assert got == pytest.approx(expected, rel=1e-6)

    def test_independent_of_batch_content(self):
        params = bayesianize(tiny_mle(), LayerBayesFlags(), ScheduleConfig())
        rng = np.random.default_rng(2)
        kls = {elbo_loss(params, tiny_batch(rng, n), 5, TrainConfig())[0].kl_total for n in (1, 3, 6)}
        assert len(kls) == 1

    def test_scale_is_inverse_batch_count(self):
        assert TrainConfig().kl_scale(40) == 1 / 40
        assert TrainConfig(kl_weight_mode="fixed", kl_weight=0.3).kl_scale(40) == 0.3


def test_more_mc_samples_reduce_variance():
    params = bayesianize(tiny_mle(scale=4.0), LayerBayesFlags(), ScheduleConfig(alpha=0.5))
    batch = tiny_batch(np.random.default_rng(3))
    one = [elbo_loss(params, batch, s, TrainConfig())[0].nll for s in range(24)]
    many = [elbo_loss(params, batch, s, TrainConfig(mc_samples_per_batch=16))[0].nll for s in range(24)]
    assert np.var(many) < np.var(one)
    assert np.mean(many) == pytest.approx(np.mean(one), rel=0.05)


class TestLoop:
    def test_overfits_single_sample(self):
        sample = DialogueSample(("w1 w2 w3", "w4 w5 w6"))
        cfg = TrainConfig(learning_rate=1e-2, batch_size=1, epochs=200)
        _, log = run_training(tiny_mle().to_parameter_set(), [sample], cfg)
        assert log.steps[-1]["loss"] < 0.1

    def test_pretraining_deterministic(self):
        corpus = make_corpus(40, seed=3)
        cfg = TrainConfig(learning_rate=3e-3, batch_size=8, epochs=1)
        small = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32, max_seq_len=48)
        a, log_a = pretrain_deterministic(corpus, small, cfg)
        b, log_b = pretrain_deterministic(corpus, small, cfg)
        assert log_a.to_jsonl() == log_b.to_jsonl()
        assert all(a.tensors[n].tobytes() == b.tensors[n].tobytes() for n in a.tensors)
        assert a.config.vocab_size == len(a.vocab)

    def test_loss_decreases_across_epochs(self):
        corpus = make_corpus(120, seed=4)
        small = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32, max_seq_len=48)
        _, log = pretrain_deterministic(corpus, small, TrainConfig(learning_rate=3e-3, batch_size=16, epochs=3))
        losses = log.epoch_losses()
        assert losses[0] > losses[1] > losses[2]

    def test_empty_corpus(self):
        with pytest.raises(IngestionError):
            pretrain_deterministic([], TINY, TrainConfig())
        with pytest.raises(IngestionError):
            finetune(tiny_mle().to_parameter_set(), [], TrainConfig())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_step(self):
        params = tiny_mle().to_parameter_set()
        params.slots["lm_head.weight"].value[0, 0] = np.inf
        with pytest.raises(TrainingDivergence, match="step 0"):
            run_training(params, tiny_batch(np.random.default_rng(4)), TrainConfig(batch_size=2))

    def test_zero_noise_no_kl_equals_deterministic(self):
        mle = tiny_mle(scale=2.0)
        data = tiny_batch(np.random.default_rng(5), 8)
        cfg = TrainConfig(learning_rate=1e-2, batch_size=4, epochs=2, weight_decay=0.05)
        det, _ = finetune(mle.to_parameter_set(), data, cfg)
        bayes = bayesianize(mle, LayerBayesFlags(), ScheduleConfig())
        cfg_b = replace(cfg, zero_noise=True, kl_weight_mode="fixed", kl_weight=0.0)
        out, _ = finetune(bayes, data, cfg_b)
        for name, slot in out.slots.items():
            got = slot.mu if isinstance(slot, BayesianSlot) else slot.value
            assert got.tobytes() == det.slots[name].value.tobytes(), name

    def test_rho_never_decayed(self):
        # zero noise and no KL leave rho without gradient, so only decay could move it
        bayes = bayesianize(tiny_mle(), LayerBayesFlags(), ScheduleConfig())
        cfg = TrainConfig(learning_rate=1e-2, batch_size=2, epochs=2, weight_decay=0.5,
                          zero_noise=True, kl_weight_mode="fixed", kl_weight=0.0)
        out, _ = finetune(bayes, tiny_batch(np.random.default_rng(6), 4), cfg)
        for name in bayes.bayesian_names:
            assert np.array_equal(out.slots[name].rho, bayes.slots[name].rho)
        moved = out.slots["blocks.0.attn.proj.weight"].value
        assert not np.array_equal(moved, bayes.slots["blocks.0.attn.proj.weight"].value)

    def test_log_records(self):
        bayes = bayesianize(tiny_mle(), LayerBayesFlags(), ScheduleConfig())
        _, log = finetune(bayes, tiny_batch(np.random.default_rng(7), 5), TrainConfig(batch_size=2, epochs=2))
        assert [s["step"] for s in log.steps] == list(range(6))
        assert all(math.isclose(s["kl_scale"], 1 / 3) for s in log.steps)
        assert len(log.epochs) == 2


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"learning_rate": 0.0}, {"batch_size": 0}, {"mc_samples_per_batch": 0},
        {"kl_weight_mode": "annealed"}, {"weight_decay": -1.0},
    ])
    def test_rejects(self, kw):
        with pytest.raises(InvalidArgument):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(InvalidArgument, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})
