from dataclasses import replace

import numpy as np
import pytest

from situcrf.crf import log_partition, log_prob, marginal_log_prob
from situcrf.dataset import Example, PartialExample, SynthConfig, count_frequencies, synth_generate
from situcrf.potentials import FAMILIES, init_model
from situcrf.training import (DESK_SUPERVISED, FULL_PRETRAIN, FULL_SUPERVISED, NumericError,
                              OptimizerConfig, PartialData, SupervisedData, TrainState, _run,
                              global_norm, grad_check, loss_and_grads, mean_loss,
                              pretrain_marginal, random_model, random_situation, sgd_step,
                              small_problem, train_supervised)


def scalar_state(value=1.0, lr=0.1):
    """A one-parameter model: the verb weight of a one-verb, p=1 regression."""
    lex = small_problem(0, n_verbs=1)
    model = init_model(lex.index, "regression", 1)
    model.regression.verb_weights[0, 0] = value
    model.regression.triple_weights = None
    cfg = OptimizerConfig(learning_rate=lr, momentum=0.0, weight_decay=0.0)
    return TrainState.fresh(model, cfg), model


W = "regression.verb_weights"


class TestSgdStep:
    def test_vanilla(self):
        state, model = scalar_state(1.0)
        cfg = OptimizerConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
        sgd_step(state, {W: np.array([[2.0]])}, cfg)
        assert model.regression.verb_weights[0, 0] == pytest.approx(0.8, abs=1e-15)
        assert state.update_count == 1

    def test_two_step_momentum_recurrence(self):
        state, model = scalar_state(1.0)
        cfg = OptimizerConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.5)
        # step 1: g' = 2 + 0.5*1 = 2.5; v = -0.25; p = 0.75
        # step 2: g' = 2 + 0.5*0.75 = 2.375; v = 0.9*-0.25 - 0.2375 = -0.4625; p = 0.2875
        sgd_step(state, {W: np.array([[2.0]])}, cfg)
        sgd_step(state, {W: np.array([[2.0]])}, cfg)
        assert state.velocity[W][0, 0] == pytest.approx(-0.4625, abs=1e-15)
        assert model.regression.verb_weights[0, 0] == pytest.approx(0.2875, abs=1e-15)

    def test_velocity_decays_geometrically(self):
        state, model = scalar_state(0.0)
        cfg = OptimizerConfig(learning_rate=0.1, momentum=0.5, weight_decay=0.0)
        state.velocity[W][:] = 1.0
        vs = []
        for _ in range(4):
            sgd_step(state, {W: np.zeros((1, 1))}, cfg)
            vs.append(state.velocity[W][0, 0])
        assert vs == [0.5, 0.25, 0.125, 0.0625]

    def test_global_norm_clipping(self):
        lex = small_problem(0)
        model = init_model(lex.index, "regression", 2)
        cfg = OptimizerConfig(learning_rate=1.0, momentum=0.0, weight_decay=0.0, clip_norm=100.0)
        state = TrainState.fresh(model, cfg)
        grads = {k: np.zeros_like(v) for k, v in model.arrays().items()}
        grads[W].flat[0] = 120.0
        grads["regression.triple_weights"].flat[3] = 160.0      # global norm 200
        before = {k: v.copy() for k, v in model.arrays().items()}
        sgd_step(state, grads, cfg)
        applied = {k: before[k] - v for k, v in model.arrays().items()}
        assert global_norm(applied) == pytest.approx(100.0, rel=1e-12)
        assert applied[W].flat[0] == pytest.approx(60.0, rel=1e-12)

    def test_weight_decay_acts_on_params(self):
        state, model = scalar_state(2.0)
        cfg = OptimizerConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.5)
        sgd_step(state, {W: np.zeros((1, 1))}, cfg)
        assert model.regression.verb_weights[0, 0] == pytest.approx(1.9, abs=1e-15)

    def test_non_finite_gradient_aborts(self):
        state, model = scalar_state(1.0)
        with pytest.raises(NumericError, match=W):
            sgd_step(state, {W: np.array([[np.nan]])}, OptimizerConfig())
        assert model.regression.verb_weights[0, 0] == 1.0 and state.update_count == 0

    def test_key_mismatch(self):
        state, _ = scalar_state()
        with pytest.raises(ValueError, match="do not match"):
            sgd_step(state, {"tensor.composition": np.zeros(1)}, OptimizerConfig())


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(learning_rate=-1), dict(momentum=1.0), dict(weight_decay=-1),
                                        dict(decay_factor=1.0), dict(decay_factor=0.0), dict(batch_size=0)])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            OptimizerConfig(**kwargs)

    def test_full_scale_profiles(self):
        assert (FULL_SUPERVISED.learning_rate, FULL_SUPERVISED.momentum, FULL_SUPERVISED.weight_decay,
                FULL_SUPERVISED.decay_factor) == (1e-5, 0.9, 5e-4, 0.1)
        assert (FULL_PRETRAIN.learning_rate, FULL_PRETRAIN.clip_norm, FULL_PRETRAIN.batch_size) == (1e-3, 100.0, 360)


@pytest.fixture(scope="module")
def synth_small():
    return synth_generate(SynthConfig(noise=0.0, n_train=300, n_dev=100), 11)


class TestTraining:
    def test_loss_decreases_on_separable_data(self, synth_small):
        train, dev, lex = synth_small
        model = init_model(lex.index, "tensor+reg", 64, m=8, o=8, seed=0, freq=count_frequencies(train))
        cfg = replace(DESK_SUPERVISED, max_updates=200, eval_every=40)
        _, trace = train_supervised(train, dev, model, cfg)
        losses = [r["train_loss"] for r in trace[:6]]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_zero_learning_rate(self, synth_small):
        train, dev, lex = synth_small
        model = init_model(lex.index, "tensor", 64, m=4, o=4, seed=0)
        before = {k: v.copy() for k, v in model.arrays().items()}
        cfg = replace(DESK_SUPERVISED, learning_rate=0.0, weight_decay=0.0, max_updates=30, eval_every=10)
        state, trace = train_supervised(train, dev, model, cfg)
        for k, v in state.params.arrays().items():
            np.testing.assert_array_equal(v, before[k])
        assert len({r["dev_mean"] for r in trace}) == 1

    def test_same_seed_same_trace(self, synth_small):
        train, dev, lex = synth_small
        cfg = replace(DESK_SUPERVISED, max_updates=60, eval_every=20)
        runs = [train_supervised(train, dev, init_model(lex.index, "inner+reg", 64, m=4, o=4, seed=1),
                                 cfg)[1] for _ in range(2)]
        assert runs[0] == runs[1]

    def test_workers_agree(self, synth_small):
        train, _, lex = synth_small
        model = init_model(lex.index, "tensor+reg", 64, m=4, o=4, seed=2)
        data = SupervisedData(lex.index, train)
        l1, g1 = loss_and_grads(model, data, workers=1)
        l3, g3 = loss_and_grads(model, data, workers=3)
        assert l1 == pytest.approx(l3, rel=1e-12)
        for k in g1:
            np.testing.assert_allclose(g1[k], g3[k], rtol=1e-10, atol=1e-14)

    def test_best_dev_trace_non_decreasing(self, synth_small):
        train, dev, lex = synth_small
        cfg = replace(DESK_SUPERVISED, max_updates=150, eval_every=25)
        _, trace = train_supervised(train, dev, init_model(lex.index, "regression", 64), cfg)
        best = [r["best_dev_mean"] for r in trace]
        assert best == sorted(best)
        assert best[-1] == max(r["dev_mean"] for r in trace)

    def test_plateau_decay_and_best_checkpoint(self, synth_small):
        train, _, lex = synth_small
        model = init_model(lex.index, "regression", 64)
        data = SupervisedData(lex.index, train)
        metrics = iter([0.1, 0.5, 0.4, 0.3, 0.6, 0.2])
        snapshots = []

        def fake_eval(params):
            snapshots.append(params.regression.verb_weights.copy())
            return {"dev_mean": next(metrics)}

        cfg = OptimizerConfig(learning_rate=0.01, momentum=0.0, weight_decay=0.0, plateau_patience=2,
                              decay_factor=0.5, max_updates=50, eval_every=10, batch_size=16)
        state, trace = _run(TrainState.fresh(model, cfg), data, cfg, fake_eval)
        # lr is recorded before each evaluation's decision
        assert [r["lr"] for r in trace] == [0.01, 0.01, 0.01, 0.01, 0.005, 0.005]
        assert state.lr_current == 0.005
        assert state.best_dev_metric == 0.6
        np.testing.assert_array_equal(state.params.regression.verb_weights, snapshots[4])


class TestPretraining:
    def test_full_partial_equals_supervised_loss(self):
        lex = small_problem(3)
        rng = np.random.default_rng(0)
        model = random_model(lex.index, "tensor+reg", 4, seed=3)
        sits = [random_situation(lex, rng) for _ in range(5)]
        feats = rng.normal(size=(5, 4))
        sup = SupervisedData(lex.index, [Example(str(i), feats[i], (s,)) for i, s in enumerate(sits)])
        par = PartialData(lex.index, [PartialExample(str(i), feats[i], s.verb, dict(s.frame))
                                      for i, s in enumerate(sits)])
        assert mean_loss(model, sup) == pytest.approx(mean_loss(model, par), abs=1e-12)

    def test_marginal_dominates_completions(self):
        lex = small_problem(4)
        rng = np.random.default_rng(1)
        model = random_model(lex.index, "inner", 3, seed=4)
        g = rng.normal(size=3)
        scores = model.scores(g)
        st_ = log_partition(scores)
        s = random_situation(lex, rng)
        partial = dict(list(s.frame.items())[:1])
        assert marginal_log_prob(scores, st_, s.verb, partial) >= log_prob(scores, st_, s)

    def test_reduces_marginal_loss(self, synth_small):
        train, _, lex = synth_small
        web = [PartialExample(ex.image_id, ex.features, ex.annotations[0].verb,
                              dict(list(ex.annotations[0].frame.items())[:1])) for ex in train]
        model = init_model(lex.index, "tensor", 64, m=4, o=4, seed=0)
        data = PartialData(lex.index, web)
        before = mean_loss(model, data)
        state = pretrain_marginal(web, model.copy(), replace(DESK_SUPERVISED, max_updates=100))
        assert mean_loss(state.params, data) < 0.5 * before

    def test_empty_web_set(self, synth_small):
        _, _, lex = synth_small
        state = pretrain_marginal([], init_model(lex.index, "regression", 64), DESK_SUPERVISED)
        assert state.update_count == 0


class TestGradCheck:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_passes(self, family):
        rep = grad_check(family, 1e-4, seed=1)
        assert rep.passed, list(rep.lines())
        assert {obj for obj, _ in rep.errors} == {"noisy-or", "marginal"}

    def test_zero_model(self):
        rep = grad_check("tensor+reg", 1e-4, zero=True)
        assert rep.passed and np.isfinite(rep.max_error)
