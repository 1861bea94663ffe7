import math

import numpy as np
import pytest

from cxrlm.errors import DataError, NumericError
from cxrlm.kg import ConceptIndex, ConceptMatchSet
from cxrlm.model import KNOWLEDGE_PARAMS, ModelConfig, forward, init_params, log_softmax, softmax
from cxrlm.tokenizer import EOS, SEP, Vocabulary
from cxrlm.training import (
    EncodedExample,
    OptimizerState,
    TrainConfig,
    _nll,
    adamw_step,
    adamw_update,
    batch_loss,
    collate,
    encode_example,
    gradient_check,
    loss,
    loss_and_grads,
    random_problem,
    train,
)

from conftest import tiny_kg

CFG = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16, d_know=4, vocab_size=12, max_seq_len=10, n_concepts=4)


def examples(seed=0, n=3):
    return random_problem(CFG, seed, n)


class TestEncode:
    def test_layout(self):
        vocab = Vocabulary(["1", ":", "a", "describe", "yes"])
        kg = tiny_kg()
        ex = encode_example("1: a\n", "describe", "yes", vocab, ConceptIndex(kg, vocab))
        assert ex.input_ids == (5, 6, 7, SEP, 8)
        assert ex.response_ids == (9, EOS)
        assert ex.full_ids == (5, 6, 7, SEP, 8, 9)
        assert ex.concepts == ConceptMatchSet((0,))

    def test_empty_response(self):
        with pytest.raises(DataError):
            encode_example("", "x", "  ", Vocabulary([]), None)

    def test_too_long(self):
        with pytest.raises(DataError):
            encode_example("a a a", "b", "c c", Vocabulary("abc"), None, max_len=5)


class TestLoss:
    def test_uniform_model(self):
        _, params = examples()
        params["W_out"], params["b_out"] = np.zeros_like(params["W_out"]), np.zeros(12)
        ex = EncodedExample((5, 6, SEP, 7), (8, 9, 10, EOS))
        assert loss(ex, params) == pytest.approx(4 * math.log(12), abs=1e-12)

    def test_perfect_prediction_limit(self):
        ex = EncodedExample((5, 6, SEP), (8, 9, EOS))
        batch = collate([ex])
        for big, bound in ((10.0, 1e-2), (40.0, 1e-15)):
            logits = np.zeros((1, batch.ids.shape[1], 12))
            np.put_along_axis(logits, batch.targets[..., None], big, axis=-1)
            assert 0 <= _nll(logits, batch)[0] < bound

    def test_log_prob_oracle(self):
        exs, params = examples(seed=1)
        for ex in exs:
            lp = log_softmax(forward(ex.full_ids, params, ex.concepts).logits)
            n = len(ex.input_ids)
            expected = -sum(lp[n - 1 + t, r] for t, r in enumerate(ex.response_ids))
            assert loss(ex, params) == pytest.approx(expected, rel=1e-12)

    def test_batch_loss_is_mean_of_example_losses(self):
        exs, params = examples(seed=2, n=4)
        assert batch_loss(exs, params) == pytest.approx(np.mean([loss(e, params) for e in exs]), rel=1e-12)

    def test_input_targets_are_masked(self):
        exs, params = examples(seed=3)
        batch = collate(exs)
        from cxrlm.model import forward_batch
        logits, _ = forward_batch(batch.ids, batch.lengths, params, batch.concepts)
        before = _nll(logits, batch)
        rng = np.random.default_rng(0)
        batch.targets = np.where(batch.loss_mask > 0, batch.targets, rng.integers(0, 12, size=batch.targets.shape))
        assert _nll(logits, batch).tobytes() == before.tobytes()

    def test_empty_batch(self):
        with pytest.raises(DataError):
            collate([])


class TestGradients:
    def test_b_out_closed_form(self):
        exs, params = examples(seed=4, n=1)
        ex = exs[0]
        _, grads, _ = loss_and_grads([ex], params)
        probs = softmax(forward(ex.full_ids, params, ex.concepts).logits)
        n = len(ex.input_ids)
        expected = sum(probs[n - 1 + t] - np.eye(12)[r] for t, r in enumerate(ex.response_ids))
        np.testing.assert_allclose(grads["b_out"], expected, atol=1e-13)

    def test_disable_kg_gives_zero_knowledge_gradients(self):
        exs, params = examples(seed=5)
        _, grads, _ = loss_and_grads(exs, params, use_kg=False)
        for name in KNOWLEDGE_PARAMS:
            assert not grads[name].any()
        assert grads["W_out"].any()

    def test_frozen_gradients_are_zero(self):
        exs, params = examples(seed=5)
        _, grads, _ = loss_and_grads(exs, params, frozen={"concept_embeddings"})
        assert not grads["concept_embeddings"].any() and grads["W_proj_k"].any()

    def test_gradient_check_small(self):
        exs, params = examples(seed=6, n=2)
        errors = gradient_check(exs, params)
        assert set(errors) == set(params)
        assert max(errors.values()) < 1e-6


def ref_adamw(theta, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**k), v / (1 - b2**k)
        theta = theta - lr * (mh / (math.sqrt(vh) + eps) + wd * theta)
    return theta


class TestAdamW:
    def test_first_step_closed_form(self):
        theta, m, v = adamw_update(np.array(1.0), np.array(0.5), 0.0, 0.0, 1, 0.1, 0.9, 0.999, 1e-8, 0.0)
        assert float(theta) == pytest.approx(0.9, abs=1e-8)

    def test_zero_gradient(self):
        _, params = examples()
        state = OptimizerState.zeros(params)
        before = params.copy()
        adamw_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state, TrainConfig(weight_decay=0.0))
        assert params.equals(before) and state.step == 1

    def test_scalar_quadratic_matches_reference(self):
        lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.01
        theta, m, v, seen = np.array(3.0), 0.0, 0.0, []
        for k in range(1, 6):
            g = 2 * (theta - 1.0)  # d/dθ (θ-1)^2
            seen.append(float(g))
            theta, m, v = adamw_update(theta, g, m, v, k, lr, b1, b2, eps, wd)
        assert float(theta) == pytest.approx(ref_adamw(3.0, seen, lr, b1, b2, eps, wd), abs=1e-15)

    def test_non_finite_gradient(self):
        _, params = examples()
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        grads["b_out"][3] = np.nan
        with pytest.raises(NumericError, match="b_out"):
            adamw_step(params, grads, OptimizerState.zeros(params), TrainConfig())

    def test_frozen_tensors_untouched(self):
        _, params = examples()
        grads = {k: np.ones_like(v) for k, v in params.items()}
        before = params.copy()
        adamw_step(params, grads, OptimizerState.zeros(params), TrainConfig(), frozen={"W_out"})
        assert params["W_out"].tobytes() == before["W_out"].tobytes()
        assert params["b_out"].tobytes() != before["b_out"].tobytes()

    def test_sgd_switch(self):
        _, params = examples()
        grads = {k: np.full_like(v, 0.5) for k, v in params.items()}
        before = params.copy()
        adamw_step(params, grads, OptimizerState.zeros(params), TrainConfig(learning_rate=0.1, optimizer="sgd"))
        np.testing.assert_array_equal(params["W_out"], before["W_out"] - 0.05)

    @pytest.mark.parametrize("bad", [dict(beta1=1.0), dict(eps=0.0), dict(batch_size=0), dict(optimizer="lion"), dict(learning_rate=-1)])
    def test_config_validation(self, bad):
        with pytest.raises(DataError):
            TrainConfig(**bad)

    def test_config_round_trip(self):
        cfg = TrainConfig(learning_rate=1e-3, disable_kg=True)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTrain:
    def test_zero_learning_rate_keeps_init(self):
        exs, _ = examples(seed=7, n=4)
        result = train(exs, None, CFG, TrainConfig(learning_rate=0.0, total_steps=5, batch_size=2, seed=3))
        assert result.params.equals(init_params(CFG, 3))
        assert len(result.losses) == 5

    def test_deterministic(self):
        exs, _ = examples(seed=7, n=5)
        cfg = TrainConfig(learning_rate=1e-2, total_steps=8, batch_size=2, seed=1)
        a, b = train(exs, None, CFG, cfg), train(exs, None, CFG, cfg)
        assert a.params.equals(b.params) and a.losses == b.losses

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            train([], None, CFG, TrainConfig())

    def test_on_step_sees_every_loss(self):
        exs, _ = examples(seed=7, n=3)
        seen = []
        result = train(exs, None, CFG, TrainConfig(total_steps=4), on_step=lambda s, l: seen.append((s, l)))
        assert seen == list(enumerate(result.losses, start=1))

    def test_monotone_overfit(self):
        exs, _ = examples(seed=8, n=4)
        cfg = TrainConfig(learning_rate=3e-3, total_steps=200, batch_size=4)
        result = train(exs, None, CFG, cfg)
        init = init_params(CFG, cfg.seed)
        assert batch_loss(exs, result.params) < batch_loss(exs, init)

    def test_disable_kg_matches_structurally_removed_augmentation(self):
        exs, _ = examples(seed=9, n=1)
        cfg = TrainConfig(learning_rate=1e-2, total_steps=10)
        nokg = train(exs, None, CFG, TrainConfig(**{**cfg.to_dict(), "disable_kg": True}))

        # same model with the knowledge shift pinned at exactly zero
        params = init_params(CFG, cfg.seed)
        params["W_proj_k"], params["b_proj_k"] = np.zeros_like(params["W_proj_k"]), np.zeros(CFG.d_model)
        state, losses = OptimizerState.zeros(params), []
        for _ in range(cfg.total_steps):
            value, grads, _ = loss_and_grads(exs, params, use_kg=True, frozen=set(KNOWLEDGE_PARAMS))
            adamw_step(params, grads, state, cfg, frozen=set(KNOWLEDGE_PARAMS))
            losses.append(value)
        assert losses == nokg.losses
        for name in params:
            if name not in KNOWLEDGE_PARAMS:
                assert params[name].tobytes() == nokg.params[name].tobytes()
        init = init_params(CFG, cfg.seed)
        for name in KNOWLEDGE_PARAMS:
            assert nokg.params[name].tobytes() == init[name].tobytes()

    def test_freeze_kg_embeddings(self):
        exs, _ = examples(seed=10, n=3)
        result = train(exs, None, CFG, TrainConfig(learning_rate=1e-2, total_steps=3, freeze_kg_embeddings=True))
        init = init_params(CFG, 0)
        assert result.params["concept_embeddings"].tobytes() == init["concept_embeddings"].tobytes()
        assert result.params["W_proj_k"].tobytes() != init["W_proj_k"].tobytes()
