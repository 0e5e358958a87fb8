import math

import numpy as np
import pytest

from prunelab.data import BatchSampler, Corpus
from prunelab.errors import ConfigError, CorpusTooSmall, NonFiniteLoss
from prunelab.groups import PruneSpace
from prunelab.model import ModelConfig, TransformerModel, backward, forward
from prunelab.numerics import Rng
from prunelab.saliency import score_and_select, select_prune_type
from prunelab.trainer import (AdamW, TrainConfig, TrainState, gd_step, learning_rate, oneshot_prune,
                              prune_step, run, trace_summary)

SMALL = ModelConfig.uniform(257, 32, 2, 4, 64, head_dim=8, max_seq_len=32)


def synthetic_text(n_bytes: int = 60_000, seed: int = 0) -> bytes:
    gen = np.random.default_rng(seed)
    words = ["the", "king", "queen", "sword", "night", "love", "death", "my", "lord", "and", "of",
             "to", "thou", "art", "what", "is", "in", "a", "fair", "crown", "speak", "now"]
    out, size = [], 0
    while size < n_bytes:
        line = " ".join(words[i] for i in gen.integers(len(words), size=gen.integers(3, 12))).capitalize() + ".\n"
        out.append(line)
        size += len(line)
    return "".join(out).encode()[:n_bytes]


@pytest.fixture(scope="module")
def corpus():
    return Corpus.from_bytes(synthetic_text())


def cfg(**kw) -> TrainConfig:
    base = dict(seq_len=32, batch_tokens=256, max_steps=40, warmup_steps=5, prune_warmup=5, lr=3e-3,
                log_every=10, seed=7)
    base.update(kw)
    return TrainConfig(**base)


# -- optimizer and single steps -------------------------------------------


def test_adamw_matches_hand_unrolled_update():
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.95, 1e-8, 0.1
    w0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    gain0 = np.array([1.0, 2.0])
    target = np.array([[0.0, 1.0], [1.0, 0.0]])
    params = {"w": w0.copy(), "gain": gain0.copy()}
    opt = AdamW(b1, b2, eps, wd)
    # quadratic 0.5 * ||w - target||^2 + 0.5 * ||gain||^2
    for step in (1, 2):
        grads = {"w": params["w"] - target, "gain": params["gain"].copy()}
        opt.step(params, grads, lr)
    # hand-unrolled two steps
    w, gain = w0.copy(), gain0.copy()
    mw = vw = mg = vg = 0.0
    for t in (1, 2):
        gw, gg = w - target, gain.copy()
        mw, vw = b1 * mw + (1 - b1) * gw, b2 * vw + (1 - b2) * gw ** 2
        mg, vg = b1 * mg + (1 - b1) * gg, b2 * vg + (1 - b2) * gg ** 2
        w = w * (1 - lr * wd) - lr * (mw / (1 - b1 ** t)) / (np.sqrt(vw / (1 - b2 ** t)) + eps)
        gain = gain - lr * (mg / (1 - b1 ** t)) / (np.sqrt(vg / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(params["w"], w, rtol=1e-14)
    np.testing.assert_allclose(params["gain"], gain, rtol=1e-14)


def test_first_adam_step_is_sign_step():
    params = {"w": np.array([[1.0, 1.0]])}
    opt = AdamW(weight_decay=0.0)
    opt.step(params, {"w": np.array([[0.3, -7.0]])}, 0.1)
    np.testing.assert_allclose(params["w"], [[0.9, 1.1]], rtol=1e-7)


def test_zero_lr_leaves_weights(corpus):
    model = TransformerModel.init(SMALL, Rng(0))
    before = {k: v.copy() for k, v in model.params.items()}
    state = TrainState.fresh(model, cfg())
    batch = BatchSampler(corpus, 8, 32, Rng(1)).sample()
    loss = gd_step(state, batch, 0.0, cfg())
    assert math.isfinite(loss) and loss > 0
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])
    assert state.saliency.steps_accumulated == 1 and state.step == 1 and state.tokens == 8 * 32


def test_overfit_single_batch_loss_non_increasing(corpus):
    model = TransformerModel.init(SMALL, Rng(0))
    c = cfg(weight_decay=0.0)
    state = TrainState.fresh(model, c)
    batch = BatchSampler(corpus, 4, 32, Rng(2)).sample()
    losses = [gd_step(state, batch, 1e-3, c, track_saliency=False) for _ in range(50)]
    assert all(b <= a for a, b in zip(losses, losses[1:])), np.diff(losses).max()
    assert losses[-1] < losses[0] - 1.0


def test_non_finite_loss_raises(corpus):
    model = TransformerModel.init(SMALL, Rng(0))
    model.params["lm_head"][0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        gd_step(TrainState.fresh(model, cfg()), BatchSampler(corpus, 2, 32, Rng(0)).sample(), 1e-3, cfg())


def test_learning_rate_schedule():
    c = cfg(lr=1.0, warmup_steps=10, max_steps=110, min_lr_ratio=0.1)
    assert learning_rate(c, 0) == pytest.approx(0.1)
    assert learning_rate(c, 9) == pytest.approx(1.0)
    assert learning_rate(c, 10) == pytest.approx(1.0)
    assert learning_rate(c, 60) == pytest.approx(0.55)
    assert learning_rate(c, 110) == pytest.approx(0.1)
    assert learning_rate(cfg(lr=1.0, warmup_steps=0, schedule="constant"), 500) == 1.0
    # a longer horizon stretches the same cosine; max_steps no longer matters
    stretched = cfg(lr=1.0, warmup_steps=10, max_steps=0, schedule_steps=210, min_lr_ratio=0.1)
    assert learning_rate(stretched, 110) == pytest.approx(0.55)


def test_prune_step_bookkeeping(corpus):
    model = TransformerModel.init(SMALL, Rng(0))
    c = cfg()
    state = TrainState.fresh(model, c)
    sampler = BatchSampler(corpus, 8, 32, Rng(3))
    for _ in range(3):
        gd_step(state, sampler.sample(), 1e-3, c)
    for _ in range(5):
        before = model.parameter_count()
        expected = select_prune_type(score_and_select(state.saliency, model, PruneSpace()))
        row = prune_step(state, PruneSpace(), c)
        assert before - model.parameter_count() == row.group_size
        assert row.chosen == expected.value
        assert (row.hidden, row.heads, row.ffn, row.params) == (
            model.config.hidden, model.config.n_heads, model.config.ffn, model.parameter_count())
        for name, m in state.optimizer.m.items():
            assert m.shape == model.params[name].shape
        for name, buf in state.saliency.buffers.items():
            assert buf.shape == model.params[name].shape
        gd_step(state, sampler.sample(), 1e-3, c)


# -- full runs -------------------------------------------------------------


def _plain_training(c: TrainConfig, corpus) -> TransformerModel:
    """Independent plain loop: same init/data substreams, no pruning machinery."""
    rng = Rng(c.seed)
    model = TransformerModel.init(SMALL, rng.substream("init"))
    sampler = BatchSampler(corpus, c.n_seqs, c.seq_len, rng.substream("data"))
    opt = AdamW(c.beta1, c.beta2, c.eps, c.weight_decay)
    for step in range(c.max_steps):
        _, tape = forward(model, sampler.sample())
        grads = backward(model, tape)
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if norm > c.grad_clip:
            for g in grads.values():
                g *= c.grad_clip / (norm + 1e-12)
        opt.step(model.params, grads, learning_rate(c, step))
        model.touch()
    return model


def test_zero_prune_ratio_is_plain_pretraining(corpus):
    c = cfg(prune_ratio=(0, 1), target_ratio=0.5, max_steps=15)
    result = run(c, corpus, SMALL)
    plain = _plain_training(c, corpus)
    assert result.trace == [] and result.model.config == SMALL
    for name in plain.params:
        np.testing.assert_array_equal(result.model.params[name], plain.params[name])


def test_run_reaches_budget_within_counting_bound(corpus):
    c = cfg(target_ratio=0.5, prune_ratio=(1, 1), max_steps=10)
    result = run(c, corpus, SMALL)
    final = result.model.parameter_count()
    target = result.target_params
    max_group = max(row.group_size for row in result.trace)
    min_group = min(row.group_size for row in result.trace)
    assert final <= target < final + max_group
    assert len(result.trace) <= math.ceil((SMALL.parameter_count() - target) / min_group)
    params = [row.params for row in result.trace]
    assert all(b < a for a, b in zip(params, params[1:]))
    assert result.tokens_to_target == result.trace[-1].tokens
    assert sum(trace_summary(result.trace).values()) == len(result.trace)
    result.model.check()


def test_run_is_deterministic_with_twenty_events(corpus):
    c = cfg(target_ratio=0.85, max_steps=30)
    r1, r2 = run(c, corpus, SMALL), run(c, corpus, SMALL)
    assert len(r1.trace) >= 20
    assert r1.trace == r2.trace
    for name in r1.model.params:
        assert r1.model.params[name].tobytes() == r2.model.params[name].tobytes()


def test_second_order_run_is_deterministic_and_differs_from_plain(corpus):
    c = cfg(target_ratio=0.8, max_steps=20, second_order=True)
    r1, r2 = run(c, corpus, SMALL), run(c, corpus, SMALL)
    assert r1.trace == r2.trace
    for name in r1.model.params:
        assert r1.model.params[name].tobytes() == r2.model.params[name].tobytes()
    plain = run(cfg(target_ratio=0.8, max_steps=20), corpus, SMALL)
    assert any(r1.model.params[n].shape != plain.model.params[n].shape
               or not np.array_equal(r1.model.params[n], plain.model.params[n]) for n in plain.model.params)


def test_tokens_to_target_grows_with_gd_share(corpus):
    tokens = []
    for ratio in [(4, 1), (2, 1), (1, 1), (1, 9)]:
        result = run(cfg(target_ratio=0.7, prune_ratio=ratio, max_steps=0), corpus, SMALL)
        tokens.append(result.tokens_to_target)
    assert all(b > a for a, b in zip(tokens, tokens[1:])), tokens


def test_pruning_continues_past_max_steps(corpus):
    result = run(cfg(target_ratio=0.5, max_steps=0, prune_warmup=0), corpus, SMALL)
    assert result.model.parameter_count() <= result.target_params
    assert result.state.step == result.step_at_target


def test_target_validation():
    with pytest.raises(ConfigError):
        cfg(target_params=10**9).resolve_target(1000)
    with pytest.raises(ConfigError):
        cfg(prune_ratio=(0, 0)).validate()
    with pytest.raises(ConfigError):
        cfg(target_ratio=1.5).validate()
    assert cfg(target_ratio=0.5).resolve_target(1000) == 500


def test_corpus_too_small():
    with pytest.raises(CorpusTooSmall):
        BatchSampler(Corpus.from_bytes(b"tiny corpus"), 2, 32, Rng(0))


def test_oneshot_prune_only_removes_weights(corpus):
    model = TransformerModel.init(SMALL, Rng(4))
    original = model.copy()
    target = int(0.7 * model.parameter_count())
    state = oneshot_prune(model, corpus, target, 3, cfg())
    assert model.parameter_count() <= target < model.parameter_count() + max(r.group_size for r in state.trace)
    assert state.saliency.steps_accumulated == 3
    # no optimizer updates: surviving embedding/head entries are the original ones
    kept = list(range(SMALL.hidden))
    for row in state.trace:
        if row.chosen == "stem":
            kept.pop(row.selection[0])
    np.testing.assert_array_equal(model.params["lm_head"], original.params["lm_head"][kept])
    np.testing.assert_array_equal(model.params["embedding"], original.params["embedding"][:, kept])


def test_oneshot_second_order_runs(corpus):
    model = TransformerModel.init(SMALL, Rng(4))
    target = int(0.8 * model.parameter_count())
    c = cfg(second_order=True)
    state = oneshot_prune(model, corpus, target, 2, c)
    assert model.parameter_count() <= target and state.hessians is not None
