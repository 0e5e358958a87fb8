"""Toy-scale comparisons: pruning-aware pretraining against its baselines.

Each function runs one seed and returns plain dicts so the scripts and the
acceptance tests can aggregate medians themselves.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass

from prunelab.data import BatchSampler, Corpus, evaluate_perplexity
from prunelab.model import ModelConfig, TransformerModel
from prunelab.numerics import Rng
from prunelab.trainer import (TrainConfig, TrainState, gd_step, learning_rate, oneshot_prune, run,
                              trace_summary)

RATIOS = ((4, 1), (2, 1), (1, 1), (1, 9))


@dataclass
class ToySetup:
    hidden: int = 64
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    ffn: int = 128
    seq_len: int = 128
    batch_tokens: int = 2048
    budget_tokens: int = 30_000_000
    target_ratio: float = 0.5
    lr: float = 1e-3
    warmup_steps: int = 100
    prune_warmup: int = 50
    calib_batches: int = 8
    post_fraction: float = 0.05
    eval_max_tokens: int | None = None

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.uniform(257, self.hidden, self.n_layers, self.n_heads, self.ffn,
                                   head_dim=self.head_dim, max_seq_len=self.seq_len)

    @property
    def budget_steps(self) -> int:
        return self.budget_tokens // self.batch_tokens

    def train_config(self, seed: int, **kw) -> TrainConfig:
        base = dict(lr=self.lr, warmup_steps=self.warmup_steps, prune_warmup=self.prune_warmup,
                    batch_tokens=self.batch_tokens, seq_len=self.seq_len, max_steps=self.budget_steps,
                    target_ratio=self.target_ratio, seed=seed, log_every=0)
        base.update(kw)
        return TrainConfig(**base)


def heldout_ppl(model: TransformerModel, corpus: Corpus, setup: ToySetup) -> float:
    return evaluate_perplexity(model, corpus.heldout, setup.seq_len, max_tokens=setup.eval_max_tokens)


def trend_trial(corpus: Corpus, setup: ToySetup, seed: int) -> dict:
    """Three ways to spend the same token budget on a half-size model.

    ``aware``: prune during pretraining (1:1) and keep training.
    ``oneshot``: dense training until the step where ``aware`` hit its
    target, one-shot prune, then recovery on the remaining tokens.
    ``scratch``: the final ``aware`` architecture trained from random init.
    """
    steps = setup.budget_steps
    aware = run(setup.train_config(seed, prune_ratio=(1, 1)), corpus, setup.model_config)
    arch = aware.model.config
    switch = aware.step_at_target
    if switch + setup.calib_batches >= steps:
        raise ValueError(f"target reached at step {switch}; budget of {steps} steps leaves no recovery")

    dense_cfg = setup.train_config(seed, prune_ratio=(0, 1), max_steps=switch, schedule_steps=steps)
    dense = run(dense_cfg, corpus, setup.model_config).model
    oneshot_prune(dense, corpus, aware.target_params, setup.calib_batches, dense_cfg, rng=Rng(seed + 10_000))
    recover_steps = steps - switch - setup.calib_batches  # calibration batches count against the budget
    recovered = run(setup.train_config(seed + 20_000, prune_ratio=(0, 1), max_steps=recover_steps), corpus,
                    model=dense).model

    scratch = run(setup.train_config(seed + 30_000, prune_ratio=(0, 1)), corpus, arch).model
    return {
        "seed": seed, "tokens": steps * setup.batch_tokens, "switch_step": switch,
        "params": {"aware": aware.model.parameter_count(), "oneshot": recovered.parameter_count(),
                   "scratch": scratch.parameter_count()},
        "aware": heldout_ppl(aware.model, corpus, setup),
        "oneshot": heldout_ppl(recovered, corpus, setup),
        "scratch": heldout_ppl(scratch, corpus, setup),
    }


def schedule_trial(corpus: Corpus, setup: ToySetup, seed: int, ratio: tuple[int, int]) -> dict:
    """Tokens and held-out perplexity at the moment the target is first met."""
    cfg = setup.train_config(seed, prune_ratio=ratio, max_steps=0, schedule_steps=setup.budget_steps)
    result = run(cfg, corpus, setup.model_config)
    return {"seed": seed, "ratio": f"{ratio[0]}:{ratio[1]}", "tokens_to_target": result.tokens_to_target,
            "events": len(result.trace), "ppl": heldout_ppl(result.model_at_target, corpus, setup)}


def compensation_trial(corpus: Corpus, setup: ToySetup, seed: int, second_order: bool,
                       ratio: tuple[int, int] = (1, 1)) -> dict:
    """Prune-aware run to the target, then a short continuation of ``post_fraction`` of its tokens."""
    cfg = setup.train_config(seed, prune_ratio=ratio, max_steps=0, schedule_steps=setup.budget_steps,
                             second_order=second_order)
    rng = Rng(seed)
    sampler = BatchSampler(corpus, cfg.n_seqs, cfg.seq_len, rng.substream("data"))
    result = run(cfg, corpus, setup.model_config, rng=rng, sampler=sampler)
    at_target = heldout_ppl(result.model, corpus, setup)
    post = int(setup.post_fraction * result.step_at_target)
    continue_training(result.state, sampler, cfg, post)
    return {"seed": seed, "second_order": second_order, "tokens_to_target": result.tokens_to_target,
            "hidden": result.model.config.hidden, "chosen": trace_summary(result.trace),
            "post_tokens": post * setup.batch_tokens, "ppl_at_target": at_target,
            "ppl": heldout_ppl(result.model, corpus, setup)}


def oneshot_compensation_trial(corpus: Corpus, setup: ToySetup, seed: int, dense_steps: int) -> dict:
    """Same dense model pruned once to the target with and without compensation.

    Both arms start from identical weights and calibration batches, so any
    difference comes from the compensation itself rather than from a diverging
    prune trajectory.
    """
    dense_cfg = setup.train_config(seed, prune_ratio=(0, 1), max_steps=dense_steps)
    dense = run(dense_cfg, corpus, setup.model_config).model
    target = int(setup.target_ratio * dense.parameter_count())
    out = {"seed": seed, "dense_ppl": heldout_ppl(dense, corpus, setup)}
    for name, second_order in (("A", False), ("B", True)):
        model = dense.copy()
        cfg = setup.train_config(seed, second_order=second_order)
        state = oneshot_prune(model, corpus, target, setup.calib_batches, cfg, rng=Rng(seed + 10_000))
        out[name] = heldout_ppl(model, corpus, setup)
        out[f"{name}_chosen"] = trace_summary(state.trace)
    return out


def continue_training(state: TrainState, sampler: BatchSampler, cfg: TrainConfig, steps: int) -> None:
    for _ in range(steps):
        gd_step(state, sampler.sample(), learning_rate(cfg, state.step), cfg, track_saliency=False)


def median_by(rows: list[dict], key: str, group: str | None = None) -> dict:
    if group is None:
        return {key: statistics.median(r[key] for r in rows)}
    out: dict = {}
    for r in rows:
        out.setdefault(r[group], []).append(r[key])
    return {g: statistics.median(v) for g, v in out.items()}

