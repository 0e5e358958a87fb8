"""Bi-level training loop: gradient steps interleaved with saliency-driven prunes.

Each macro-iteration runs ``g`` AdamW steps and then ``p`` prune steps
(``prune_ratio = (p, g)``) until the parameter count first drops to the
target; afterwards the remaining step budget is spent on plain training.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from prunelab.data import BatchSampler, Corpus
from prunelab.errors import ConfigError, NonFiniteLoss
from prunelab.groups import GroupType, PruneSpace, Slice, apply_prune, delete_slices
from prunelab.model import ModelConfig, TransformerModel, backward, forward
from prunelab.numerics import Rng
from prunelab.saliency import SaliencyState, accumulate, score_and_select, select_prune_type
from prunelab.second_order import RollingHessian, compensate_group

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    target_params: int | None = None
    target_ratio: float | None = None
    prune_ratio: tuple[int, int] = (1, 1)
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_steps: int = 100
    schedule: str = "cosine"
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0
    batch_tokens: int = 2048
    seq_len: int = 128
    max_steps: int = 1000
    schedule_steps: int = 0  # cosine horizon; 0 means max_steps
    seed: int = 0
    second_order: bool = False
    band_mode: str = "sequential"
    hessian_window: int = 4
    metric: str = "first_order"
    saliency_mode: str = "ema"
    ema_beta: float = 0.9
    signed_saliency: bool = False
    normalize_saliency: bool = False
    prune_warmup: int = 50
    log_every: int = 50

    @property
    def n_seqs(self) -> int:
        return max(1, self.batch_tokens // self.seq_len)

    def validate(self) -> None:
        p, g = self.prune_ratio
        if p < 0 or g < 0 or (p == 0 and g == 0):
            raise ConfigError("prune_ratio", f"invalid ratio {p}:{g}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule", f"expected cosine|constant, got {self.schedule!r}")
        if self.band_mode not in ("sequential", "reuse", "block"):
            raise ConfigError("band_mode", f"expected sequential|reuse|block, got {self.band_mode!r}")
        if self.saliency_mode not in ("ema", "sum"):
            raise ConfigError("saliency_mode", f"expected ema|sum, got {self.saliency_mode!r}")
        if self.metric not in ("first_order", "first_plus_diag_fisher"):
            raise ConfigError("metric", f"unknown metric {self.metric!r}")
        if self.seq_len < 1 or self.batch_tokens < self.seq_len:
            raise ConfigError("batch_tokens", "must be at least seq_len")
        if self.target_ratio is not None and not 0.0 < self.target_ratio < 1.0:
            raise ConfigError("target_ratio", "must lie in (0, 1)")

    def resolve_target(self, initial: int) -> int:
        if self.target_params is not None:
            if self.target_params >= initial and self.prune_ratio[0] > 0:
                raise ConfigError("target_params", f"{self.target_params} >= initial count {initial}")
            return self.target_params
        if self.target_ratio is not None:
            return int(initial * self.target_ratio)
        return initial


class AdamW:
    """Decoupled-weight-decay Adam over a name->array dict.

    Weight decay touches matrices only; norm gains are exempt.
    """

    def __init__(self, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.1):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and p.ndim == 2:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def drop_slices(self, slices: list[Slice]) -> None:
        delete_slices(self.m, slices)
        delete_slices(self.v, slices)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(1, (cfg.schedule_steps or cfg.max_steps) - cfg.warmup_steps)
    frac = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.lr * cfg.min_lr_ratio
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TraceRow:
    step: int
    tokens: int
    s_attn: float
    s_ffn: float
    s_stem: float
    chosen: str
    selection: tuple[int, ...]
    hidden: int
    heads: list[int]
    ffn: list[int]
    params: int
    group_size: int

    @property
    def mean_h(self) -> float:
        return float(np.mean(self.heads))

    @property
    def mean_n(self) -> float:
        return float(np.mean(self.ffn))


@dataclass
class TrainState:
    model: TransformerModel
    optimizer: AdamW
    saliency: SaliencyState
    hessians: RollingHessian | None = None
    step: int = 0
    tokens: int = 0
    trace: list[TraceRow] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: TransformerModel, cfg: TrainConfig) -> "TrainState":
        opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        sal = SaliencyState(cfg.saliency_mode, cfg.ema_beta, cfg.metric, cfg.signed_saliency)
        hess = RollingHessian(cfg.hessian_window) if cfg.second_order else None
        return cls(model, opt, sal, hess)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


def gd_step(state: TrainState, batch: np.ndarray, lr: float, cfg: TrainConfig,
            track_saliency: bool = True) -> float:
    """One AdamW update; also folds this step into the saliency/Hessian state."""
    model = state.model
    loss, tape = forward(model, batch)
    if not math.isfinite(loss):
        worst = max(float(np.abs(p).max()) for p in model.params.values())
        raise NonFiniteLoss(f"step {state.step}: loss={loss}, max|w|={worst:.3e}, "
                            f"params={model.parameter_count()}")
    grads = backward(model, tape)
    if track_saliency:
        accumulate(state.saliency, model, grads)
        if state.hessians is not None:
            state.hessians.push(tape, model)
    _clip(grads, cfg.grad_clip)
    if lr:
        state.optimizer.step(model.params, grads, lr)
        model.touch()
    state.step += 1
    state.tokens += tape.n_tokens
    return loss


def prune_step(state: TrainState, space: PruneSpace, cfg: TrainConfig) -> TraceRow:
    """Select the lowest-saliency mini-group, optionally compensate, remove it."""
    model = state.model
    report = score_and_select(state.saliency, model, space, cfg.normalize_saliency)
    chosen = select_prune_type(report)
    group = report.candidates[chosen]
    if cfg.second_order and state.hessians is not None and state.hessians.batches:
        slices = compensate_group(model, group, state.hessians.state(), cfg.band_mode)
    else:
        slices = apply_prune(model, group)
    state.optimizer.drop_slices(slices)
    state.saliency.drop_slices(slices)
    if state.hessians is not None:
        state.hessians.drop_slices(slices)
    c = model.config
    row = TraceRow(state.step, state.tokens, report.s_attn, report.s_ffn, report.s_stem, chosen.value,
                   group.selection, c.hidden, list(c.n_heads), list(c.ffn), model.parameter_count(),
                   group.size)
    state.trace.append(row)
    return row


@dataclass
class RunResult:
    model: TransformerModel
    trace: list[TraceRow]
    metrics: list[dict]
    state: TrainState
    target_params: int
    tokens_to_target: int | None = None
    step_at_target: int | None = None
    model_at_target: TransformerModel | None = None


def run(cfg: TrainConfig, corpus: Corpus, model_config: ModelConfig | None = None,
        model: TransformerModel | None = None, space: PruneSpace | None = None,
        rng: Rng | None = None, sampler: BatchSampler | None = None) -> RunResult:
    """Train (and prune) until the target is met, then finish ``max_steps``.

    Exactly one of ``model_config`` / ``model`` must be supplied. The step
    budget counts gradient steps; pruning past ``max_steps`` continues until
    the target is reached.
    """
    cfg.validate()
    rng = rng or Rng(cfg.seed)
    if model is None:
        model = TransformerModel.init(model_config, rng.substream("init"))
    sampler = sampler or BatchSampler(corpus, cfg.n_seqs, cfg.seq_len, rng.substream("data"))
    space = space or PruneSpace()
    state = TrainState.fresh(model, cfg)
    initial = model.parameter_count()
    target = cfg.resolve_target(initial)
    p, g = cfg.prune_ratio
    pruning = p > 0 and target < initial
    result = RunResult(model, state.trace, state.metrics, state, target)
    if not pruning:
        result.tokens_to_target, result.step_at_target = 0, 0

    def train_once() -> None:
        lr = learning_rate(cfg, state.step)
        loss = gd_step(state, sampler.sample(), lr, cfg, track_saliency=pruning)
        if cfg.log_every and (state.step % cfg.log_every == 0 or state.step == 1):
            state.metrics.append({"step": state.step, "tokens": state.tokens, "loss": loss, "lr": lr,
                                  "params": model.parameter_count()})
            log.info("step %d loss %.4f params %d", state.step, loss, model.parameter_count())

    while pruning:
        for _ in range(g):
            train_once()
        if g == 0 or state.step >= cfg.prune_warmup:
            for _ in range(p):
                row = prune_step(state, space, cfg)
                log.debug("pruned %s -> %d params", row.chosen, row.params)
                if row.params <= target:
                    break
        if model.parameter_count() <= target:
            pruning = False
            result.tokens_to_target, result.step_at_target = state.tokens, state.step
            result.model_at_target = model.copy()
            log.info("target %d reached at step %d (%d tokens)", target, state.step, state.tokens)
    while state.step < cfg.max_steps:
        train_once()
    return result


def trace_summary(trace: list[TraceRow]) -> dict[str, int]:
    counts = {t.value: 0 for t in GroupType}
    for row in trace:
        counts[row.chosen] += 1
    return counts


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def oneshot_prune(model: TransformerModel, corpus: Corpus, target: int, calib_batches: int,
                  cfg: TrainConfig, rng: Rng | None = None, space: PruneSpace | None = None) -> TrainState:
    """Post-training baseline: score once on calibration batches, then prune to ``target``.

    Saliency is summed over ``calib_batches`` gradient evaluations at the
    fixed weights (no updates); later prunes reuse the re-sliced scores.
    """
    rng = rng or Rng(cfg.seed)
    sampler = BatchSampler(corpus, cfg.n_seqs, cfg.seq_len, rng.substream("calib"))
    state = TrainState(model, AdamW(), SaliencyState("sum", metric=cfg.metric, signed=cfg.signed_saliency),
                       RollingHessian(max(1, calib_batches)) if cfg.second_order else None)
    for _ in range(calib_batches):
        gd_step(state, sampler.sample(), 0.0, cfg)
    space = space or PruneSpace()
    while model.parameter_count() > target:
        prune_step(state, space, cfg)
    return state
