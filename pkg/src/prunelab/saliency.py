"""Taylor saliency on the output projections and pruning-type selection.

Only W_o and W_down are scored element-wise. Row sums of W_o (grouped into
head bands) rank heads, row sums of W_down rank FFN channels, and column
sums of both, added over every layer, rank hidden channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from prunelab.errors import NoEligibleCandidate, ShapeMismatch
from prunelab.groups import TYPE_ORDER, GroupType, MiniGroup, PruneSpace, Slice, build_group
from prunelab.model import TransformerModel

METRICS = ("first_order", "first_plus_diag_fisher")


def elementwise_saliency(w: np.ndarray, g: np.ndarray, metric: str = "first_order",
                         signed: bool = False) -> np.ndarray:
    """Per-weight estimate of the loss change from zeroing ``w``.

    ``first_order``: ``|w * g|``; ``first_plus_diag_fisher`` adds the
    empirical-Fisher diagonal term, ``|w*g + 0.5 * w^2 * g^2|``. With
    ``signed=True`` the absolute value is skipped.
    """
    if w.shape != g.shape:
        raise ShapeMismatch(f"weight {w.shape} vs gradient {g.shape}")
    w64, g64 = w.astype(np.float64), g.astype(np.float64)
    wg = w64 * g64
    if metric == "first_order":
        s = wg
    elif metric == "first_plus_diag_fisher":
        s = wg + 0.5 * wg * wg
    else:
        raise ValueError(f"unknown saliency metric {metric!r}")
    return s if signed else np.abs(s)


def output_names(layer: int) -> tuple[str, str]:
    return f"blocks.{layer}.wo", f"blocks.{layer}.w_down"


@dataclass
class SaliencyState:
    """Accumulated element-wise saliency for every W_o and W_down.

    ``mode`` is ``"sum"`` or ``"ema"``; buffers are float64 and keyed by
    the same parameter names as the model so pruning can slice them.
    """
    mode: str = "ema"
    beta: float = 0.9
    metric: str = "first_order"
    signed: bool = False
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    steps_accumulated: int = 0

    def reset(self) -> None:
        self.buffers.clear()
        self.steps_accumulated = 0

    def drop_slices(self, slices: list[Slice]) -> None:
        for s in slices:
            if s.name in self.buffers:
                self.buffers[s.name] = np.delete(self.buffers[s.name], list(s.index), axis=s.axis)


def accumulate(state: SaliencyState, model: TransformerModel, grads: dict[str, np.ndarray]) -> SaliencyState:
    """Fold one step's gradients into ``state`` (in place; also returned)."""
    for layer in range(model.config.n_layers):
        for name in output_names(layer):
            s = elementwise_saliency(model.params[name], grads[name], state.metric, state.signed)
            prev = state.buffers.get(name)
            if prev is None:
                prev = np.zeros_like(s)
            elif prev.shape != s.shape:
                raise ShapeMismatch(f"{name}: saliency buffer {prev.shape} vs weight {s.shape}")
            if state.mode == "sum":
                state.buffers[name] = prev + s
            elif state.mode == "ema":
                state.buffers[name] = state.beta * prev + (1.0 - state.beta) * s
            else:
                raise ValueError(f"unknown accumulation mode {state.mode!r}")
    state.steps_accumulated += 1
    return state


@dataclass
class SaliencyReport:
    scores: dict[GroupType, float]
    attn_heads: tuple[int, ...] | None
    ffn_channels: tuple[int, ...] | None
    stem_index: int | None
    candidates: dict[GroupType, MiniGroup]
    raw_scores: dict[GroupType, float] = field(default_factory=dict)

    @property
    def s_attn(self) -> float:
        return self.scores[GroupType.ATTN]

    @property
    def s_ffn(self) -> float:
        return self.scores[GroupType.FFN]

    @property
    def s_stem(self) -> float:
        return self.scores[GroupType.STEM]


def score_and_select(state: SaliencyState, model: TransformerModel, space: PruneSpace | None = None,
                     normalize: bool = False) -> SaliencyReport:
    """Per-layer argmins and the three group scores.

    Ineligible types (floors, disabled) score ``inf``. With ``normalize``
    each score is divided by its group's parameter count before comparison;
    the raw sums stay in ``raw_scores``.
    """
    if state.steps_accumulated < 1:
        raise NoEligibleCandidate("no saliency accumulated yet")
    space = space or PruneSpace()
    c = model.config
    dh = c.head_dim
    heads, channels, totals = [], [], {t: 0.0 for t in TYPE_ORDER}
    stem_cols = np.zeros(c.hidden)
    for layer in range(c.n_layers):
        wo_name, down_name = output_names(layer)
        wo_s, down_s = state.buffers[wo_name], state.buffers[down_name]
        if wo_s.shape != model.params[wo_name].shape or down_s.shape != model.params[down_name].shape:
            raise ShapeMismatch(f"layer {layer}: saliency buffers out of sync with model")
        band = wo_s.sum(axis=1).reshape(c.n_heads[layer], dh).sum(axis=1)
        j = int(np.argmin(band))
        heads.append(j)
        totals[GroupType.ATTN] += float(band[j])
        rows = down_s.sum(axis=1)
        ch = int(np.argmin(rows))
        channels.append(ch)
        totals[GroupType.FFN] += float(rows[ch])
        stem_cols += wo_s.sum(axis=0) + down_s.sum(axis=0)
    stem_i = int(np.argmin(stem_cols))
    totals[GroupType.STEM] = float(stem_cols[stem_i])

    selection = {GroupType.ATTN: heads, GroupType.FFN: channels, GroupType.STEM: [stem_i]}
    scores, raw, candidates = {}, {}, {}
    for gtype in TYPE_ORDER:
        if space.eligible(model, gtype):
            group = build_group(model, gtype, selection[gtype], space)
            candidates[gtype] = group
            raw[gtype] = totals[gtype]
            scores[gtype] = totals[gtype] / group.size if normalize else totals[gtype]
        else:
            raw[gtype] = scores[gtype] = float("inf")
    if not candidates:
        raise NoEligibleCandidate("every pruning type is at its floor or disabled")
    return SaliencyReport(scores, tuple(heads), tuple(channels), stem_i, candidates, raw)


def select_prune_type(report: SaliencyReport) -> GroupType:
    """Type with the smallest score; ties resolve ATTN < FFN < STEM."""
    best = None
    for gtype in TYPE_ORDER:
        if gtype in report.candidates and (best is None or report.scores[gtype] < report.scores[best]):
            best = gtype
    if best is None:
        raise NoEligibleCandidate("report has no eligible candidate")
    return best
