"""Layerwise OBS compensation for removed input rows of W_o / W_down.

Each output projection keeps its input Gram matrix ``H = X X^T`` (X holds
one token per column). Removing input row ``p`` of ``W`` and shifting the
surviving rows by ``-(W[p] / u[p]) * u`` with ``u = H^{-1} e_p`` gives the
least-squares optimal replacement under the layer's own reconstruction
error. ``H^{-1} e_p`` comes from one SPD solve, never an explicit inverse.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from prunelab import numerics as nx
from prunelab.errors import NotPositiveDefinite, NumericallySingular, ShapeMismatch
from prunelab.groups import GroupType, MiniGroup, Slice, apply_prune
from prunelab.model import ForwardTape, TransformerModel
from prunelab.saliency import output_names

DAMP_RATIO = 1e-2
SINGULAR_TOL = 1e-12
MAX_DAMP_RETRIES = 20


@dataclass
class HessianState:
    """Accumulated ``X X^T`` per output matrix, keyed by parameter name."""
    grams: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    damp_ratio: float = DAMP_RATIO

    def drop_slices(self, slices: list[Slice]) -> None:
        """Remove Gram rows/columns for pruned input rows of tracked matrices."""
        for s in slices:
            if s.name in self.grams and s.axis == 0:
                idx = list(s.index)
                h = np.delete(self.grams[s.name], idx, axis=0)
                self.grams[s.name] = np.delete(h, idx, axis=1)


def hessian_accumulate(state: HessianState, tape: ForwardTape,
                       model: TransformerModel | None = None) -> HessianState:
    """Add ``X X^T`` for every output matrix recorded in ``tape``.

    When ``model`` is given the activation widths are checked against the
    current weights.
    """
    for layer in range(len(tape.layers)):
        for name, x in zip(output_names(layer), tape.output_inputs(layer)):
            if model is not None and model.params[name].shape[0] != x.shape[1]:
                raise ShapeMismatch(f"{name}: activations width {x.shape[1]} vs weight rows "
                                    f"{model.params[name].shape[0]}")
            gram = gram_matrix(x)
            prev = state.grams.get(name)
            if prev is not None and prev.shape != gram.shape:
                raise ShapeMismatch(f"{name}: accumulated H {prev.shape} vs new {gram.shape}")
            state.grams[name] = gram if prev is None else prev + gram
            state.counts[name] = state.counts.get(name, 0) + x.shape[0]
    return state


def gram_matrix(x: np.ndarray) -> np.ndarray:
    """``X X^T`` for token-major activations ``x`` (tokens, d), in float64."""
    x64 = np.asarray(x, dtype=np.float64)
    return x64.T @ x64


class RollingHessian:
    """Hessians over the most recent ``window`` batches."""

    def __init__(self, window: int = 4, damp_ratio: float = DAMP_RATIO):
        self.batches: deque[HessianState] = deque(maxlen=window)
        self.damp_ratio = damp_ratio

    def push(self, tape: ForwardTape, model: TransformerModel | None = None) -> None:
        self.batches.append(hessian_accumulate(HessianState(), tape, model=model))

    def drop_slices(self, slices: list[Slice]) -> None:
        for batch in self.batches:
            batch.drop_slices(slices)

    def state(self) -> HessianState:
        total = HessianState(damp_ratio=self.damp_ratio)
        for batch in self.batches:
            for name, h in batch.grams.items():
                total.grams[name] = total.grams[name] + h if name in total.grams else h.copy()
                total.counts[name] = total.counts.get(name, 0) + batch.counts[name]
        return total


def obs_column_update(w: np.ndarray, h: np.ndarray, p: int, damping: float = 0.0) -> np.ndarray:
    """Weight change that removes input row ``p`` of ``w`` optimally.

    ``w`` is (d_in, d_out) and ``h`` the (d_in, d_in) input Gram matrix.
    Returns ``dW`` with ``(w + dW)[p] == 0``; the caller removes row ``p``.
    """
    d = h.shape[0]
    if w.shape[0] != d:
        raise ShapeMismatch(f"W has {w.shape[0]} input rows, H is {h.shape}")
    if not 0 <= p < d:
        raise ShapeMismatch(f"row {p} not in [0, {d})")
    h_damped = h + damping * np.eye(d) if damping else h
    e_p = np.zeros(d)
    e_p[p] = 1.0
    u = nx.solve_spd(h_damped, e_p)
    if abs(u[p]) < SINGULAR_TOL:
        raise NumericallySingular(f"[H^-1]_pp = {u[p]:.3e} for row {p}")
    w_p = w[p].astype(np.float64)
    dw = -np.outer(u, w_p / u[p])
    dw[p] = -w_p  # u[p] * (w_p / u[p]) can round away from w_p
    return dw


def _remove_rows(w: np.ndarray, h: np.ndarray, rows: list[int], damping: float, mode: str) -> np.ndarray:
    """Compensated ``w`` (same shape) with ``rows`` zeroed.

    ``sequential`` removes one row at a time and restricts H to the
    survivors after each removal (equal to the joint block solution);
    ``reuse`` keeps the full H fixed for every row, which is cheaper but can
    re-populate already-zeroed rows before they are dropped; ``block``
    solves the joint least-squares problem directly.
    """
    w64 = w.astype(np.float64)
    d = h.shape[0]
    if mode == "block":
        keep = [i for i in range(d) if i not in rows]
        hd = h + damping * np.eye(d)
        rhs = hd[np.ix_(keep, rows)] @ w64[rows]
        out = w64.copy()
        out[keep] += nx.solve_spd(hd[np.ix_(keep, keep)], rhs)
        out[rows] = 0.0
        return out
    if mode == "reuse":
        out = w64.copy()
        for p in rows:
            out += obs_column_update(out, h, p, damping)
        out[rows] = 0.0
        return out
    if mode != "sequential":
        raise ValueError(f"unknown band mode {mode!r}")
    out = w64.copy()
    alive = list(range(d))
    for p in rows:
        local = alive.index(p)
        sub_h = h[np.ix_(alive, alive)]
        out[alive] += obs_column_update(out[alive], sub_h, local, damping)
        alive.remove(p)
    out[rows] = 0.0
    return out


def compensate_rows(w: np.ndarray, h: np.ndarray, rows: list[int], damp_ratio: float = DAMP_RATIO,
                    mode: str = "sequential") -> np.ndarray:
    """:func:`_remove_rows` with relative damping, doubled on numerical failure."""
    mean_diag = float(np.mean(np.diag(h)))
    damping = damp_ratio * (mean_diag if mean_diag > 0 else 1.0)
    for _ in range(MAX_DAMP_RETRIES):
        try:
            return _remove_rows(w, h, rows, damping, mode).astype(w.dtype)
        except (NotPositiveDefinite, NumericallySingular):
            damping = 2.0 * damping if damping > 0 else 1e-8
    raise NumericallySingular(f"compensation failed after {MAX_DAMP_RETRIES} damping increases")


def compensate_group(model: TransformerModel, group: MiniGroup, hessians: HessianState,
                     mode: str = "sequential", enabled: bool = True) -> list[Slice]:
    """Compensate the output projections affected by ``group``, then prune it.

    ATTN compensates the head's ``head_dim`` rows of W_o in each layer; FFN
    the removed W_down row. STEM removes output columns, which the
    layerwise Gram formulation cannot compensate, so it is pruned plainly.
    With ``enabled=False`` this is exactly :func:`apply_prune`.
    """
    if enabled and group.group_type is not GroupType.STEM:
        for s in group.member_slices:
            if s.axis != 0 or not (s.name.endswith(".wo") or s.name.endswith(".w_down")):
                continue
            if s.name not in hessians.grams:
                raise ShapeMismatch(f"no Hessian accumulated for {s.name}")
            h = hessians.grams[s.name]
            w = model.params[s.name]
            if h.shape[0] != w.shape[0]:
                raise ShapeMismatch(f"{s.name}: H {h.shape} vs weight {w.shape}")
            model.params[s.name] = compensate_rows(w, h, list(s.index), hessians.damp_ratio, mode)
        model.touch()
    return apply_prune(model, group)
