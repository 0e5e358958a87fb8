"""Minimal coupled pruning groups and their physical removal.

Three group types cover the width search space:

* ``ATTN``: one query head in every layer (its ``head_dim`` columns of W_q,
  the matching rows of W_o, and the kv band of W_k/W_v when no surviving
  query still reads it).
* ``FFN``: one intermediate channel in every layer (a column of W_up and
  W_gate, a row of W_down).
* ``STEM``: one hidden channel at the same index everywhere (embedding
  column, input-group rows, output-group columns, norm gains, LM head row).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from prunelab.errors import FloorViolation, IndexOutOfRange, StaleGroup
from prunelab.model import TransformerModel


class GroupType(str, enum.Enum):
    ATTN = "attn"
    FFN = "ffn"
    STEM = "stem"


# tie-break order when saliencies are equal
TYPE_ORDER = (GroupType.ATTN, GroupType.FFN, GroupType.STEM)


@dataclass(frozen=True)
class Slice:
    name: str
    axis: int
    index: tuple[int, ...]


@dataclass
class PruneSpace:
    min_heads: int = 1
    min_ffn: int = 1
    min_hidden: int | None = None  # None -> 2 * head_dim
    enabled: frozenset = frozenset(TYPE_ORDER)

    def hidden_floor(self, model: TransformerModel) -> int:
        return 2 * model.config.head_dim if self.min_hidden is None else self.min_hidden

    def eligible(self, model: TransformerModel, group_type: GroupType) -> bool:
        group_type = GroupType(group_type)
        if group_type not in self.enabled:
            return False
        c = model.config
        if group_type is GroupType.ATTN:
            return min(c.n_heads) > max(self.min_heads, 1)
        if group_type is GroupType.FFN:
            return min(c.ffn) > max(self.min_ffn, 1)
        return c.hidden > self.hidden_floor(model)


@dataclass
class MiniGroup:
    group_type: GroupType
    selection: tuple[int, ...]
    member_slices: list[Slice]
    size: int
    signature: tuple
    kv_maps_after: list[list[int]] | None = None
    kv_removed: list[int | None] = field(default_factory=list)


def gqa_remap(model: TransformerModel, pruned_heads: list[int]) -> tuple[list[list[int]], list[int | None]]:
    """Query->kv maps after removing query head ``pruned_heads[l]`` in each layer.

    A kv head is dropped only when its last query goes; surviving kv heads
    are renumbered to stay contiguous. Returns ``(new_maps, removed)`` where
    ``removed[l]`` is the dropped kv index of layer l or None.
    """
    new_maps, removed = [], []
    for kv_map, head in zip(model.kv_maps, pruned_heads):
        owner = kv_map[head]
        rest = kv_map[:head] + kv_map[head + 1:]
        if owner in rest:
            new_maps.append(rest)
            removed.append(None)
        else:
            new_maps.append([k - 1 if k > owner else k for k in rest])
            removed.append(owner)
    return new_maps, removed


def _band(start: int, width: int) -> tuple[int, ...]:
    return tuple(range(start * width, (start + 1) * width))


def build_group(model: TransformerModel, group_type, indices, space: PruneSpace | None = None) -> MiniGroup:
    """Assemble the coupled member slices for one mini-group.

    ``indices`` holds one head/channel index per layer for ATTN/FFN and a
    single hidden index (int or 1-tuple) for STEM.
    """
    group_type = GroupType(group_type)
    space = space or PruneSpace()
    c = model.config
    m, dh = c.hidden, c.head_dim
    if group_type is GroupType.STEM:
        sel = tuple(np.atleast_1d(indices).tolist())
        if len(sel) != 1:
            raise IndexOutOfRange(f"stem group takes one shared index, got {sel}")
    else:
        sel = tuple(int(i) for i in indices)
        if len(sel) != c.n_layers:
            raise IndexOutOfRange(f"need one index per layer ({c.n_layers}), got {len(sel)}")
    if not space.eligible(model, group_type):
        raise FloorViolation(f"{group_type.value} group would breach the pruning floor")

    slices: list[Slice] = []
    kv_after, kv_removed = None, []
    if group_type is GroupType.ATTN:
        for layer, head in enumerate(sel):
            if not 0 <= head < c.n_heads[layer]:
                raise IndexOutOfRange(f"layer {layer}: head {head} not in [0, {c.n_heads[layer]})")
        kv_after, kv_removed = gqa_remap(model, list(sel))
        for layer, head in enumerate(sel):
            p = f"blocks.{layer}."
            band = _band(head, dh)
            slices += [Slice(p + "wq", 1, band), Slice(p + "wo", 0, band)]
            if kv_removed[layer] is not None:
                kv_band = _band(kv_removed[layer], dh)
                slices += [Slice(p + "wk", 1, kv_band), Slice(p + "wv", 1, kv_band)]
    elif group_type is GroupType.FFN:
        for layer, ch in enumerate(sel):
            if not 0 <= ch < c.ffn[layer]:
                raise IndexOutOfRange(f"layer {layer}: channel {ch} not in [0, {c.ffn[layer]})")
            p = f"blocks.{layer}."
            slices += [Slice(p + "w_up", 1, (ch,)), Slice(p + "w_gate", 1, (ch,)),
                       Slice(p + "w_down", 0, (ch,))]
    else:
        i = sel[0]
        if not 0 <= i < m:
            raise IndexOutOfRange(f"stem index {i} not in [0, {m})")
        slices.append(Slice("embedding", 1, (i,)))
        for layer in range(c.n_layers):
            p = f"blocks.{layer}."
            slices += [Slice(p + "norm_attn", 0, (i,)), Slice(p + "wq", 0, (i,)),
                       Slice(p + "wk", 0, (i,)), Slice(p + "wv", 0, (i,)), Slice(p + "wo", 1, (i,)),
                       Slice(p + "norm_ffn", 0, (i,)), Slice(p + "w_up", 0, (i,)),
                       Slice(p + "w_gate", 0, (i,)), Slice(p + "w_down", 1, (i,))]
        slices.append(Slice("final_norm", 0, (i,)))
        if not c.tied_embeddings:
            slices.append(Slice("lm_head", 0, (i,)))

    size = 0
    for s in slices:
        shape = model.params[s.name].shape
        other = int(np.prod(shape)) // shape[s.axis]
        size += len(s.index) * other
    return MiniGroup(group_type, sel, slices, size, model.shape_signature(), kv_after, kv_removed)


def delete_slices(arrays: dict[str, np.ndarray], slices: list[Slice]) -> None:
    """Remove ``slices`` in place from any name->array dict shaped like the params.

    Used for weights, optimizer moments and saliency buffers alike; names
    missing from ``arrays`` are skipped.
    """
    for s in slices:
        if s.name in arrays:
            arrays[s.name] = np.delete(arrays[s.name], list(s.index), axis=s.axis)


def apply_prune(model: TransformerModel, group: MiniGroup) -> list[Slice]:
    """Physically remove ``group`` from ``model``; returns the removed slices."""
    if group.signature != model.shape_signature():
        raise StaleGroup("model shape changed since the group was built")
    before = model.parameter_count()
    delete_slices(model.params, group.member_slices)
    c = model.config
    if group.group_type is GroupType.ATTN:
        c.n_heads = [h - 1 for h in c.n_heads]
        c.n_kv_heads = [kv - (r is not None) for kv, r in zip(c.n_kv_heads, group.kv_removed)]
        model.kv_maps = [list(k) for k in group.kv_maps_after]
    elif group.group_type is GroupType.FFN:
        c.ffn = [n - 1 for n in c.ffn]
    else:
        c.hidden -= 1
        if model.pos_table is not None:
            model.pos_table = np.delete(model.pos_table, group.selection[0], axis=1)
    model.touch()
    model.check()
    assert before - model.parameter_count() == group.size
    return group.member_slices
