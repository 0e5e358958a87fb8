"""Decoder-only transformer with a hand-written backward pass.

Layout: token embedding (+ optional fixed sinusoidal positions) -> L pre-norm
blocks of causal attention and SwiGLU FFN -> final RMSNorm -> LM head.
Weights are stored ``[D_input, D_output]`` so a layer computes ``x @ W``.
Every width (hidden, heads per layer, kv heads per layer, FFN channels per
layer) may shrink under pruning; the head dimension never does.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from prunelab import numerics as nx
from prunelab.errors import SequenceTooLong, ShapeMismatch, StaleTape, TokenOutOfRange

BLOCK_PARAMS = ("norm_attn", "wq", "wk", "wv", "wo", "norm_ffn", "w_up", "w_gate", "w_down")
INIT_STD = 0.02
POS_SCALE = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    hidden: int
    head_dim: int
    n_heads: list[int]
    n_kv_heads: list[int]
    ffn: list[int]
    max_seq_len: int = 128
    tied_embeddings: bool = False
    positional: str = "sinusoidal"

    @classmethod
    def uniform(cls, vocab_size: int, hidden: int, n_layers: int, n_heads: int, ffn: int,
                head_dim: int = 16, n_kv_heads: int | None = None, **kw) -> "ModelConfig":
        kv = n_heads if n_kv_heads is None else n_kv_heads
        return cls(vocab_size, hidden, head_dim, [n_heads] * n_layers, [kv] * n_layers,
                   [ffn] * n_layers, **kw)

    @property
    def n_layers(self) -> int:
        return len(self.n_heads)

    def validate(self) -> None:
        if self.hidden <= 0 or self.vocab_size <= 0 or self.head_dim <= 0:
            raise ShapeMismatch("hidden, vocab_size and head_dim must be positive")
        if not (len(self.n_heads) == len(self.n_kv_heads) == len(self.ffn)) or self.n_layers < 1:
            raise ShapeMismatch("per-layer lists must be non-empty and equally long")
        for layer, (h, kv, n) in enumerate(zip(self.n_heads, self.n_kv_heads, self.ffn)):
            if h < 1 or n < 1 or kv < 1 or kv > h:
                raise ShapeMismatch(f"layer {layer}: heads={h} kv_heads={kv} ffn={n}")
        if self.positional not in ("sinusoidal", "none"):
            raise ShapeMismatch(f"unknown positional scheme {self.positional!r}")

    def parameter_count(self) -> int:
        m, v, dh = self.hidden, self.vocab_size, self.head_dim
        total = v * m * (1 if self.tied_embeddings else 2) + m
        for h, kv, n in zip(self.n_heads, self.n_kv_heads, self.ffn):
            total += 2 * m * h * dh + 2 * m * kv * dh + 3 * m * n + 2 * m
        return total


def default_kv_map(n_heads: int, n_kv_heads: int) -> list[int]:
    if n_heads % n_kv_heads:
        raise ShapeMismatch(f"{n_heads} heads cannot be split evenly over {n_kv_heads} kv heads")
    per = n_heads // n_kv_heads
    return [j // per for j in range(n_heads)]


def sinusoidal_table(n_pos: int, dim: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)) * POS_SCALE


class TransformerModel:
    """All weights of the network plus the per-layer query->kv head maps.

    ``params`` is an ordered name->array dict (``embedding``, ``blocks.{l}.wq``,
    ..., ``final_norm``, ``lm_head``); trainers, optimizers and pruning code
    address weights through these names. ``pos_table`` is a fixed buffer and
    not a parameter. ``version`` bumps on every mutation so stale tapes and
    groups can be detected.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 kv_maps: list[list[int]], pos_table: np.ndarray | None):
        self.config = config
        self.params = params
        self.kv_maps = kv_maps
        self.pos_table = pos_table
        self.version = 0
        self.check()

    @classmethod
    def init(cls, config: ModelConfig, rng: nx.Rng, dtype=np.float32,
             kv_maps: list[list[int]] | None = None) -> "TransformerModel":
        config.validate()
        m, dh = config.hidden, config.head_dim
        out_std = INIT_STD / math.sqrt(2 * config.n_layers)
        params = {"embedding": rng.normal((config.vocab_size, m), INIT_STD, dtype)}
        for layer, (h, kv, n) in enumerate(zip(config.n_heads, config.n_kv_heads, config.ffn)):
            p = f"blocks.{layer}."
            params[p + "norm_attn"] = np.ones(m, dtype)
            params[p + "wq"] = rng.normal((m, h * dh), INIT_STD, dtype)
            params[p + "wk"] = rng.normal((m, kv * dh), INIT_STD, dtype)
            params[p + "wv"] = rng.normal((m, kv * dh), INIT_STD, dtype)
            params[p + "wo"] = rng.normal((h * dh, m), out_std, dtype)
            params[p + "norm_ffn"] = np.ones(m, dtype)
            params[p + "w_up"] = rng.normal((m, n), INIT_STD, dtype)
            params[p + "w_gate"] = rng.normal((m, n), INIT_STD, dtype)
            params[p + "w_down"] = rng.normal((n, m), out_std, dtype)
        params["final_norm"] = np.ones(m, dtype)
        if not config.tied_embeddings:
            params["lm_head"] = rng.normal((m, config.vocab_size), INIT_STD, dtype)
        if kv_maps is None:
            kv_maps = [default_kv_map(h, kv) for h, kv in zip(config.n_heads, config.n_kv_heads)]
        pos = None
        if config.positional == "sinusoidal":
            pos = sinusoidal_table(config.max_seq_len, m).astype(dtype)
        return cls(copy.deepcopy(config), params, [list(k) for k in kv_maps], pos)

    # -- bookkeeping -------------------------------------------------------

    @property
    def dtype(self):
        return self.params["embedding"].dtype

    def block(self, layer: int) -> dict[str, np.ndarray]:
        return {k: self.params[f"blocks.{layer}.{k}"] for k in BLOCK_PARAMS}

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def touch(self) -> None:
        self.version += 1

    def shape_signature(self) -> tuple:
        c = self.config
        return (c.hidden, tuple(c.n_heads), tuple(c.n_kv_heads), tuple(c.ffn),
                tuple(tuple(k) for k in self.kv_maps))

    def copy(self) -> "TransformerModel":
        clone = TransformerModel(copy.deepcopy(self.config),
                                 {k: v.copy() for k, v in self.params.items()},
                                 [list(k) for k in self.kv_maps],
                                 None if self.pos_table is None else self.pos_table.copy())
        return clone

    def astype(self, dtype) -> "TransformerModel":
        clone = self.copy()
        clone.params = {k: v.astype(dtype) for k, v in clone.params.items()}
        if clone.pos_table is not None:
            clone.pos_table = clone.pos_table.astype(dtype)
        return clone

    def check(self) -> None:
        """Assert every shape invariant; raises ShapeMismatch on violation."""
        c = self.config
        c.validate()
        m, dh, v = c.hidden, c.head_dim, c.vocab_size
        expect = {"embedding": (v, m), "final_norm": (m,)}
        if not c.tied_embeddings:
            expect["lm_head"] = (m, v)
        for layer, (h, kv, n) in enumerate(zip(c.n_heads, c.n_kv_heads, c.ffn)):
            p = f"blocks.{layer}."
            expect.update({
                p + "norm_attn": (m,), p + "wq": (m, h * dh), p + "wk": (m, kv * dh),
                p + "wv": (m, kv * dh), p + "wo": (h * dh, m), p + "norm_ffn": (m,),
                p + "w_up": (m, n), p + "w_gate": (m, n), p + "w_down": (n, m),
            })
            kv_map = self.kv_maps[layer]
            if len(kv_map) != h or sorted(set(kv_map)) != list(range(kv)):
                raise ShapeMismatch(f"layer {layer}: kv map {kv_map} not total/onto {kv} kv heads")
        if set(expect) != set(self.params):
            raise ShapeMismatch(f"parameter names differ: {sorted(set(expect) ^ set(self.params))}")
        for name, shape in expect.items():
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {self.params[name].shape}")
        if self.pos_table is not None and self.pos_table.shape != (c.max_seq_len, m):
            raise ShapeMismatch(f"pos_table {self.pos_table.shape} vs ({c.max_seq_len}, {m})")


def parameter_count(model: TransformerModel) -> int:
    return model.parameter_count()


@dataclass
class LayerCache:
    x_in: np.ndarray
    a: np.ndarray
    rstd_attn: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    attn_out: np.ndarray  # input X of W_o, (B, T, h*dh)
    x_mid: np.ndarray
    b: np.ndarray
    rstd_ffn: np.ndarray
    up: np.ndarray
    gate: np.ndarray
    ffn_act: np.ndarray  # input X of W_down, (B, T, n)


@dataclass
class ForwardTape:
    version: int
    ids: np.ndarray
    targets: np.ndarray
    layers: list[LayerCache]
    x_final: np.ndarray
    rstd_final: np.ndarray
    h_final: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    n_tokens: int
    extras: dict = field(default_factory=dict)

    def output_inputs(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Token-major input activations of (W_o, W_down) for ``layer``."""
        cache = self.layers[layer]
        return (cache.attn_out.reshape(-1, cache.attn_out.shape[-1]),
                cache.ffn_act.reshape(-1, cache.ffn_act.shape[-1]))


def _as_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ShapeMismatch(f"tokens must be (batch, len>=2), got {arr.shape}")
    return arr.astype(np.int64, copy=False)


def _causal_mask(t: int, dtype) -> np.ndarray:
    return np.triu(np.full((t, t), -np.inf, dtype=dtype), k=1)


def forward(model: TransformerModel, tokens) -> tuple[float, ForwardTape]:
    """Mean next-token cross-entropy (nats/token) and the tape for backward.

    ``tokens`` is one sequence or a (batch, len) array; position t predicts
    token t+1, so ``len - 1`` must not exceed ``max_seq_len``.
    """
    c = model.config
    batch = _as_batch(tokens)
    if batch.min() < 0 or batch.max() >= c.vocab_size:
        raise TokenOutOfRange(f"token ids must lie in [0, {c.vocab_size})")
    ids, targets = batch[:, :-1], batch[:, 1:]
    bsz, t = ids.shape
    if t > c.max_seq_len:
        raise SequenceTooLong(f"{t} input positions > max_seq_len {c.max_seq_len}")
    dt = model.dtype
    dh = c.head_dim
    scale = 1.0 / math.sqrt(dh)
    mask = _causal_mask(t, dt)

    x = nx.embedding(model.params["embedding"], ids)
    if model.pos_table is not None:
        x = x + model.pos_table[:t]
    caches = []
    for layer in range(c.n_layers):
        w = model.block(layer)
        h, kv = c.n_heads[layer], c.n_kv_heads[layer]
        kv_map = model.kv_maps[layer]
        a, rstd1 = nx.rms_norm(x, w["norm_attn"])
        q = nx.matmul(a, w["wq"]).reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
        k = nx.matmul(a, w["wk"]).reshape(bsz, t, kv, dh).transpose(0, 2, 1, 3)
        v = nx.matmul(a, w["wv"]).reshape(bsz, t, kv, dh).transpose(0, 2, 1, 3)
        k_e, v_e = k[:, kv_map], v[:, kv_map]
        scores = (q @ k_e.transpose(0, 1, 3, 2)) * scale + mask
        probs = nx.softmax(scores)
        attn_out = (probs @ v_e).transpose(0, 2, 1, 3).reshape(bsz, t, h * dh)
        x_mid = x + nx.matmul(attn_out, w["wo"])
        b, rstd2 = nx.rms_norm(x_mid, w["norm_ffn"])
        up = nx.matmul(b, w["w_up"])
        gate = nx.matmul(b, w["w_gate"])
        ffn_act = nx.silu(gate) * up
        x_out = x_mid + nx.matmul(ffn_act, w["w_down"])
        caches.append(LayerCache(x, a, rstd1, q, k, v, probs, attn_out, x_mid, b, rstd2, up, gate, ffn_act))
        x = x_out
    h_final, rstd_f = nx.rms_norm(x, model.params["final_norm"])
    head = model.params["embedding"].T if c.tied_embeddings else model.params["lm_head"]
    logits = nx.matmul(h_final, head).reshape(bsz * t, c.vocab_size)
    loss, probs_out = nx.cross_entropy(logits, targets.reshape(-1))
    tape = ForwardTape(model.version, ids, targets.reshape(-1), caches, x, rstd_f, h_final,
                       logits.reshape(bsz, t, -1), probs_out, bsz * t)
    return loss, tape


def _gather_kv_grad(d_expanded: np.ndarray, kv_map: np.ndarray, n_kv: int) -> np.ndarray:
    """Sum per-query-head gradients back onto the kv heads they share."""
    if n_kv == len(kv_map) and np.array_equal(kv_map, np.arange(n_kv)):
        return d_expanded
    out = np.empty(d_expanded.shape[:1] + (n_kv,) + d_expanded.shape[2:], dtype=d_expanded.dtype)
    for r in range(n_kv):
        out[:, r] = d_expanded[:, kv_map == r].sum(axis=1)
    return out


def backward(model: TransformerModel, tape: ForwardTape, loss_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Exact gradients of ``loss_scale * loss`` for every entry of ``model.params``."""
    if tape.version != model.version:
        raise StaleTape(f"tape from model version {tape.version}, model is at {model.version}")
    c = model.config
    bsz, t = tape.ids.shape
    dh = c.head_dim
    scale = 1.0 / math.sqrt(dh)
    grads: dict[str, np.ndarray] = {}

    dlogits = nx.cross_entropy_backward(tape.probs, tape.targets, loss_scale).reshape(bsz, t, -1)
    if c.tied_embeddings:
        head = model.params["embedding"].T
        dh_final, dhead = nx.matmul_backward(dlogits, tape.h_final, head)
        d_embedding = dhead.T.copy()
    else:
        dh_final, grads["lm_head"] = nx.matmul_backward(dlogits, tape.h_final, model.params["lm_head"])
        d_embedding = None
    dx, grads["final_norm"] = nx.rms_norm_backward(dh_final, tape.x_final, model.params["final_norm"],
                                                   tape.rstd_final)

    for layer in reversed(range(c.n_layers)):
        w = model.block(layer)
        cache = tape.layers[layer]
        p = f"blocks.{layer}."
        h, kv = c.n_heads[layer], c.n_kv_heads[layer]
        kv_map = np.asarray(model.kv_maps[layer])

        # FFN: x_out = x_mid + (silu(gate) * up) @ W_down
        d_act, grads[p + "w_down"] = nx.matmul_backward(dx, cache.ffn_act, w["w_down"])
        d_up = d_act * nx.silu(cache.gate)
        d_gate = nx.silu_backward(d_act * cache.up, cache.gate)
        db_up, grads[p + "w_up"] = nx.matmul_backward(d_up, cache.b, w["w_up"])
        db_gate, grads[p + "w_gate"] = nx.matmul_backward(d_gate, cache.b, w["w_gate"])
        d_xmid, grads[p + "norm_ffn"] = nx.rms_norm_backward(db_up + db_gate, cache.x_mid,
                                                             w["norm_ffn"], cache.rstd_ffn)
        d_xmid += dx

        # attention: x_mid = x_in + attn_out @ W_o
        d_attn, grads[p + "wo"] = nx.matmul_backward(d_xmid, cache.attn_out, w["wo"])
        d_heads = d_attn.reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
        k_e, v_e = cache.k[:, kv_map], cache.v[:, kv_map]
        d_probs = d_heads @ v_e.transpose(0, 1, 3, 2)
        dv_e = cache.probs.transpose(0, 1, 3, 2) @ d_heads
        d_scores = nx.softmax_backward(d_probs, cache.probs) * scale
        dq = d_scores @ k_e
        dk_e = d_scores.transpose(0, 1, 3, 2) @ cache.q
        dk, dv = _gather_kv_grad(dk_e, kv_map, kv), _gather_kv_grad(dv_e, kv_map, kv)
        dq = dq.transpose(0, 2, 1, 3).reshape(bsz, t, h * dh)
        dk = dk.transpose(0, 2, 1, 3).reshape(bsz, t, kv * dh)
        dv = dv.transpose(0, 2, 1, 3).reshape(bsz, t, kv * dh)
        da_q, grads[p + "wq"] = nx.matmul_backward(dq, cache.a, w["wq"])
        da_k, grads[p + "wk"] = nx.matmul_backward(dk, cache.a, w["wk"])
        da_v, grads[p + "wv"] = nx.matmul_backward(dv, cache.a, w["wv"])
        dx_in, grads[p + "norm_attn"] = nx.rms_norm_backward(da_q + da_k + da_v, cache.x_in,
                                                             w["norm_attn"], cache.rstd_attn)
        dx = dx_in + d_xmid

    emb = nx.embedding_backward(dx, tape.ids, c.vocab_size)
    grads["embedding"] = emb if d_embedding is None else emb + d_embedding
    return {name: grads[name] for name in model.params}


def greedy_decode(model: TransformerModel, prompt, n_new: int) -> list[int]:
    """Greedy continuation; recomputes the full prefix each step (no KV cache)."""
    seq = [int(t) for t in prompt]
    for _ in range(n_new):
        ctx = seq[-model.config.max_seq_len:]
        _, tape = forward(model, ctx + [0])
        seq.append(int(np.argmax(tape.logits[0, -1])))
    return seq
