"""Dense kernels with hand-written backward passes, an SPD solver and a seedable RNG.

Matrices are plain ``numpy.ndarray`` objects. Every forward has a matching
``*_backward`` returning exact gradients with respect to all of its inputs.
Leading batch axes are allowed wherever the math is row-wise.
"""
from __future__ import annotations

import hashlib

import numpy as np
import scipy.linalg

from prunelab.errors import NotPositiveDefinite, ShapeMismatch

RMS_EPS = 1e-5


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


# ---------------------------------------------------------------------------
# SPD solve
# ---------------------------------------------------------------------------


def cholesky(h: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``h``; raises NotPositiveDefinite on a bad pivot."""
    _check(h.ndim == 2 and h.shape[0] == h.shape[1], f"H must be square, got {h.shape}")
    try:
        factor = np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"non-positive pivot in {h.shape[0]}x{h.shape[0]} system") from exc
    if not np.all(np.isfinite(factor)):
        raise NotPositiveDefinite("Cholesky factor is not finite")
    return factor


def solve_spd(h: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``h @ x = b`` for symmetric positive-definite ``h``.

    ``b`` may be a vector or a matrix of right-hand sides. Inputs are not
    modified.
    """
    _check(b.shape[0] == h.shape[0], f"rhs has {b.shape[0]} rows, H is {h.shape}")
    lower = cholesky(h)
    y = scipy.linalg.solve_triangular(lower, b, lower=True, check_finite=False)
    return scipy.linalg.solve_triangular(lower.T, y, lower=False, check_finite=False)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with ``a`` (..., k) and ``b`` (k, n)."""
    _check(b.ndim == 2 and a.shape[-1] == b.shape[0], f"matmul {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(dout: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    da = dout @ b.T
    db = a.reshape(-1, a.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    return da, db


def softmax(x: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis. ``-inf`` entries map to exactly zero."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dout: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (dout - (dout * probs).sum(axis=-1, keepdims=True))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(y, rstd)`` where ``y = x * rstd * gain`` and rstd is per row."""
    _check(gain.shape == (x.shape[-1],), f"rms_norm gain {gain.shape} vs input {x.shape}")
    rstd = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * rstd * gain, rstd


def rms_norm_backward(
    dout: np.ndarray, x: np.ndarray, gain: np.ndarray, rstd: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    xhat = x * rstd
    dgain = (dout * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
    dxhat = dout * gain
    dx = rstd * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-x))
    return dout * sig * (1.0 + x * (1.0 - sig))


def embedding(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"ids outside [0, {table.shape[0]})")
    return table[ids]


def embedding_backward(dout: np.ndarray, ids: np.ndarray, n_rows: int) -> np.ndarray:
    flat = ids.reshape(-1)
    onehot = np.zeros((flat.size, n_rows), dtype=dout.dtype)
    onehot[np.arange(flat.size), flat] = 1.0
    # a dense product keeps the per-row reduction order fixed, unlike scatter-add
    return onehot.T @ dout.reshape(-1, dout.shape[-1])


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``logits`` (N, V) against integer ``targets`` (N,).

    Returns ``(loss, probs)``; ``probs`` feeds :func:`cross_entropy_backward`.
    """
    _check(logits.ndim == 2 and targets.shape == (logits.shape[0],),
           f"cross_entropy logits {logits.shape} targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeMismatch(f"targets outside [0, {logits.shape[1]})")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - log_z
    loss = -logp[np.arange(targets.size), targets].mean()
    return float(loss), np.exp(logp)


def cross_entropy_backward(probs: np.ndarray, targets: np.ndarray, scale: float = 1.0) -> np.ndarray:
    grad = probs.copy()
    grad[np.arange(targets.size), targets] -= 1.0
    grad *= scale / targets.size
    return grad


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


class Rng:
    """Seeded PCG64 stream with deterministic named substreams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def substream(self, name: str) -> "Rng":
        digest = hashlib.sha256(name.encode()).digest()
        child = Rng.__new__(Rng)
        child.seed = self.seed
        seq = np.random.SeedSequence(self.seed, spawn_key=(int.from_bytes(digest[:8], "little"),))
        child.generator = np.random.Generator(np.random.PCG64(seq))
        return child

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.generator.standard_normal(shape) * std).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self.generator.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"])
        rng.generator.bit_generator.state = state["bit_generator"]
        return rng
