"""Shared builders and the acceptance-result registry for the test suite."""
import numpy as np

from prunelab.model import ModelConfig, TransformerModel
from prunelab.numerics import Rng

ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def make_model(seed=0, vocab=11, hidden=8, layers=1, heads=2, kv=None, ffn=16, head_dim=4,
               max_seq_len=32, dtype=np.float64, std=None, **kw) -> TransformerModel:
    cfg = ModelConfig.uniform(vocab, hidden, layers, heads, ffn, head_dim=head_dim, n_kv_heads=kv,
                              max_seq_len=max_seq_len, **kw)
    model = TransformerModel.init(cfg, Rng(seed), dtype=dtype)
    if std is not None:
        # larger weights make the network far from linear, so equivalence checks bite
        gen = np.random.default_rng(seed + 1000)
        for name, arr in model.params.items():
            if arr.ndim == 2:
                arr[...] = gen.standard_normal(arr.shape) * std
            else:
                arr[...] = 1.0 + 0.3 * gen.standard_normal(arr.shape)
    return model
