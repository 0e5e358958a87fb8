"""Architecture tables and prune-trace export."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

from prunelab.errors import IoFailure
from prunelab.model import ModelConfig, TransformerModel
from prunelab.trainer import TraceRow

ARCH_COLUMNS = ("model", "hidden_size", "ffn_intermediate", "attention_heads", "head_dim", "layers", "params")
TRACE_COLUMNS = ("step", "tokens", "s_attn", "s_ffn", "s_stem", "chosen", "m", "mean_h", "mean_n", "params")


@dataclass(frozen=True)
class ArchRow:
    model: str
    hidden_size: int
    ffn_intermediate: str
    attention_heads: str
    head_dim: int
    layers: int
    params: int | None

    def fields(self) -> list[str]:
        return [self.model, str(self.hidden_size), self.ffn_intermediate, self.attention_heads,
                str(self.head_dim), str(self.layers), "" if self.params is None else str(self.params)]


def _widths(values: list[int]) -> str:
    """One number when every layer agrees, else ``a/b/c`` per layer."""
    return str(values[0]) if len(set(values)) == 1 else "/".join(str(v) for v in values)


def arch_row(source, name: str = "model", with_params: bool = True) -> ArchRow:
    if isinstance(source, TransformerModel):
        cfg, params = source.config, source.parameter_count()
    elif isinstance(source, ModelConfig):
        cfg, params = source, source.parameter_count()
    else:
        raise TypeError(f"cannot report on {type(source).__name__}")
    return ArchRow(name, cfg.hidden, _widths(cfg.ffn), _widths(cfg.n_heads), cfg.head_dim, cfg.n_layers,
                   params if with_params else None)


def report_architecture(source, name: str = "model", head_dim: int | None = None) -> list[ArchRow]:
    """Rows in the ``Hidden | FFN | Heads | Head Dim | Layers | Params`` schema.

    ``source`` is a model or config (one row) or a prune trace (one row per
    event; ``head_dim`` must then be given).
    """
    if isinstance(source, (TransformerModel, ModelConfig)):
        return [arch_row(source, name)]
    rows = []
    for ev in source:
        rows.append(ArchRow(f"{name}@{ev.step}", ev.hidden, _widths(ev.ffn), _widths(ev.heads),
                            head_dim or 0, len(ev.heads), ev.params))
    return rows


def arch_csv(rows: list[ArchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ARCH_COLUMNS)
    for r in rows:
        writer.writerow(r.fields())
    return buf.getvalue()


def read_arch_csv(text: str) -> list[ArchRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != ARCH_COLUMNS:
        raise ValueError(f"unexpected architecture columns {reader.fieldnames}")
    return [ArchRow(r["model"], int(r["hidden_size"]), r["ffn_intermediate"], r["attention_heads"],
                    int(r["head_dim"]), int(r["layers"]), int(r["params"]) if r["params"] else None)
            for r in reader]


def render_table(rows: list[ArchRow]) -> str:
    header = ["Model", "Hidden Size", "FFN Intermediate", "Attention Heads", "Head Dim", "Layer", "Params"]
    body = [r.fields() for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    fmt = " | ".join("{:<%d}" % w for w in widths)
    lines = [fmt.format(*header), "-+-".join("-" * w for w in widths)]
    lines += [fmt.format(*b) for b in body]
    return "\n".join(lines) + "\n"


def read_table(text: str) -> list[ArchRow]:
    """Parse :func:`render_table` output back into rows."""
    lines = text.strip("\n").split("\n")[2:]
    rows = []
    for line in lines:
        cells = [c.strip() for c in line.split(" | ")]
        rows.append(ArchRow(cells[0], int(cells[1]), cells[2], cells[3], int(cells[4]), int(cells[5]),
                            int(cells[6]) if cells[6] else None))
    return rows


def trace_record(row: TraceRow) -> dict:
    return {"step": row.step, "tokens": row.tokens, "s_attn": row.s_attn, "s_ffn": row.s_ffn,
            "s_stem": row.s_stem, "chosen": row.chosen, "m": row.hidden, "mean_h": row.mean_h,
            "mean_n": row.mean_n, "params": row.params}


def export_trace(trace: list[TraceRow], path=None) -> str:
    """CSV of the prune trace; written to ``path`` when given.

    Raises ValueError unless ``params`` strictly decreases.
    """
    if not trace:
        raise ValueError("empty trace")
    for prev, cur in zip(trace, trace[1:]):
        if cur.params >= prev.params:
            raise ValueError(f"params not strictly decreasing at step {cur.step}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(TRACE_COLUMNS)
    for row in trace:
        rec = trace_record(row)
        writer.writerow([repr(v) if isinstance(v, float) else v for v in rec.values()])
    text = buf.getvalue()
    if path is not None:
        try:
            Path(path).write_text(text, newline="")
        except OSError as exc:
            raise IoFailure(f"cannot write trace {path}: {exc}") from exc
    return text


def read_trace_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text, newline=""))
    if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
        raise ValueError(f"unexpected trace columns {reader.fieldnames}")
    out = []
    for r in reader:
        out.append({"step": int(r["step"]), "tokens": int(r["tokens"]), "s_attn": float(r["s_attn"]),
                    "s_ffn": float(r["s_ffn"]), "s_stem": float(r["s_stem"]), "chosen": r["chosen"],
                    "m": int(r["m"]), "mean_h": float(r["mean_h"]), "mean_n": float(r["mean_n"]),
                    "params": int(r["params"])})
    return out


def trace_to_json(trace: list[TraceRow]) -> list[dict]:
    out = []
    for row in trace:
        rec = dict(row.__dict__)
        rec["selection"] = list(row.selection)
        for key in ("s_attn", "s_ffn", "s_stem"):
            if math.isinf(rec[key]):
                rec[key] = "inf"
        out.append(rec)
    return out


def trace_from_json(records: list[dict]) -> list[TraceRow]:
    rows = []
    for rec in records:
        rec = dict(rec)
        rec["selection"] = tuple(rec["selection"])
        for key in ("s_attn", "s_ffn", "s_stem"):
            rec[key] = float(rec[key])
        rows.append(TraceRow(**rec))
    return rows
