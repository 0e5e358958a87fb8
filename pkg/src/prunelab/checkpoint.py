"""Checkpoint files: a text header of ``key=value`` lines, then raw tensors.

Layout::

    PRUNELAB-CHECKPOINT
    format_version=1
    config={...}                 # JSON values throughout
    kv_maps=[[...], ...]
    ...
    tensor=name|<f4|64,257|0|65792
    end_header
    <little-endian payload, tensors back to back at the declared offsets>

Offsets are relative to the first payload byte.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from prunelab.errors import CheckpointError, IoFailure
from prunelab.model import ModelConfig, TransformerModel
from prunelab.trainer import AdamW

MAGIC = "PRUNELAB-CHECKPOINT"
FORMAT_VERSION = 1
POS_KEY = "buffer.pos_table"


@dataclass
class Checkpoint:
    model: TransformerModel
    step: int = 0
    tokens: int = 0
    rng_state: dict | None = None
    optimizer: AdamW | None = None
    meta: dict = field(default_factory=dict)


def _tensor_line(name: str, arr: np.ndarray, offset: int) -> str:
    shape = ",".join(str(d) for d in arr.shape)
    return f"tensor={name}|{arr.dtype.str}|{shape}|{offset}|{arr.nbytes}"


def _little(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    model = ckpt.model
    tensors: list[tuple[str, np.ndarray]] = [(k, _little(v)) for k, v in model.params.items()]
    if model.pos_table is not None:
        tensors.append((POS_KEY, _little(model.pos_table)))
    opt = ckpt.optimizer
    has_opt = opt is not None and bool(opt.m)
    if has_opt:
        tensors += [(f"adam.m.{k}", _little(opt.m[k])) for k in model.params]
        tensors += [(f"adam.v.{k}", _little(opt.v[k])) for k in model.params]

    lines = [MAGIC, f"format_version={FORMAT_VERSION}",
             f"config={json.dumps(asdict(model.config), sort_keys=True)}",
             f"kv_maps={json.dumps(model.kv_maps)}",
             f"step={ckpt.step}", f"tokens={ckpt.tokens}",
             f"rng={json.dumps(ckpt.rng_state, sort_keys=True)}",
             f"has_optimizer={json.dumps(has_opt)}",
             f"meta={json.dumps(ckpt.meta, sort_keys=True)}"]
    if has_opt:
        hyper = {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                 "weight_decay": opt.weight_decay}
        lines.append(f"optimizer={json.dumps(hyper, sort_keys=True)}")
    offset = 0
    for name, arr in tensors:
        lines.append(_tensor_line(name, arr, offset))
        offset += arr.nbytes
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            for _, arr in tensors:
                fh.write(arr.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def _read_header(raw: bytes) -> tuple[dict, list[tuple[str, str, tuple, int, int]], int]:
    end = raw.find(b"\nend_header\n")
    if not raw.startswith(MAGIC.encode() + b"\n") or end < 0:
        raise CheckpointError("not a prunelab checkpoint")
    text = raw[:end].decode("utf-8").split("\n")[1:]
    values, tensors = {}, []
    for line in text:
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed header line {line!r}")
        if key == "tensor":
            name, dtype, shape, offset, nbytes = value.split("|")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            tensors.append((name, dtype, dims, int(offset), int(nbytes)))
        else:
            values[key] = value
    return values, tensors, end + len(b"\nend_header\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    values, tensors, start = _read_header(raw)
    version = values.get("format_version")
    if version != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    arrays = {}
    for name, dtype, shape, offset, nbytes in tensors:
        lo = start + offset
        if lo + nbytes > len(raw):
            raise CheckpointError(f"tensor {name} runs past end of file")
        arr = np.frombuffer(raw, dtype=np.dtype(dtype), count=int(np.prod(shape, dtype=np.int64)),
                            offset=lo).reshape(shape)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)

    config = ModelConfig(**json.loads(values["config"]))
    kv_maps = json.loads(values["kv_maps"])
    pos = arrays.pop(POS_KEY, None)
    names = [n for n in arrays if not n.startswith("adam.")]
    params = {n: arrays[n] for n in names}
    model = TransformerModel(config, params, kv_maps, pos)
    opt = None
    if json.loads(values.get("has_optimizer", "false")):
        hyper = json.loads(values["optimizer"])
        opt = AdamW(hyper["beta1"], hyper["beta2"], hyper["eps"], hyper["weight_decay"])
        opt.t = hyper["t"]
        opt.m = {n: arrays[f"adam.m.{n}"] for n in names}
        opt.v = {n: arrays[f"adam.v.{n}"] for n in names}
    return Checkpoint(model, int(values.get("step", 0)), int(values.get("tokens", 0)),
                      json.loads(values.get("rng", "null")), opt, json.loads(values.get("meta", "{}")))
