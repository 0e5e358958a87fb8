"""Command-line entry point: ``prunelab <command> ...``.

Failures print one line ``prunelab: error code=<Code> [key=<key>] msg=<text>``
to stderr and exit non-zero (2 for configuration/usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from prunelab.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from prunelab.config import RunConfig, dump_config, load_config
from prunelab.data import Corpus, evaluate_perplexity
from prunelab.errors import ConfigError, IoFailure, PrunelabError
from prunelab.numerics import Rng
from prunelab.report import (arch_csv, export_trace, render_table, report_architecture, trace_from_json,
                             trace_to_json)
from prunelab.trainer import RunResult, TrainConfig, oneshot_prune, run

log = logging.getLogger("prunelab")


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    return out


def _write_run(out: Path, result: RunResult, rc: RunConfig, rng: Rng, corpus: Corpus) -> dict:
    save_checkpoint(out / "model.ckpt", Checkpoint(result.model, result.state.step, result.state.tokens,
                                                   rng.get_state(), result.state.optimizer))
    (out / "trace.json").write_text(json.dumps(trace_to_json(result.trace), indent=1))
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "tokens", "loss", "lr", "params"])
        writer.writeheader()
        writer.writerows(result.metrics)
    (out / "arch.csv").write_text(arch_csv(report_architecture(result.model, "final")))
    (out / "config.txt").write_text(dump_config(rc))
    ppl = evaluate_perplexity(result.model, corpus.heldout, rc.train.seq_len, max_tokens=rc.eval_max_tokens)
    summary = {"params": result.model.parameter_count(), "target_params": result.target_params,
               "tokens": result.state.tokens, "steps": result.state.step,
               "tokens_to_target": result.tokens_to_target, "prune_events": len(result.trace),
               "heldout_ppl": ppl}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def _train(args, pruning: bool) -> int:
    rc = load_config(args.config)
    if not pruning:
        rc.train.prune_ratio = (0, 1)
    if getattr(args, "second_order", False):
        rc.train.second_order = True
    corpus = Corpus.load(args.corpus, rc.holdout)
    rng = Rng(rc.train.seed)
    model = load_checkpoint(args.init).model if args.init else None
    result = run(rc.train, corpus, rc.model if model is None else None, model=model, rng=rng)
    summary = _write_run(_outdir(args.out), result, rc, rng, corpus)
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    corpus = Corpus.load(args.corpus, args.holdout)
    ids = corpus.heldout if args.split == "heldout" else corpus.train
    ppl = evaluate_perplexity(ckpt.model, ids, args.seq_len or ckpt.model.config.max_seq_len,
                              max_tokens=args.max_tokens)
    print(json.dumps({"ckpt": str(args.ckpt), "split": args.split, "perplexity": ppl}))
    return 0


def cmd_report_arch(args) -> int:
    rows = report_architecture(load_checkpoint(args.ckpt).model, Path(args.ckpt).stem)
    if args.csv:
        Path(args.csv).write_text(arch_csv(rows))
    sys.stdout.write(render_table(rows))
    return 0


def cmd_export_trace(args) -> int:
    src = Path(args.run) / "trace.json"
    try:
        records = json.loads(src.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {src}: {exc}") from exc
    export_trace(trace_from_json(records), args.out)
    return 0


def cmd_oneshot(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    rc = load_config(args.config) if args.config else None
    cfg = rc.train if rc else TrainConfig(seq_len=min(128, ckpt.model.config.max_seq_len))
    if args.second_order:
        cfg.second_order = True
    if args.target >= ckpt.model.parameter_count():
        raise ConfigError("target", f"{args.target} >= current count {ckpt.model.parameter_count()}")
    corpus = Corpus.load(args.corpus, rc.holdout if rc else 0.02)
    rng = Rng(cfg.seed)
    state = oneshot_prune(ckpt.model, corpus, args.target, args.calib_batches, cfg, rng)
    out = _outdir(args.out)
    save_checkpoint(out / "model.ckpt", Checkpoint(state.model, 0, 0, rng.get_state()))
    (out / "trace.json").write_text(json.dumps(trace_to_json(state.trace), indent=1))
    (out / "arch.csv").write_text(arch_csv(report_architecture(state.model, "oneshot")))
    print(json.dumps({"params": state.model.parameter_count(), "prune_events": len(state.trace),
                      "calib_tokens": state.tokens}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, pruning in (("pretrain", False), ("prune-pretrain", True)):
        p = sub.add_parser(name, help="train" + (" with pruning" if pruning else ""))
        p.add_argument("--config", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--init", help="start from this checkpoint's weights and architecture")
        if pruning:
            p.add_argument("--second-order", action="store_true", help="OBS weight compensation")
        p.set_defaults(func=lambda a, pruning=pruning: _train(a, pruning))

    p = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("heldout", "train"), default="heldout")
    p.add_argument("--holdout", type=float, default=0.02)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--max-tokens", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report-arch", help="architecture table of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report_arch)

    p = sub.add_parser("export-trace", help="prune trace of a run directory as CSV")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_trace)

    p = sub.add_parser("oneshot-prune", help="post-training prune of a checkpoint to a budget")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--calib-batches", type=int, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--second-order", action="store_true")
    p.set_defaults(func=cmd_oneshot)
    return parser


def _fail(code: str, msg: str, key: str | None = None) -> None:
    msg = " ".join(str(msg).split())
    key_part = f" key={key}" if key else ""
    print(f"prunelab: error code={code}{key_part} msg={msg}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        _fail(exc.code, exc, exc.key)
        return 2
    except PrunelabError as exc:
        _fail(exc.code, exc)
        return 1
    except OSError as exc:
        _fail("IoFailure", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
