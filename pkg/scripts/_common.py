"""Argument handling shared by the experiment scripts."""
import argparse
import json
import logging
from pathlib import Path

from prunelab.data import Corpus
from prunelab.experiments import ToySetup

DEFAULT_CORPUS = Path(__file__).resolve().parent.parent / "data" / "shakespeare.txt"


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--corpus", type=Path, default=DEFAULT_CORPUS)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--budget-tokens", type=int, default=ToySetup.budget_tokens)
    p.add_argument("--eval-max-tokens", type=int, help="cap on held-out tokens (default: whole split)")
    p.add_argument("--out", type=Path, help="write all trial records here as JSON")
    return p


def setup_from(args) -> tuple[Corpus, ToySetup]:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if not args.corpus.exists():
        raise SystemExit(f"corpus {args.corpus} missing; run scripts/make_corpus.py first")
    return Corpus.load(args.corpus), ToySetup(budget_tokens=args.budget_tokens,
                                              eval_max_tokens=args.eval_max_tokens)


def save(args, payload: dict) -> None:
    text = json.dumps(payload, indent=1)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    print(text)
