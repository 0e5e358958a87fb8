"""Tokens and perplexity at the parameter target for several prune:gd ratios.

    python scripts/run_schedule.py --seeds 0 1 2 --out results/schedule.json
"""
import statistics

from _common import parser, save, setup_from
from prunelab.experiments import RATIOS, schedule_trial


def main() -> None:
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--ratios", nargs="+", default=[f"{a}:{b}" for a, b in RATIOS])
    args = p.parse_args()
    corpus, setup = setup_from(args)
    ratios = [tuple(int(x) for x in r.split(":")) for r in args.ratios]
    trials = []
    for seed in args.seeds:
        for ratio in ratios:
            trials.append(schedule_trial(corpus, setup, seed, ratio))
            t = trials[-1]
            print(f"seed {seed} {t['ratio']}: tokens {t['tokens_to_target']} ppl {t['ppl']:.4f}", flush=True)
    median = {}
    for r in args.ratios:
        rows = [t for t in trials if t["ratio"] == r]
        median[r] = {k: statistics.median(t[k] for t in rows) for k in ("tokens_to_target", "ppl")}
    tokens = [median[r]["tokens_to_target"] for r in args.ratios]
    ppl = [median[r]["ppl"] for r in args.ratios]
    save(args, {"setup": vars(setup), "trials": trials, "median": median,
                "tokens_increasing": all(b > a for a, b in zip(tokens, tokens[1:])),
                "ppl_non_increasing": all(b <= a for a, b in zip(ppl, ppl[1:]))})


if __name__ == "__main__":
    main()
