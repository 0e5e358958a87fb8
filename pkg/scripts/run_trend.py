"""Same token budget, half the parameters: prune-aware vs one-shot+recovery vs scratch.

    python scripts/run_trend.py --seeds 0 1 2 --budget-tokens 30000000 --out results/trend.json
"""
import statistics

from _common import parser, save, setup_from
from prunelab.experiments import trend_trial


def main() -> None:
    args = parser(__doc__.splitlines()[0]).parse_args()
    corpus, setup = setup_from(args)
    trials = []
    for seed in args.seeds:
        trials.append(trend_trial(corpus, setup, seed))
        print(f"seed {seed}: aware {trials[-1]['aware']:.4f} oneshot {trials[-1]['oneshot']:.4f} "
              f"scratch {trials[-1]['scratch']:.4f}", flush=True)
    med = {k: statistics.median(t[k] for t in trials) for k in ("aware", "oneshot", "scratch")}
    ok = med["aware"] <= med["oneshot"] <= med["scratch"] and med["aware"] < med["scratch"]
    save(args, {"setup": vars(setup), "trials": trials, "median": med, "ordering_holds": ok})


if __name__ == "__main__":
    main()
