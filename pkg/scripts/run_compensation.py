"""Second-order weight compensation vs plain pruning with a short post-prune budget.

    python scripts/run_compensation.py --seeds 0 1 2 --out results/compensation.json
"""
import statistics

from _common import parser, save, setup_from
from prunelab.experiments import compensation_trial, oneshot_compensation_trial


def main() -> None:
    p = parser(__doc__.splitlines()[0])
    p.add_argument("--post-fraction", type=float, default=0.05)
    p.add_argument("--ratio", default="1:1", help="prune:gd steps per macro-iteration")
    p.add_argument("--oneshot-dense-steps", type=int, default=0,
                   help="instead: prune one dense model of this many steps with and without compensation")
    args = p.parse_args()
    corpus, setup = setup_from(args)
    setup.post_fraction = args.post_fraction
    ratio = tuple(int(x) for x in args.ratio.split(":"))
    if args.oneshot_dense_steps:
        trials = [oneshot_compensation_trial(corpus, setup, seed, args.oneshot_dense_steps) for seed in args.seeds]
        for t in trials:
            print(f"seed {t['seed']}: dense {t['dense_ppl']:.4f} A {t['A']:.4f} {t['A_chosen']} "
                  f"B {t['B']:.4f} {t['B_chosen']}", flush=True)
        median = {k: statistics.median(t[k] for t in trials) for k in ("A", "B")}
        save(args, {"setup": vars(setup), "trials": trials, "median": median, "b_not_worse": median["B"] <= median["A"]})
        return
    trials = []
    for seed in args.seeds:
        for second_order in (False, True):
            trials.append(compensation_trial(corpus, setup, seed, second_order, ratio))
            t = trials[-1]
            print(f"seed {seed} {'B' if second_order else 'A'}: at target {t['ppl_at_target']:.4f} "
                  f"after {t['post_tokens']} tokens {t['ppl']:.4f}, hidden {t['hidden']}, {t['chosen']}", flush=True)
    median = {name: statistics.median(t["ppl"] for t in trials if t["second_order"] == so)
              for name, so in (("A", False), ("B", True))}
    save(args, {"setup": vars(setup), "trials": trials, "median": median, "b_not_worse": median["B"] <= median["A"]})


if __name__ == "__main__":
    main()
