"""BOHB against random search on the conditional surrogate, at equal total budget.

    python scripts/search_demo.py --seeds 10 --iterations 3
"""
import argparse

import numpy as np

from eclstm.hpo import SearchSettings, bohb_run, random_search, surrogate_evaluator, surrogate_space


def compare(seeds: int, iterations: int):
    space = surrogate_space()
    rows = []
    for seed in range(seeds):
        res = bohb_run(space, surrogate_evaluator, SearchSettings(n_iterations=iterations), seed=seed)
        total = sum(r.budget for r in res.history if r.status != "infeasible")
        rs = random_search(space, surrogate_evaluator, total, 27, seed=1000 + seed)
        rows.append((seed, total, res.incumbent.loss, rs.incumbent.loss))
    return rows


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--iterations", type=int, default=3)
    args = p.parse_args()
    rows = compare(args.seeds, args.iterations)
    median = float(np.median([r[3] for r in rows]))
    print("seed  budget   bohb      random")
    for seed, total, bo, rs in rows:
        print(f"{seed:>4}  {total:>6.0f}  {bo:.5f}  {rs:.5f}")
    wins = sum(r[2] < median for r in rows)
    print(f"BOHB below the random-search median ({median:.5f}) in {wins}/{len(rows)} seeds")
