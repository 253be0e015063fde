"""Plain ensembles after one sweep under several master seeds.

Shows how often the N=max ensemble beats its own first model, and how it
compares with the median individual error.

    python scripts/seed_spread.py --seeds 2015 1 2 3 4
"""

import argparse
import dataclasses

import numpy as np

from ensemble_forge import harness


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="scripts/configs/desk.conf")
    parser.add_argument("--seeds", type=int, nargs="+", default=[2015, 1, 2, 3, 4])
    parser.add_argument("--sweep", type=int, default=1)
    args = parser.parse_args()

    base = harness.load_config(args.config)
    train, test = harness.load_data(base)
    for seed in args.seeds:
        cfg = dataclasses.replace(base, master_seed=seed, checkpoints=(args.sweep,),
                                  variant=("plain",), cache_dir=None)
        out = harness.run_parallel(cfg, "plain", train, test)
        curve = {r.N: r.error for r in out.rows}
        indiv = [float(m["individual_error"]) for m in out.manifest]
        top = max(curve)
        print(f"seed {seed:>6}: error(1)={curve[1]:.4f} error({top})={curve[top]:.4f} "
              f"median individual={np.median(indiv):.4f}")


if __name__ == "__main__":
    main()
