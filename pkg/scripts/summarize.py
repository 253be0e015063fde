"""Print curves.csv as tables, comparing each ensemble with the best single model.

    python scripts/summarize.py runs/desk/curves.csv [runs/full_traditional/curves.csv]

Extra files are merged, so a full-scale traditional run can serve as the
reference for a separately computed parallel run.
"""

import argparse
from collections import defaultdict

from ensemble_forge.harness import read_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("curves", nargs="+")
    args = parser.parse_args()

    rows = [r for path in args.curves for r in read_csv(path)]
    by_variant = defaultdict(lambda: defaultdict(dict))
    for r in rows:
        by_variant[r.variant][r.iteration][r.N] = r.error

    trad = by_variant.get("traditional", {})
    reference = min((errs[1] for errs in trad.values()), default=None)
    if trad:
        print("traditional (N=1)")
        for it in sorted(trad):
            print(f"  iter {it:>5}  error {trad[it][1]:.4f}")
        print(f"  best {reference:.4f}\n")

    for variant in ("plain", "bootstrap"):
        curves = by_variant.get(variant)
        if not curves:
            continue
        ns = sorted({n for errs in curves.values() for n in errs})
        print(variant)
        print("  iter  " + " ".join(f"{'N=' + str(n):>8}" for n in ns))
        for it in sorted(curves):
            print(f"  {it:>4}  " + " ".join(f"{curves[it].get(n, float('nan')):8.4f}" for n in ns))
        if reference:
            for it in sorted(curves):
                top = max(curves[it])
                change = curves[it][top] / reference - 1
                print(f"  iter {it} at N={top}: error {change:+.1%} relative to best traditional")
        print()


if __name__ == "__main__":
    main()
