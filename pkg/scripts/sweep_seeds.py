"""Check how the three ablation orderings hold up across more seeds than the acceptance run.

    python scripts/sweep_seeds.py --seeds 10
"""
import argparse
import sys

from qprobe import sim


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=10, help="number of seeds, starting at 0")
    args = ap.parse_args(argv)
    seeds = range(args.seeds)
    for kind in sim.ABLATIONS:
        rep = sim.run_ablation(kind, seeds)
        print(f"{kind:14s} ordering holds {rep['holds']}/{len(seeds)}  "
              f"failing seeds: {[r['seed'] for r in rep['per_seed'] if not r['ordering_holds']]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
