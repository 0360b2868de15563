"""Grid-search step sizes per algorithm on the quadratic testbed.

For each algorithm, tries every (local, server) step size pair from the grid
and reports the first round at which the optimality gap drops to 1e-3, or the
final gap if it never does. Prints the frozen tuned settings at the end.

    python scripts/tune_quadratic.py [--rounds 2000] [--seed 0] [--only prefed]
"""
import argparse
import itertools
import time

from fedprecond.presets import SERVER_SIDE, STEP_GRID, first_hit, testbed_config, tuned_testbed_config

ALGORITHMS = ("fedavg", "fedadagrad", "fedadam", "prefed", "prefedopt")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rounds", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--only", choices=ALGORITHMS, default=None)
    ap.add_argument("--prefed-sync", choices=("zero", "carry", "average"), default="carry")
    ap.add_argument("--prefed-tau", type=float, default=0.1)
    args = ap.parse_args()
    for alg in [args.only] if args.only else ALGORITHMS:
        start = time.time()
        for eta_l, eta_g in itertools.product(STEP_GRID, STEP_GRID if alg in SERVER_SIDE else (None,)):
            local = {"eta_l": eta_l}
            if alg == "fedavg":
                local["kind"] = "sgd"
            if alg == "prefed":
                local.update(first_moment_sync=args.prefed_sync, tau=args.prefed_tau)
            server = {"eta_g": eta_g} if eta_g else None
            hit, gap = first_hit(testbed_config(alg, args.rounds, args.seed, local, server))
            print(f"{alg:10s} eta_l={eta_l:<6g} eta_g={eta_g!s:<6} hit={hit!s:<6} gap={gap:.3e}")
        print(f"  ({time.time() - start:.1f}s)")
    print("frozen settings:")
    for alg in ALGORITHMS:
        hit, gap = first_hit(tuned_testbed_config(alg, args.rounds, args.seed))
        print(f"  {alg:10s} hit={hit} gap={gap:.3e}")


if __name__ == "__main__":
    main()
