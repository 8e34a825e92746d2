"""Coverage and interval length for the low-dimensional presets.

Example::

    python3 scripts/reproduce_tables.py --sims 200 --parallel 1
"""

import argparse
import time

from newton_infer.errors import PartialFailureError
from newton_infer.simulation import run_coverage

# published (coverage, length) pairs for side-by-side printing
REFERENCE = {
    "lin1": (0.906, 0.289),
    "lin2": (0.915, 0.321),
    "log1": (0.902, 0.840),
    "log2": (0.925, 1.006),
    "tsma": (0.929, 0.145),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--presets", nargs="+", default=list(REFERENCE))
    ap.add_argument("--sims", type=int, default=None, help="defaults to each preset's n_sims")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--method", default=None)
    ap.add_argument("--parallel", type=int, default=1)
    args = ap.parse_args()

    print(f"{'preset':8} {'method':11} {'coverage':>9} {'length':>8} {'ref cov':>8} {'ref len':>8} {'fail':>5} {'sec':>6}")
    for name in args.presets:
        from newton_infer.presets import get_preset

        sims = args.sims or get_preset(name).n_sims
        start = time.perf_counter()
        try:
            rep = run_coverage(name, sims, args.seed, args.method, args.parallel)
        except PartialFailureError as exc:
            rep = exc.report
        ref = REFERENCE.get(name, (float("nan"), float("nan")))
        print(
            f"{name:8} {rep.method:11} {rep.coverage:9.3f} {rep.avg_length:8.3f} {ref[0]:8.3f} {ref[1]:8.3f} "
            f"{rep.failures:5d} {time.perf_counter() - start:6.1f}"
        )


if __name__ == "__main__":
    main()
