"""Replicate covariance error against the plug-in sandwich as T and L grow.

Runs the Lin1 design at a larger sample size and prints the median relative
spectral-norm error over seeds. ``--tau0`` overrides the inner step scale,
which is useful for comparing against a setting where the inner loop is
stable from its first step.

Example::

    python3 scripts/covariance_decay.py --seeds 20
    python3 scripts/covariance_decay.py --seeds 20 --tau0 0.4
"""

import argparse

import numpy as np

from newton_infer.approx_newton import run_inference
from newton_infer.errors import NewtonInferError
from newton_infer.inference import covariance_from_run, exact_solver, plugin_sandwich_lowdim
from newton_infer.presets import get_preset


def relative_error(loss, data, ref, cfg):
    try:
        run = run_inference(loss, data, None, cfg)
    except NewtonInferError:
        return np.inf
    est = covariance_from_run(run).matrix
    if not np.isfinite(est).all():
        return np.inf
    return np.linalg.norm(est - ref, 2) / np.linalg.norm(ref, 2)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="lin1")
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--tau0", type=float, default=None)
    ap.add_argument("--grid", type=int, nargs="+", default=[50, 200, 800])
    ap.add_argument("--fixed", type=int, default=200, help="value of L (or T) held fixed")
    args = ap.parse_args()

    pre = get_preset(args.preset).with_overrides(n=args.n)
    if args.tau0 is not None:
        pre = pre.with_overrides(engine={"tau0": args.tau0})
    loss = pre.loss()
    cases = []
    for s in range(args.seeds):
        data = pre.generate((4, s, 0))
        cases.append((data, plugin_sandwich_lowdim(loss, data, exact_solver(loss, data)).matrix))

    for label, pairs in (("T", [(v, args.fixed) for v in args.grid]), ("L", [(args.fixed, v) for v in args.grid])):
        for T, L in pairs:
            errs = [relative_error(loss, d, r, pre.engine_config(s).replace(T=T, L=L)) for s, (d, r) in enumerate(cases)]
            print(f"vary {label}: T={T:5d} L={L:5d} median rel. error {np.median(errs):.4g}  diverged {np.sum(np.isinf(errs))}")


if __name__ == "__main__":
    main()
