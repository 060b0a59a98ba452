"""Representer-operator equivariance residual under grid refinement.

Each N x N grid is paired with N/2 angles and N+1 offsets of dense parallel
sensors; the Gaussian kernel width is three pixels.

    python scripts/convergence.py --sizes 64 128 192 --n-g 20
"""

import argparse

import numpy as np

from eqsino.experiments import operator_equivariance


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 192])
    ap.add_argument("--n-g", type=int, default=20)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()
    print("grid  angles  offsets  median      max")
    for N in args.sizes:
        r = operator_equivariance(N, N // 2, N + 1, n_g=args.n_g, seed=args.seed)
        print(f"{N:4d}  {N // 2:6d}  {N + 1:7d}  {np.median(r):.3e}  {np.max(r):.3e}")


if __name__ == "__main__":
    main()
