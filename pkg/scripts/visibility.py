"""Kernel comparison of A and A P[g] for parallel-beam geometries on a pixel grid.

    python scripts/visibility.py --grid 16 --angles 24 --angles-deg 0 85
"""

import argparse

import numpy as np

from eqsino.experiments import visibility_rows
from eqsino.group import se2
from eqsino.tomo import equispaced_angles


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=16)
    ap.add_argument("--offsets", type=int, default=33)
    ap.add_argument("--angles", type=int, nargs="*", default=[2, 4, 24], help="equispaced angle counts")
    ap.add_argument("--angles-deg", type=float, nargs="*", default=[0.0, 85.0], help="one explicit geometry")
    ap.add_argument("--rotations-deg", type=float, nargs="+", default=[90.0, 45.0])
    args = ap.parse_args()
    geoms = {f"{n} equispaced": np.asarray(equispaced_angles(n)) for n in args.angles}
    if args.angles_deg:
        geoms["deg " + "/".join(f"{a:g}" for a in args.angles_deg)] = np.deg2rad(args.angles_deg)
    elems = {f"rot{a:g}": se2([0.0, 0.0], np.deg2rad(a)) for a in args.rotations_deg}
    for r in visibility_rows(args.grid, geoms, elems, args.offsets):
        state = "holds   " if r["holds"] else "violated"
        print(f"{r['geometry']:>16s}  {r['element']:>7s}  {state}  angle {r['mismatch_angle']:.3e}  "
              f"dim ker A {r['dim_ker_A']:4d}  dim ker AP {r['dim_ker_AP']:4d}")


if __name__ == "__main__":
    main()
