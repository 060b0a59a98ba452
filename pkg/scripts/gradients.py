"""Finite-difference gradient checks for every op and layer."""

import sys

from eqsino.experiments import gradient_suite

TOL = 1e-5


def main():
    res = gradient_suite(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
    for name, err in res:
        print(f"{'pass' if err < TOL else 'FAIL'}  {name:32s} {err:.2e}")
    return 0 if all(err < TOL for _, err in res) else 2


if __name__ == "__main__":
    sys.exit(main())
