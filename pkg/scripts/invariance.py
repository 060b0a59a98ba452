"""Model invariance residual against the number of fan-beam source angles.

    python scripts/invariance.py --angles 2 8 32 --n-g 20 [--train-samples 200 --train-epochs 3]
"""

import argparse

from eqsino.experiments import InvarianceStudy, invariance_study, medians_by


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--angles", type=int, nargs="+", default=[2, 8, 32])
    ap.add_argument("--n-g", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-samples", type=int, default=0)
    ap.add_argument("--train-epochs", type=int, default=0)
    ap.add_argument("--mlp", action="store_true", help="use the fully connected baseline instead")
    args = ap.parse_args()
    arch = {"kind": "mlp", "mlp_hidden": 64} if args.mlp else {}
    study = InvarianceStudy(tuple(args.angles), args.n_g, seed=args.seed, train_samples=args.train_samples,
                            train_epochs=args.train_epochs, arch=arch)
    for n, m in medians_by(invariance_study(study), "n_angles").items():
        print(f"{n:3d} angles: median residual {m:.3e}")


if __name__ == "__main__":
    main()
