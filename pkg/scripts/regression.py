"""Ring-thickness regression: equivariant model vs size-matched MLP vs mean predictor.

    python scripts/regression.py --epochs 150 --out runs/regression
"""

import argparse
import json
from pathlib import Path

from eqsino.experiments import desk_regression
from eqsino.plot import svg_line_plot
from eqsino.train import metrics_csv


def curve(log):
    pts = [(e, float(v)) for e, split, metric, v in log if split == "val" and metric == "mse"]
    return [p[0] for p in pts], [p[1] for p in pts]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--n-train", type=int, default=1000)
    ap.add_argument("--out", default="runs/regression")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = desk_regression(args.seed, args.epochs, args.n_train)
    (out / "metrics_equivariant.csv").write_text(metrics_csv(res["log_equivariant"]))
    (out / "metrics_mlp.csv").write_text(metrics_csv(res["log_mlp"]))
    summary = {k: v for k, v in res.items() if not k.startswith("log_")}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    base = res["baseline"]["mse"]
    series = {"equivariant": curve(res["log_equivariant"]), "mlp": curve(res["log_mlp"]),
              "mean predictor": ([0, args.epochs - 1], [base, base])}
    (out / "val_mse.svg").write_text(svg_line_plot(series, "Held-out MSE", "epoch", "MSE", logy=True))
    print(f"mean predictor {base:.3e}")
    print(f"equivariant    {res['equivariant']['mse']:.3e}  ({res['n_params_equivariant']} params)")
    print(f"mlp            {res['mlp']['mse']:.3e}  ({res['n_params_mlp']} params)")


if __name__ == "__main__":
    main()
