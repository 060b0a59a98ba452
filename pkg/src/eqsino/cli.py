"""Command-line entry point: ``eqsino <command> [--config F] [--seed N] [--out DIR] [--preset P]``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
or failed audit.  Set ``EQSINO_THREADS`` to cap BLAS threads.
"""

from __future__ import annotations

import os

_threads = os.environ.get("EQSINO_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import copy  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .errors import FormatError, NumericalError, UsageError  # noqa: E402

COMMANDS = ("gen-data", "train", "eval", "audit-equivariance", "audit-visibility", "audit-gradients")
SECTIONS = {"seed", "out", "geometry", "dataset", "architecture", "training",
            "equivariance", "visibility", "gradients"}
GRAD_TOL = 1e-5

PRESETS = {
    "smoke": {
        "dataset": {"n_train": 32, "n_test": 16},
        "architecture": {"points": 64, "init_channels": 4, "n_blocks": 2, "k": 9, "k_lift": 9,
                         "hidden": 16, "basis": 8},
        "training": {"epochs": 5},
        "equivariance": {"n_g": 4, "angle_counts": [2, 8]},
    },
    "desk": {
        "dataset": {"n_train": 1000, "n_test": 200},
    },
    "full": {
        "dataset": {"n_train": 1000, "n_test": 200},
        "architecture": {"points": 2700, "init_channels": 22},
        "training": {"epochs": 3000},
    },
    "sizes": {
        "dataset": {"sizes": [1000, 2000, 4000, 8000], "n_test": 200},
    },
}

DATASET_KEYS = {"n_train", "n_test", "sizes", "noise", "ring_params"}
EQUIVARIANCE_KEYS = {"mode", "angle_counts", "n_g", "n_detectors", "identity_only", "train_samples",
                     "train_epochs", "calibrate_samples", "operator"}
OPERATOR_KEYS = {"grid_sizes", "n_g", "kernel_pixels", "max_shift"}
VISIBILITY_KEYS = {"grid_size", "n_offsets", "geometries", "elements"}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise UsageError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise UsageError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(path: str | None, preset: str | None, seed: int | None, out: str | None) -> dict:
    """Preset, then config file, then flags; unknown keys are rejected."""
    cfg: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = copy.deepcopy(PRESETS[preset])
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError as exc:
            raise UsageError(f"config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        _check_keys(user, SECTIONS, "config")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    cfg.setdefault("seed", 0)
    _check_keys(cfg, SECTIONS, "config")
    for name, allowed in (("dataset", DATASET_KEYS), ("equivariance", EQUIVARIANCE_KEYS),
                          ("visibility", VISIBILITY_KEYS)):
        if name in cfg:
            _check_keys(cfg[name], allowed, name)
    if "operator" in cfg.get("equivariance", {}):
        _check_keys(cfg["equivariance"]["operator"], OPERATOR_KEYS, "equivariance.operator")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise UsageError("seed must be a non-negative integer")
    return cfg


def _outdir(cfg: dict, command: str) -> Path:
    out = Path(cfg.get("out") or f"runs/{command}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def _write_csv(path: Path, header: list, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


# -- gen-data -------------------------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    import numpy as np

    from .data import RingParams, build_dataset, default_geometry, save_dataset
    from .experiments import geometry_from_spec

    out = _outdir(cfg, "gen-data")
    d = cfg.get("dataset", {})
    geom = geometry_from_spec(cfg["geometry"]) if "geometry" in cfg else default_geometry()
    try:
        params = RingParams(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in d.get("ring_params", {}).items()})
    except TypeError as exc:
        raise UsageError(f"bad ring_params: {exc}") from exc
    noise = float(d.get("noise", 0.05))
    seed = cfg["seed"]
    if "sizes" in d:
        splits = [(f"train_{n}", int(n), 0) for n in d["sizes"]]
    else:
        splits = [("train", int(d.get("n_train", 1000)), 0)]
    splits.append(("test", int(d.get("n_test", 200)), 1))
    rows = []
    for name, n, stream in splits:
        ds = build_dataset(n, geom, noise, seed, stream, params)
        save_dataset(ds, out / f"{name}.eqmd")
        t = ds.targets
        for j, target in enumerate(("d_min", "d_max")):
            col = t[:, j] if n else np.zeros(0)
            stats = (col.mean(), col.std(), col.min(), col.max()) if n else (float("nan"),) * 4
            rows.append([name, n, target] + [_fmt(float(s)) for s in stats])
        print(f"{name}: {n} samples -> {out / (name + '.eqmd')}")
    _write_csv(out / "summary.csv", ["split", "n", "target", "mean", "std", "min", "max"], rows)
    return 0


# -- train / eval ---------------------------------------------------------------------------


def _training_config(cfg: dict):
    from .train import TrainConfig

    t = dict(cfg.get("training", {}))
    t.setdefault("seed", cfg["seed"])
    return TrainConfig.from_dict(t)


def _load_split(path, what: str):
    from .data import load_dataset

    if not path:
        raise UsageError(f"no {what} dataset given (set training.{what}_path or --dataset)")
    return load_dataset(path)


def cmd_train(cfg: dict, resume: str | None = None, dataset: str | None = None,
              max_steps: int | None = None) -> int:
    import numpy as np

    from .layers import ArchConfig, build_model
    from .plot import svg_line_plot
    from .train import ArraySet, checkpoint_load, checkpoint_save, metrics_csv, train

    tcfg = _training_config(cfg)
    train_path = dataset or tcfg.train_path
    tr = _load_split(train_path, "train")
    te = _load_split(tcfg.test_path, "test") if tcfg.test_path else None
    arch = ArchConfig.from_dict(cfg.get("architecture", {}))
    out = _outdir(cfg, "train")
    model = build_model(arch, tr.sensors, np.random.default_rng([tcfg.seed, 1]))
    state = None
    if resume:
        state, meta = checkpoint_load(resume, model)
        if meta.get("architecture") != arch.to_dict():
            raise UsageError("checkpoint architecture differs from the configured one")
        if meta.get("training") != tcfg.to_dict():
            raise UsageError("checkpoint training config differs from the configured one")
    train_set = ArraySet.from_dataset(tr)
    val = ArraySet.from_dataset(te) if te is not None else None
    extra = {"architecture": arch.to_dict(), "training": tcfg.to_dict(),
             "sensors": tr.sensors.ravel().tolist()}
    state = train(model, train_set, tcfg, val=val, state=state, max_steps=max_steps)
    checkpoint_save(out / "checkpoint.eqck", model, state, extra)
    (out / "metrics.csv").write_text(metrics_csv(state.log))
    series = {}
    for epoch, split, metric, value in state.log:
        if metric in ("loss", "mse", "accuracy"):
            xs, ys = series.setdefault(f"{split} {metric}", ([], []))
            xs.append(epoch)
            ys.append(float(value))
    (out / "training.svg").write_text(svg_line_plot(series, "Training curves", "epoch", "value", logy=True))
    last = [r for r in state.log if r[0] == state.epoch - 1]
    for r in last:
        print(f"epoch {r[0]} {r[1]} {r[2]} = {float(r[3]):.6g}")
    return 0


def cmd_eval(cfg: dict, checkpoint: str | None, dataset: str | None) -> int:
    import numpy as np

    from .layers import ArchConfig, build_model
    from .tensor import read_checkpoint
    from .train import ArraySet, checkpoint_load, evaluate

    if not checkpoint:
        raise UsageError("eval needs --checkpoint")
    ds = _load_split(dataset, "test")
    try:
        _, meta = read_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {checkpoint}") from exc
    if "architecture" not in meta:
        raise FormatError(f"{checkpoint}: no architecture recorded")
    arch = ArchConfig.from_dict(meta["architecture"])
    if "architecture" in cfg and ArchConfig.from_dict(cfg["architecture"]).to_dict() != arch.to_dict():
        raise UsageError("configured architecture does not match the checkpoint")
    sensors = np.asarray(meta["sensors"], float).reshape(-1, 2)
    if sensors.shape != ds.sensors.shape or not np.array_equal(sensors, ds.sensors):
        raise UsageError("dataset sensors do not match the checkpoint's sensors")
    out = _outdir(cfg, "eval")
    model = build_model(arch, sensors, np.random.default_rng(0))
    checkpoint_load(checkpoint, model)
    loss = meta.get("training", {}).get("loss", "mse")
    res = evaluate(model, ArraySet.from_dataset(ds), loss, seed=cfg["seed"])
    _write_csv(out / "metrics.csv", ["split", "metric", "value"],
               [["test", k, _fmt(v)] for k, v in res.items()])
    for k, v in res.items():
        print(f"{k} = {v:.6g}")
    return 0


# -- audits ---------------------------------------------------------------------------------


def cmd_audit_equivariance(cfg: dict) -> int:
    import numpy as np

    from .experiments import InvarianceStudy, invariance_study, medians_by, operator_equivariance
    from .plot import svg_line_plot

    out = _outdir(cfg, "audit-equivariance")
    e = dict(cfg.get("equivariance", {}))
    mode = e.pop("mode", "model")
    op_cfg = e.pop("operator", {})
    if mode not in ("model", "operator", "both"):
        raise UsageError(f"unknown equivariance mode {mode!r}")
    rows, medians = [], []
    series = {}
    if mode in ("model", "both"):
        if "angle_counts" in e:
            e["angle_counts"] = tuple(int(n) for n in e["angle_counts"])
        study = InvarianceStudy(seed=cfg["seed"], arch=cfg.get("architecture", {}), **e)
        res = invariance_study(study)
        rows += [["model", f"fan_{r['n_angles']}", r["n_angles"], r["index"], _fmt(r["gamma"]),
                  _fmt(r["residual"])] for r in res]
        med = medians_by(res, "n_angles")
        medians += [["model", f"fan_{n}", n, _fmt(m)] for n, m in med.items()]
        series["model (median)"] = (list(med), list(med.values()))
    if mode in ("operator", "both"):
        sizes = op_cfg.get("grid_sizes", [64])
        ops = {k: op_cfg[k] for k in ("n_g", "kernel_pixels", "max_shift") if k in op_cfg}
        meds = []
        for N in sizes:
            r = operator_equivariance(int(N), int(N) // 2, int(N) + 1, seed=cfg["seed"], **ops)
            rows += [["operator", f"grid_{N}", int(N) // 2, i, "", _fmt(float(v))] for i, v in enumerate(r)]
            meds.append(float(np.median(r)))
            medians.append(["operator", f"grid_{N}", int(N) // 2, _fmt(meds[-1])])
        series["operator (median)"] = ([int(N) // 2 for N in sizes], meds)
    _write_csv(out / "equivariance.csv", ["kind", "geometry", "n_angles", "index", "gamma", "residual"], rows)
    _write_csv(out / "medians.csv", ["kind", "geometry", "n_angles", "median_residual"], medians)
    (out / "equivariance.svg").write_text(
        svg_line_plot(series, "Equivariance residual", "number of angles", "median residual",
                      logx=True, logy=True))
    for m in medians:
        print(f"{m[0]} {m[1]}: median residual {float(m[3]):.3e}")
    return 0


def _parse_element(spec: dict):
    import numpy as np

    from .group import aff, se2

    _check_keys(spec, {"name", "shift", "angle_deg", "matrix"}, "visibility element")
    s = np.asarray(spec.get("shift", [0.0, 0.0]), float)
    if "matrix" in spec:
        return aff(s, np.asarray(spec["matrix"], float))
    return se2(s, np.deg2rad(float(spec.get("angle_deg", 0.0))))


def cmd_audit_visibility(cfg: dict) -> int:
    import numpy as np

    from .experiments import visibility_rows
    from .tomo import equispaced_angles

    out = _outdir(cfg, "audit-visibility")
    v = cfg.get("visibility", {})
    geoms = v.get("geometries", {"dense_24": 24, "sparse_0_85": [0.0, 85.0]})
    geometries = {}
    for name, g in geoms.items():
        if isinstance(g, int):
            geometries[name] = np.asarray(equispaced_angles(g))
        else:
            geometries[name] = np.deg2rad(np.asarray(g, float))
    elements = v.get("elements", [{"name": "rot90", "angle_deg": 90.0}])
    elems = {e.get("name", f"g{i}"): _parse_element(e) for i, e in enumerate(elements)}
    rows = visibility_rows(int(v.get("grid_size", 16)), geometries, elems, int(v.get("n_offsets", 33)))
    header = ["geometry", "element", "holds", "mismatch_angle", "dim_ker_A", "dim_ker_AP"]
    _write_csv(out / "visibility.csv", header, [[_fmt(r[k]) for k in header] for r in rows])
    for r in rows:
        verdict = "holds" if r["holds"] else "violated"
        print(f"{r['geometry']} / {r['element']}: {verdict} (angle {r['mismatch_angle']:.3e} rad)")
    return 0


def cmd_audit_gradients(cfg: dict) -> int:
    from .experiments import gradient_suite

    out = _outdir(cfg, "audit-gradients")
    g = cfg.get("gradients", {})
    _check_keys(g, {"tol"}, "gradients")
    tol = float(g.get("tol", GRAD_TOL))
    results = gradient_suite(cfg["seed"])
    rows, failed = [], []
    for name, err in results:
        ok = err < tol
        rows.append([name, _fmt(float(err)), "pass" if ok else "FAIL"])
        print(f"{'pass' if ok else 'FAIL'}  {name:32s} {err:.2e}")
        if not ok:
            failed.append(name)
    _write_csv(out / "gradients.csv", ["op", "max_rel_err", "status"], rows)
    if failed:
        print(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 2
    print(f"all {len(results)} gradient checks passed (tol {tol:g})")
    return 0


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqsino", description="Equivariant learning on sinogram data.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--preset", help=f"one of {', '.join(sorted(PRESETS))}")
        if name == "train":
            s.add_argument("--resume", help="checkpoint to continue from")
            s.add_argument("--dataset", help="training dataset (overrides training.train_path)")
            s.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
        if name == "eval":
            s.add_argument("--checkpoint", help="trained checkpoint")
            s.add_argument("--dataset", help="dataset to evaluate on")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = load_config(args.config, args.preset, args.seed, args.out)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume, args.dataset, args.max_steps)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.dataset)
        if args.command == "audit-equivariance":
            return cmd_audit_equivariance(cfg)
        if args.command == "audit-visibility":
            return cmd_audit_visibility(cfg)
        return cmd_audit_gradients(cfg)
    except (UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
