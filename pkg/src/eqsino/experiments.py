"""Reusable experiment drivers shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import UsageError
from .group import GroupId, concat, se2
from .tomo import (
    Geometry,
    GridLayout,
    build_sensors,
    equispaced_angles,
    fan_geometry,
    parallel_geometry,
)

# -- geometry specs ---------------------------------------------------------------------


def geometry_from_spec(spec: dict) -> Geometry:
    """Build a geometry from a small JSON-style description.

    Keys: ``kind`` (fan | parallel), ``angles_deg`` or ``n_angles``,
    ``n_detectors``, ``r_max``, ``source_distance``.
    """
    allowed = {"kind", "angles_deg", "n_angles", "n_detectors", "r_max", "source_distance"}
    unknown = set(spec) - allowed
    if unknown:
        raise UsageError(f"unknown geometry keys: {sorted(unknown)}")
    kind = spec.get("kind", "fan")
    if "angles_deg" in spec:
        angles = np.deg2rad(np.asarray(spec["angles_deg"], float))
    elif "n_angles" in spec:
        angles = np.asarray(equispaced_angles(int(spec["n_angles"])))
    else:
        raise UsageError("geometry needs angles_deg or n_angles")
    n_det = int(spec.get("n_detectors", 64))
    r_max = float(spec.get("r_max", 1.3))
    if kind == "fan":
        return fan_geometry(angles, n_det, float(spec.get("source_distance", 4.0)), r_max)
    if kind == "parallel":
        return parallel_geometry(len(angles), n_det, r_max, angles=angles)
    raise UsageError(f"unknown geometry kind {kind!r}")


# -- representer-operator audit -------------------------------------------------------------


def random_se2(rng, n: int, max_shift: float):
    """n elements with uniform angle and shift of norm at most ``max_shift``."""
    gs = []
    for _ in range(n):
        s = rng.normal(size=2)
        s *= rng.uniform(0, max_shift) / np.linalg.norm(s)
        gs.append(se2(s, rng.uniform(0, 2 * np.pi)))
    return concat(gs)


def operator_equivariance(N: int, n_angles: int, n_offsets: int, n_g: int = 20, seed: int = 0,
                          half_width: float = 1.0, kernel_pixels: float = 3.0, max_shift: float = 0.2,
                          n_images: int = 2, blob_sigma=(0.1, 0.2)) -> np.ndarray:
    """Residuals of the Gaussian-kernel representer operator on an N x N grid
    over ``[-half_width, half_width]^2`` with dense full-circle parallel sensors."""
    from .theory import blob_image, build_equivariant_op, check_equivariance, gaussian_kernel

    grid = GridLayout(N, N, 2 * half_width / N)
    V = build_sensors(parallel_geometry(n_angles, n_offsets, r_max=1.2 * half_width))
    op = build_equivariant_op(gaussian_kernel(kernel_pixels * grid.pixel_size), grid, V)
    rng = np.random.default_rng(seed)
    images = [blob_image(rng, 3, 0.3, blob_sigma) for _ in range(n_images)]
    return np.atleast_1d(check_equivariance(op, random_se2(rng, n_g, max_shift), images))


# -- visibility audit ---------------------------------------------------------------------------


def visibility_rows(grid_size: int, geometries: dict, elements: dict, n_offsets: int = 33,
                    r_max: float = 1.45, tol: float = 1e-10, tol_angle: float = 1e-6) -> list:
    """One row per (geometry, element): name, element, holds, angle, kernel dims.

    The grid spans [-1, 1]^2; ``geometries`` maps names to angle tuples
    (radians, parallel beams), ``elements`` maps names to group elements.
    """
    from .theory import check_visibility, discretize_radon, discretize_rep

    grid = GridLayout(grid_size, grid_size, 2.0 / grid_size)
    rows = []
    for gname, angles in geometries.items():
        V = build_sensors(parallel_geometry(len(angles), n_offsets, r_max, angles=angles))
        A = discretize_radon(grid, V).matrix
        for ename, g in elements.items():
            rep = check_visibility(A, discretize_rep(g, grid), tol, tol_angle)
            rows.append({"geometry": gname, "element": ename, "holds": rep.holds,
                         "mismatch_angle": rep.mismatch_angle, "dim_ker_A": rep.dim_ker_A,
                         "dim_ker_AP": rep.dim_ker_AP})
    return rows


# -- model invariance study ------------------------------------------------------------------


@dataclass
class InvarianceStudy:
    angle_counts: tuple = (2, 8, 32)
    n_g: int = 20
    n_detectors: int = 64
    seed: int = 0
    train_samples: int = 0
    train_epochs: int = 0
    calibrate_samples: int = 16
    identity_only: bool = False
    arch: dict = field(default_factory=dict)


def invariance_study(study: InvarianceStudy) -> list:
    """Rows ``{n_angles, index, gamma, residual}`` for rotations of ring phantoms.

    For each fan geometry with n equispaced source angles an SE(2) model is
    built from one shared seed, so every geometry starts from identical
    weights (only the per-sensor quadrature vector differs in length).  Its
    batch-norm statistics are calibrated on ring measurements (or it is
    trained briefly), and the relative output change under random rotations
    is recorded.
    """
    from .data import build_dataset, gen_ring
    from .layers import ArchConfig, build_model, calibrate, model_equivariance_residual
    from .train import ArraySet, TrainConfig, train

    rows = []
    arch = ArchConfig(**study.arch)
    for n in study.angle_counts:
        geom = fan_geometry(np.asarray(equispaced_angles(n)), study.n_detectors)
        V = build_sensors(geom)
        model = build_model(arch, V.points, np.random.default_rng([study.seed, 0]))
        n_fit = max(study.calibrate_samples, study.train_samples)
        ds = build_dataset(n_fit, geom, noise=0.0, seed=study.seed, stream=100 + n)
        if study.train_epochs > 0 and study.train_samples > 0:
            sub = ds.subset(np.arange(study.train_samples))
            cfg = TrainConfig(epochs=study.train_epochs, seed=study.seed, schedule="constant")
            train(model, ArraySet.from_dataset(sub), cfg)
        else:
            model.fit_scaling(ds.y, ds.targets)
            calibrate(model, ds.y[: study.calibrate_samples], np.random.default_rng([study.seed, 7]))
        model.eval()
        rng = np.random.default_rng([study.seed, 11])
        for i in range(study.n_g):
            phantom = gen_ring(rng).phantom
            gamma = 0.0 if study.identity_only else float(rng.uniform(0, 2 * np.pi))
            r = model_equivariance_residual(model, phantom, se2(np.zeros(2), gamma), seed=study.seed)
            rows.append({"n_angles": n, "index": i, "gamma": gamma, "residual": r})
    return rows


def medians_by(rows: list, key: str, value: str = "residual") -> dict:
    out = {}
    for r in rows:
        out.setdefault(r[key], []).append(r[value])
    return {k: float(np.median(v)) for k, v in out.items()}


# -- gradient suite -----------------------------------------------------------------------------


def gradient_suite(seed: int = 0) -> list:
    """(name, max relative error) for every differentiable op and layer.

    Ops are checked on three random shapes each; layers on one small
    configuration.  Inputs avoid the ReLU kink by construction.
    """
    from . import tensor as T
    from .layers import (
        ArchConfig,
        BatchNorm,
        GroupConv,
        KernelNet,
        Linear,
        LiftingConv,
        PointCloudFeature,
        ResidualBlock,
        build_model,
        downsample,
        global_pool,
        group_log_weights,
        group_neighborhood,
        sample_group_points,
    )

    rng = np.random.default_rng(seed)
    results = []

    def P(*shape, lo=None):
        x = rng.normal(size=shape)
        if lo is not None:
            x = np.sign(x) * (np.abs(x) + lo)
        return T.Parameter(x)

    weights = {}

    def wsum(t):
        """Fixed random linear functional plus a square, so every output entry matters."""
        if t.shape not in weights:
            weights[t.shape] = T.Tensor(rng.normal(size=t.shape))
        w = weights[t.shape]
        return T.add(T.total(T.mul(t, w)), T.scale(T.total(T.square(t)), 0.1))

    shapes = [(3,), (2, 4), (3, 2, 2)]
    unary = {"relu": T.relu, "swish": T.swish, "exp": T.exp, "square": T.square, "softplus": T.softplus,
             "scale": lambda x: T.scale(x, -1.7)}
    for name, f in unary.items():
        err = 0.0
        for sh in shapes:
            x = P(*sh, lo=0.05)
            err = max(err, T.grad_check(lambda: wsum(f(x)), [x]))
        results.append((name, err))
    for name, f in {"add": T.add, "sub": T.sub, "mul": T.mul}.items():
        err = 0.0
        for sh in shapes:
            a, b = P(*sh), P(*sh)
            err = max(err, T.grad_check(lambda: wsum(f(a, b)), [a, b]))
        results.append((name, err))

    err = 0.0
    for sh in shapes:
        a = P(*sh)
        c = rng.normal(size=sh[-1:])
        err = max(err, T.grad_check(lambda: wsum(T.mul_const(a, c)), [a]))
    results.append(("mul_const", err))

    err = 0.0
    for sh in shapes:
        a, b = P(*sh), P(sh[-1])
        err = max(err, T.grad_check(lambda: wsum(T.add_bias(a, b)), [a, b]))
    results.append(("add_bias", err))

    err = 0.0
    for m, k, n in [(1, 1, 1), (3, 4, 2), (5, 2, 3)]:
        a, b = P(2, m, k), P(k, n)
        err = max(err, T.grad_check(lambda: wsum(T.matmul(a, b)), [a, b]))
    results.append(("matmul", err))

    err = 0.0
    for Co, Ci, B, N, J, k in [(1, 1, 1, 1, 1, 1), (3, 2, 4, 2, 5, 3), (2, 3, 2, 3, 4, 2)]:
        W, K, z, q = P(Co, Ci, B), P(J, k, B), P(N, J, k, Ci), P(J, k)
        err = max(err, T.grad_check(lambda: wsum(T.neighbor_conv(W, K, z, q)), [W, K, z, q]))
    results.append(("neighbor_conv", err))

    err_g, err_s = 0.0, 0.0
    for M, J, k, C in [(4, 3, 2, 1), (6, 5, 3, 2), (3, 4, 4, 3)]:
        src = P(2, M, C)
        idx = rng.integers(0, M, size=(J, k))
        err_g = max(err_g, T.grad_check(lambda: wsum(T.gather(src, idx, axis=1)), [src]))
        vals = P(2, J * k, C)
        err_s = max(err_s, T.grad_check(lambda: wsum(T.scatter_sum(vals, idx.ravel(), M, axis=1)), [vals]))
    results += [("gather", err_g), ("scatter_sum", err_s)]

    err = 0.0
    for sh in shapes:
        x = P(*sh)
        err = max(err, T.grad_check(lambda: wsum(T.reshape(x, (-1,))), [x]))
        err = max(err, T.grad_check(lambda: T.scale(T.total(T.square(x)), 0.5), [x]))
        err = max(err, T.grad_check(lambda: T.mean(T.exp(x)), [x]))
    results.append(("reshape/sum/mean", err))

    err = 0.0
    for N, M, C in [(1, 2, 1), (2, 4, 3), (3, 2, 2)]:
        z, w = P(N, M, C), T.Parameter(rng.uniform(0.5, 1.5, size=M))
        err = max(err, T.grad_check(lambda: wsum(T.weighted_mean(z, w)), [z, w]))
    results.append(("weighted_mean", err))

    err = 0.0
    for R, C in [(4, 1), (6, 3), (9, 2)]:
        for training in (True, False):
            x, g, b = P(R, C), P(C), P(C)
            rm, rv = rng.normal(size=C), rng.uniform(0.5, 2, size=C)
            err = max(err, T.grad_check(lambda: wsum(T.batchnorm(x, g, b, rm.copy(), rv.copy(), training)),
                                        [x, g, b]))
    results.append(("batchnorm", err))

    err_ce, err_mse = 0.0, 0.0
    for N, K in [(1, 2), (4, 10), (3, 5)]:
        L = P(N, K)
        labels = rng.integers(0, K, size=N)
        err_ce = max(err_ce, T.grad_check(lambda: T.softmax_cross_entropy(L, labels), [L]))
        p, t = P(N, K), rng.normal(size=(N, K))
        err_mse = max(err_mse, T.grad_check(lambda: T.mse(p, t), [p]))
    results += [("softmax_cross_entropy", err_ce), ("mse", err_mse)]

    # layers ---------------------------------------------------------------------------------
    def layer_check(name, module, fn):
        params = module.parameters()
        results.append((name, T.grad_check(fn, params)))

    lin = Linear(3, 2, rng)
    xin = T.Tensor(rng.normal(size=(4, 3)))
    layer_check("Linear", lin, lambda: wsum(lin(xin)))

    bn = BatchNorm(3)
    xbn = T.Tensor(rng.normal(size=(5, 3)))
    layer_check("BatchNorm", bn, lambda: wsum(bn(xbn)))

    kn = KernelNet(3, rng, hidden=4, basis=3)
    xkn = rng.normal(size=(7, 3))
    layer_check("KernelNet", kn, lambda: wsum(kn(xkn)))

    sensors = np.stack([np.tile(np.linspace(-1, 1, 6), 2), np.repeat([0.0, 1.5], 6)], -1)
    for group in (GroupId.SE2, GroupId.AffPlus2):
        lift = LiftingConv(group, sensors, 2, 3, rng, k=5, hidden=4, basis=3)
        g_out = sample_group_points(group, 4, 1.0, rng)
        ylift = T.Tensor(rng.normal(size=(2, len(sensors), 2)))
        layer_check(f"LiftingConv[{group.value}]", lift, lambda: wsum(lift(ylift, g_out)))

        pts = sample_group_points(group, 6, 1.0, rng)
        z = PointCloudFeature(pts, T.Tensor(rng.normal(size=(2, 6, 2))), T.Tensor(np.full(6, 0.5)))
        nb = group_neighborhood(pts, pts, 4, group_log_weights(group), 1.0)
        gc = GroupConv(group, 2, 3, rng, hidden=4, basis=3)
        layer_check(f"GroupConv[{group.value}]", gc, lambda: wsum(gc(z, nb)))

        block = ResidualBlock(group, 2, 3, rng, n_convs=2, hidden=4, basis=3)
        layer_check(f"ResidualBlock[{group.value}]", block, lambda: wsum(block(z, nb).feats))

    zf = P(2, 5, 3)
    qw = T.Tensor(rng.uniform(0.5, 1.5, size=5))
    pts = sample_group_points(GroupId.SE2, 5, 1.0, rng)
    results.append(("global_pool", T.grad_check(
        lambda: wsum(global_pool(PointCloudFeature(pts, zf, qw))), [zf])))
    results.append(("downsample", T.grad_check(
        lambda: wsum(downsample(PointCloudFeature(pts, zf, qw), np.random.default_rng(3)).feats), [zf])))

    tiny = dict(init_channels=2, n_blocks=2, convs_per_block=1, k=4, k_lift=4, points=8, basis=3, hidden=4)
    yin = rng.normal(size=(3, len(sensors)))
    tgt = rng.normal(size=(3, 2))
    for kind, extra in (("equivariant", {}), ("mlp", {"mlp_hidden": 5})):
        model = build_model(ArchConfig(kind=kind, **tiny, **extra), sensors, rng)
        layer_check(f"model[{kind}]", model,
                    lambda: T.mse(model(yin, np.random.default_rng(5)), tgt))
    return results


# -- regression study --------------------------------------------------------------------------


def regression_study(train_ds, test_ds, arch: dict, train_cfg: dict, mlp_match: bool = True,
                     log=print) -> dict:
    """Train the equivariant model and a fully connected baseline of similar
    size identically; report test metrics beside the mean predictor."""
    from .layers import ArchConfig, build_model, mlp_hidden_for
    from .train import ArraySet, TrainConfig, evaluate, mean_baseline, train

    tr, te = ArraySet.from_dataset(train_ds), ArraySet.from_dataset(test_ds)
    cfg = TrainConfig(**train_cfg)
    eq_arch = ArchConfig(**arch)
    eq = build_model(eq_arch, train_ds.sensors, np.random.default_rng([cfg.seed, 1]))
    out = {"baseline": mean_baseline(tr.targets, te.targets), "n_params_equivariant": eq.n_parameters()}
    t0 = time.time()
    eq_state = train(eq, tr, cfg, val=te)
    out["equivariant"] = evaluate(eq, te, seed=cfg.seed)
    out["time_equivariant"] = time.time() - t0
    log(f"equivariant: {out['equivariant']} ({out['time_equivariant']:.0f} s)")
    H = mlp_hidden_for(eq.n_parameters(), train_ds.n_sensors, eq_arch.n_outputs)
    mlp = build_model(replace(eq_arch, kind="mlp", mlp_hidden=H), train_ds.sensors,
                      np.random.default_rng([cfg.seed, 2]))
    out["n_params_mlp"] = mlp.n_parameters()
    t0 = time.time()
    mlp_state = train(mlp, tr, cfg, val=te)
    out["mlp"] = evaluate(mlp, te, seed=cfg.seed)
    out["time_mlp"] = time.time() - t0
    log(f"mlp: {out['mlp']} ({out['time_mlp']:.0f} s)")
    out["log_equivariant"] = eq_state.log
    out["log_mlp"] = mlp_state.log
    out["models"] = (eq, mlp)
    return out


def desk_regression(seed: int = 0, epochs: int = 150, n_train: int = 1000, n_test: int = 200,
                    noise: float = 0.05, arch: dict | None = None, training: dict | None = None,
                    log=print) -> dict:
    """Ring-thickness regression on two fan angles (0 and 85 degrees).

    Returns a JSON-serializable summary: test metrics of the equivariant
    model, the size-matched MLP and the mean predictor, plus both logs.
    """
    from .data import build_dataset

    tr = build_dataset(n_train, noise=noise, seed=seed, stream=0)
    te = build_dataset(n_test, noise=noise, seed=seed, stream=1)
    cfg = {"epochs": epochs, "seed": seed, "eval_every": 10}
    cfg.update(training or {})
    res = regression_study(tr, te, arch or {}, cfg, log=log)
    res.pop("models")
    res["config"] = {"seed": seed, "n_train": n_train, "n_test": n_test, "noise": noise,
                     "arch": arch or {}, "training": cfg}
    return res
