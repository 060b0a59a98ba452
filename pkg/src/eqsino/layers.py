"""Equivariant point-cloud layers on sinogram space and on the group.

A network is a lifting convolution from sensor points ``(r, phi)`` onto a
random cloud of group elements, followed by residual blocks of group
convolutions, random halving of the cloud between blocks, and a
quadrature-weighted global mean.  Convolution kernels are small MLPs of the
relative position (``pi_Y[g^-1] v`` for lifting, ``log(g_i^-1 g')`` inside),
mixed per channel pair by learned linear factors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .actions import act_Y_inv, jacobian_det_Y, multiplier_Y
from .errors import UsageError
from .group import (
    GroupElement,
    GroupId,
    SamplingRanges,
    compose,
    inverse,
    log_coords,
    sample_linear_part,
    wrap_angle,
    wrap_angle_signed,
)
from .tensor import (
    Module,
    Parameter,
    Tensor,
    add,
    add_bias,
    batchnorm,
    gather,
    matmul,
    mul_const,
    neighbor_conv,
    no_grad,
    relu,
    reshape,
    softplus,
    swish,
    weighted_mean,
)


@dataclass
class PointCloudFeature:
    """Features ``feats[n, m, c]`` at shared locations with quadrature weights ``[m]``.

    ``locations`` is either an array of sinogram points ``[M, 2]`` or a
    batched GroupElement of length M.
    """

    locations: object
    feats: Tensor
    quad_weights: Tensor

    def __post_init__(self):
        m = len(self.locations)
        if self.feats.shape[1] != m or self.quad_weights.shape != (m,):
            raise UsageError("locations, feats and quad_weights disagree on M")

    @property
    def n_points(self) -> int:
        return self.feats.shape[1]


# -- neighborhoods and envelopes ----------------------------------------------------


def knn(query, base, k: int, metric) -> np.ndarray:
    """Indices of the k nearest ``base`` items for each query, nearest first.

    ``metric(query, base)`` returns the distance matrix ``[J, M]``.  Ties go
    to the lower base index (stable sort).
    """
    D = np.asarray(metric(query, base), float)
    if k > D.shape[1]:
        raise UsageError(f"k = {k} exceeds the {D.shape[1]} available points")
    return np.argsort(D, axis=1, kind="stable")[:, :k]


def envelope(d, r: float):
    return np.exp(-np.square(d) / r**2)


def angdist(a, b=0.0):
    return np.abs(wrap_angle_signed(np.asarray(a) - b))


def sinogram_distance(rho: float):
    """Pairwise ``sqrt(dr^2 + rho^2 angdist^2)`` between sinogram points."""

    def metric(a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        dr = a[:, None, 0] - b[None, :, 0]
        return np.sqrt(dr**2 + (rho * angdist(a[:, None, 1], b[None, :, 1])) ** 2)

    return metric


def _lift_coords(g: GroupElement, v):
    """vt[j, i] = pi_Y[g_j^-1] v_i."""
    return act_Y_inv(g.expand(1), np.asarray(v, float)[None])


def _origin_distance(vt, rho: float):
    return np.sqrt(vt[..., 0] ** 2 + (rho * angdist(vt[..., 1])) ** 2)


def lifting_distance(rho: float):
    """Distance of ``pi_Y[g^-1] v`` from the sinogram origin.

    Depending on (g, v) only through ``pi_Y[g^-1] v`` makes the selection
    commute exactly with the group action.
    """

    def metric(g, v):
        return _origin_distance(_lift_coords(g, v), rho)

    return metric


def group_log_weights(group: GroupId, angle_weight: float = 0.5, shape_weight: float = 1.0) -> np.ndarray:
    group = GroupId(group)
    if group is GroupId.SE2:
        return np.array([1.0, 1.0, angle_weight])
    return np.array([1.0, 1.0, angle_weight, shape_weight, shape_weight, shape_weight])


def relative_log(out_points: GroupElement, in_points: GroupElement) -> np.ndarray:
    """log(g_i^-1 g'_j) for all pairs, shape [J, M, d]."""
    return log_coords(compose(inverse(in_points.expand(0)), out_points.expand(1)))


def group_distance(weights):
    def metric(out_points, in_points):
        lc = relative_log(out_points, in_points) * weights
        return np.sqrt(np.sum(lc * lc, -1))

    return metric


def sample_group_points(group: GroupId, M: int, support_radius: float, rng,
                        ranges: SamplingRanges = SamplingRanges()) -> GroupElement:
    """Translations uniform on the disc of ``support_radius``; linear part
    uniform in angle (SE(2)) or drawn like random affine elements (Aff+(2))."""
    group = GroupId(group)
    rad = support_radius * np.sqrt(rng.uniform(size=M))
    ang = rng.uniform(0.0, 2 * np.pi, size=M)
    s = np.stack([rad * np.cos(ang), rad * np.sin(ang)], -1).reshape(M, 2)
    if group is GroupId.SE2:
        return GroupElement(group, s, rng.uniform(0.0, 2 * np.pi, size=M))
    return GroupElement(group, s, sample_linear_part(rng, (M,), ranges).reshape(M, 2, 2))


@dataclass
class Neighborhood:
    """kNN structure between an output and an input cloud."""

    idx: np.ndarray  # [J, k]
    coords: np.ndarray  # [J, k, d] kernel-net input
    env: np.ndarray  # [J, k]


def group_neighborhood(out_points: GroupElement, in_points: GroupElement, k: int, weights,
                       env_radius: float) -> Neighborhood:
    lc = relative_log(out_points, in_points) * weights
    D = np.sqrt(np.sum(lc * lc, -1))
    if k > D.shape[1]:
        raise UsageError(f"k = {k} exceeds the {D.shape[1]} available points")
    idx = np.argsort(D, axis=1, kind="stable")[:, :k]
    coords = np.take_along_axis(lc, idx[..., None], axis=1)
    d = np.take_along_axis(D, idx, axis=1)
    return Neighborhood(idx, coords, envelope(d, env_radius))


# -- building blocks ------------------------------------------------------------------


def _init(rng, shape, fan_in):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, bias: bool = True):
        self.weight = Parameter(_init(rng, (n_in, n_out), n_in))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return add_bias(out, self.bias) if self.bias is not None else out


class BatchNorm(Module):
    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor) -> Tensor:
        """Normalize the last axis of x[..., C] over all leading axes."""
        shape = x.shape
        flat = reshape(x, (-1, shape[-1]))
        out = batchnorm(flat, self.gamma, self.beta, self.running_mean, self.running_var, self.training)
        return reshape(out, shape)


class KernelNet(Module):
    """Two fully connected layers with batch normalization and Swish,
    mapping relative coordinates ``[P, d]`` to ``B`` basis values."""

    def __init__(self, in_dim: int, rng, hidden: int = 32, basis: int = 16):
        if basis < 1:
            raise UsageError("basis size must be positive")
        self.fc1 = Linear(in_dim, hidden, rng, bias=False)
        self.bn = BatchNorm(hidden)
        self.fc2 = Linear(hidden, basis, rng)
        self.basis = basis

    def __call__(self, x) -> Tensor:
        x = Tensor(np.asarray(x, float))
        return self.fc2(swish(self.bn(self.fc1(x))))


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


class LiftingConv(Module):
    """Sinogram points -> group cloud.

    out[n, j, o] = sum_i c_i e(vt_ij) p_ij sum_{c,b} W[o,c,b] K_b(vt_ij) y[n, i, c]

    over the k nearest sensors, where ``vt_ij = pi_Y[g_j^-1] v_i``,
    ``e`` is the envelope, ``p_ij = p_Y[g_j^-1](vt_ij) |det D pi_Y[g_j^-1](v_i)|``
    (identically 1 on SE(2)) and ``c_i = softplus(raw_i)`` are learned
    quadrature weights, one per physical sensor.
    """

    def __init__(self, group: GroupId, sensors, c_in: int, c_out: int, rng, k: int = 27,
                 rho: float = 1.0, env_radius: float = 1.0, hidden: int = 32, basis: int = 16,
                 mirror: bool = True):
        self.group = GroupId(group)
        sensors = np.asarray(sensors, float)
        S = len(sensors)
        self.n_sensors = S
        if mirror:
            flipped = np.stack([-sensors[:, 0], wrap_angle(sensors[:, 1] + np.pi)], -1)
            self.points = np.concatenate([sensors, flipped])
            self.source = np.concatenate([np.arange(S), np.arange(S)])
        else:
            self.points = sensors
            self.source = np.arange(S)
        if k > len(self.points):
            raise UsageError(f"k = {k} exceeds the {len(self.points)} sensor points")
        self.k, self.rho, self.env_radius = k, rho, env_radius
        self.kernel = KernelNet(3, rng, hidden, basis)
        self.weight = Parameter(_init(rng, (c_out, c_in, basis), c_in * basis))
        self.raw_quad = Parameter(np.full(S, _softplus_inv(1.0 / S)))

    def neighbors(self, g: GroupElement):
        vt_all = _lift_coords(g, self.points)
        D = _origin_distance(vt_all, self.rho)
        if self.k > D.shape[1]:
            raise UsageError(f"k = {self.k} exceeds the {D.shape[1]} available points")
        idx = np.argsort(D, axis=1, kind="stable")[:, : self.k]
        vt = np.take_along_axis(vt_all, idx[..., None], axis=1)
        return idx, vt

    def pair_terms(self, g: GroupElement, v, vt):
        """Kernel basis ``K [.., B]`` and the constant factor ``e * p``.

        ``g`` broadcasts against the leading axes of ``v`` and ``vt``.
        """
        lead = vt.shape[:-1]
        feats = np.stack([vt[..., 0], np.cos(vt[..., 1]), np.sin(vt[..., 1])], -1).reshape(-1, 3)
        K = reshape(self.kernel(feats), lead + (self.kernel.basis,))
        gi = inverse(g)
        fac = envelope(_origin_distance(vt, self.rho), self.env_radius)
        fac = fac * multiplier_Y(gi, vt) * jacobian_det_Y(gi, v)
        return K, np.broadcast_to(fac, lead)

    def effective_kernel(self, g: GroupElement, v) -> np.ndarray:
        """Per channel pair weight ``[.., C_out * C_in]`` for the pair (g, v),
        without quadrature weight or neighbor truncation."""
        v = np.asarray(v, float)
        vt = act_Y_inv(g, v)
        with no_grad():
            K, fac = self.pair_terms(g, v, vt)
        w = np.einsum("ocb,...b->...oc", self.weight.data, K.data) * fac[..., None, None]
        return w.reshape(w.shape[:-2] + (-1,))

    def __call__(self, y: Tensor, g: GroupElement) -> Tensor:
        """y [N, S, C_in] over the physical sensors -> feats [N, J, C_out]."""
        idx, vt = self.neighbors(g)
        K, fac = self.pair_terms(g.expand(1), self.points[idx], vt)
        src = self.source[idx]
        q = mul_const(gather(softplus(self.raw_quad), src), fac)
        zg = gather(y, src, axis=1)
        return neighbor_conv(self.weight, K, zg, q)


class GroupConv(Module):
    """out(g') = sum_{i in kNN(g')} c_i e(h_i) sum_{c,b} W[o,c,b] K_b(log h_i) z_i[c],
    with h_i = g_i^-1 g'.

    With ``kernel=None`` the basis K is supplied by the caller, which lets
    several layers over the same cloud share one basis network.
    """

    def __init__(self, group: GroupId, c_in: int, c_out: int, rng, hidden: int = 32, basis: int = 16,
                 own_kernel: bool = True):
        self.group = GroupId(group)
        self.kernel = KernelNet(self.group.log_dim, rng, hidden, basis) if own_kernel else None
        self.weight = Parameter(_init(rng, (c_out, c_in, basis), c_in * basis))

    def __call__(self, z: PointCloudFeature, nb: Neighborhood, K: Tensor | None = None) -> Tensor:
        if K is None:
            K = basis_values(self.kernel, nb)
        q = Tensor(z.quad_weights.data[nb.idx] * nb.env)
        zg = gather(z.feats, nb.idx, axis=1)
        return neighbor_conv(self.weight, K, zg, q)


def basis_values(kernel: KernelNet, nb: Neighborhood) -> Tensor:
    J, k = nb.idx.shape
    return reshape(kernel(nb.coords.reshape(J * k, -1)), (J, k, kernel.basis))


def group_conv(conv: GroupConv, z: PointCloudFeature, out_points: GroupElement, k: int, weights,
               env_radius: float, quad_out: float | None = None) -> PointCloudFeature:
    nb = group_neighborhood(out_points, z.locations, k, weights, env_radius)
    feats = conv(z, nb)
    M = len(out_points)
    c = z.quad_weights.data.sum() / M if quad_out is None else quad_out
    return PointCloudFeature(out_points, feats, Tensor(np.full(M, c)))


def downsample(z: PointCloudFeature, rng, factor: int = 2) -> PointCloudFeature:
    """Keep a uniform random subset of ceil(M / factor) points (original order)."""
    M = z.n_points
    m = -(-M // factor)
    keep = np.sort(rng.choice(M, size=m, replace=False))
    w = z.quad_weights.data[keep] * (M / m)
    return PointCloudFeature(z.locations[keep], gather(z.feats, keep, axis=1), Tensor(w))


def global_pool(z: PointCloudFeature) -> Tensor:
    return weighted_mean(z.feats, z.quad_weights)


def _bn_relu(bn: BatchNorm, x: Tensor) -> Tensor:
    return relu(bn(x))


class ResidualBlock(Module):
    """n_convs x (group conv -> batch norm -> ReLU) plus a skip connection.

    ``shared_basis`` evaluates one kernel network per block and gives each
    conv its own linear factors over that basis.
    """

    def __init__(self, group: GroupId, c_in: int, c_out: int, rng, n_convs: int = 3,
                 hidden: int = 32, basis: int = 16, shared_basis: bool = True):
        self.kernel = KernelNet(GroupId(group).log_dim, rng, hidden, basis) if shared_basis else None
        self.convs = [GroupConv(group, c_in if i == 0 else c_out, c_out, rng, hidden, basis,
                                own_kernel=not shared_basis) for i in range(n_convs)]
        self.norms = [BatchNorm(c_out) for _ in range(n_convs)]
        self.skip = Linear(c_in, c_out, rng, bias=False) if c_in != c_out else None

    def __call__(self, z: PointCloudFeature, nb: Neighborhood) -> PointCloudFeature:
        K = basis_values(self.kernel, nb) if self.kernel is not None else None
        h = z
        for conv, bn in zip(self.convs, self.norms):
            h = PointCloudFeature(z.locations, _bn_relu(bn, conv(h, nb, K)), z.quad_weights)
        skip = z.feats if self.skip is None else self.skip(z.feats)
        return PointCloudFeature(z.locations, add(skip, h.feats), z.quad_weights)


# -- models ----------------------------------------------------------------------------


@dataclass
class ArchConfig:
    group: str = "SE2"
    head: str = "regression"
    n_outputs: int = 2
    init_channels: int = 8
    n_blocks: int = 3
    convs_per_block: int = 3
    k: int = 27
    k_lift: int = 27
    points: int = 512
    basis: int = 16
    hidden: int = 32
    support_radius: float = 1.0
    rho: float = 1.0
    lift_envelope: float = 1.0
    group_envelope: float = 1.0
    angle_weight: float = 0.5
    mirror: bool = True
    shared_basis: bool = True
    kind: str = "equivariant"
    mlp_hidden: int = 0

    def __post_init__(self):
        GroupId(self.group)
        if self.head not in ("regression", "classification"):
            raise UsageError(f"unknown head {self.head!r}")
        if self.kind not in ("equivariant", "mlp"):
            raise UsageError(f"unknown model kind {self.kind!r}")
        if min(self.k, self.k_lift, self.points, self.init_channels, self.n_blocks) < 1:
            raise UsageError("architecture sizes must be positive")

    def channels(self) -> list:
        return [self.init_channels * 2**b for b in range(self.n_blocks)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


class _Head(Module):
    """Input and target scaling shared by both model kinds."""

    def _init_scaling(self, n_out: int):
        self.input_scale = np.ones(1)
        self.target_mean = np.zeros(n_out)
        self.target_std = np.ones(n_out)

    def buffers(self) -> dict:
        return {"input_scale": self.input_scale, "target_mean": self.target_mean,
                "target_std": self.target_std}

    def fit_scaling(self, y, targets=None) -> None:
        self.input_scale[:] = max(float(np.sqrt(np.mean(np.square(y)))), 1e-12)
        if targets is not None and self.cfg.head == "regression":
            t = np.asarray(targets, float)
            self.target_mean[:] = t.mean(axis=0)
            self.target_std[:] = np.maximum(t.std(axis=0), 1e-12)

    def normalize_targets(self, t):
        return (np.asarray(t, float) - self.target_mean) / self.target_std

    def predict(self, y, rng) -> np.ndarray:
        with no_grad():
            out = self(y, rng).data
        if self.cfg.head == "regression":
            return out * self.target_std + self.target_mean
        return out


class EquivariantNet(_Head):
    def __init__(self, cfg: ArchConfig, sensors, rng):
        self.cfg = cfg
        self.group = GroupId(cfg.group)
        self.sensors = np.asarray(sensors, float)
        self.log_weights = group_log_weights(self.group, cfg.angle_weight)
        ch = cfg.channels()
        kw = dict(hidden=cfg.hidden, basis=cfg.basis)
        self.lifting = LiftingConv(self.group, self.sensors, 1, ch[0], rng, k=cfg.k_lift, rho=cfg.rho,
                                   env_radius=cfg.lift_envelope, mirror=cfg.mirror, **kw)
        self.lift_norm = BatchNorm(ch[0])
        self.blocks = [ResidualBlock(self.group, ch[max(b - 1, 0)], ch[b], rng, cfg.convs_per_block,
                                     shared_basis=cfg.shared_basis, **kw)
                       for b in range(cfg.n_blocks)]
        self.out = Linear(ch[-1], cfg.n_outputs, rng)
        self._init_scaling(cfg.n_outputs)

    def group_volume(self) -> float:
        """Nominal Haar volume of the sampled region (translations x angles)."""
        return math.pi * self.cfg.support_radius**2 * 2 * math.pi

    def features(self, y, rng) -> PointCloudFeature:
        y = np.asarray(y, float)
        if y.ndim != 2 or y.shape[1] != len(self.sensors):
            raise UsageError(f"expected measurements of shape [N, {len(self.sensors)}]")
        M = self.cfg.points
        g = sample_group_points(self.group, M, self.cfg.support_radius, rng)
        x = Tensor((y / self.input_scale)[..., None])
        feats = _bn_relu(self.lift_norm, self.lifting(x, g))
        z = PointCloudFeature(g, feats, Tensor(np.full(M, self.group_volume() / M)))
        for b, block in enumerate(self.blocks):
            if b > 0:
                z = downsample(z, rng)
            k = min(self.cfg.k, z.n_points)
            nb = group_neighborhood(z.locations, z.locations, k, self.log_weights, self.cfg.group_envelope)
            z = block(z, nb)
        return z

    def __call__(self, y, rng) -> Tensor:
        return self.out(global_pool(self.features(y, rng)))


class MLPBaseline(_Head):
    """Fully connected network on the raw measurement vector."""

    def __init__(self, cfg: ArchConfig, sensors, rng):
        self.cfg = cfg
        self.sensors = np.asarray(sensors, float)
        S, H = len(self.sensors), cfg.mlp_hidden
        if H < 1:
            raise UsageError("mlp_hidden must be positive for the MLP baseline")
        self.fc1 = Linear(S, H, rng, bias=False)
        self.bn1 = BatchNorm(H)
        self.fc2 = Linear(H, H, rng, bias=False)
        self.bn2 = BatchNorm(H)
        self.out = Linear(H, cfg.n_outputs, rng)
        self._init_scaling(cfg.n_outputs)

    def __call__(self, y, rng=None) -> Tensor:
        x = Tensor(np.asarray(y, float) / self.input_scale)
        x = _bn_relu(self.bn1, self.fc1(x))
        x = _bn_relu(self.bn2, self.fc2(x))
        return self.out(x)


def mlp_hidden_for(n_params: int, n_in: int, n_out: int) -> int:
    """Hidden width giving the two-hidden-layer MLP about ``n_params`` parameters."""
    # params = n_in*H + H*H + H*n_out + n_out + 4H (batch norms)
    a, b, c = 1.0, n_in + n_out + 4.0, n_out - n_params
    return max(1, int(round((-b + math.sqrt(b * b - 4 * a * c)) / (2 * a))))


def build_model(cfg: ArchConfig, sensors, rng) -> _Head:
    if cfg.kind == "mlp":
        return MLPBaseline(cfg, sensors, rng)
    return EquivariantNet(cfg, sensors, rng)


def calibrate(model: _Head, ys, rng, batch: int = 8) -> None:
    """Fill batch-norm running statistics with train-mode passes (no gradients)."""
    model.train()
    with no_grad():
        for start in range(0, len(ys), batch):
            model(ys[start:start + batch], rng)
    model.eval()


def model_equivariance_residual(model: _Head, phantom, g: GroupElement, sensors=None, seed: int = 0) -> float:
    """Relative output change when the phantom is moved by ``g``.

    Both measurements go through one eval-mode forward pass so they share
    the same collocation points.
    """
    from .tomo import SensorSet, measure, transform_phantom

    pts = model.sensors if sensors is None else np.asarray(sensors, float)
    V = SensorSet(pts, None)
    y = np.stack([measure(phantom, V), measure(transform_phantom(g, phantom), V)])
    was = model.training
    model.eval()
    with no_grad():
        out = model(y, np.random.default_rng(seed)).data
    model.train(was)
    ref = np.linalg.norm(out[0])
    return float(np.linalg.norm(out[1] - out[0]) / max(ref, 1e-300))
