"""SE(2) and Aff+(2) as batched numpy values.

A :class:`GroupElement` holds a translation ``s`` of shape ``(..., 2)`` and a
linear part ``m``: the angle ``gamma`` of shape ``(...)`` for SE(2), or the
matrix ``A`` of shape ``(..., 2, 2)`` for Aff+(2).  Leading dimensions are a
batch, so a "list of group elements" is a single value with ``len() > 0``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

TWO_PI = 2.0 * np.pi


class GroupId(str, enum.Enum):
    SE2 = "SE2"
    AffPlus2 = "AffPlus2"

    @property
    def log_dim(self) -> int:
        return 3 if self is GroupId.SE2 else 6


def wrap_angle(x):
    """Reduce angles to [0, 2pi)."""
    out = np.mod(x, TWO_PI)
    # np.mod(-tiny, 2pi) rounds to 2pi
    return np.where(out >= TWO_PI, 0.0, out)


def wrap_angle_signed(x):
    """Reduce angles to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(x, dtype=float), TWO_PI)
    return np.where(out <= -np.pi, out + TWO_PI, out)


def rotation(gamma):
    c, s = np.cos(gamma), np.sin(gamma)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


@dataclass(frozen=True, eq=False)
class GroupElement:
    group: GroupId
    s: np.ndarray
    m: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "group", GroupId(self.group))
        s = np.asarray(self.s, dtype=float)
        m = np.asarray(self.m, dtype=float)
        if s.shape[-1:] != (2,):
            raise UsageError(f"translation must have trailing dim 2, got {s.shape}")
        if self.group is GroupId.SE2:
            m = wrap_angle(m)
            if m.shape != s.shape[:-1]:
                raise UsageError("angle batch shape does not match translation")
        else:
            if m.shape[-2:] != (2, 2) or m.shape[:-2] != s.shape[:-1]:
                raise UsageError("matrix batch shape does not match translation")
            if np.any(np.linalg.det(m) <= 0):
                raise UsageError("Aff+(2) element needs det(A) > 0")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "m", m)

    @property
    def batch_shape(self) -> tuple:
        return self.s.shape[:-1]

    @property
    def matrix(self) -> np.ndarray:
        """Linear part as a 2x2 matrix (R(gamma) for SE(2))."""
        return rotation(self.m) if self.group is GroupId.SE2 else self.m

    @property
    def gamma(self) -> np.ndarray:
        if self.group is not GroupId.SE2:
            raise UsageError("gamma is only defined for SE2 elements")
        return self.m

    @property
    def det(self) -> np.ndarray:
        if self.group is GroupId.SE2:
            return np.ones(self.batch_shape)
        return np.linalg.det(self.m)

    def __len__(self):
        if not self.batch_shape:
            raise TypeError("unbatched GroupElement has no len()")
        return self.batch_shape[0]

    def __getitem__(self, idx) -> "GroupElement":
        return GroupElement(self.group, self.s[idx], self.m[idx])

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        return compose(self, other)

    def inv(self) -> "GroupElement":
        return inverse(self)

    def expand(self, axis: int) -> "GroupElement":
        """Insert a batch axis at ``axis`` (counted from the front)."""
        if axis < 0:
            raise UsageError("expand() takes a non-negative batch axis")
        return GroupElement(self.group, np.expand_dims(self.s, axis), np.expand_dims(self.m, axis))


def se2(s, gamma) -> GroupElement:
    return GroupElement(GroupId.SE2, np.asarray(s, float), np.asarray(gamma, float))


def aff(s, A) -> GroupElement:
    return GroupElement(GroupId.AffPlus2, np.asarray(s, float), np.asarray(A, float))


def identity(group: GroupId, shape: tuple = ()) -> GroupElement:
    group = GroupId(group)
    s = np.zeros(shape + (2,))
    if group is GroupId.SE2:
        return GroupElement(group, s, np.zeros(shape))
    return GroupElement(group, s, np.broadcast_to(np.eye(2), shape + (2, 2)).copy())


def embed_se2(g: GroupElement) -> GroupElement:
    """(s, gamma) -> (s, R(gamma)) in Aff+(2)."""
    return GroupElement(GroupId.AffPlus2, g.s, rotation(g.m))


def concat(elements: list) -> GroupElement:
    """Join along the leading batch axis; unbatched elements count as length 1."""
    group = elements[0].group
    elements = [e if e.batch_shape else e.expand(0) for e in elements]
    return GroupElement(group, np.concatenate([e.s for e in elements]),
                        np.concatenate([e.m for e in elements]))


def _check_same(g: GroupElement, h: GroupElement):
    if g.group is not h.group:
        raise UsageError(f"cannot combine {g.group.value} with {h.group.value}")


def compose(g: GroupElement, h: GroupElement) -> GroupElement:
    """Group product g*h, broadcasting over batch dims."""
    _check_same(g, h)
    s = g.s + np.einsum("...ij,...j->...i", g.matrix, h.s)
    if g.group is GroupId.SE2:
        return GroupElement(g.group, s, g.m + h.m)
    return GroupElement(g.group, s, g.m @ h.m)


def inverse(g: GroupElement) -> GroupElement:
    if g.group is GroupId.SE2:
        rt = rotation(-g.m)
        return GroupElement(g.group, -np.einsum("...ij,...j->...i", rt, g.s), -g.m)
    ainv = np.linalg.inv(g.m)
    return GroupElement(g.group, -np.einsum("...ij,...j->...i", ainv, g.s), ainv)


# -- log chart -----------------------------------------------------------------

_SMALL = 1e-4


def _half_cot_factor(gamma):
    """(gamma/2) cot(gamma/2), analytic at 0."""
    g = np.asarray(gamma, dtype=float)
    small = np.abs(g) < _SMALL
    safe = np.where(small, 1.0, g)
    exact = 0.5 * safe / np.tan(0.5 * safe)
    g2 = g * g
    return np.where(small, 1.0 - g2 / 12.0 - g2 * g2 / 720.0, exact)


def _sinc_terms(gamma):
    """sin(g)/g and (1 - cos g)/g with series near 0."""
    g = np.asarray(gamma, dtype=float)
    small = np.abs(g) < _SMALL
    safe = np.where(small, 1.0, g)
    g2 = g * g
    a = np.where(small, 1.0 - g2 / 6.0 + g2 * g2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, g / 2.0 - g * g2 / 24.0, 2.0 * np.sin(0.5 * safe) ** 2 / safe)
    return a, b


def _polar(A):
    """A = R(theta) S with S symmetric positive definite (2x2, det A > 0)."""
    theta = np.arctan2(A[..., 1, 0] - A[..., 0, 1], A[..., 0, 0] + A[..., 1, 1])
    theta = wrap_angle_signed(theta)
    S = rotation(-theta) @ A
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    return theta, S


def log_coords(g: GroupElement) -> np.ndarray:
    """Global chart.

    SE(2): se(2) logarithm ``(v1, v2, gamma)`` with gamma in (-pi, pi]; the
    branch at gamma = pi is the closed form ``v = [[0, pi/2], [-pi/2, 0]] s``.
    Aff+(2): ``(s1, s2, theta, L11, L12, L22)`` where A = R(theta) exp(L).
    """
    if g.group is GroupId.SE2:
        gam = wrap_angle_signed(g.m)
        a = _half_cot_factor(gam)
        b = 0.5 * gam
        v1 = a * g.s[..., 0] + b * g.s[..., 1]
        v2 = -b * g.s[..., 0] + a * g.s[..., 1]
        return np.stack([v1, v2, gam], -1)
    theta, S = _polar(g.m)
    w, Q = np.linalg.eigh(S)
    L = (Q * np.log(w)[..., None, :]) @ np.swapaxes(Q, -1, -2)
    return np.concatenate(
        [g.s, theta[..., None], L[..., 0, 0, None], L[..., 0, 1, None], L[..., 1, 1, None]], -1
    )


def from_log(v, group: GroupId) -> GroupElement:
    v = np.asarray(v, dtype=float)
    group = GroupId(group)
    if v.shape[-1] != group.log_dim:
        raise UsageError(f"{group.value} log coordinates have dim {group.log_dim}")
    if group is GroupId.SE2:
        gam = v[..., 2]
        a, b = _sinc_terms(gam)
        s1 = a * v[..., 0] - b * v[..., 1]
        s2 = b * v[..., 0] + a * v[..., 1]
        return GroupElement(group, np.stack([s1, s2], -1), gam)
    L = np.stack([np.stack([v[..., 3], v[..., 4]], -1), np.stack([v[..., 4], v[..., 5]], -1)], -2)
    w, Q = np.linalg.eigh(L)
    S = (Q * np.exp(w)[..., None, :]) @ np.swapaxes(Q, -1, -2)
    return GroupElement(group, v[..., :2], rotation(v[..., 2]) @ S)


def dist_G(g: GroupElement, h: GroupElement, weights=None) -> np.ndarray:
    """Left-invariant distance ||W * log(g^-1 h)||."""
    _check_same(g, h)
    lc = log_coords(compose(inverse(g), h))
    if weights is not None:
        lc = lc * np.asarray(weights, dtype=float)
    return np.sqrt(np.sum(lc * lc, axis=-1))


# -- special elements and sampling -------------------------------------------------


def coset_rep_X(u, group: GroupId) -> GroupElement:
    """Representative g_u moving the origin of R^2 to u (no linear part)."""
    u = np.asarray(u, dtype=float)
    return GroupElement(GroupId(group), u, identity(group, u.shape[:-1]).m)


def shear(tau):
    tau = np.asarray(tau, dtype=float)
    one, zero = np.ones_like(tau), np.zeros_like(tau)
    return np.stack([np.stack([one, tau], -1), np.stack([zero, one], -1)], -2)


@dataclass(frozen=True)
class SamplingRanges:
    """Ranges for random group elements.

    Defaults follow the digit experiments: rotation in [0, 2pi), per-axis
    scaling in [0.75, 1.25], horizontal shear in [-0.5, 0.5].  The
    translation box is ours.
    """

    angle: tuple = (0.0, TWO_PI)
    shift: tuple = (-0.2, 0.2)
    scale: tuple = (0.75, 1.25)
    shear: tuple = (-0.5, 0.5)


def sample_linear_part(rng, size, ranges: SamplingRanges = SamplingRanges()):
    """A = R(gamma) diag(sx, sy) Shear(tau)."""
    gam = rng.uniform(*ranges.angle, size=size)
    sx = rng.uniform(*ranges.scale, size=size)
    sy = rng.uniform(*ranges.scale, size=size)
    tau = rng.uniform(*ranges.shear, size=size)
    diag = np.zeros(np.shape(gam) + (2, 2))
    diag[..., 0, 0] = sx
    diag[..., 1, 1] = sy
    return rotation(gam) @ diag @ shear(tau)


def sample_group(group: GroupId, rng, ranges: SamplingRanges = SamplingRanges(), size=None) -> GroupElement:
    group = GroupId(group)
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    s = rng.uniform(*ranges.shift, size=shape + (2,))
    if group is GroupId.SE2:
        return GroupElement(group, s, rng.uniform(*ranges.angle, size=shape))
    return GroupElement(group, s, sample_linear_part(rng, shape, ranges))


def sample_stabilizer(group: GroupId, n: int, rng, ranges: SamplingRanges = SamplingRanges()) -> GroupElement:
    """n random elements fixing the origin of R^2 (zero translation).

    For Aff+(2) the linear part uses :func:`sample_linear_part`, whose
    entries are bounded by the scale and shear ranges.
    """
    group = GroupId(group)
    s = np.zeros((n, 2))
    if group is GroupId.SE2:
        return GroupElement(group, s, rng.uniform(0.0, TWO_PI, size=n))
    return GroupElement(group, s, sample_linear_part(rng, (n,), ranges))
