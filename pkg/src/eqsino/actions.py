"""Group actions on the image plane and on sinogram space.

Points are numpy arrays with a trailing axis of length 2: ``u = (x, y)`` on
the image plane and ``v = (r, phi)`` on sinogram space ``R x [0, 2pi)``.
Group batches and point batches broadcast against each other.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .group import GroupElement, GroupId, inverse, wrap_angle


class Space(str, enum.Enum):
    X = "X"
    Y = "Y"


def _apply(M, u):
    return np.einsum("...ij,...j->...i", M, u)


def unit(phi):
    return np.stack([np.cos(phi), np.sin(phi)], -1)


# -- image plane ---------------------------------------------------------------


def act_X(g: GroupElement, u) -> np.ndarray:
    return _apply(g.matrix, np.asarray(u, float)) + g.s


def act_X_inv(g: GroupElement, u) -> np.ndarray:
    u = np.asarray(u, float)
    if g.group is GroupId.SE2:
        return _apply(np.swapaxes(g.matrix, -1, -2), u - g.s)
    return _apply(np.linalg.inv(g.m), u - g.s)


def jacobian_det_X(g: GroupElement, u=None) -> np.ndarray:
    """|det D pi_X[g](u)|; constant in u for both groups."""
    det = g.det
    if u is None:
        return det
    return np.broadcast_to(det, np.broadcast_shapes(det.shape, np.shape(u)[:-1])).copy()


def multiplier_X(g: GroupElement, u) -> np.ndarray:
    """The image-plane representation carries no range multiplier."""
    shape = np.broadcast_shapes(g.batch_shape, np.shape(u)[:-1])
    return np.ones(shape)


# -- sinogram space --------------------------------------------------------------


def alpha_theta(A, phi):
    """alpha = ||A^T phi_vec||, theta = angle of A^T phi_vec in [0, 2pi).

    theta comes from atan2 of both components, which agrees with the
    arccos form on [0, pi] and covers the full circle.
    """
    w = _apply(np.swapaxes(np.asarray(A, float), -1, -2), unit(phi))
    alpha = np.hypot(w[..., 0], w[..., 1])
    theta = wrap_angle(np.arctan2(w[..., 1], w[..., 0]))
    return alpha, theta


def act_Y_inv(g: GroupElement, v) -> np.ndarray:
    v = np.asarray(v, float)
    r, phi = v[..., 0], v[..., 1]
    shift = np.sum(g.s * unit(phi), -1)
    if g.group is GroupId.SE2:
        return np.stack(np.broadcast_arrays(r - shift, wrap_angle(phi - g.m)), -1)
    alpha, theta = alpha_theta(g.m, phi)
    return np.stack(np.broadcast_arrays((r - shift) / alpha, theta), -1)


def act_Y(g: GroupElement, v) -> np.ndarray:
    if g.group is GroupId.SE2:
        v = np.asarray(v, float)
        phi = v[..., 1] + g.m
        r = v[..., 0] + np.sum(g.s * unit(phi), -1)
        return np.stack(np.broadcast_arrays(r, wrap_angle(phi)), -1)
    return act_Y_inv(inverse(g), v)


def multiplier_Y(g: GroupElement, v) -> np.ndarray:
    """p_Y[g](r, phi) = det(A) / alpha(A, phi); identically 1 on SE(2)."""
    v = np.asarray(v, float)
    shape = np.broadcast_shapes(g.batch_shape, v.shape[:-1])
    if g.group is GroupId.SE2:
        return np.ones(shape)
    alpha, _ = alpha_theta(g.m, v[..., 1])
    return np.broadcast_to(g.det / alpha, shape).copy()


def jacobian_det_Y(g: GroupElement, v) -> np.ndarray:
    """|det D pi_Y[g](r, phi)| = det(A^-1) / alpha(A^-1, phi)^3 (1 on SE(2)).

    From pi_Y[g](r, phi) = ((r + ...)/alpha(B, phi), theta(B, phi)), B = A^-1:
    dr'/dr = 1/alpha and dtheta/dphi = det(B)/alpha^2.
    """
    v = np.asarray(v, float)
    shape = np.broadcast_shapes(g.batch_shape, v.shape[:-1])
    if g.group is GroupId.SE2:
        return np.ones(shape)
    B = np.linalg.inv(g.m)
    alpha, _ = alpha_theta(B, v[..., 1])
    return np.broadcast_to(np.linalg.det(B) / alpha**3, shape).copy()


# -- generalized domain transforms -----------------------------------------------


@dataclass(frozen=True)
class GeneralizedDomainTransform:
    """Bundle (pi, p) acting on functions via (P[g] f)(v) = p[g](v) f(pi[g]^-1 v)."""

    group: GroupId
    space: Space

    def act(self, g, v):
        return act_X(g, v) if self.space is Space.X else act_Y(g, v)

    def act_inv(self, g, v):
        return act_X_inv(g, v) if self.space is Space.X else act_Y_inv(g, v)

    def multiplier(self, g, v):
        return multiplier_X(g, v) if self.space is Space.X else multiplier_Y(g, v)

    def jacobian_det(self, g, v):
        return jacobian_det_X(g, v) if self.space is Space.X else jacobian_det_Y(g, v)


@dataclass(frozen=True)
class AnalyticSignal:
    """A pure function on points with a bound on where it can be nonzero.

    For X signals the bound is a radius around the origin; for Y signals
    it bounds |r|.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    support_radius: float

    def __call__(self, points):
        return self.fn(np.asarray(points, float))


def transform_signal(T: GeneralizedDomainTransform, g: GroupElement, f: AnalyticSignal) -> AnalyticSignal:
    def fn(v):
        return T.multiplier(g, v) * f(T.act_inv(g, v))

    norm_A = float(np.max(np.linalg.norm(g.matrix, ord=2, axis=(-2, -1))))
    radius = f.support_radius * norm_A + float(np.max(np.linalg.norm(g.s, axis=-1)))
    return AnalyticSignal(fn, radius)
