"""Numerical audits of operators against group actions.

* visibility: compare Ker(A) with Ker(A P) through principal angles;
* representer form: build the Radon-equivariant operator from a 1-D kernel
  and measure how well it intertwines the image and sinogram actions;
* kernel constraint: residual of the stabilizer constraint on a kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .actions import (
    AnalyticSignal,
    act_X_inv,
    act_Y_inv,
    jacobian_det_X,
    jacobian_det_Y,
    multiplier_X,
    multiplier_Y,
    unit,
)
from .errors import UsageError
from .group import GroupElement, GroupId, compose, coset_rep_X, inverse
from .tomo import GeometryKind, GridLayout, SensorSet, raster_projector


@dataclass(eq=False)
class DenseOperator:
    """Linear map from raster images on ``grid`` to values at ``range_sensors``.

    Small operators keep an explicit matrix.  Large ones (the representer
    audit needs ~10^8 entries) keep a row generator and are applied in
    blocks; ``matrix`` materializes on demand.
    """

    grid: GridLayout
    range_sensors: SensorSet
    _matrix: np.ndarray | sp.spmatrix | None = None
    _rows: Callable[[slice], np.ndarray] | None = field(default=None, repr=False)
    block_rows: int = 256

    @property
    def shape(self) -> tuple:
        return (len(self.range_sensors), self.grid.n)

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = self._rows(slice(0, self.shape[0]))
        m = self._matrix
        return m.toarray() if sp.issparse(m) else m

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self._matrix is not None:
            return np.asarray(self._matrix @ x)
        m = self.shape[0]
        out = np.empty((m,) + x.shape[1:])
        for start in range(0, m, self.block_rows):
            sl = slice(start, min(m, start + self.block_rows))
            out[sl] = self._rows(sl) @ x
        return out

    __matmul__ = apply


def discretize_radon(grid: GridLayout, V: SensorSet) -> DenseOperator:
    """Rows are exactly the raster line-integral functionals."""
    return DenseOperator(grid, V, _matrix=raster_projector(grid, V.points))


def _snap(x, tol=1e-9):
    r = np.round(x)
    return np.where(np.abs(x - r) < tol, r, x)


def discretize_rep(g: GroupElement, grid: GridLayout, sparse: bool = False):
    """Matrix of x -> x(pi_X[g]^-1 u) with bilinear resampling, zero outside.

    Source positions within 1e-9 pixel of a pixel centre are snapped, so
    grid-aligned rotations give exact permutation matrices.
    """
    centers = grid.centers()
    src = act_X_inv(g, centers)
    row, col = grid.fractional_index(src)
    row, col = _snap(row), _snap(col)
    r0, c0 = np.floor(row).astype(int), np.floor(col).astype(int)
    tr, tc = row - r0, col - c0
    ii, jj, ww = [], [], []
    n = np.arange(grid.n)
    for dr, wr in ((0, 1 - tr), (1, tr)):
        for dc, wc in ((0, 1 - tc), (1, tc)):
            rr, cc, w = r0 + dr, c0 + dc, wr * wc
            ok = (rr >= 0) & (rr < grid.height) & (cc >= 0) & (cc < grid.width) & (w != 0)
            ii.append(n[ok])
            jj.append(rr[ok] * grid.width + cc[ok])
            ww.append(w[ok])
    P = sp.csr_matrix((np.concatenate(ww), (np.concatenate(ii), np.concatenate(jj))), shape=(grid.n, grid.n))
    return P if sparse else P.toarray()


# -- visibility --------------------------------------------------------------------


@dataclass(frozen=True)
class VisibilityReport:
    holds: bool
    mismatch_angle: float
    dim_ker_A: int
    dim_ker_AP: int


def nullspace(M, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (columns) of Ker(M), rank cut at sigma <= tol*sigma_max."""
    M = np.asarray(M, float)
    _, svals, vt = np.linalg.svd(M, full_matrices=True)
    smax = svals[0] if svals.size else 0.0
    rank = int(np.sum(svals > tol * smax)) if smax > 0 else 0
    return vt[rank:].T


def largest_principal_angle(N1, N2) -> float:
    """Largest principal angle between span(N1) and span(N2) (equal dims)."""
    if N1.shape[1] == 0 and N2.shape[1] == 0:
        return 0.0
    resid = N2 - N1 @ (N1.T @ N2)
    s = np.linalg.norm(resid, 2) if resid.size else 0.0
    return float(np.arcsin(min(1.0, s)))


def check_visibility(A, P, tol: float = 1e-10, tol_angle: float = 1e-6) -> VisibilityReport:
    """Does Ker(A P) equal Ker(A)?"""
    A = A.matrix if isinstance(A, DenseOperator) else np.asarray(A, float)
    P = np.asarray(P, float)
    if A.ndim != 2 or P.ndim != 2 or P.shape != (A.shape[1], A.shape[1]):
        raise UsageError(f"shapes not conformable: A {A.shape}, P {P.shape}")
    N1 = nullspace(A, tol)
    N2 = nullspace(A @ P, tol)
    if N1.shape[1] != N2.shape[1]:
        return VisibilityReport(False, float(np.pi / 2), N1.shape[1], N2.shape[1])
    angle = largest_principal_angle(N1, N2)
    return VisibilityReport(angle <= tol_angle, angle, N1.shape[1], N2.shape[1])


# -- representer form -----------------------------------------------------------------


@dataclass(frozen=True)
class Kernel1D:
    fn: Callable[[np.ndarray], np.ndarray]
    support: float

    def __call__(self, r):
        return self.fn(np.asarray(r, float))

    def __add__(self, other: "Kernel1D") -> "Kernel1D":
        return Kernel1D(lambda r: self.fn(r) + other.fn(r), max(self.support, other.support))


def gaussian_kernel(sigma: float) -> Kernel1D:
    c = 1.0 / (np.sqrt(2 * np.pi) * sigma)
    return Kernel1D(lambda r: c * np.exp(-0.5 * (r / sigma) ** 2), 8.0 * sigma)


def bump_kernel(width: float) -> Kernel1D:
    """Normalized smooth bump on (-width, width): a mollified delta."""
    from scipy.integrate import quad

    def raw(r):
        t = np.asarray(r, float) / width
        inside = np.abs(t) < 1
        return np.where(inside, np.exp(-1.0 / np.maximum(1 - t * t, 1e-300)), 0.0)

    mass = quad(lambda r: float(raw(r)), -width, width, epsabs=1e-14)[0]
    return Kernel1D(lambda r: raw(r) / mass, width)


def build_equivariant_op(a: Kernel1D, grid: GridLayout, V: SensorSet) -> DenseOperator:
    """(A x)(r, phi) = sum_j a(r - u_j . phi_vec) x_j * pixel_area."""
    centers = grid.centers()
    pts = V.points
    area = grid.pixel_size**2

    def rows(sl):
        p = pts[sl]
        proj = unit(p[:, 1]) @ centers.T
        return a(p[:, 0, None] - proj) * area

    return DenseOperator(grid, V, _rows=rows)


def _dense_grid(V: SensorSet):
    geom = V.geometry
    if geom is None or geom.kind is not GeometryKind.parallel:
        raise UsageError("equivariance audit needs a parallel (angles x offsets) sensor grid")
    angles = np.asarray(geom.angles)
    offsets = np.asarray(geom.offsets)
    d_ang = 2 * np.pi / len(angles)
    if not np.allclose(angles, np.arange(len(angles)) * d_ang + angles[0], atol=1e-12):
        raise UsageError("equivariance audit needs equispaced angles covering [0, 2pi)")
    if not np.allclose(np.diff(offsets), offsets[1] - offsets[0]):
        raise UsageError("equivariance audit needs equispaced offsets")
    return angles, offsets


def interp_sinogram(values, angles, offsets, v) -> np.ndarray:
    """Bilinear interpolation in (r, phi) on an angle-major grid, periodic in phi.

    Zero outside the offset range.
    """
    vals = np.asarray(values, float).reshape(len(angles), len(offsets))
    v = np.asarray(v, float)
    d_ang = 2 * np.pi / len(angles)
    fa = _snap(np.mod(v[..., 1] - angles[0], 2 * np.pi) / d_ang)
    a0 = np.floor(fa).astype(int)
    ta = fa - a0
    a0 %= len(angles)
    a1 = (a0 + 1) % len(angles)
    dr = offsets[1] - offsets[0]
    fr = _snap((v[..., 0] - offsets[0]) / dr)
    r0 = np.floor(fr).astype(int)
    tr = fr - r0
    out = np.zeros(v.shape[:-1])
    for rr, wr in ((r0, 1 - tr), (r0 + 1, tr)):
        ok = (rr >= 0) & (rr < len(offsets))
        rc = np.clip(rr, 0, len(offsets) - 1)
        term = (1 - ta) * vals[a0, rc] + ta * vals[a1, rc]
        out += np.where(ok, wr * term, 0.0)
    return out


def check_equivariance(op: DenseOperator, g: GroupElement, images, V_dense: SensorSet | None = None):
    """Sup-norm residual of P_Y[g] A x = A P_X[g] x relative to sup |A x|.

    ``images`` are analytic signals on the image plane (callables on points);
    ``P_X[g] x`` is evaluated exactly at pixel centres and ``P_Y[g] A x`` by
    bilinear interpolation of ``A x`` on the dense sensor grid.  A batch of
    group elements returns one residual (max over images) per element; all
    columns go through the operator in a single blocked pass.
    """
    V = op.range_sensors if V_dense is None else V_dense
    angles, offsets = _dense_grid(V)
    centers = op.grid.centers()
    gs = g if g.batch_shape else g.expand(0)
    cols = []
    for f in images:
        cols.append(np.asarray(f(centers), float))
        for k in range(len(gs)):
            gk = gs[k]
            cols.append(np.asarray(f(act_X_inv(gk, centers)), float) * multiplier_X(gk, centers))
    Y = op.apply(np.stack(cols, -1))
    stride = 1 + len(gs)
    out = np.zeros(len(gs))
    for i in range(len(images)):
        y_x = Y[:, i * stride]
        scale = np.max(np.abs(y_x))
        if scale == 0:
            continue
        for k in range(len(gs)):
            gk = gs[k]
            pulled = interp_sinogram(y_x, angles, offsets, act_Y_inv(gk, V.points))
            y_rep = multiplier_Y(gk, V.points) * pulled
            y_gx = Y[:, i * stride + 1 + k]
            out[k] = max(out[k], float(np.max(np.abs(y_gx - y_rep)) / scale))
    return out if g.batch_shape else float(out[0])


def gaussian_blob(center, sigma, weight: float = 1.0) -> AnalyticSignal:
    center = np.asarray(center, float)

    def fn(u):
        d = u - center
        return weight * np.exp(-0.5 * np.sum(d * d, -1) / sigma**2)

    return AnalyticSignal(fn, float(np.hypot(*center)) + 6 * sigma)


def blob_image(rng, n_blobs: int = 3, max_offset: float = 0.3, sigma=(0.15, 0.3)) -> AnalyticSignal:
    """Random smooth test image: a sum of isotropic Gaussian blobs."""
    blobs = []
    for _ in range(n_blobs):
        ang, rad = rng.uniform(0, 2 * np.pi), max_offset * np.sqrt(rng.uniform())
        blobs.append(gaussian_blob(rad * np.array([np.cos(ang), np.sin(ang)]), rng.uniform(*sigma),
                                   rng.uniform(0.5, 1.5)))
    return AnalyticSignal(lambda u: sum(b(u) for b in blobs), max(b.support_radius for b in blobs))


# -- kernel constraint ----------------------------------------------------------------


def check_kernel_constraint(kernel, stabilizer: GroupElement, probes, target: str = "Y") -> float:
    """Max residual of the stabilizer constraint on a convolution kernel.

    target="Y": kernel ``a`` on sinogram space for an image->sinogram
    operator; probes are ``(u, v)`` pairs, stabilizer elements fix the image
    origin, and the residual is
    ``|(P_Y[g_u n] a)(v) - (P_Y[g_u] a)(v) p_X[n](0) |det D pi_X[n](0)||``.
    On SE(2) this is the statement that ``a(r, phi)`` ignores ``phi``.

    target="G": kernel on the group for a sinogram->group (lifting)
    operator; probes are group elements ``h``, stabilizer elements fix the
    sinogram origin ``(0, 0)``, and the residual is
    ``|a(n^-1 h) - a(h) p_Y[n](0) |det D pi_Y[n](0)||``.
    """
    worst = 0.0
    if target == "Y":
        U, Vp = (np.asarray(p, float) for p in probes)
        gu = coset_rep_X(U, stabilizer.group)
        base = multiplier_Y(gu, Vp)[..., None] * _as_cols(kernel(act_Y_inv(gu, Vp)))
        origin = np.zeros(2)
        for i in range(len(stabilizer)):
            n = stabilizer[i]
            gun = compose(gu, n)
            lhs = multiplier_Y(gun, Vp)[..., None] * _as_cols(kernel(act_Y_inv(gun, Vp)))
            fac = float(multiplier_X(n, origin) * jacobian_det_X(n, origin))
            worst = max(worst, float(np.max(np.abs(lhs - base * fac))))
    elif target == "G":
        h = probes
        base = _as_cols(kernel(h))
        v0 = np.zeros(2)
        for i in range(len(stabilizer)):
            n = stabilizer[i]
            lhs = _as_cols(kernel(compose(inverse(n), h)))
            fac = float(multiplier_Y(n, v0) * jacobian_det_Y(n, v0))
            worst = max(worst, float(np.max(np.abs(lhs - base * fac))))
    else:
        raise UsageError(f"unknown target {target!r}")
    return worst


def _as_cols(x):
    x = np.asarray(x, float)
    return x[..., None] if x.ndim == 1 else x


def sample_stabilizer_Y(group: GroupId, n: int, rng) -> GroupElement:
    """Elements fixing the sinogram origin (r, phi) = (0, 0).

    SE(2): translations along the detector line, ((0, t), 0).
    Aff+(2): ((0, t), [[a, 0], [c, d]]) with a, d > 0.
    """
    group = GroupId(group)
    s = np.zeros((n, 2))
    s[:, 1] = rng.uniform(-1, 1, n)
    if group is GroupId.SE2:
        return GroupElement(group, s, np.zeros(n))
    A = np.zeros((n, 2, 2))
    A[:, 0, 0] = rng.uniform(0.5, 1.5, n)
    A[:, 1, 0] = rng.uniform(-0.5, 0.5, n)
    A[:, 1, 1] = rng.uniform(0.5, 1.5, n)
    return GroupElement(group, s, A)

