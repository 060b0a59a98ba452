"""Forward measurements: analytic ellipse Radon, raster Radon, sensor sets, noise.

Every sensor point is a parallel-beam line ``(r, phi)``: the line
``{u : u . (cos phi, sin phi) = r}``.  Fan-beam acquisitions are only a
sampling pattern and are converted to ``(r, phi)`` up front.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import UsageError
from .group import GroupElement, wrap_angle


@dataclass(frozen=True)
class Ellipse:
    center: tuple
    a: float
    b: float
    rot: float = 0.0
    density: float = 1.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise UsageError(f"semi-axes must be positive, got a={self.a}, b={self.b}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def shape_matrix(self) -> np.ndarray:
        """M with (u - c)^T M (u - c) <= 1 inside."""
        R = np.array([[np.cos(self.rot), -np.sin(self.rot)], [np.sin(self.rot), np.cos(self.rot)]])
        return R @ np.diag([self.a**-2, self.b**-2]) @ R.T

    def params(self) -> list:
        return [*self.center, self.a, self.b, self.rot, self.density]

    @classmethod
    def from_params(cls, p) -> "Ellipse":
        return cls((p[0], p[1]), p[2], p[3], p[4], p[5])


@dataclass(frozen=True)
class Phantom:
    components: tuple

    def __post_init__(self):
        if len(self.components) == 0:
            raise UsageError("phantom needs at least one ellipse")
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def support_radius(self) -> float:
        return max(float(np.hypot(*e.center)) + max(e.a, e.b) for e in self.components)

    def __call__(self, u) -> np.ndarray:
        """Pointwise density (used for rasterization)."""
        u = np.asarray(u, float)
        out = np.zeros(u.shape[:-1])
        for e in self.components:
            d = u - np.asarray(e.center)
            q = np.einsum("...i,ij,...j->...", d, e.shape_matrix, d)
            out += np.where(q <= 1.0, e.density, 0.0)
        return out


def ring(outer: Ellipse, inner: Ellipse, density: float = 1.0) -> Phantom:
    return Phantom((
        Ellipse(outer.center, outer.a, outer.b, outer.rot, density),
        Ellipse(inner.center, inner.a, inner.b, inner.rot, -density),
    ))


# -- analytic Radon ----------------------------------------------------------------


def radon_ellipse(e: Ellipse, v) -> np.ndarray:
    """Closed-form line integral of a constant-density ellipse."""
    v = np.asarray(v, float)
    r, phi = v[..., 0], v[..., 1]
    phi_rel = phi - e.rot
    r_rel = r - (e.center[0] * np.cos(phi) + e.center[1] * np.sin(phi))
    s2 = (e.a * np.cos(phi_rel)) ** 2 + (e.b * np.sin(phi_rel)) ** 2
    inside = s2 - r_rel**2
    return np.where(inside > 0, e.density * 2.0 * e.a * e.b / s2 * np.sqrt(np.maximum(inside, 0.0)), 0.0)


def radon_phantom(p: Phantom, v) -> np.ndarray:
    out = radon_ellipse(p.components[0], v)
    for e in p.components[1:]:
        out = out + radon_ellipse(e, v)
    return out


def transform_phantom(g: GroupElement, p: Phantom) -> Phantom:
    """Closed form of x(pi_X[g]^-1 u) for an ellipse mixture."""
    A = g.matrix
    if np.array_equal(A, np.eye(2)) and not np.any(g.s):
        return p
    Ainv = np.linalg.inv(A)
    out = []
    for e in p.components:
        M = Ainv.T @ e.shape_matrix @ Ainv
        w, Q = np.linalg.eigh(0.5 * (M + M.T))
        # eigh sorts ascending: the largest semi-axis comes first
        a, b = w[0] ** -0.5, w[1] ** -0.5
        if np.isclose(a, b, rtol=1e-12, atol=0.0):
            rot = 0.0
        else:
            rot = float(wrap_angle(np.arctan2(Q[1, 0], Q[0, 0])) % np.pi)
        center = A @ np.asarray(e.center) + g.s
        out.append(Ellipse(tuple(center), float(a), float(b), rot, e.density))
    return Phantom(tuple(out))


# -- geometries --------------------------------------------------------------------


class GeometryKind(str, enum.Enum):
    parallel = "parallel"
    fan = "fan"


@dataclass(frozen=True)
class Geometry:
    """Acquisition pattern.

    ``offsets`` are detector positions r for parallel beams and fan angles
    (radians, relative to the central ray) for fan beams.
    """

    kind: GeometryKind
    angles: tuple
    offsets: tuple
    source_distance: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "kind", GeometryKind(self.kind))
        angles = tuple(float(a) for a in self.angles)
        offsets = tuple(float(o) for o in self.offsets)
        if any(a < 0 or a >= 2 * np.pi for a in angles):
            raise UsageError("geometry angles must lie in [0, 2pi)")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise UsageError("detector offsets must be strictly increasing")
        if self.kind is GeometryKind.fan and self.source_distance <= 0:
            raise UsageError("source distance must be positive")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "offsets", offsets)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "angles": list(self.angles), "offsets": list(self.offsets),
                "source_distance": self.source_distance}

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(d["kind"], tuple(d["angles"]), tuple(d["offsets"]), d.get("source_distance", 4.0))


def parallel_geometry(n_angles: int, n_offsets: int, r_max: float = 1.3, full_circle: bool = True,
                      angles=None) -> Geometry:
    if angles is None:
        span = 2 * np.pi if full_circle else np.pi
        angles = np.arange(n_angles) * span / n_angles
    return Geometry("parallel", tuple(angles), tuple(np.linspace(-r_max, r_max, n_offsets)))


def fan_geometry(angles, n_detectors: int, source_distance: float = 4.0, r_max: float = 1.3) -> Geometry:
    """Fan whose outermost rays pass at distance ``r_max`` from the origin."""
    half = np.arcsin(r_max / source_distance)
    return Geometry("fan", tuple(wrap_angle(np.asarray(angles, float))),
                    tuple(np.linspace(-half, half, n_detectors)), source_distance)


def equispaced_angles(n: int) -> tuple:
    """n angles on [0, 2pi); two angles use the pair (0, pi/2)."""
    if n == 2:
        return (0.0, np.pi / 2)
    return tuple(np.arange(n) * 2 * np.pi / n)


def fan_to_parallel(beta, fan_angle, source_distance) -> np.ndarray:
    """Source at angle ``beta``; ray tilted by ``fan_angle`` from the central ray.

    r = D sin(fan_angle), phi = beta + fan_angle + pi/2 (mod 2pi); the
    central ray maps to r = 0.
    """
    beta, fan_angle = np.broadcast_arrays(np.asarray(beta, float), np.asarray(fan_angle, float))
    r = source_distance * np.sin(fan_angle)
    return np.stack([r, wrap_angle(beta + fan_angle + np.pi / 2)], -1)


@dataclass(frozen=True, eq=False)
class SensorSet:
    points: np.ndarray
    geometry: Geometry | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.points)


def build_sensors(geom: Geometry) -> SensorSet:
    """Angle-major list of rays."""
    ang = np.repeat(np.asarray(geom.angles), len(geom.offsets))
    off = np.tile(np.asarray(geom.offsets), len(geom.angles))
    if geom.kind is GeometryKind.parallel:
        pts = np.stack([off, ang], -1)
    else:
        pts = fan_to_parallel(ang, off, geom.source_distance)
    return SensorSet(pts.reshape(-1, 2), geom)


def measure(p: Phantom, V: SensorSet) -> np.ndarray:
    return radon_phantom(p, V.points)


def add_noise(y, level: float, rng) -> np.ndarray:
    """Additive Gaussian noise with sigma = level * RMS(y)."""
    y = np.asarray(y, float)
    if level == 0:
        return y.copy()
    sigma = level * np.sqrt(np.mean(y * y))
    return y + rng.normal(0.0, sigma, size=y.shape)


# -- raster images -------------------------------------------------------------------


@dataclass(frozen=True)
class GridLayout:
    """Pixel grid centred on the origin; row 0 is the top (largest y)."""

    width: int
    height: int
    pixel_size: float

    @property
    def n(self) -> int:
        return self.width * self.height

    def centers(self) -> np.ndarray:
        """(height*width, 2) pixel centres in row-major order."""
        xs = (np.arange(self.width) - (self.width - 1) / 2) * self.pixel_size
        ys = ((self.height - 1) / 2 - np.arange(self.height)) * self.pixel_size
        X, Y = np.meshgrid(xs, ys)
        return np.stack([X.ravel(), Y.ravel()], -1)

    def fractional_index(self, u) -> tuple:
        """(row, col) fractional indices of points."""
        u = np.asarray(u, float)
        col = u[..., 0] / self.pixel_size + (self.width - 1) / 2
        row = (self.height - 1) / 2 - u[..., 1] / self.pixel_size
        return row, col


@dataclass(frozen=True, eq=False)
class RasterImage:
    width: int
    height: int
    pixel_size: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, float).ravel()
        if vals.size != self.width * self.height:
            raise UsageError("len(values) must equal width*height")
        object.__setattr__(self, "values", vals)

    @property
    def layout(self) -> GridLayout:
        return GridLayout(self.width, self.height, self.pixel_size)

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width)


def rasterize(f, layout: GridLayout) -> RasterImage:
    """Sample a pointwise function (e.g. a Phantom) at pixel centres."""
    return RasterImage(layout.width, layout.height, layout.pixel_size, f(layout.centers()))


def raster_projector(layout: GridLayout, points) -> sp.csr_matrix:
    """Sparse matrix whose rows are raster line integrals along ``points``.

    Joseph-style stepping: walk the dominant axis in half-pixel steps (two
    samples per pixel row/column), interpolate linearly across the other
    axis, and treat everything outside the grid as zero.
    """
    pts = np.atleast_2d(np.asarray(points, float))
    r, phi = pts[:, 0], pts[:, 1]
    c, s = np.cos(phi), np.sin(phi)
    ps = layout.pixel_size
    W, H = layout.width, layout.height
    rows_out, cols_out, vals_out = [], [], []
    steep = np.abs(c) >= np.abs(s)  # line is closer to vertical: walk rows

    # walk rows: y fixed per sample, x = (r - y s) / c
    idx = np.nonzero(steep)[0]
    if idx.size:
        ys_row = (H - 1) / 2 - np.arange(H)
        sub = np.stack([ys_row + 0.25, ys_row - 0.25], -1).ravel() * ps
        row_of = np.repeat(np.arange(H), 2)
        x = (r[idx, None] - sub[None, :] * s[idx, None]) / c[idx, None]
        fx = x / ps + (W - 1) / 2
        w = 0.5 * ps / np.abs(c[idx])
        _emit(fx, np.broadcast_to(row_of, fx.shape), idx, w, W, H, True, rows_out, cols_out, vals_out)
    idx = np.nonzero(~steep)[0]
    if idx.size:
        xs_col = np.arange(W) - (W - 1) / 2
        sub = np.stack([xs_col - 0.25, xs_col + 0.25], -1).ravel() * ps
        col_of = np.repeat(np.arange(W), 2)
        y = (r[idx, None] - sub[None, :] * c[idx, None]) / s[idx, None]
        fy = (H - 1) / 2 - y / ps
        w = 0.5 * ps / np.abs(s[idx])
        _emit(fy, np.broadcast_to(col_of, fy.shape), idx, w, W, H, False, rows_out, cols_out, vals_out)
    if rows_out:
        rr, cc, vv = np.concatenate(rows_out), np.concatenate(cols_out), np.concatenate(vals_out)
    else:
        rr = cc = np.zeros(0, int)
        vv = np.zeros(0)
    return sp.csr_matrix((vv, (rr, cc)), shape=(len(pts), layout.n))


def _emit(frac, fixed, ray_idx, step_w, W, H, walk_rows, rows_out, cols_out, vals_out):
    """Linear interpolation weights between neighbours along the transverse axis."""
    lo = np.floor(frac).astype(int)
    t = frac - lo
    n_trans = W if walk_rows else H
    ray = np.broadcast_to(ray_idx[:, None], frac.shape)
    wgt = np.broadcast_to(step_w[:, None], frac.shape)
    for k, wk in ((lo, 1.0 - t), (lo + 1, t)):
        ok = (k >= 0) & (k < n_trans) & (wk != 0.0)
        if walk_rows:
            flat = fixed[ok] * W + k[ok]
        else:
            flat = k[ok] * W + fixed[ok]
        rows_out.append(ray[ok])
        cols_out.append(flat)
        vals_out.append(wgt[ok] * wk[ok])


def radon_raster(img: RasterImage, v) -> np.ndarray:
    v = np.asarray(v, float)
    out = raster_projector(img.layout, v.reshape(-1, 2)) @ img.values
    return out.reshape(v.shape[:-1])


def measure_raster(img: RasterImage, V: SensorSet) -> np.ndarray:
    return raster_projector(img.layout, V.points) @ img.values


def sinogram_csv(V: SensorSet, y) -> str:
    lines = ["r,phi,value"]
    lines += [f"{p[0]!r},{p[1]!r},{val!r}" for p, val in zip(V.points.tolist(), np.asarray(y).tolist())]
    return "\n".join(lines) + "\n"
