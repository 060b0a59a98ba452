"""Elliptical ring datasets with thickness targets, plus IDX ingestion.

A ring is an outer ellipse of density +1 minus an inner ellipse sharing its
centre.  Targets are the minimal and maximal wall thickness measured along
lines through the centre.

Dataset file layout (little-endian)::

    b"EQMD" | version u32 | header_len u64 | header JSON (utf-8) |
    n_records u64 | record_len u32 | f64[n_records * record_len]

Each record is ``outer(6) | inner(6) | d_min | d_max | y[|V|]`` where an
ellipse is ``cx, cy, a, b, rot, density``.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import FormatError, NumericalError, UsageError
from .tomo import Ellipse, Geometry, Phantom, RasterImage, add_noise, build_sensors, fan_geometry, measure, ring

DATA_MAGIC = b"EQMD"
DATA_VERSION = 1
N_THICKNESS_GRID = 3600
N_CONTAIN = 720


@dataclass(frozen=True)
class RingParams:
    outer_axes: tuple = (0.5, 1.0)
    inner_fraction: tuple = (0.35, 0.8)
    jitter: float = 0.15
    max_tries: int = 1000


@dataclass(frozen=True)
class RingGeometry:
    phantom: Phantom
    d_min: float
    d_max: float


@dataclass(frozen=True, eq=False)
class RingSample:
    phantom: Phantom
    d_min: float
    d_max: float
    y: np.ndarray


def containment(inner: Ellipse, outer: Ellipse) -> bool:
    """Strict containment tested on 720 boundary points of ``inner``."""
    t = np.linspace(0.0, 2 * np.pi, N_CONTAIN, endpoint=False)
    c, s = np.cos(inner.rot), np.sin(inner.rot)
    local = np.stack([inner.a * np.cos(t), inner.b * np.sin(t)], -1)
    pts = local @ np.array([[c, s], [-s, c]]) + np.asarray(inner.center)
    d = pts - np.asarray(outer.center)
    q = np.einsum("ni,ij,nj->n", d, outer.shape_matrix, d)
    return bool(np.max(q) < 1.0)


def _radial(e: Ellipse, t):
    """Distance from the ellipse centre to its boundary in direction t."""
    ct, st = np.cos(t - e.rot), np.sin(t - e.rot)
    return 1.0 / np.sqrt(ct**2 / e.a**2 + st**2 / e.b**2)


def _ring_parts(p: Phantom) -> tuple:
    if len(p.components) != 2:
        raise UsageError("thickness needs a two-ellipse ring phantom")
    outer, inner = p.components
    if not (outer.density > 0 and inner.density == -outer.density):
        raise UsageError("ring phantom needs densities (+d, -d)")
    if not np.allclose(outer.center, inner.center, rtol=0, atol=1e-12):
        raise UsageError("ring ellipses must share their centre")
    return outer, inner


def thickness(p: Phantom) -> tuple:
    """(d_min, d_max) of ``rho_out(t) - rho_in(t)`` over directions t.

    A 3600-point scan locates both extrema, then a golden-section search on
    the bracketing cell refines each one.
    """
    outer, inner = _ring_parts(p)

    def d(t):
        return _radial(outer, t) - _radial(inner, t)

    h = 2 * np.pi / N_THICKNESS_GRID
    t = np.arange(N_THICKNESS_GRID) * h
    vals = d(t)
    out = []
    for sign, i in ((1.0, int(np.argmin(vals))), (-1.0, int(np.argmax(vals)))):
        f = lambda x: sign * d(x)  # noqa: E731
        try:
            res = minimize_scalar(f, bracket=(t[i] - h, t[i], t[i] + h), method="golden",
                                  options={"xtol": 1e-10})
            best = min(float(res.fun), sign * float(vals[i]))
        except ValueError:
            # flat neighbourhood (e.g. concentric circles): the grid value is exact
            best = sign * float(vals[i])
        out.append(sign * best)
    return out[0], out[1]


def _uniform(rng, lo_hi):
    return float(rng.uniform(*lo_hi))


def gen_ring(rng, params: RingParams = RingParams()) -> RingGeometry:
    """Random ring: semi-axes and rotations per ``params``, shared centre."""
    for _ in range(params.max_tries):
        a, b = _uniform(rng, params.outer_axes), _uniform(rng, params.outer_axes)
        rot_o = float(rng.uniform(0, 2 * np.pi))
        fa, fb = _uniform(rng, params.inner_fraction), _uniform(rng, params.inner_fraction)
        rot_i = float(rng.uniform(0, 2 * np.pi))
        center = tuple(rng.uniform(-params.jitter, params.jitter, size=2)) if params.jitter > 0 else (0.0, 0.0)
        outer = Ellipse(center, a, b, rot_o)
        inner = Ellipse(center, fa * a, fb * b, rot_i)
        if containment(inner, outer):
            p = ring(outer, inner)
            return RingGeometry(p, *thickness(p))
    raise NumericalError(f"no contained ring after {params.max_tries} tries; check ring parameters")


def sample_rng(seed: int, stream: int, index: int):
    return np.random.default_rng([seed, stream, index])


def default_geometry() -> Geometry:
    """Two fan-beam sources at 0 and 85 degrees, 64 detectors each."""
    return fan_geometry(np.deg2rad([0.0, 85.0]), 64)


@dataclass
class DatasetFile:
    header: dict
    records: np.ndarray = field(repr=False)

    @property
    def n_sensors(self) -> int:
        return int(self.header["n_sensors"])

    def __len__(self):
        return len(self.records)

    @property
    def sensors(self) -> np.ndarray:
        return np.asarray(self.header["sensors"], float).reshape(-1, 2)

    @property
    def y(self) -> np.ndarray:
        return self.records[:, 14:]

    @property
    def targets(self) -> np.ndarray:
        return self.records[:, 12:14]

    def phantom(self, i: int) -> Phantom:
        r = self.records[i]
        return Phantom((Ellipse.from_params(r[:6]), Ellipse.from_params(r[6:12])))

    def sample(self, i: int) -> RingSample:
        r = self.records[i]
        return RingSample(self.phantom(i), float(r[12]), float(r[13]), r[14:].copy())

    def subset(self, idx) -> "DatasetFile":
        return DatasetFile(dict(self.header), self.records[np.asarray(idx)])


def build_dataset(n: int, geom: Geometry | None = None, noise: float = 0.05, seed: int = 0,
                  stream: int = 0, params: RingParams = RingParams()) -> DatasetFile:
    """n ring samples; sample i uses the generator seeded by (seed, stream, i)."""
    if n < 0:
        raise UsageError("dataset size must be non-negative")
    geom = default_geometry() if geom is None else geom
    V = build_sensors(geom)
    header = {
        "version": DATA_VERSION,
        "n_sensors": len(V),
        "sensors": V.points.ravel().tolist(),
        "geometry": geom.to_dict(),
        "noise": noise,
        "n_records": n,
        "seed": seed,
        "stream": stream,
        "ring_params": asdict(params),
    }
    header = json.loads(json.dumps(header))
    records = np.zeros((n, 14 + len(V)))
    for i in range(n):
        rng = sample_rng(seed, stream, i)
        rg = gen_ring(rng, params)
        y = add_noise(measure(rg.phantom, V), noise, rng)
        outer, inner = rg.phantom.components
        records[i] = np.concatenate([outer.params(), inner.params(), [rg.d_min, rg.d_max], y])
    return DatasetFile(header, records)


def regenerate(header: dict) -> DatasetFile:
    """Rebuild a dataset from its header alone."""
    params = RingParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["ring_params"].items()})
    n = header.get("n_records")
    if n is None:
        raise UsageError("header has no record count")
    return build_dataset(n, Geometry.from_dict(header["geometry"]), header["noise"], header["seed"],
                         header["stream"], params)


def save_dataset(ds: DatasetFile, path) -> None:
    header = dict(ds.header, n_records=len(ds))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    rec = np.ascontiguousarray(ds.records, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC + struct.pack("<IQ", DATA_VERSION, len(blob)) + blob)
        fh.write(struct.pack("<QI", rec.shape[0], rec.shape[1] if rec.ndim == 2 else 0))
        fh.write(rec.tobytes())


def load_dataset(path) -> DatasetFile:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError as exc:
        raise UsageError(f"dataset not found: {path}") from exc
    if buf[:4] != DATA_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    try:
        version, hlen = struct.unpack_from("<IQ", buf, 4)
        if version != DATA_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        pos = 16
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        n, width = struct.unpack_from("<QI", buf, pos)
        pos += 12
        if width != 14 + header["n_sensors"]:
            raise FormatError(f"{path}: record width {width} does not match header")
        rec = np.frombuffer(buf, dtype="<f8", count=n * width, offset=pos).reshape(n, width).astype(float)
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: corrupt dataset ({exc})") from exc
    return DatasetFile(header, rec)


def dataset_csv(ds: DatasetFile) -> str:
    """One row per sample: ring parameters, targets, then the measurements."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    cols = [f"outer_{k}" for k in ("cx", "cy", "a", "b", "rot", "density")]
    cols += [f"inner_{k}" for k in ("cx", "cy", "a", "b", "rot", "density")]
    cols += ["d_min", "d_max"] + [f"y{i}" for i in range(ds.n_sensors)]
    w.writerow(cols)
    for r in ds.records:
        w.writerow([repr(float(x)) for x in r])
    return out.getvalue()


# -- IDX ------------------------------------------------------------------------------


def _read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0:
        raise FormatError(f"{path}: bad IDX magic")
    if buf[2] != 0x08:
        raise FormatError(f"{path}: only unsigned-byte IDX files are supported")
    ndim = buf[3]
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    start = 4 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - start != count:
        raise FormatError(f"{path}: payload size does not match dimensions {dims}")
    return np.frombuffer(buf, dtype=np.uint8, offset=start).reshape(dims)


def load_idx(path, pixel_size: float | None = None) -> list:
    """Images from an IDX3 file, scaled to [0, 1]; the grid spans [-1, 1] by default."""
    arr = _read_idx(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a 3-d image array, got {arr.ndim} dims")
    _, h, w = arr.shape
    ps = 2.0 / max(h, w) if pixel_size is None else pixel_size
    return [RasterImage(w, h, ps, im.astype(float) / 255.0) for im in arr]


def load_idx_labels(path) -> np.ndarray:
    arr = _read_idx(path)
    if arr.ndim != 1:
        raise FormatError(f"{path}: expected a 1-d label array")
    return arr.astype(np.int64)


def write_idx(path, arr) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes())
