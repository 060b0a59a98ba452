import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eqsino.actions import act_Y_inv, multiplier_Y
from eqsino.errors import UsageError
from eqsino.group import GroupId, aff, identity, sample_group, se2
from eqsino.tomo import (
    Ellipse,
    Geometry,
    GridLayout,
    Phantom,
    RasterImage,
    SensorSet,
    add_noise,
    build_sensors,
    fan_geometry,
    fan_to_parallel,
    measure,
    measure_raster,
    parallel_geometry,
    radon_ellipse,
    radon_phantom,
    radon_raster,
    rasterize,
    ring,
    sinogram_csv,
    transform_phantom,
)

from .conftest import aff_elements, se2_elements

DISC = Ellipse((0.0, 0.0), 1.0, 1.0)


def random_rays(rng, n, r_max=1.5):
    return np.stack([rng.uniform(-r_max, r_max, n), rng.uniform(0, 2 * np.pi, n)], -1)


def test_radon_ellipse_examples():
    assert radon_ellipse(DISC, [0.0, 1.3]) == pytest.approx(2.0)
    assert radon_ellipse(DISC, [1.0, 0.4]) == 0.0
    assert radon_ellipse(Ellipse((0, 0), 2.0, 1.0), [0.0, 0.0]) == pytest.approx(2.0)


def test_radon_phantom_examples():
    p = ring(DISC, Ellipse((0, 0), 0.5, 0.5))
    assert radon_phantom(p, [0.0, 2.0]) == pytest.approx(1.0)
    assert radon_phantom(p, [1.2, 2.0]) == 0.0


def test_radon_additive(rng):
    e1, e2 = Ellipse((0.1, 0.2), 0.5, 0.3, 0.4, 1.5), Ellipse((-0.3, 0.0), 0.4, 0.6, 1.0, -0.7)
    v = random_rays(rng, 200)
    both = radon_phantom(Phantom((e1, e2)), v)
    np.testing.assert_allclose(both, radon_ellipse(e1, v) + radon_ellipse(e2, v), atol=1e-14)


def test_radon_matches_chord_length(rng):
    # chord of an ellipse along the line, found by solving the quadratic directly
    e = Ellipse((0.2, -0.1), 0.7, 0.4, 0.9)
    for r, phi in random_rays(rng, 50, 0.8):
        d = np.array([-np.sin(phi), np.cos(phi)])
        p0 = r * np.array([np.cos(phi), np.sin(phi)]) - np.asarray(e.center)
        M = e.shape_matrix
        a, b, c = d @ M @ d, 2 * p0 @ M @ d, p0 @ M @ p0 - 1
        disc = b * b - 4 * a * c
        chord = np.sqrt(disc) / a if disc > 0 else 0.0
        assert radon_ellipse(e, [r, phi]) == pytest.approx(chord, abs=1e-12)


def test_mass_conservation():
    p = ring(Ellipse((0.1, 0.0), 0.8, 0.6, 0.3), Ellipse((0.1, 0.0), 0.4, 0.3, 1.1))
    r = np.linspace(-1.2, 1.2, 20001)
    masses = [np.trapezoid(radon_phantom(p, np.stack([r, np.full_like(r, phi)], -1)), r)
              for phi in np.linspace(0, 2 * np.pi, 7)]
    np.testing.assert_allclose(masses, masses[0], rtol=1e-6)


def test_transform_phantom_examples():
    p = Phantom((Ellipse((0.3, 0.1), 0.5, 0.2, 0.0),))
    q = transform_phantom(identity(GroupId.SE2), p).components[0]
    assert (q.a, q.b, q.rot) == (pytest.approx(0.5), pytest.approx(0.2), pytest.approx(0.0))
    q = transform_phantom(se2([0, 0], 0.7), p).components[0]
    assert q.rot == pytest.approx(0.7)
    q = transform_phantom(aff([0, 0], np.diag([2.0, 1.0])), Phantom((DISC,))).components[0]
    assert (q.a, q.b) == (pytest.approx(2.0), pytest.approx(1.0))


@given(se2_elements(), st.integers(0, 2**32 - 1))
def test_se2_intertwining(g, seed):
    rng = np.random.default_rng(seed)
    p = ring(Ellipse((0.1, -0.05), 0.8, 0.5, rng.uniform(0, 6)), Ellipse((0.1, -0.05), 0.4, 0.3, rng.uniform(0, 6)))
    v = random_rays(rng, 100, 4.0)
    lhs = radon_phantom(transform_phantom(g, p), v)
    rhs = radon_phantom(p, act_Y_inv(g, v))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))


@given(aff_elements(), st.integers(0, 2**32 - 1))
def test_aff_intertwining(g, seed):
    rng = np.random.default_rng(seed)
    p = Phantom((Ellipse((0.2, 0.1), 0.6, 0.3, rng.uniform(0, 6), 1.3),))
    v = random_rays(rng, 100, 4.0)
    lhs = radon_phantom(transform_phantom(g, p), v)
    rhs = multiplier_Y(g, v) * radon_phantom(p, act_Y_inv(g, v))
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * max(1.0, np.max(np.abs(rhs)))


def test_fan_to_parallel_examples():
    np.testing.assert_allclose(fan_to_parallel(0.3, 0.0, 4.0)[0], 0.0)
    np.testing.assert_allclose(fan_to_parallel(0.0, np.pi / 6, 2.0), [1.0, 2 * np.pi / 3])
    r = fan_to_parallel(0.0, np.linspace(-1.5, 1.5, 50), 3.0)[:, 0]
    assert np.all(np.diff(r) > 0)


def test_build_sensors():
    V = build_sensors(Geometry("parallel", (0.0, np.pi / 2), (-1.0, 0.0, 1.0)))
    assert len(V) == 6
    np.testing.assert_array_equal(V.points[0], [-1, 0])
    F = build_sensors(Geometry("fan", (0.0, 1.0, 2.0), (0.0,), 3.0))
    np.testing.assert_array_equal(F.points[:, 0], 0.0)
    g = fan_geometry([0.0, 1.0], 64)
    assert len(build_sensors(g)) == 128
    assert np.max(np.abs(build_sensors(g).points[:, 0])) == pytest.approx(1.3)


def test_geometry_validation_and_roundtrip():
    with pytest.raises(UsageError):
        Geometry("parallel", (0.0,), (1.0, 0.0))
    with pytest.raises(UsageError):
        Geometry("parallel", (7.0,), (0.0,))
    g = fan_geometry([0.0, 1.2], 5)
    assert Geometry.from_dict(g.to_dict()) == g


def test_measure_order_and_oracle(rng):
    p = ring(Ellipse((0, 0), 0.9, 0.7, 0.2), Ellipse((0, 0), 0.5, 0.4, 1.0))
    V = build_sensors(fan_geometry(np.deg2rad([0.0, 85.0]), 64))
    y = measure(p, V)
    np.testing.assert_array_equal(y, [radon_phantom(p, v) for v in V.points])
    perm = rng.permutation(len(V))
    np.testing.assert_array_equal(measure(p, SensorSet(V.points[perm])), y[perm])
    assert measure(p, SensorSet(V.points[:1])).shape == (1,)


def test_noise():
    y = np.linspace(-1, 2, 50)
    assert np.array_equal(add_noise(y, 0.0, np.random.default_rng(0)), y)
    a = add_noise(y, 0.05, np.random.default_rng(7))
    b = add_noise(y, 0.05, np.random.default_rng(7))
    assert np.array_equal(a, b)
    rng = np.random.default_rng(1)
    draws = np.stack([add_noise(y, 0.05, rng) - y for _ in range(10_000)])
    target = (0.05 * np.sqrt(np.mean(y**2))) ** 2
    assert np.mean(draws**2) == pytest.approx(target, rel=0.05)


def test_raster_radon_zero_and_constant():
    L, n = 1.0, 64
    img = RasterImage(n, n, L / n, np.ones(n * n))
    assert radon_raster(RasterImage(n, n, L / n, np.zeros(n * n)), [[0.1, 0.3]])[0] == 0.0
    assert radon_raster(img, [[0.0, 0.0]])[0] == pytest.approx(L, rel=2 / n)
    assert radon_raster(img, [[0.0, np.pi / 2]])[0] == pytest.approx(L, rel=2 / n)
    assert radon_raster(img, [[5.0, 0.3]])[0] == 0.0


def test_raster_disc_vs_analytic(rng):
    layout = GridLayout(256, 256, 2.4 / 256)
    img = rasterize(Phantom((DISC,)), layout)
    v = random_rays(rng, 100, 1.1)
    err = np.abs(radon_raster(img, v) - radon_ellipse(DISC, v))
    assert err.max() < 3 * layout.pixel_size
    V = SensorSet(v)
    np.testing.assert_array_equal(measure_raster(img, V), radon_raster(img, v))


def test_raster_size_check():
    with pytest.raises(UsageError):
        RasterImage(2, 2, 1.0, np.zeros(3))


def test_sinogram_csv():
    V = build_sensors(parallel_geometry(2, 3))
    rows = list(csv.reader(io.StringIO(sinogram_csv(V, np.arange(6.0)))))
    assert rows[0] == ["r", "phi", "value"] and len(rows) == 7
    assert float(rows[6][2]) == 5.0


def test_intertwining_with_default_ranges(rng):
    for group in (GroupId.SE2, GroupId.AffPlus2):
        g = sample_group(group, rng)
        p = Phantom((Ellipse((0.0, 0.2), 0.5, 0.4, 0.3),))
        v = random_rays(rng, 50)
        lhs = radon_phantom(transform_phantom(g, p), v)
        rhs = multiplier_Y(g, v) * radon_phantom(p, act_Y_inv(g, v))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
