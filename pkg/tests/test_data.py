import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqsino.data import (
    RingParams,
    build_dataset,
    containment,
    dataset_csv,
    default_geometry,
    gen_ring,
    load_dataset,
    load_idx,
    load_idx_labels,
    regenerate,
    sample_rng,
    save_dataset,
    thickness,
    write_idx,
)
from eqsino.errors import FormatError, NumericalError, UsageError
from eqsino.tomo import Ellipse, build_sensors, measure, parallel_geometry, ring

seeds = st.integers(0, 2**32 - 1)


def centered_ring(a, b, ro, ai, bi, ri, c=(0.0, 0.0)):
    return ring(Ellipse(c, a, b, ro), Ellipse(c, ai, bi, ri))


def brute_thickness(p, n=200_000):
    outer, inner = p.components

    def rho(e, t):
        return 1 / np.sqrt(np.cos(t - e.rot) ** 2 / e.a**2 + np.sin(t - e.rot) ** 2 / e.b**2)

    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    d = rho(outer, t) - rho(inner, t)
    return d.min(), d.max()


def test_thickness_examples():
    assert thickness(centered_ring(1, 1, 0, 0.5, 0.5, 0)) == pytest.approx((0.5, 0.5), abs=1e-12)
    d_min, d_max = thickness(centered_ring(1, 1, 0, 0.8, 0.4, 0))
    assert d_min == pytest.approx(0.2, abs=1e-10)
    assert d_max == pytest.approx(0.6, abs=1e-10)


def test_thickness_errors():
    with pytest.raises(UsageError):
        thickness(ring(Ellipse((0, 0), 1, 1, 0), Ellipse((0.1, 0), 0.5, 0.5, 0)))
    from eqsino.tomo import Phantom
    with pytest.raises(UsageError):
        thickness(Phantom((Ellipse((0, 0), 1, 1, 0),)))


@given(seeds)
@settings(max_examples=25)
def test_thickness_rotation_and_scaling(seed):
    g = gen_ring(np.random.default_rng(seed), RingParams(jitter=0.0))
    (o, i), d = g.phantom.components, (g.d_min, g.d_max)
    phi = np.random.default_rng(seed + 1).uniform(0, 2 * np.pi)
    rot = centered_ring(o.a, o.b, o.rot + phi, i.a, i.b, i.rot + phi)
    np.testing.assert_allclose(thickness(rot), d, atol=1e-10)
    lam = 1.7
    big = centered_ring(lam * o.a, lam * o.b, o.rot, lam * i.a, lam * i.b, i.rot)
    np.testing.assert_allclose(thickness(big), lam * np.array(d), atol=1e-10)


@given(seeds)
@settings(max_examples=20)
def test_thickness_refines_grid(seed):
    p = gen_ring(np.random.default_rng(seed)).phantom
    d_min, d_max = thickness(p)
    o, i = p.components
    t = np.arange(3600) * 2 * np.pi / 3600
    rho = lambda e, t: 1 / np.sqrt(np.cos(t - e.rot) ** 2 / e.a**2 + np.sin(t - e.rot) ** 2 / e.b**2)  # noqa: E731
    grid = rho(o, t) - rho(i, t)
    assert d_min <= grid.min() and d_max >= grid.max()
    # a grid sample lies within h/2 of the extremum, so it is off by at most h^2 |d''| / 8
    curv = np.abs(np.roll(grid, 1) - 2 * grid + np.roll(grid, -1))
    for i, ref in ((np.argmin(grid), d_min), (np.argmax(grid), d_max)):
        bound = 0.125 * curv[(i - 1) % 3600:(i + 2)].max() * 1.05 + 1e-14
        assert abs(grid[i] - ref) <= bound
    bmin, bmax = brute_thickness(p)
    assert d_min <= bmin + 1e-15 and d_max >= bmax - 1e-15


def test_containment_examples():
    assert containment(Ellipse((0, 0), 0.5, 0.5, 0), Ellipse((0, 0), 1, 1, 0))
    assert not containment(Ellipse((0, 0), 1, 1, 0), Ellipse((0, 0), 0.5, 0.5, 0))
    # inner touches the outer boundary at (1, 0)
    assert not containment(Ellipse((0, 0), 1.0, 0.5, 0), Ellipse((0, 0), 1, 1, 0))


@given(seeds)
@settings(max_examples=30)
def test_gen_ring_properties(seed):
    g = gen_ring(np.random.default_rng(seed))
    o, i = g.phantom.components
    assert containment(i, o)
    assert 0 < g.d_min <= g.d_max
    assert o.center == i.center and max(map(abs, o.center)) <= 0.15
    assert 0.5 <= o.a <= 1.0 and 0.5 <= o.b <= 1.0


def test_gen_ring_determinism_and_cap():
    a = [gen_ring(sample_rng(3, 0, k)) for k in range(5)]
    b = [gen_ring(sample_rng(3, 0, k)) for k in range(5)]
    assert a == b
    with pytest.raises(NumericalError):
        gen_ring(np.random.default_rng(0), RingParams(inner_fraction=(1.2, 1.5), max_tries=20))


def test_build_dataset_empty_and_noise_free(tmp_path):
    ds = build_dataset(0)
    assert len(ds) == 0 and ds.y.shape == (0, 128)
    save_dataset(ds, tmp_path / "e.eqmd")
    assert len(load_dataset(tmp_path / "e.eqmd")) == 0
    ds = build_dataset(6, noise=0.0, seed=2)
    V = build_sensors(default_geometry())
    for k in range(len(ds)):
        np.testing.assert_array_equal(ds.y[k], measure(ds.phantom(k), V))
        s = ds.sample(k)
        assert (s.d_min, s.d_max) == thickness(s.phantom)


def test_noise_is_applied():
    clean, noisy = build_dataset(4, noise=0.0, seed=5), build_dataset(4, noise=0.05, seed=5)
    np.testing.assert_array_equal(clean.targets, noisy.targets)
    assert not np.array_equal(clean.y, noisy.y)


def test_default_geometry_is_two_fan_angles():
    g = default_geometry()
    np.testing.assert_allclose(np.rad2deg(g.angles), [0.0, 85.0])
    assert len(build_sensors(g)) == 128


def test_regeneration_bit_exact(tmp_path):
    ds = build_dataset(12, geom=parallel_geometry(3, 8), noise=0.05, seed=9, stream=1)
    save_dataset(ds, tmp_path / "d.eqmd")
    back = load_dataset(tmp_path / "d.eqmd")
    assert back.header == ds.header
    assert np.array_equal(back.records, ds.records)
    assert np.array_equal(regenerate(back.header).records, ds.records)
    np.testing.assert_array_equal(back.sensors, build_sensors(parallel_geometry(3, 8)).points)


def test_prefix_stability():
    # per-sample streams: a larger dataset starts with the smaller one
    small, big = build_dataset(5, seed=4), build_dataset(9, seed=4)
    assert np.array_equal(big.records[:5], small.records)


@pytest.mark.slow
def test_large_sizes_supported():
    ds = build_dataset(8000, seed=0)
    assert len(ds) == 8000 and np.all(np.isfinite(ds.records))
    assert np.array_equal(ds.subset(np.arange(1000)).records, build_dataset(1000, seed=0).records)


def test_load_errors(tmp_path):
    with pytest.raises(UsageError):
        load_dataset(tmp_path / "missing.eqmd")
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "bad")
    save_dataset(build_dataset(3), tmp_path / "ok")
    raw = (tmp_path / "ok").read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-50])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "trunc")
    (tmp_path / "ver").write_bytes(raw[:4] + b"\x09" + raw[5:])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "ver")


def test_dataset_csv():
    ds = build_dataset(2, seed=1)
    lines = dataset_csv(ds).splitlines()
    assert len(lines) == 3
    head = lines[0].split(",")
    assert head[12:14] == ["d_min", "d_max"] and len(head) == 14 + 128
    assert float(lines[1].split(",")[12]) == ds.targets[0, 0]


def test_idx_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "im.idx", imgs)
    write_idx(tmp_path / "lab.idx", np.array([3, 7], dtype=np.uint8))
    out = load_idx(tmp_path / "im.idx")
    assert len(out) == 2 and out[0].width == out[0].height == 28
    np.testing.assert_allclose(out[1].values.reshape(28, 28), imgs[1] / 255.0)
    np.testing.assert_array_equal(load_idx_labels(tmp_path / "lab.idx"), [3, 7])


def test_idx_errors(tmp_path):
    (tmp_path / "magic").write_bytes(b"\x01\x00\x08\x03" + bytes(12))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "magic")
    imgs = np.zeros((2, 4, 4), np.uint8)
    write_idx(tmp_path / "short", imgs)
    (tmp_path / "short").write_bytes((tmp_path / "short").read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "short")
    write_idx(tmp_path / "lab", np.zeros(3, np.uint8))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "lab")
