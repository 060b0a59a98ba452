import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eqsino import tensor as T
from eqsino.actions import act_Y
from eqsino.errors import UsageError
from eqsino.group import GroupId, compose, identity, sample_group, sample_stabilizer, se2
from eqsino.layers import (
    ArchConfig,
    GroupConv,
    LiftingConv,
    PointCloudFeature,
    ResidualBlock,
    angdist,
    build_model,
    downsample,
    envelope,
    global_pool,
    group_conv,
    group_log_weights,
    group_neighborhood,
    knn,
    lifting_distance,
    mlp_hidden_for,
    model_equivariance_residual,
    sample_group_points,
    sinogram_distance,
)
from eqsino.theory import check_kernel_constraint, sample_stabilizer_Y
from eqsino.tomo import Ellipse, build_sensors, fan_geometry, ring

GROUPS = [GroupId.SE2, GroupId.AffPlus2]


def sensors(n_angles=2, n_det=12):
    return build_sensors(fan_geometry(np.linspace(0, 2 * np.pi, n_angles, endpoint=False), n_det)).points


def cloud(group, M, rng, C=2, N=2):
    pts = sample_group_points(group, M, 1.0, rng)
    return PointCloudFeature(pts, T.Tensor(rng.normal(size=(N, M, C))), T.Tensor(np.full(M, 0.5)))


# -- neighborhoods ---------------------------------------------------------------------------


def euclid(a, b):
    return np.linalg.norm(a[:, None] - b[None], axis=-1)


def test_knn_examples(rng):
    pts = rng.normal(size=(10, 2))
    np.testing.assert_array_equal(knn(pts, pts, 1, euclid)[:, 0], np.arange(10))
    full = knn(pts[:3], pts, 10, euclid)
    D = euclid(pts[:3], pts)
    assert np.all(np.diff(np.take_along_axis(D, full, 1), axis=1) >= 0)
    assert sorted(full[0]) == list(range(10))
    with pytest.raises(UsageError):
        knn(pts, pts, 11, euclid)


def test_knn_ties_lower_index_first():
    base = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, 3.0]])
    np.testing.assert_array_equal(knn(np.zeros((1, 2)), base, 3, euclid), [[0, 1, 2]])


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_knn_brute_force_oracle(seed, k):
    rng = np.random.default_rng(seed)
    q, b = rng.normal(size=(5, 2)), rng.normal(size=(9, 2))
    idx = knn(q, b, k, sinogram_distance(0.7))
    for j in range(5):
        d = [np.hypot(q[j, 0] - x[0], 0.7 * angdist(q[j, 1], x[1])) for x in b]
        assert list(idx[j]) == sorted(range(9), key=lambda i: (d[i], i))[:k]


def test_envelope():
    assert envelope(0.0, 0.7) == 1.0
    assert envelope(0.7, 0.7) == pytest.approx(np.exp(-1))
    d = np.linspace(0, 3, 20)
    assert np.all(np.diff(envelope(d, 1.0)) < 0)


def test_lifting_distance_invariant(rng):
    V = sensors()
    g = sample_group(GroupId.SE2, rng, size=7)
    k = sample_group(GroupId.SE2, rng)
    d0 = lifting_distance(1.0)(g, V)
    d1 = lifting_distance(1.0)(compose(k, g), act_Y(k, V))
    np.testing.assert_allclose(d1, d0, atol=1e-12)


def test_sample_group_points(rng):
    assert len(sample_group_points(GroupId.SE2, 0, 1.0, rng)) == 0
    for group in GROUPS:
        pts = sample_group_points(group, 200, 0.8, rng)
        assert np.all(np.linalg.norm(pts.s, axis=1) <= 0.8)
        assert np.all(pts.det > 0)
    r1 = np.random.default_rng(5)
    a, b = sample_group_points(GroupId.SE2, 4, 1.0, r1), sample_group_points(GroupId.SE2, 4, 1.0, r1)
    assert not np.array_equal(a.s, b.s)
    c = sample_group_points(GroupId.SE2, 4, 1.0, np.random.default_rng(5))
    np.testing.assert_array_equal(a.s, c.s)


# -- pooling and downsampling ----------------------------------------------------------------


def test_downsample(rng):
    z = cloud(GroupId.SE2, 2, rng)
    d = downsample(z, rng)
    assert d.n_points == 1 and d.quad_weights.data[0] == pytest.approx(1.0)
    z = cloud(GroupId.SE2, 9, rng)
    d1 = downsample(z, np.random.default_rng(3))
    d2 = downsample(z, np.random.default_rng(3))
    assert d1.n_points == 5
    np.testing.assert_array_equal(d1.feats.data, d2.feats.data)
    for j in range(5):
        assert any(np.array_equal(d1.feats.data[:, j], z.feats.data[:, i]) for i in range(9))
    assert d1.quad_weights.data.sum() == pytest.approx(z.quad_weights.data.sum())


def test_global_pool(rng):
    z = cloud(GroupId.SE2, 1, rng)
    np.testing.assert_allclose(global_pool(z).data, z.feats.data[:, 0])
    z = cloud(GroupId.SE2, 7, rng)
    w = T.Tensor(rng.uniform(0.2, 2.0, 7))
    z = PointCloudFeature(z.locations, z.feats, w)
    perm = rng.permutation(7)
    zp = PointCloudFeature(z.locations[perm], T.Tensor(z.feats.data[:, perm]), T.Tensor(w.data[perm]))
    assert np.array_equal(global_pool(z).data, global_pool(zp).data)
    const = PointCloudFeature(z.locations, T.Tensor(np.full((2, 7, 3), 1.25)), w)
    np.testing.assert_allclose(global_pool(const).data, 1.25)


# -- lifting ---------------------------------------------------------------------------------


def test_lifting_zero_and_linear(rng):
    V = sensors()
    lift = LiftingConv(GroupId.SE2, V, 2, 3, rng, k=9)
    g = sample_group_points(GroupId.SE2, 5, 1.0, rng)
    assert np.all(lift(T.Tensor(np.zeros((1, len(V), 2))), g).data == 0)
    a, b = rng.normal(size=(1, len(V), 2)), rng.normal(size=(1, len(V), 2))
    fa, fb = lift(T.Tensor(a), g).data, lift(T.Tensor(b), g).data
    fab = lift(T.Tensor(2 * a - 3 * b), g).data
    np.testing.assert_allclose(fab, 2 * fa - 3 * fb, atol=1e-12)


def test_lifting_single_term(rng):
    v = np.array([[0.3, 1.0]])
    lift = LiftingConv(GroupId.SE2, v, 1, 1, rng, k=1, mirror=False)
    g = se2([0.1, -0.2], 0.4)
    y = np.array([[[1.7]]])
    out = lift(T.Tensor(y), g.expand(0)).data[0, 0, 0]
    c = np.log1p(np.exp(lift.raw_quad.data[0]))
    expected = c * lift.effective_kernel(g, v[0])[0] * 1.7
    assert out == pytest.approx(expected, rel=1e-12)


def test_lifting_rejects_large_k():
    with pytest.raises(UsageError):
        LiftingConv(GroupId.SE2, sensors(1, 4), 1, 1, np.random.default_rng(0), k=9)


def test_lifting_exact_se2_equivariance(rng):
    # moving every sensor and every output point by k leaves the layer unchanged
    V = sensors(3, 10)
    k = se2([0.2, -0.1], 1.3)
    lift = LiftingConv(GroupId.SE2, V, 1, 4, rng, k=11)
    lift_k = LiftingConv(GroupId.SE2, act_Y(k, V), 1, 4, np.random.default_rng(0), k=11)
    lift_k.load_state_dict(lift.state_dict())
    g = sample_group_points(GroupId.SE2, 16, 1.0, rng)
    y = T.Tensor(rng.normal(size=(2, len(V), 1)))
    np.testing.assert_allclose(lift_k(y, compose(k, g)).data, lift(y, g).data, atol=1e-12)


@pytest.mark.parametrize("group", GROUPS)
def test_lifting_kernel_constraint(group, rng):
    lift = LiftingConv(group, sensors(), 2, 3, rng, hidden=8, basis=4)
    for p in lift.parameters():
        p.data[...] = rng.normal(size=p.shape)
    lift.eval()
    lift.kernel.bn.running_mean[:] = rng.normal(size=8)
    v0 = np.zeros(2)
    h = sample_group(group, rng, size=30)
    res = check_kernel_constraint(lambda h: lift.effective_kernel(h, v0), sample_stabilizer_Y(group, 10, rng),
                                  h, target="G")
    assert res < 1e-12


def test_lifting_kernel_in_sinogram_coordinates_is_angle_free(rng):
    # kernel on Omega_Y seen from the image origin: a(r, phi) = K(g_u, v) with u = 0
    lift = LiftingConv(GroupId.SE2, sensors(), 1, 2, rng)
    lift.eval()
    stab = sample_stabilizer(GroupId.SE2, 10, rng)
    u = np.zeros((40, 2))
    v = np.stack([rng.uniform(-1, 1, 40), rng.uniform(0, 2 * np.pi, 40)], -1)

    def kernel_Y(vv):
        return lift.effective_kernel(identity(GroupId.SE2, vv.shape[:-1]), np.asarray(vv))

    assert check_kernel_constraint(kernel_Y, stab, (u, v)) > 1e-3  # angle matters before lifting
    rot = se2([0, 0], 0.0)
    assert np.allclose(kernel_Y(v), lift.effective_kernel(rot, v))


# -- group convolution -----------------------------------------------------------------------


@pytest.mark.parametrize("group", GROUPS)
def test_group_conv_left_invariance(group, rng):
    z = cloud(group, 20, rng)
    out_pts = sample_group_points(group, 12, 1.0, rng)
    conv = GroupConv(group, 2, 3, rng, hidden=8, basis=4)
    conv.eval()
    w = group_log_weights(group)
    ref = group_conv(conv, z, out_pts, 6, w, 1.0).feats.data
    k = sample_group(group, rng)
    zk = PointCloudFeature(compose(k, z.locations), z.feats, z.quad_weights)
    moved = group_conv(conv, zk, compose(k, out_pts), 6, w, 1.0).feats.data
    np.testing.assert_allclose(moved, ref, atol=1e-12)


def test_group_conv_zero_and_linear(rng):
    group = GroupId.SE2
    z = cloud(group, 10, rng)
    nb = group_neighborhood(z.locations, z.locations, 4, group_log_weights(group), 1.0)
    conv = GroupConv(group, 2, 3, rng)
    zero = PointCloudFeature(z.locations, T.Tensor(np.zeros((2, 10, 2))), z.quad_weights)
    assert np.all(conv(zero, nb).data == 0)
    z2 = PointCloudFeature(z.locations, T.Tensor(3 * z.feats.data), z.quad_weights)
    np.testing.assert_allclose(conv(z2, nb).data, 3 * conv(z, nb).data, atol=1e-12)


def test_group_conv_self_neighbor_is_pointwise_linear(rng):
    group = GroupId.SE2
    z = cloud(group, 6, rng)
    nb = group_neighborhood(z.locations, z.locations, 1, group_log_weights(group), 1.0)
    np.testing.assert_array_equal(nb.idx[:, 0], np.arange(6))
    conv = GroupConv(group, 2, 3, rng)
    out = conv(z, nb).data
    K0 = conv.kernel(np.zeros((1, 3))).data[0]
    M = 0.5 * np.einsum("ocb,b->co", conv.weight.data, K0)
    np.testing.assert_allclose(out, z.feats.data @ M, atol=1e-12)


def test_residual_block_zero_last_conv_is_skip(rng):
    group = GroupId.SE2
    z = cloud(group, 10, rng, C=3)
    nb = group_neighborhood(z.locations, z.locations, 4, group_log_weights(group), 1.0)
    block = ResidualBlock(group, 3, 3, rng)
    block.convs[-1].weight.data[...] = 0.0
    np.testing.assert_allclose(block(z, nb).feats.data, z.feats.data, atol=1e-12)
    wide = ResidualBlock(group, 3, 5, rng)
    assert wide(z, nb).feats.shape == (2, 10, 5)


# -- models ----------------------------------------------------------------------------------


def test_channel_schedules():
    assert ArchConfig(init_channels=22).channels() == [22, 44, 88]
    assert ArchConfig().channels() == [8, 16, 32]
    with pytest.raises(UsageError):
        ArchConfig.from_dict({"depth": 3})
    cfg = ArchConfig(group="AffPlus2", points=64)
    assert ArchConfig.from_dict(cfg.to_dict()) == cfg


TINY = dict(init_channels=2, n_blocks=2, convs_per_block=1, k=5, k_lift=5, points=16, basis=3, hidden=4)


@pytest.mark.parametrize("group", ["SE2", "AffPlus2"])
def test_model_forward_and_predict(group, rng):
    V = sensors()
    model = build_model(ArchConfig(group=group, **TINY), V, rng)
    y = rng.normal(size=(3, len(V)))
    out = model(y, np.random.default_rng(0))
    assert out.shape == (3, 2)
    model.target_mean[:] = [1.0, 2.0]
    model.target_std[:] = [0.5, 0.5]
    pred = model.predict(y, np.random.default_rng(0))
    np.testing.assert_allclose(pred, out.data * 0.5 + [1.0, 2.0])
    with pytest.raises(UsageError):
        model(rng.normal(size=(3, 5)), rng)


def test_classification_head(rng):
    model = build_model(ArchConfig(head="classification", n_outputs=10, **TINY), sensors(), rng)
    assert model(rng.normal(size=(2, 24)), rng).shape == (2, 10)


def test_mlp_size_matching(rng):
    V = sensors(2, 64)
    eq = build_model(ArchConfig(), V, rng)
    H = mlp_hidden_for(eq.n_parameters(), len(V), 2)
    mlp = build_model(ArchConfig(kind="mlp", mlp_hidden=H), V, rng)
    assert abs(mlp.n_parameters() - eq.n_parameters()) / eq.n_parameters() < 0.02


def test_model_residual_identity_is_zero(rng):
    V = sensors()
    model = build_model(ArchConfig(**TINY), V, rng)
    p = ring(Ellipse((0, 0), 0.8, 0.6, 0.3), Ellipse((0, 0), 0.4, 0.3, 1.0))
    assert model_equivariance_residual(model, p, identity(GroupId.SE2)) == 0.0
    assert model_equivariance_residual(model, p, se2([0, 0], 1.0)) > 0.0


def test_mlp_negative_control():
    from eqsino.experiments import InvarianceStudy, invariance_study, medians_by

    med = medians_by(invariance_study(InvarianceStudy(arch={"kind": "mlp", "mlp_hidden": 64})), "n_angles")
    vals = [med[n] for n in (2, 8, 32)]
    # a raw-vector MLP is far from invariant and does not improve with more angles
    assert min(vals) > 0.1
    assert not (vals[0] > vals[1] > vals[2])
