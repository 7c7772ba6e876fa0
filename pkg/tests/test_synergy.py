import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synergy3d import textconfig
from synergy3d.morphable import N_EXPR, N_PARAMS, N_SHAPE, FaceBasis
from synergy3d.synergy import (
    MODES,
    LossWeights,
    NetConfig,
    SynergyNet,
    desk_config,
    load_net_config,
    loss_3dmm,
    loss_consistency,
    loss_landmark,
    loss_landmark_geometry,
    loss_total,
    synergy_forward,
)
from synergy3d.tensorcore import Tensor, check_gradients

NL = 10


def tiny_config(**kw):
    values = dict(n_landmarks=NL, encoder_hidden=(16,), n_cells=3, latent_dim=8, low_level_channels=(8,),
                  global_point_hidden=(), global_point_channels=16, mafa_decoder_hidden=(8,), l2m_channels=(8, 16))
    values.update(kw)
    return NetConfig(**values)


def tiny_basis(rng, nv=30):
    q, _ = np.linalg.qr(rng.standard_normal((3 * nv, N_SHAPE + N_EXPR)))
    return FaceBasis(rng.standard_normal(3 * nv), q[:, :N_SHAPE], q[:, N_SHAPE:], np.arange(NL), [[0, 1, 2]])


def tiny_net(seed=0, dtype=np.float64, **kw):
    rng = np.random.default_rng(seed)
    net = SynergyNet(tiny_config(**kw), tiny_basis(rng), seed=seed, dtype=dtype)
    net.set_param_stats(np.zeros(N_PARAMS), np.full(N_PARAMS, 0.5))
    return net


def loop_sq(a, b):
    total = 0.0
    for i in range(a.shape[0]):
        s = 0.0
        for j in range(a.shape[1]):
            s += (a[i, j] - b[i, j]) ** 2
        total += s
    return total / a.shape[0]


# --- losses ---------------------------------------------------------------------------


@pytest.mark.parametrize("loss", [loss_3dmm, loss_landmark_geometry, loss_consistency])
def test_parameter_loss_examples(loss, rng):
    a = rng.standard_normal((3, N_PARAMS))
    assert float(loss(a, a).data) == 0.0
    one = np.zeros((1, N_PARAMS))
    off = one.copy()
    off[0, 20] = 2.0
    assert float(loss(one, off).data) == 4.0
    off[0, 20] = 1.0
    assert float(loss(one, off).data) == 1.0
    b = rng.standard_normal((3, N_PARAMS))
    assert abs(float(loss(a, b).data) - loop_sq(a, b)) <= 1e-12 * loop_sq(a, b)


def test_consistency_symmetric_and_two_sided(rng):
    a, b = rng.standard_normal((4, N_PARAMS)), rng.standard_normal((4, N_PARAMS))
    assert float(loss_consistency(a, b).data) == float(loss_consistency(b, a).data)
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    loss_consistency(ta, tb).backward()
    np.testing.assert_allclose(ta.grad, -tb.grad)
    assert np.abs(ta.grad).min() > 0
    ta.grad = tb.grad = None
    loss_consistency(ta, tb, stop_grad="alpha").backward()
    assert ta.grad is None and tb.grad is not None


def test_landmark_loss_examples():
    z = np.zeros((1, NL, 3))
    assert float(loss_landmark(z, z).data) == 0.0
    d = z.copy()
    d[0, 3, 1] = 0.5
    assert float(loss_landmark(d, z).data) == 0.125
    d[0, 3, 1] = 2.0
    assert float(loss_landmark(d, z).data) == 1.5
    with pytest.raises(ValueError):
        loss_landmark(np.zeros((1, 4, 3)), np.zeros((1, 5, 3)))


def test_loss_total_examples():
    w = LossWeights()
    names = ("l3dmm", "lmk", "l3dmm_lmk", "consistency")
    assert float(loss_total({n: 0.0 for n in names}, w).data) == 0.0
    assert abs(float(loss_total({n: 1.0 for n in names}, w).data) - 0.071) <= 1e-12


def test_zero_weight_removes_gradient():
    a = Tensor(np.array(2.0), requires_grad=True)
    b = Tensor(np.array(3.0), requires_grad=True)
    loss_total({"l3dmm": a, "lmk": b}, LossWeights(l3dmm=0.0)).backward()
    assert a.grad is None
    assert float(b.grad) == 0.03


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lmk=-1.0)
    with pytest.raises(ValueError):
        LossWeights(consistency=float("inf"))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=4, max_size=4), st.integers(0, 3), st.floats(0, 10))
def test_loss_total_monotone(values, idx, bump):
    names = ("l3dmm", "lmk", "l3dmm_lmk", "consistency")
    base = dict(zip(names, values))
    more = dict(base)
    more[names[idx]] += bump
    w = LossWeights()
    assert float(loss_total(more, w).data) >= float(loss_total(base, w).data)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, N_PARAMS)) * 10, rng.standard_normal((2, N_PARAMS)) * 10
    for fn in (loss_3dmm, loss_landmark_geometry, loss_consistency):
        assert float(fn(a, b).data) >= 0
    assert float(loss_landmark(rng.standard_normal((2, NL, 3)), rng.standard_normal((2, NL, 3))).data) >= 0


# --- configs ---------------------------------------------------------------------------


def test_default_dims():
    cfg = NetConfig()
    assert cfg.latent_dim == 1280
    assert cfg.mafa.fused_dim == 2354
    assert cfg.mafa.per_point_dim == 2418
    assert cfg.loss_weights == LossWeights(0.02, 0.03, 0.02, 0.001)


def test_config_text_round_trip(tmp_path):
    for cfg in (NetConfig(), desk_config(pooling="max", consistency_stop_grad="alpha")):
        path = tmp_path / "net.cfg"
        path.write_text(textconfig.dump(cfg))
        assert load_net_config(path) == cfg
        assert path.read_text().startswith("version = 1\n")


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ValueError):
        NetConfig(latent_dim=0)
    with pytest.raises(ValueError):
        NetConfig(pooling="median")
    path = tmp_path / "bad.cfg"
    path.write_text("version = 1\nno_such_key = 3\n")
    with pytest.raises(ValueError, match="unknown"):
        load_net_config(path)
    path.write_text("version = 7\n")
    with pytest.raises(ValueError, match="version"):
        load_net_config(path)


# --- networks ----------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["baseline", "mafa", "l2m", "full"])
def test_block_sizes_and_mode_outputs(mode, rng):
    flags = dict(zip(("use_mafa", "use_l2m"), MODES[mode]))
    net = tiny_net(**flags)
    out = synergy_forward(rng.standard_normal((5, 3 * NL)), None, net, mode=mode)
    assert len(out) == 4
    assert out.alpha.shape == (5, N_PARAMS)
    assert out.coarse.shape == (5, NL, 3)
    if mode in ("baseline", "l2m"):
        assert out.refined is out.coarse
    if mode in ("baseline", "mafa"):
        assert out.alpha_hat is None
        comps, _ = net.losses(out, np.zeros((5, N_PARAMS)), np.zeros((5, NL, 3)))
        assert set(comps) == {"l3dmm", "lmk"}
    else:
        assert {k: v.shape[1] for k, v in out.alpha_hat.items()} == {"p": 12, "s": 40, "e": 10}


def test_mode_mismatch_rejected(rng):
    net = tiny_net()
    with pytest.raises(ValueError):
        synergy_forward(rng.standard_normal((2, 3 * NL)), None, net, mode="baseline")
    with pytest.raises(ValueError):
        net(rng.standard_normal((2, 3 * NL + 1)))


def test_zero_heads_give_zero_alpha(rng):
    net = tiny_net()
    net.encoder.heads.zero_last()
    net.l2m.heads.zero_last()
    out = net(rng.standard_normal((3, 3 * NL)))
    np.testing.assert_array_equal(out.alpha.data, 0)
    for v in out.alpha_hat.values():
        np.testing.assert_array_equal(v.data, 0)


def test_zeroed_mafa_decoder_is_identity(rng):
    net = tiny_net()
    net.zero_mafa_output()
    out = net(rng.standard_normal((3, 3 * NL)))
    np.testing.assert_array_equal(out.refined.data, out.coarse.data)


def test_default_config_refines_68_points(rng):
    # defaults apart from narrow encoder/decoders so the test stays quick
    cfg = NetConfig(encoder_hidden=(32,), n_cells=2, latent_dim=1280, mafa_decoder_hidden=(16,))
    from synergy3d.synthdata import make_synthetic_basis

    net = SynergyNet(cfg, make_synthetic_basis(0, 200), dtype=np.float32)
    out = net(rng.standard_normal((2, 204)))
    assert out.refined.shape == (2, 68, 3)
    assert net.mafa.decoder.layers[0].n_in == 2418


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_l2m_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    net = tiny_net(seed % 7)
    net.eval()
    pts = rng.standard_normal((2, NL, 3))
    perm = rng.permutation(NL)
    a = net.l2m(Tensor(pts))
    b = net.l2m(Tensor(pts[:, perm]))
    for m in "pse":
        np.testing.assert_array_equal(a[m].data, b[m].data)


def test_split_decoder_matches_concat(rng):
    net = tiny_net()
    low = Tensor(rng.standard_normal((4, NL, 8)))
    fused = Tensor(rng.standard_normal((4, net.cfg.mafa.fused_dim)))
    np.testing.assert_allclose(net.mafa.decode(low, fused).data, net.mafa.decode_concat(low, fused).data,
                               atol=1e-12)


def test_no_dead_branches(rng):
    net = tiny_net(dtype=np.float32)
    out = net(rng.standard_normal((8, 3 * NL)))
    _, total = net.losses(out, rng.standard_normal((8, N_PARAMS)), rng.standard_normal((8, NL, 3)))
    total.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None, name
        assert np.all(np.isfinite(p.grad)), name
        assert np.abs(p.grad).max() > 0 or name.endswith(".bias"), name


@pytest.mark.parametrize("seed", range(5))
def test_network_gradcheck(seed):
    rng = np.random.default_rng(seed)
    net = tiny_net(seed, smooth_l1_beta=[0.05, 100.0][seed % 2])
    obs = Tensor(rng.standard_normal((4, 3 * NL)), requires_grad=True, dtype=np.float64)
    a, lm = rng.standard_normal((4, N_PARAMS)), rng.standard_normal((4, NL, 3))

    def fn():
        return net.losses(net(obs), a, lm)[1]

    worst, checked = 0.0, 0
    for p in [obs, *net.parameters()]:
        res = check_gradients(fn, [p], max_entries=12, seed=seed)
        worst = max(worst, res.max_rel_error)
        checked += res.n_checked
    assert checked > 300
    assert worst <= 1e-4


def test_predict_returns_rotation_poses(rng):
    from synergy3d.morphable import decompose_pose, is_rotation

    net = tiny_net()
    mean = np.zeros(N_PARAMS)
    mean[[0, 5, 10]] = 10.0  # keep the untrained pose block near a scaled identity
    net.set_param_stats(mean, np.full(N_PARAMS, 0.5))
    params, refined, coarse = net.predict(rng.standard_normal((3, 3 * NL)))
    assert params.shape == (3, N_PARAMS) and refined.shape == (3, 3, NL)
    for row in params:
        pose = decompose_pose(row[:12])
        assert is_rotation(pose.rotation, 1e-9)
