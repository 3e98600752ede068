import numpy as np
import pytest

from pcltta.adaptation import (AdamState, AdaptConfig, Mode, SamplingConfig, adam_step, adapt_step, run_tta,
                               train_source)
from pcltta.errors import InvalidState, NumericalAbort
from pcltta.network import Arch, BnMode, init_network
from pcltta.pointcloud import PointCloud
from pcltta.synthgen import SceneSpec, ShiftSpec, apply_domain_shift, generate_scene_with_normals

SAMPLING = SamplingConfig(cell=0.5, radius=4.0, max_points=1500, target_visits=2, spheres_per_batch=2)


@pytest.fixture(scope="module")
def domains():
    spec = SceneSpec(extent=20, counts={"building": 1, "vegetation": 3, "pole": 2, "car": 2})
    c, n = generate_scene_with_normals(spec, 5)
    src = apply_domain_shift(c, ShiftSpec(viewpoint="aerial", occlusion=0.8), 5, n)
    c, n = generate_scene_with_normals(spec, 6)
    tgt = apply_domain_shift(c, ShiftSpec(viewpoint="street", occlusion=0.8, density_factor=0.5,
                                          color_gain=0.8, jitter_sigma=0.03), 6, n)
    return src, tgt


@pytest.fixture(scope="module")
def trained(domains):
    net = init_network(Arch(6, 5, (16, 32), (32,)), 0)
    trace = train_source(net, [domains[0]], 3, 3e-3, 0, SAMPLING)
    return net, trace


def test_train_source_end_state(trained):
    net, trace = trained
    assert len(trace) == 3 and trace[-1] < trace[0]
    assert all(bn.mode is BnMode.SOURCE_EVAL for bn in net.bn_layers())
    for v in net.named_parameters().values():
        np.testing.assert_array_equal(v, v.astype(np.float32))


def test_train_source_needs_labels():
    cloud = PointCloud(np.random.default_rng(0).random((50, 3)), np.zeros((50, 3)), -np.ones(50, int))
    with pytest.raises(InvalidState):
        train_source(init_network(Arch(6, 2, (4,), ()), 0), [cloud], 1, 1e-3, 0, SAMPLING)
    with pytest.raises(ValueError):
        train_source(init_network(Arch(6, 2, (4,), ()), 0), [PointCloud(np.zeros((2, 3)))], 1, 1e-3, 0)


def _run(net, tgt, mode, **kw):
    return run_tta(net, tgt, AdaptConfig(mode=mode, **kw), SAMPLING)


def test_mode_equivalence(trained, domains):
    net, _ = trained
    tgt = domains[1]
    adabn = _run(net, tgt, "adabn", seed=1)
    pbn1 = _run(net, tgt, "pbn", rho=1.0, lr=0.0, seed=1)
    np.testing.assert_array_equal(adabn.labels, pbn1.labels)
    np.testing.assert_array_equal(adabn.sub_probs, pbn1.sub_probs)
    source = _run(net, tgt, "source", seed=1)
    pbn0 = _run(net, tgt, "pbn", rho=0.0, lr=0.0, seed=1)
    np.testing.assert_array_equal(source.sub_probs, pbn0.sub_probs)
    full0 = _run(net, tgt, "full", rho=0.0, lr=0.0, seed=1)
    np.testing.assert_array_equal(source.sub_probs, full0.sub_probs)


def test_full_lr_zero_keeps_affine(trained, domains):
    net, _ = trained
    res = _run(net, domains[1], "full", lr=0.0, seed=2)
    for a, b in zip(net.bn_layers(), res.net.bn_layers()):
        np.testing.assert_array_equal(a.gamma, b.gamma)
        np.testing.assert_array_equal(a.beta, b.beta)
    assert any(not np.array_equal(a.running_mean, b.running_mean)
               for a, b in zip(net.bn_layers(), res.net.bn_layers()))


def test_source_mode_changes_nothing(trained, domains):
    net, _ = trained
    res = _run(net, domains[1], "source")
    for name, v in net.named_parameters().items():
        np.testing.assert_array_equal(v, res.net.named_parameters()[name])
    for (m0, v0), (m1, v1) in zip(net.running_stats(), res.net.running_stats()):
        np.testing.assert_array_equal(m0, m1)
    assert all(r.total == 0.0 for r in res.log)


def test_bn_subset_touches_only_affine(trained, domains):
    net, _ = trained
    res = _run(net, domains[1], "full", lr=1e-3, seed=3)
    changed = [n for n, v in net.named_parameters().items()
               if not np.array_equal(v, res.net.named_parameters()[n])]
    assert changed and all(n.endswith((".gamma", ".beta")) for n in changed)


def test_all_subset_updates_weights(trained, domains):
    net, _ = trained
    res = _run(net, domains[1], "tent", lr=1e-3, param_subset="all", seed=3)
    assert not np.array_equal(net.classifier.weight, res.net.classifier.weight)


def test_labels_never_read(trained, domains):
    net, _ = trained
    tgt = domains[1]
    blind = PointCloud(tgt.positions, tgt.colors)
    a = _run(net, tgt, "full", lr=1e-3, seed=4)
    b = _run(net, blind, "full", lr=1e-3, seed=4)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_deterministic(trained, domains):
    net, _ = trained
    a = _run(net, domains[1], "full", lr=1e-3, seed=9)
    b = _run(net, domains[1], "full", lr=1e-3, seed=9)
    np.testing.assert_array_equal(a.sub_probs, b.sub_probs)
    assert [r.to_dict() for r in a.log] == [r.to_dict() for r in b.log]


def test_full_mode_report_fields(trained, domains):
    net, _ = trained
    res = _run(net, domains[1], "full", lr=1e-3, seed=0)
    assert res.num_batches == len(res.log) > 0
    r = res.log[0]
    assert abs(r.im - (r.er + r.div_term)) < 1e-12
    assert abs(r.total - (r.im + r.pl)) < 1e-12
    assert 0 <= r.mean_w <= 1
    assert np.all(res.labels >= 0)


def test_pbn_im_has_no_pl(trained, domains):
    res = _run(trained[0], domains[1], "pbn_im", lr=1e-3)
    assert all(r.pl == 0.0 and r.mean_w == 0.0 for r in res.log)


def test_nan_abort_names_layer(trained, domains):
    net = trained[0].copy()
    w = net.encoder[1].linear.weight.copy()
    w[0, 0] = np.nan
    net.set_parameter("enc1.weight", w)
    with pytest.raises(NumericalAbort) as info, np.errstate(invalid="ignore"):
        _run(net, domains[1], "full", lr=1e-3)
    assert info.value.layer == "enc1"
    assert "enc1" in str(info.value)


def test_empty_target(trained):
    res = _run(trained[0], PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), "full")
    assert len(res.labels) == 0 and res.num_batches == 0


def test_adapt_step_updates_stats_once(trained, domains):
    net = trained[0].copy()
    cfg = AdaptConfig(mode="full", lr=0.0, rho=0.5)
    from pcltta.adaptation import prepare_net
    prepare_net(net, cfg)
    batch = next(iter(SAMPLING.batches(domains[1], 0, use_colors=True)))
    before = net.encoder[0].bn.running_mean.copy()
    adapt_step(net, batch, cfg, AdamState())
    from pcltta.network import batch_stats
    expect = 0.5 * before + 0.5 * batch_stats(batch.features @ net.encoder[0].linear.weight).mean
    np.testing.assert_allclose(net.encoder[0].bn.running_mean, expect)


# -- Adam ------------------------------------------------------------------------

@pytest.mark.parametrize("g", [1e-6, 0.3, -50.0])
def test_adam_first_step_is_lr(g):
    out = adam_step(AdamState(), {"x": np.array([1.0])}, {"x": np.array([g])}, 1e-3)
    assert abs(abs(out["x"][0] - 1.0) - 1e-3) < 1e-3 * 1e-2
    assert np.sign(1.0 - out["x"][0]) == np.sign(g)


def test_adam_momentum_accumulates():
    g = {"x": np.array([0.5])}
    opt = AdamState()
    p = adam_step(opt, {"x": np.array([0.0])}, g, 1e-3)
    p = adam_step(opt, p, {"x": np.array([-0.2])}, 1e-3)
    q = adam_step(AdamState(), {"x": np.array([0.0])}, g, 2e-3)
    assert p["x"][0] != q["x"][0]
    # hand-rolled two-step recurrence
    m1, v1 = 0.05, 0.001 * 0.25
    m2, v2 = 0.9 * m1 + 0.1 * -0.2, 0.999 * v1 + 0.001 * 0.04
    x1 = -1e-3 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    x2 = x1 - 1e-3 * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert abs(p["x"][0] - x2) < 1e-15


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"x": np.zeros(2)}, {"x": np.zeros(3)}, 1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(rho=1.5)
    with pytest.raises(ValueError):
        AdaptConfig(lr=-1)
    with pytest.raises(ValueError):
        AdaptConfig(mode="bogus")
    assert Mode("full").uses_pl and not Mode("pbn_im").uses_pl
    assert Mode("tent").bn_mode is BnMode.ADABN
