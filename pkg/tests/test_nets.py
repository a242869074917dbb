import numpy as np
import pytest

from deepid3.errors import ShapeError
from deepid3.nets import ARCHITECTURES, ScaleConfig, build, build_deepid2plus, build_deepid3_net1, \
    build_deepid3_net2, extract_feature
from deepid3.tensor import Rng, finite_diff_grad, max_relative_error
from deepid3.training import pair_loss

TOY = ScaleConfig(height=32, width=32, channels=1, widths=(4, 8, 12, 16), feature_dim=64, num_identities=5)


def pools_preceded_by_pairs(net):
    """Every pool follows exactly two weighted layers since the previous pool."""
    run = 0
    for n in net.nodes:
        if n.kind == "pool":
            if run != 2:
                return False
            run = 0
        elif n.weighted:
            run += 1
    return True


def test_deepid2plus_has_five_feature_layers():
    net = build_deepid2plus(TOY)
    assert len(net.feature_layers) == 5
    assert net.final_feature_layer == "fc5"
    assert len(net.heads) == 4


def test_net1_structure():
    net = build_deepid3_net1(TOY)
    assert pools_preceded_by_pairs(net)
    assert net.node(net.final_feature_layer).kind == "local"
    assert [n.kind for n in net.nodes].count("pool") == 4
    assert "fc" not in net.kinds()
    # a head after each pool plus one on the feature layer
    assert {h.attach_point for h in net.heads} == {"pool1", "pool2", "pool3", "pool4", "local8"}


def test_net2_structure():
    net = build_deepid3_net2(TOY)
    kinds = net.kinds()
    pools = [i for i, k in enumerate(kinds) if k == "pool"]
    assert len(pools) == 4
    counts = [kinds[a + 1:b].count("inception") for a, b in zip(pools[1:], pools[2:])]
    assert counts == [3, 2]
    assert kinds[:pools[1]].count("inception") == 0
    assert len(net.heads) == 4
    attach = {h.attach_point for h in net.heads}
    assert {"pool1", "pool2", "pool3"} <= attach and net.final_feature_layer in attach


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_declared_shapes_match_execution(arch):
    net = build(arch, TOY, Rng(1))
    acts, _ = net.forward(Rng(2).normal((1, 32, 32)))
    for n in net.nodes:
        assert acts[n.name].shape == tuple(n.out_shape), n.name
    assert extract_feature(net, Rng(2).normal((1, 32, 32))).shape == (64,)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_param_count_closed_form(arch):
    net = build(arch, TOY)
    expected = 0
    for n in net.nodes:
        if n.kind in ("conv", "fc", "inception"):
            expected += n.spec.num_params()
        elif n.kind == "local":
            expected += n.spec.num_params()
    heads = sum((h.in_dim or 0) * h.feature_dim + (h.feature_dim if h.in_dim else 0)
                + h.num_identities * (h.feature_dim + 1) for h in net.heads)
    assert net.num_params() == expected + heads
    assert net.num_params() == sum(v.size for v in net.params.values())


def test_conv_param_formula():
    net = build_deepid2plus(TOY)
    c1 = net.node("conv1").spec
    assert c1.num_params() == 4 * (1 * 3 * 3 + 1)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_zero_params_zero_feature(arch):
    net = build(arch, TOY)
    for k in net.params:
        net.params[k] = np.zeros_like(net.params[k])
    f = extract_feature(net, Rng(0).normal((1, 32, 32)))
    assert f.shape == (64,) and not f.any()


def test_bias_only_feature_is_relu_of_bias():
    net = build_deepid2plus(TOY)
    for k in net.params:
        net.params[k] = np.zeros_like(net.params[k])
    net.params["fc5.b"] = np.linspace(-1, 1, 64)
    np.testing.assert_array_equal(extract_feature(net, np.ones((1, 32, 32))), np.maximum(np.linspace(-1, 1, 64), 0))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_extract_is_deterministic(arch):
    net = build(arch, TOY, Rng(3))
    x = Rng(4).normal((1, 32, 32))
    np.testing.assert_array_equal(extract_feature(net, x), extract_feature(net, x))


def test_wrong_input_geometry():
    net = build_deepid3_net1(TOY)
    with pytest.raises(ShapeError):
        extract_feature(net, np.zeros((1, 31, 32)))


def test_invalid_geometry_names_stage():
    with pytest.raises(ShapeError, match="stage"):
        build_deepid3_net1(ScaleConfig(height=8, width=8))
    with pytest.raises(ShapeError, match="local8"):
        build_deepid3_net1(ScaleConfig(feature_dim=63))


def test_validate_catches_bad_params():
    net = build_deepid2plus(TOY)
    net.params["conv1.w"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(ShapeError, match="conv1.w"):
        net.validate()


def test_unknown_architecture():
    with pytest.raises(ValueError):
        build("alexnet", TOY)


def _kink_free(net, x):
    acts, caches = net.forward(x)
    for n in net.nodes:
        c = caches[n.name]
        if "z" in c and np.abs(c["z"]).min() < 1e-3:
            return False
        if n.kind == "inception" and min(np.abs(z).min() for z in c["inc"]["pre"].values()) < 1e-3:
            return False
    return True


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_full_graph_gradient(arch):
    """End-to-end pair loss gradient on a reduced network, sampled parameters."""
    cfg = ScaleConfig(height=16, width=16, channels=1, widths=(2, 2, 4, 4), feature_dim=4, num_identities=3,
                      verif_weight=0.5, margin=5.0)
    if arch == "deepid2plus":
        cfg.widths = (2, 2, 2, 2)
    for seed in range(40):
        net = build(arch, cfg, Rng(seed))
        for k in net.params:
            if k.endswith(".b"):
                net.params[k] = 0.05 * Rng(seed, 9).normal(net.params[k].shape)
        x1, x2 = Rng(seed, 1).normal((1, 16, 16)), Rng(seed, 2).normal((1, 16, 16))
        if _kink_free(net, x1) and _kink_free(net, x2):
            break
    else:
        pytest.fail("no kink-free draw")
    _, grads = pair_loss(net, x1, x2, 0, 1, mode="eval")
    rng = Rng(0, 3)
    worst = 0.0
    for name in sorted(net.params):
        p = net.params[name]
        # probe a handful of entries per tensor to keep the test fast
        idx = rng.choice(p.size, size=min(p.size, 6), replace=False)

        def f(v, name=name, idx=idx):
            saved = net.params[name]
            q = saved.copy().reshape(-1)
            q[idx] = v
            net.params[name] = q.reshape(saved.shape)
            try:
                return pair_loss(net, x1, x2, 0, 1, mode="eval")[0]
            finally:
                net.params[name] = saved

        num = finite_diff_grad(f, p.reshape(-1)[idx].copy())
        worst = max(worst, max_relative_error(grads[name].reshape(-1)[idx], num))
    assert worst < 1e-3


def test_heads_attach_to_existing_layers():
    for arch in ARCHITECTURES:
        net = build(arch, TOY)
        names = {n.name for n in net.nodes}
        assert all(h.attach_point in names for h in net.heads)


def test_head_gradient_flows_through_trunk():
    net = build_deepid3_net2(TOY, Rng(0))
    _, grads = pair_loss(net, Rng(1).normal((1, 32, 32)), Rng(2).normal((1, 32, 32)), 0, 1, mode="eval")
    assert set(grads) == set(net.params)
    assert np.abs(grads["conv1.w"]).sum() > 0
