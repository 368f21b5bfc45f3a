import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles as O
from lodet import blocks as B
from lodet import engine as E
from lodet.engine import Tensor
from lodet.graph import init_params, run_graph


def params_for(fragment, c, h=6, w=6, *args, seed=0, **kw):
    g = B.block_graph(fragment, c, h, w, *args, **kw)
    return g, init_params(g, seed=seed)


def np_params(params):
    return {k: v.data for k, v in params.items()}


def identity_dw(c):
    w = np.zeros((c, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    return w


def identity_pw(c_out, c_in):
    return np.eye(c_out, c_in)[:, :, None, None]


# --------------------------------------------------------------- shuffle

def test_shuffle_example():
    x = Tensor(np.arange(6.0).reshape(1, 6, 1, 1))
    assert B.channel_shuffle(x, 2).data.reshape(-1).tolist() == [0, 3, 1, 4, 2, 5]


def test_shuffle_groups_one_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 5, 3, 3)))
    np.testing.assert_array_equal(B.channel_shuffle(x, 1).data, x.data)


def test_shuffle_rejects_indivisible():
    with pytest.raises(ValueError):
        B.channel_shuffle(Tensor(np.zeros((1, 5, 2, 2))), 2)


def test_shuffle_inverse_exhaustive():
    for c in range(1, 65):
        x = Tensor(np.arange(float(c)).reshape(1, c, 1, 1))
        for g in range(1, c + 1):
            if c % g:
                continue
            y = B.channel_shuffle(B.channel_shuffle(x, g), c // g)
            assert np.array_equal(y.data, x.data), (c, g)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 8))
def test_shuffle_matches_index_formula_and_is_bijection(per, groups):
    c = per * groups
    x = np.random.default_rng(c).normal(size=(1, c, 2, 2))
    y = B.channel_shuffle(Tensor(x), groups).data
    np.testing.assert_array_equal(y, O.shuffle(x, groups))
    assert sorted(y.reshape(c, -1).tolist()) == sorted(x.reshape(c, -1).tolist())


# ----------------------------------------------------------------- SConv

def test_sconv_identity_gives_relu6():
    c = 4
    p = {"sconv.dw.weight": Tensor(identity_dw(c)), "sconv.dw.bias": Tensor(np.zeros(c)),
         "sconv.pw.weight": Tensor(identity_pw(c, c)), "sconv.pw.bias": Tensor(np.zeros(c))}
    x = Tensor(np.random.default_rng(1).normal(scale=4, size=(1, c, 5, 5)))
    np.testing.assert_array_equal(B.sconv_forward(x, p, c).data, O.relu6(x.data))


@pytest.mark.parametrize("c_out", [8, 2])
def test_sconv_width_change(c_out):
    g, p = params_for(B.sconv, 4, 5, 5, c_out)
    out = B.sconv_forward(Tensor(np.ones((1, 4, 5, 5))), p, c_out)
    assert out.shape == (1, c_out, 5, 5)


def test_sconv_matches_oracle():
    g, p = params_for(B.sconv, 6, 7, 7, 10, seed=3)
    x = np.random.default_rng(3).normal(size=(1, 6, 7, 7))
    got = B.sconv_forward(Tensor(x), p, 10).data
    np.testing.assert_allclose(got, O.sconv(x, np_params(p), "sconv"), atol=1e-12)


def test_sconv_channel_mismatch():
    g, p = params_for(B.sconv, 4, 5, 5, 4)
    with pytest.raises(ValueError):
        B.sconv_forward(Tensor(np.ones((1, 6, 5, 5))), p, 4)


# ------------------------------------------------------------------- CSA

def test_csa_identity_branch_is_pure_shuffle():
    c = 8
    p = {"csa.sconv.dw.weight": Tensor(identity_dw(4)), "csa.sconv.dw.bias": Tensor(np.zeros(4)),
         "csa.sconv.pw.weight": Tensor(identity_pw(4, 4)), "csa.sconv.pw.bias": Tensor(np.zeros(4))}
    x = np.random.default_rng(2).uniform(0.5, 5.5, size=(1, c, 4, 4))
    np.testing.assert_array_equal(B.csa_block_forward(Tensor(x), p).data, O.shuffle(x, 2))


@pytest.mark.parametrize("c", [4, 8, 160])
def test_csa_preserves_channels(c):
    g, p = params_for(B.csa, c, 3, 3)
    assert B.csa_block_forward(Tensor(np.ones((1, c, 3, 3))), p).shape == (1, c, 3, 3)


def test_csa_matches_oracle():
    g, p = params_for(B.csa, 8, 6, 6, seed=4)
    x = np.random.default_rng(4).normal(size=(2, 8, 6, 6))
    np.testing.assert_allclose(B.csa_block_forward(Tensor(x), p).data, O.csa(x, np_params(p), "csa"), atol=1e-12)


def test_csa_rejects_odd_channels():
    with pytest.raises(ValueError, match="even"):
        B.block_graph(B.csa, 5, 4, 4)


def test_csa_identity_path_gradient_is_permuted_upstream():
    c = 8
    g, p = params_for(B.csa, c, 4, 4, seed=5)
    x = Tensor(np.random.default_rng(5).normal(size=(1, c, 4, 4)), requires_grad=True)
    up = np.random.default_rng(6).normal(size=(1, c, 4, 4))
    with E.Tape() as tape:
        loss = (B.csa_block_forward(x, p) * up).sum()
    tape.backward(loss)
    perm = B.shuffle_permutation(c, 2)
    # output position j reads concat channel perm[j]; identity channels are c/2..c-1
    for j, src in enumerate(perm):
        if src >= c // 2:
            np.testing.assert_array_equal(x.grad[:, src], up[:, j])


# ----------------------------------------------------- conditional conv

def cond_setup(c=4, k=4, d_set=(1, 2, 3), seed=0):
    rng = np.random.default_rng(seed)
    return B.CondParams(
        experts=Tensor(rng.normal(size=(k, c, 1, 3, 3))),
        route_w=Tensor(rng.normal(size=(k, c))), route_b=Tensor(rng.normal(size=k)),
        bias=Tensor(rng.normal(size=c)),
        dil_w=Tensor(rng.normal(size=(len(d_set), c))), dil_b=Tensor(rng.normal(size=len(d_set))))


def test_cond_single_expert_is_scaled_dwconv():
    p = cond_setup(k=1)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 4, 6, 6)))
    out = B.cond_dwconv_forward(x, p.experts, (p.route_w, p.route_b), 2).data
    r = B.routing_weights(x, p).data[0, 0]
    assert 0 < r < 1
    ref = O.dw(x.data, r * p.experts.data[0], np.zeros(4), 2)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_cond_identical_experts_sum_routing():
    rng = np.random.default_rng(2)
    e = rng.normal(size=(1, 4, 1, 3, 3))
    experts = Tensor(np.concatenate([e, e]))
    rw, rb = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=2))
    x = Tensor(rng.normal(size=(1, 4, 6, 6)))
    out = B.cond_dwconv_forward(x, experts, (rw, rb), 1).data
    r = B.routing_weights(x, B.CondParams(experts, rw, rb)).data[0]
    np.testing.assert_allclose(out, O.dw(x.data, (r[0] + r[1]) * e[0], np.zeros(4), 1), atol=1e-12)


def test_cond_four_experts_matches_materialized_kernel():
    p = cond_setup(k=4, seed=3)
    x = Tensor(np.random.default_rng(3).normal(size=(2, 4, 7, 7)))
    out = B.cond_dwconv_forward(x, p.experts, (p.route_w, p.route_b), 3).data
    for n in range(2):
        pooled = x.data[n].mean(axis=(1, 2))
        r = O.sigmoid(p.route_w.data @ pooled + p.route_b.data)
        kern = np.tensordot(r, p.experts.data, axes=(0, 0))
        np.testing.assert_allclose(out[n:n + 1], O.dw(x.data[n:n + 1], kern, np.zeros(4), 3), atol=1e-12)


def test_cond_errors():
    p = cond_setup(k=2)
    x = Tensor(np.ones((1, 4, 5, 5)))
    with pytest.raises(ValueError):
        B.cond_dwconv_forward(x, Tensor(np.zeros((0, 4, 1, 3, 3))), (p.route_w, p.route_b), 1)
    with pytest.raises(ValueError, match="routing"):
        B.cond_dwconv_forward(x, p.experts, (Tensor(np.ones((3, 4))), Tensor(np.ones(3))), 1)


def test_cond_linear_in_experts_with_frozen_routing():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(1, 4, 6, 6)))
    ea, eb = rng.normal(size=(2, 3, 4, 1, 3, 3))
    kern_r = rng.uniform(0.1, 0.9, size=3)

    def run(e):
        kern = np.tensordot(kern_r, e, axes=(0, 0))
        return E.conv2d(x, Tensor(kern), groups=4, dilation=2, padding=2).data
    np.testing.assert_allclose(run(ea + eb), run(ea) + run(eb), atol=1e-12)


def test_dynamic_dilation_single_rate_equals_cond_conv():
    p = cond_setup(d_set=(1,), seed=4)
    x = Tensor(np.random.default_rng(4).normal(size=(1, 4, 6, 6)))
    learned = B.dynamic_dilation_forward(x, p, (1,), "learned").data
    single = B.cond_dwconv_forward(x, p.experts, (p.route_w, p.route_b), 1, bias=p.bias).data
    np.testing.assert_allclose(learned, single, atol=1e-12)


def test_static_equals_forced_one_hot():
    p = cond_setup(seed=5)
    x = Tensor(np.random.default_rng(5).normal(size=(1, 4, 8, 8)))
    static = B.dynamic_dilation_forward(x, p, (1, 2, 3), "static", static_d=2).data
    forced = B.dynamic_dilation_forward(x, p, (1, 2, 3), "learned", forced=np.array([0.0, 1.0, 0.0])).data
    np.testing.assert_array_equal(static, forced)


def test_dynamic_dilation_errors():
    p = cond_setup()
    x = Tensor(np.ones((1, 4, 5, 5)))
    with pytest.raises(ValueError):
        B.dynamic_dilation_forward(x, p, (), "learned")
    with pytest.raises(ValueError):
        B.dynamic_dilation_forward(x, p, (0, 1), "learned")


def test_dynamic_dilation_routing_gradients():
    p = cond_setup(seed=6)
    x = Tensor(np.random.default_rng(6).normal(size=(1, 4, 7, 7)))
    up = np.random.default_rng(7).normal(size=(1, 4, 7, 7))

    def f(dw, db, rw):
        q = B.CondParams(p.experts, rw, p.route_b, p.bias, dw, db)
        return (B.dynamic_dilation_forward(x, q, (1, 2, 3), "learned") * up).sum()
    assert E.finite_diff_check(f, [p.dil_w, p.dil_b, p.route_w]) < 1e-4


# --------------------------------------------------- DRF / CSA-DRF / FB

def test_drf_identity_config():
    c, half = 8, 4
    p = {}
    for br in ("drf.a", "drf.b"):
        p[f"{br}.pw.weight"] = Tensor(identity_pw(half, half))
        p[f"{br}.pw.bias"] = Tensor(np.zeros(half))
    p["drf.a.dw.weight"], p["drf.a.dw.bias"] = Tensor(identity_dw(half)), Tensor(np.zeros(half))
    # one expert, routing pinned at sigmoid(40) == 1.0 in float64
    p["drf.b.cdw.experts"] = Tensor(identity_dw(half)[None])
    p["drf.b.cdw.route.weight"], p["drf.b.cdw.route.bias"] = Tensor(np.zeros((1, half))), Tensor([40.0])
    p["drf.b.cdw.dil.weight"], p["drf.b.cdw.dil.bias"] = Tensor(np.zeros((3, half))), Tensor(np.zeros(3))
    p["drf.b.cdw.bias"] = Tensor(np.zeros(half))
    x = np.random.default_rng(8).normal(scale=4, size=(1, c, 5, 5))
    out = B.drf_block_forward(Tensor(x), p, experts=1).data
    np.testing.assert_allclose(out, O.relu6(x), atol=1e-12)


@pytest.mark.parametrize("c", [2, 4, 10, 32])
def test_shape_preserving_blocks(c):
    x = Tensor(np.random.default_rng(c).normal(size=(1, c, 5, 5)))
    for frag, fwd in ((B.csa, B.csa_block_forward), (B.drf, B.drf_block_forward), (B.csa_drf, B.csa_drf_forward)):
        _, p = params_for(frag, c, 5, 5)
        assert fwd(x, p).shape == x.shape


def test_drf_matches_oracle():
    g, p = params_for(B.drf, 8, 6, 6, seed=9)
    x = np.random.default_rng(9).normal(size=(2, 8, 6, 6))
    np.testing.assert_allclose(B.drf_block_forward(Tensor(x), p).data, O.drf(x, np_params(p)), atol=1e-12)


def test_csa_drf_identity_trace():
    half = 4
    p = {}
    for br in ("a", "c"):
        p[f"csa_drf.{br}.dw.weight"] = Tensor(identity_dw(half))
        p[f"csa_drf.{br}.dw.bias"] = Tensor(np.zeros(half))
    for br in ("a", "b", "c"):
        p[f"csa_drf.{br}.pw.weight"] = Tensor(identity_pw(half, half))
        p[f"csa_drf.{br}.pw.bias"] = Tensor(np.zeros(half))
    p["csa_drf.b.cdw.experts"] = Tensor(identity_dw(half)[None])
    p["csa_drf.b.cdw.route.weight"], p["csa_drf.b.cdw.route.bias"] = Tensor(np.zeros((1, half))), Tensor([40.0])
    p["csa_drf.b.cdw.dil.weight"], p["csa_drf.b.cdw.dil.bias"] = Tensor(np.zeros((3, half))), Tensor(np.zeros(3))
    p["csa_drf.b.cdw.bias"] = Tensor(np.zeros(half))
    x = np.random.default_rng(10).normal(scale=3, size=(1, 2 * half, 5, 5))
    s = O.relu6(x[:, :half]) + O.relu6(x[:, half:])
    out = B.csa_drf_forward(Tensor(x), p, experts=1).data
    np.testing.assert_allclose(out, O.shuffle(np.concatenate([s, O.relu6(s)], axis=1), 2), atol=1e-12)


def test_csa_drf_matches_oracle():
    g, p = params_for(B.csa_drf, 8, 6, 6, seed=11)
    x = np.random.default_rng(11).normal(size=(1, 8, 6, 6))
    np.testing.assert_allclose(B.csa_drf_forward(Tensor(x), p).data, O.csa_drf(x, np_params(p)), atol=1e-12)


def test_csa_drf_static_mode_runs():
    g, p = params_for(B.csa_drf, 8, 6, 6, mode="static", static_d=2)
    assert "csa_drf.b.cdw.dil.weight" not in p
    assert B.csa_drf_forward(Tensor(np.ones((1, 8, 6, 6))), p, mode="static").shape == (1, 8, 6, 6)


def test_feature_balance_identity():
    c = 8
    p = {"fb.proj.weight": Tensor(identity_pw(c, c)), "fb.proj.bias": Tensor(np.zeros(c))}
    _, p_csa = params_for(B.csa, c, 4, 4, seed=12)
    p.update({"fb." + k: v for k, v in p_csa.items()})
    x = np.random.default_rng(12).uniform(0, 5, size=(1, c, 4, 4))
    expect = B.csa_block_forward(Tensor(x), p_csa).data
    np.testing.assert_allclose(B.feature_balance_forward(Tensor(x), p, c).data, expect, atol=1e-12)


def test_feature_balance_widens_shallow_tap():
    g, p = params_for(B.feature_balance, 32, 4, 4, 256)
    assert B.feature_balance_forward(Tensor(np.ones((1, 32, 4, 4))), p, 256).shape == (1, 256, 4, 4)


def test_feature_balance_matches_oracle_and_rejects_mismatch():
    g, p = params_for(B.feature_balance, 6, 5, 5, 12, seed=13)
    x = np.random.default_rng(13).normal(size=(1, 6, 5, 5))
    got = B.feature_balance_forward(Tensor(x), p, 12).data
    np.testing.assert_allclose(got, O.feature_balance(x, np_params(p)), atol=1e-12)
    with pytest.raises(ValueError):
        B.feature_balance_forward(Tensor(np.ones((1, 4, 5, 5))), p, 12)


def test_sconv_block2_shape_and_norm_toggle():
    g = B.block_graph(B.sconv_block2, 6, 5, 5, norm=True)
    p = init_params(g, 0)
    out = run_graph(g, p, {"x": Tensor(np.random.default_rng(0).normal(size=(2, 6, 5, 5)))})["out"]
    assert out.shape == (2, 6, 5, 5)
    assert all(n.spec.option("norm") for n in g.conv_nodes())
