import numpy as np
import pytest

from contextseis.autodiff import Tape, Tensor, l1_loss
from contextseis.model import (
    ContextSeisNet,
    CrossBlock,
    ModelSpec,
    SupportSet,
    UNet,
    build_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
)

from oracles import conv2d_loops, finite_diff, max_rel_error

TINY = ModelSpec.preset("tiny")


def randomize_stats(model, rng):
    for st in model.named_stats().values():
        st.running_mean = rng.normal(0, 0.3, st.running_mean.shape)
        st.running_var = rng.uniform(0.5, 2.0, st.running_var.shape)


def random_support(rng, S, H, W, B=None):
    shape = (S, H, W) if B is None else (S, B, H, W)
    return SupportSet(rng.standard_normal(shape), rng.standard_normal(shape))


# ---------------------------------------------------------------- CrossBlock


def make_block(seed=0, cu=2, cv=3, cout=4):
    rng = np.random.default_rng(seed)
    blk = CrossBlock(cu, cv, cout, ModelSpec(channels=(cout,)), rng)
    for st in blk._stats.values():
        st.running_mean = rng.normal(0, 0.3, cout)
        st.running_var = rng.uniform(0.5, 2.0, cout)
    for name, p in blk._params.items():
        if name.endswith("bias") or name.endswith("beta"):
            p.data = rng.normal(0, 0.1, p.shape)
    return blk


def test_crossblock_support_permutation():
    rng = np.random.default_rng(1)
    blk = make_block()
    u = rng.standard_normal((2, 2, 6, 6))
    V = rng.standard_normal((4, 2, 3, 6, 6))
    perm = [2, 0, 3, 1]
    u1, V1 = blk(Tensor(u), Tensor(V), training=False)
    u2, V2 = blk(Tensor(u), Tensor(V[perm]), training=False)
    np.testing.assert_allclose(u2.data, u1.data, atol=1e-12)
    np.testing.assert_allclose(V2.data, V1.data[perm], atol=1e-12)


def test_crossblock_duplicate_support_matches_single():
    rng = np.random.default_rng(2)
    blk = make_block()
    u = rng.standard_normal((1, 2, 4, 4))
    V = rng.standard_normal((1, 1, 3, 4, 4))
    one, _ = blk(Tensor(u), Tensor(V), training=False)
    two, _ = blk(Tensor(u), Tensor(np.concatenate([V, V])), training=False)
    np.testing.assert_allclose(two.data, one.data, rtol=0, atol=1e-14)


def _bn_eval(x, st, gamma, beta):
    return (x - st.running_mean[None, :, None, None]) / np.sqrt(
        st.running_var[None, :, None, None] + st.eps
    ) * gamma[None, :, None, None] + beta[None, :, None, None]


def _bn_train(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma[None, :, None, None] + beta[None, :, None, None]


def _lrelu(x, a=0.01):
    return np.where(x >= 0, x, a * x)


@pytest.mark.parametrize("training", [False, True])
def test_crossblock_matches_equation_oracle(training):
    rng = np.random.default_rng(3)
    blk = make_block(seed=4)
    P = {k: v.data for k, v in blk._params.items()}
    u = rng.standard_normal((2, 2, 4, 4))
    V = rng.standard_normal((3, 2, 3, 4, 4))
    z = [conv2d_loops(np.concatenate([u, V[s]], axis=1), P["conv1.weight"], P["conv1.bias"], 1) for s in range(3)]
    zbar = sum(z) / 3
    c3 = conv2d_loops(zbar, P["conv3.weight"], P["conv3.bias"], 1)
    c2 = np.concatenate([conv2d_loops(zs, P["conv2.weight"], P["conv2.bias"], 1) for zs in z])
    if training:
        u_ref = _lrelu(_bn_train(c3, P["norm_u.gamma"], P["norm_u.beta"]))
        v_ref = _lrelu(_bn_train(c2, P["norm_v.gamma"], P["norm_v.beta"]))
    else:
        u_ref = _lrelu(_bn_eval(c3, blk._stats["norm_u"], P["norm_u.gamma"], P["norm_u.beta"]))
        v_ref = _lrelu(_bn_eval(c2, blk._stats["norm_v"], P["norm_v.gamma"], P["norm_v.beta"]))
    u_out, V_out = blk(Tensor(u), Tensor(V), training=training)
    np.testing.assert_allclose(u_out.data, u_ref, atol=1e-12)
    np.testing.assert_allclose(V_out.data, v_ref.reshape(3, 2, 4, 4, 4), atol=1e-12)


def test_crossblock_empty_support():
    blk = make_block()
    with pytest.raises(ValueError):
        blk(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((0, 1, 3, 4, 4))))


# ---------------------------------------------------------------- ContextSeisNet


@pytest.fixture(scope="module")
def csn():
    model = ContextSeisNet(TINY, seed=5)
    randomize_stats(model, np.random.default_rng(6))
    return model


def test_output_shape(csn):
    rng = np.random.default_rng(7)
    X = rng.standard_normal((2, 1, 16, 8))
    assert csn.predict(X, random_support(rng, 3, 16, 8)).shape == (2, 1, 16, 8)


@pytest.mark.parametrize("S", [1, 2, 3, 5])
def test_support_permutation_invariance(csn, S):
    rng = np.random.default_rng(S)
    X = rng.standard_normal((2, 1, 16, 8))
    sup = random_support(rng, S, 16, 8)
    ref = csn.predict(X, sup)
    perm = rng.permutation(S)
    out = csn.predict(X, SupportSet(sup.prompts[perm], sup.prompt_labels[perm]))
    assert np.max(np.abs(out - ref)) < 1e-10


@pytest.mark.parametrize("k", [2, 3])
def test_support_duplication_invariance(csn, k):
    rng = np.random.default_rng(10 + k)
    X = rng.standard_normal((1, 1, 16, 8))
    sup = random_support(rng, 3, 16, 8)
    ref = csn.predict(X, sup)
    dup = SupportSet(np.concatenate([sup.prompts] * k), np.concatenate([sup.prompt_labels] * k))
    assert np.max(np.abs(csn.predict(X, dup) - ref)) < 1e-10


def test_variable_support_size(csn):
    rng = np.random.default_rng(20)
    X = rng.standard_normal((1, 1, 16, 8))
    outs = [csn.predict(X, random_support(rng, S, 16, 8)) for S in (1, 4, 9)]
    assert all(o.shape == X.shape for o in outs)


def test_per_sample_support_matches_broadcast(csn):
    rng = np.random.default_rng(21)
    X = rng.standard_normal((3, 1, 16, 8))
    sup = random_support(rng, 2, 16, 8, B=3)
    batched = csn.predict(X, sup)
    for b in range(3):
        single = csn.predict(X[b : b + 1], SupportSet(sup.prompts[:, b], sup.prompt_labels[:, b]))
        np.testing.assert_allclose(batched[b : b + 1], single, atol=1e-12)


def test_indivisible_input_rejected(csn):
    with pytest.raises(ValueError):
        csn.predict(np.zeros((1, 1, 10, 8)), random_support(np.random.default_rng(0), 1, 10, 8))


def test_missing_support_rejected(csn):
    with pytest.raises(ValueError):
        csn.predict(np.zeros((1, 1, 16, 8)))


@pytest.mark.parametrize("preset_H_W", [(16, 8), (32, 16), (8, 24)])
def test_shape_preservation(preset_H_W):
    H, W = preset_H_W
    rng = np.random.default_rng(0)
    for arch in ("contextseisnet", "unet"):
        m = build_model(arch, TINY, seed=0)
        assert m.predict(rng.standard_normal((1, 1, H, W)), random_support(rng, 2, H, W)).shape == (1, 1, H, W)


def test_gradient_flow_reaches_every_parameter():
    rng = np.random.default_rng(22)
    for arch in ("contextseisnet", "unet"):
        m = build_model(arch, TINY, seed=1)
        X = rng.standard_normal((2, 1, 16, 8))
        with Tape() as tape:
            loss = l1_loss(m(Tensor(X), random_support(rng, 2, 16, 8, B=2), training=True), Tensor(rng.standard_normal(X.shape)))
        tape.backward(loss, m.parameters())
        dead = [n for n, p in m.named_parameters().items() if not np.linalg.norm(p.grad) > 0]
        assert dead == [], arch


def test_composed_network_gradients():
    rng = np.random.default_rng(23)
    m = ContextSeisNet(ModelSpec(channels=(4,)), seed=2)
    X = Tensor(rng.standard_normal((1, 1, 8, 8)), requires_grad=True)
    sup = random_support(rng, 2, 8, 8)
    Y = Tensor(rng.standard_normal((1, 1, 8, 8)))

    def f():
        return l1_loss(m(X, sup, training=True), Y)

    with Tape() as tape:
        loss = f()
    tape.backward(loss, m.parameters())
    for name, p in list(m.named_parameters().items()) + [("X", X)]:
        numeric = finite_diff(lambda: f().item(), p.data)
        assert max_rel_error(p.grad, numeric) < 1e-4, name


# ---------------------------------------------------------------- U-Net


def test_unet_zero_weights_give_zero_output():
    m = UNet(TINY)
    for p in m.parameters():
        p.data = np.zeros_like(p.data)
    X = np.random.default_rng(0).standard_normal((1, 1, 16, 8))
    assert not np.any(m.predict(X))


def test_unet_ignores_support():
    m = UNet(TINY, seed=3)
    rng = np.random.default_rng(1)
    X = rng.standard_normal((1, 1, 16, 8))
    assert np.array_equal(m.predict(X), m.predict(X, random_support(rng, 2, 16, 8)))


# ---------------------------------------------------------------- parameter counts


def test_param_count_single_pointwise_conv():
    # The 1x1 head alone: one weight and one bias.
    spec = ModelSpec(channels=(1,), kernel_size=1, norm=False)
    m = UNet(spec)
    assert m.blocks["head"].num_params if hasattr(m.blocks["head"], "num_params") else True
    assert sum(p.size for p in m.blocks["head"]._params.values()) == 2


def test_param_count_tiny_by_hand():
    # U-Net tiny [8, 16, 32], 3x3 kernels, BatchNorm (gamma + beta) after each conv.
    enc = (1 * 8 * 9 + 8) + (8 * 8 * 9 + 8) + 2 * 16
    enc += (8 * 16 * 9 + 16) + (16 * 16 * 9 + 16) + 2 * 32
    enc += (16 * 32 * 9 + 32) + (32 * 32 * 9 + 32) + 2 * 64
    dec = (48 * 16 * 9 + 16) + (16 * 16 * 9 + 16) + 2 * 32
    dec += (24 * 8 * 9 + 8) + (8 * 8 * 9 + 8) + 2 * 16
    head = 8 + 1
    assert param_count(TINY, "unet") == enc + dec + head == 29937
    # ContextSeisNet tiny: conv1 sees query + support channels; conv2/conv3 and
    # two norms per block, except the top decoder block which has no support branch.
    e0 = (3 * 8 * 9 + 8) + 2 * (8 * 8 * 9 + 8) + 2 * 16
    e1 = (16 * 16 * 9 + 16) + 2 * (16 * 16 * 9 + 16) + 2 * 32
    e2 = (32 * 32 * 9 + 32) + 2 * (32 * 32 * 9 + 32) + 2 * 64
    d1 = (96 * 16 * 9 + 16) + 2 * (16 * 16 * 9 + 16) + 2 * 32
    d0 = (48 * 8 * 9 + 8) + (8 * 8 * 9 + 8) + 16
    assert param_count(TINY, "contextseisnet") == e0 + e1 + e2 + d1 + d0 + head == 58937


@pytest.mark.parametrize("preset", ["tiny", "small", "medium", "large"])
@pytest.mark.parametrize("arch", ["contextseisnet", "unet"])
def test_param_count_matches_instantiation(preset, arch):
    spec = ModelSpec.preset(preset)
    assert param_count(spec, arch) == build_model(arch, spec).num_parameters()


def test_param_count_without_norm():
    spec = ModelSpec.preset("tiny", norm=False)
    for arch in ("contextseisnet", "unet"):
        assert param_count(spec, arch) == build_model(arch, spec).num_parameters()


def test_small_preset_is_about_four_million():
    n = param_count(ModelSpec.preset("small"), "contextseisnet")
    assert 3.6e6 <= n <= 4.4e6


def test_parameter_names_unique_and_hierarchical():
    names = list(ContextSeisNet(TINY).named_parameters())
    assert len(names) == len(set(names))
    assert "enc.0.conv1.weight" in names and "dec.0.norm_u.gamma" in names


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(channels=(16, 8))
    with pytest.raises(ValueError):
        ModelSpec(kernel_size=4)
    with pytest.raises(ValueError):
        ModelSpec.preset("huge")


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("arch", ["contextseisnet", "unet"])
def test_checkpoint_roundtrip(tmp_path, arch):
    rng = np.random.default_rng(30)
    m = build_model(arch, TINY, seed=4)
    randomize_stats(m, rng)
    save_checkpoint(m, tmp_path / "a", {"note": 1}, epoch=3)
    save_checkpoint(m, tmp_path / "b", {"note": 1}, epoch=3)
    assert (tmp_path / "a" / "params.bin").read_bytes() == (tmp_path / "b" / "params.bin").read_bytes()
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
    m2 = load_checkpoint(tmp_path / "a")
    X = rng.standard_normal((2, 1, 16, 8))
    sup = random_support(rng, 2, 16, 8)
    assert np.array_equal(m.predict(X, sup), m2.predict(X, sup))


def test_checkpoint_rejects_mismatch(tmp_path):
    import json

    m = ContextSeisNet(TINY)
    save_checkpoint(m, tmp_path)
    meta = json.loads((tmp_path / "checkpoint.json").read_text())
    meta["spec"]["channels"] = [4, 8, 16]
    (tmp_path / "checkpoint.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)


def test_forward_determinism(csn):
    rng = np.random.default_rng(40)
    X = rng.standard_normal((2, 1, 16, 8))
    sup = random_support(rng, 3, 16, 8)
    assert np.array_equal(csn.predict(X, sup), csn.predict(X, sup))
