import numpy as np
import pytest

from dcnn.autograd import RngState, Tensor, check_gradients, no_grad
from dcnn.autograd import functional as F
from dcnn.config import ModelConfig, reconciliation_notes
from dcnn.errors import ConfigError, DimensionError
from dcnn.model import (
    BridgeState,
    SaToScBridge,
    ScToSaBridge,
    build_model,
    fuse_logits,
    map_to_tokens,
    tokens_to_map,
)


def images(n, size, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (n, 3, size, size)).astype(np.float32))


def randomize(model, seed):
    """Seeded random values for every parameter, including zero-initialized biases and norm affines."""
    g = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data[...] = g.uniform(-0.5, 0.5, p.shape).astype(np.float32)


def record_sc_activations(model):
    """Wrap every SC block so the shapes of its mid and output activations are recorded."""
    shapes = []
    for blk in model.sc_blocks:
        mid_fn, out_fn = blk.forward_mid, blk.forward_out

        def mid(x, _f=mid_fn):
            y = _f(x)
            shapes.append(y.shape)
            return y

        def out(m, x, _f=out_fn):
            y = _f(m, x)
            shapes.append(y.shape)
            return y

        blk.forward_mid, blk.forward_out = mid, out
    return shapes


# -- config -----------------------------------------------------------------------------


def test_heads_must_divide_embed_dim():
    with pytest.raises(ConfigError, match="num_heads"):
        ModelConfig.preset("full", num_heads=5)


def test_unknown_enum_and_key_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.preset("nano", down_mode="bogus")
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig.from_dict({"preset": "nano", "bogus": 1})
    with pytest.raises(ConfigError):
        ModelConfig.preset("huge")


def test_misaligned_down_factor_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.preset("nano", patch_size=3)


def test_config_round_trips_through_yaml(tmp_path):
    cfg = ModelConfig.preset("nano", bridge_accum="concat", num_heads=6)
    cfg.dump(tmp_path / "m.yaml")
    back = ModelConfig.load(tmp_path / "m.yaml")
    assert back == cfg and back.fingerprint() == cfg.fingerprint()


def test_fingerprint_tracks_content():
    a = ModelConfig.preset("nano")
    assert a.fingerprint() == ModelConfig.preset("nano").fingerprint()
    assert a.fingerprint() != ModelConfig.preset("nano", num_heads=6).fingerprint()


def test_stem_override_keeps_other_fields():
    cfg = ModelConfig.from_dict({"preset": "nano", "stem": {"out_channels": 24}})
    assert (cfg.stem.kernel, cfg.stem.stride, cfg.stem.out_channels) == (4, 4, 24)


def test_full_block_plan():
    plan = ModelConfig.preset("full").block_plan()
    assert len(plan) == 12
    assert plan[0] == (0, 64, 32, 128) and plan[1] == (0, 128, 32, 256)
    assert [p[2] for p in plan] == [32] * 4 + [64] * 4 + [128] * 4
    assert plan[-1][3] == 512


def test_reconciliation_notes_cover_choices():
    notes = reconciliation_notes(ModelConfig.preset("full"))
    assert len(notes) >= 5 and all(isinstance(n, str) and n for n in notes)


# -- shapes -----------------------------------------------------------------------------


def test_full_preset_shapes():
    cfg = ModelConfig.preset("full")
    assert cfg.feature_size == 56 and cfg.token_grid == 14 and cfg.num_tokens == 196
    model = build_model(cfg, RngState(0)).eval()
    shapes = record_sc_activations(model)
    with no_grad():
        stem = model.stem(images(2, 224))
        lsc, lsa, trace = model.forward(images(2, 224))
    assert stem.shape == (2, 64, 56, 56)
    assert lsc.shape == (2, 1000) and lsa.shape == (2, 1000)
    assert trace.tokens.shape == (2, 196, 576)
    assert len(shapes) == 24 and all(s[2:] == (56, 56) for s in shapes)


def test_nano_builds_and_runs():
    cfg = ModelConfig.preset("nano")
    model = build_model(cfg, RngState(0))
    lsc, lsa, trace = model.forward(images(3, 32))
    assert lsc.shape == lsa.shape == (3, 4)
    assert trace.sc_features.shape == (3, 128, 8, 8) and trace.tokens.shape == (3, 16, 48)
    assert trace.features.shape == (3, 128 + 48)


def test_wrong_input_size_is_dimension_error():
    model = build_model(ModelConfig.preset("nano"), RngState(0))
    with pytest.raises(DimensionError):
        model.forward(images(1, 24))


def test_one_bridge_pair_per_block():
    model = build_model(ModelConfig.preset("full"), RngState(0))
    assert len(model.sc_blocks) == len(model.sa_blocks) == len(model.bridges_down) == len(model.bridges_up) == 12


def test_full_bridge_example_shapes():
    rng = RngState(0)
    down = ScToSaBridge(32, 576, 4, rng, "d")
    up = SaToScBridge(576, 32, 4, rng, "u")
    z = Tensor(np.zeros((1, 32, 56, 56), np.float32))
    tokens = Tensor(np.zeros((1, 196, 576), np.float32))
    state = BridgeState.zeros(1, 196, 576)
    assert down.project(z).shape == (1, 196, 576)
    new_tokens, state = down(z, tokens, state)
    z2, state = up(new_tokens, z, state)
    assert new_tokens.shape == (1, 196, 576) and z2.shape == (1, 32, 56, 56)
    assert state.b_sc.shape == (1, 196, 576) and state.b_sa.shape == (1, 576, 14, 14)


def test_token_layout_round_trip():
    x = Tensor(np.arange(2 * 3 * 4 * 4, dtype=np.float32).reshape(2, 3, 4, 4))
    t = map_to_tokens(x)
    assert t.shape == (2, 16, 3)
    np.testing.assert_array_equal(t.data[1, 5], x.data[1, :, 1, 1])
    np.testing.assert_array_equal(tokens_to_map(t).data, x.data)
    with pytest.raises(DimensionError):
        tokens_to_map(Tensor(np.zeros((1, 15, 3), np.float32)))


def test_bridge_alignment_errors():
    rng = RngState(0)
    down = ScToSaBridge(4, 8, 2, rng, "d")
    with pytest.raises(DimensionError):
        down(Tensor(np.zeros((1, 4, 6, 6), np.float32)), Tensor(np.zeros((1, 4, 8), np.float32)), BridgeState.zeros(1, 4, 8))
    up = SaToScBridge(8, 4, 2, rng, "u")
    with pytest.raises(DimensionError):
        up(Tensor(np.zeros((1, 4, 8), np.float32)), Tensor(np.zeros((1, 4, 6, 6), np.float32)), BridgeState.zeros(1, 4, 8))


# -- zero-state cases ----------------------------------------------------------------------


def test_zero_map_injects_layer_norm_beta():
    down = ScToSaBridge(4, 8, 2, RngState(1), "d")
    down.norm.bias.data[...] = np.arange(8, dtype=np.float32)
    tokens = Tensor(np.random.default_rng(0).standard_normal((2, 4, 8)).astype(np.float32))
    down.proj.bias.data[...] = 0
    out, state = down(Tensor(np.zeros((2, 4, 4, 4), np.float32)), tokens, BridgeState.zeros(2, 4, 8))
    np.testing.assert_allclose(out.data, tokens.data + np.arange(8), atol=1e-6)
    assert np.all(state.b_sc.data == 0)


def test_zero_tokens_inject_batch_norm_beta():
    up = SaToScBridge(8, 4, 2, RngState(1), "u")
    up.norm.bias.data[...] = [1.0, -2.0, 0.5, 3.0]
    z = Tensor(np.random.default_rng(0).standard_normal((2, 4, 4, 4)).astype(np.float32))
    out, _ = up(Tensor(np.zeros((2, 4, 8), np.float32)), z, BridgeState.zeros(2, 4, 8))
    np.testing.assert_allclose(out.data, z.data + np.array([1.0, -2.0, 0.5, 3.0])[None, :, None, None], atol=1e-6)


# -- bridge transcription -------------------------------------------------------------------
#
# The scripted versions below spell each bridge step out with bare primitives and the
# module's own weights.  They share no control flow with the bridge classes, so exact
# equality pins down both the operation order and the accumulator bookkeeping.


def script_sc_to_sa(z, tokens, b, w, bias, gamma, beta, factor, eps):
    n = z.shape[0]
    down = F.avg_pool2d(z, factor, factor)
    u = F.conv2d(down, w, bias)
    d, g = u.shape[1], u.shape[2]
    u = F.transpose(F.reshape(u, (n, d, g * g)), (0, 2, 1))
    b_next = F.add(u, b)
    return F.add(tokens, F.layer_norm(F.add(u, b_next), gamma, beta, eps)), b_next


def script_sa_to_sc(tokens, z, b, w, bn, factor):
    n, t, d = tokens.shape
    g = int(round(t**0.5))
    m = F.reshape(F.transpose(tokens, (0, 2, 1)), (n, d, g, g))
    b_next = F.add(m, b)
    v = F.interpolate_nearest(F.conv2d(F.add(m, b_next), w, None), factor)
    v = F.batch_norm(v, bn.weight, bn.bias, bn.running_mean, bn.running_var, bn.training, bn.momentum, bn.eps)
    return F.add(z, v), b_next


def _bridge_pair(seed, index, accum="additive", c=6, d=8, factor=2):
    rng = RngState(seed)
    down = ScToSaBridge(c, d, factor, rng, f"d{index}", accum=accum, index=index)
    up = SaToScBridge(d, c, factor, rng, f"u{index}", accum=accum, index=index)
    g = np.random.default_rng(seed + 1000 * index)
    for mod in (down, up):
        for _, p in mod.named_parameters():
            p.data[...] = g.uniform(-1, 1, p.shape).astype(np.float32)
    return down, up


def _inputs(seed, steps, n=2, c=6, d=8, side=8, factor=2):
    g = np.random.default_rng(seed)
    t = (side // factor) ** 2
    zs = [Tensor(g.standard_normal((n, c, side, side)).astype(np.float32)) for _ in range(steps)]
    tokens = [Tensor(g.standard_normal((n, t, d)).astype(np.float32)) for _ in range(steps)]
    return zs, tokens


def test_single_bridge_step_matches_transcription():
    down, up = _bridge_pair(17, 1)
    (z,), (tok,) = _inputs(17, 1)
    state = BridgeState.zeros(2, 16, 8)
    got_tokens, state = down(z, tok, state)
    got_z, state = up(got_tokens, z, state)

    b0_sc = Tensor(np.zeros((2, 16, 8), np.float32))
    b0_sa = Tensor(np.zeros((2, 8, 4, 4), np.float32))
    want_tokens, b_sc = script_sc_to_sa(z, tok, b0_sc, down.proj.weight, down.proj.bias, down.norm.weight, down.norm.bias, 2, down.norm.eps)
    up.norm.running_mean.data[...] = 0
    up.norm.running_var.data[...] = 1
    want_z, b_sa = script_sa_to_sc(want_tokens, z, b0_sa, up.proj.weight, up.norm, 2)
    np.testing.assert_array_equal(got_tokens.data, want_tokens.data)
    np.testing.assert_array_equal(got_z.data, want_z.data)
    np.testing.assert_array_equal(state.b_sc.data, b_sc.data)
    np.testing.assert_array_equal(state.b_sa.data, b_sa.data)
    assert state.layer_index == 1


def test_first_bridge_reduces_to_projection():
    down, _ = _bridge_pair(17, 1)
    (z,), (tok,) = _inputs(17, 1)
    _, state = down(z, tok, BridgeState.zeros(2, 16, 8))
    np.testing.assert_array_equal(state.b_sc.data, down.project(z).data)


@pytest.mark.parametrize("steps", [1, 2, 5, 12])
def test_additive_recurrence_matches_unrolled(steps):
    """L incremental bridge steps equal the unrolled recurrence: every step's injection
    uses u_L + (u_L + b_(L-1)) where b is the running sum of all earlier projections."""
    pairs = [_bridge_pair(40 + i, 1) for i in range(steps)]
    zs, toks = _inputs(41, steps)
    state = BridgeState.zeros(2, 16, 8)
    got = []
    for (down, up), z, tok in zip(pairs, zs, toks):
        t_out, state = down(z, tok, state)
        z_out, state = up(tok, z, state)
        got.append((t_out.data, z_out.data))
    assert state.layer_index == steps

    # unrolled: all projections first, then prefix sums, then injections
    us = [map_to_tokens(down.proj(F.avg_pool2d(z, 2, 2))) for (down, _), z in zip(pairs, zs)]
    ms = [tokens_to_map(tok) for tok in toks]
    b_sc = [Tensor(np.zeros((2, 16, 8), np.float32))]
    b_sa = [Tensor(np.zeros((2, 8, 4, 4), np.float32))]
    for u, m in zip(us, ms):
        b_sc.append(F.add(u, b_sc[-1]))
        b_sa.append(F.add(m, b_sa[-1]))
    for i, ((down, up), z, tok) in enumerate(zip(pairs, zs, toks)):
        want_t = F.add(tok, down.norm(F.add(us[i], b_sc[i + 1])))
        want_z = F.add(z, up.norm(F.interpolate_nearest(up.proj(F.add(ms[i], b_sa[i + 1])), 2)))
        np.testing.assert_array_equal(got[i][0], want_t.data)
        np.testing.assert_array_equal(got[i][1], want_z.data)
    np.testing.assert_array_equal(state.b_sc.data, b_sc[-1].data)
    np.testing.assert_array_equal(state.b_sa.data, b_sa[-1].data)


@pytest.mark.parametrize("steps", [1, 3, 12])
def test_concat_recurrence_matches_unrolled(steps):
    pairs = [_bridge_pair(60 + i, i + 1, accum="concat") for i in range(steps)]
    zs, toks = _inputs(61, steps)
    state = BridgeState.zeros(2, 16, 8)
    got = []
    for (down, up), z, tok in zip(pairs, zs, toks):
        t_out, state = down(z, tok, state)
        z_out, state = up(tok, z, state)
        got.append((t_out.data, z_out.data))
    assert len(state.history_sc) == len(state.history_sa) == state.layer_index == steps

    us = [map_to_tokens(down.proj(F.avg_pool2d(z, 2, 2))) for (down, _), z in zip(pairs, zs)]
    ms = [tokens_to_map(tok) for tok in toks]
    for i, ((down, up), z, tok) in enumerate(zip(pairs, zs, toks)):
        if i == 0:
            b_t, b_m = us[0], ms[0]
        else:
            b_t = map_to_tokens(down.fuse(tokens_to_map(F.concat(us[: i + 1], axis=-1))))
            b_m = up.fuse(F.concat(ms[: i + 1], axis=1))
        want_t = F.add(tok, down.norm(F.add(us[i], b_t)))
        want_z = F.add(z, up.norm(F.interpolate_nearest(up.proj(F.add(ms[i], b_m)), 2)))
        np.testing.assert_array_equal(got[i][0], want_t.data)
        np.testing.assert_array_equal(got[i][1], want_z.data)


# -- branch decoupling ------------------------------------------------------------------------


@pytest.mark.parametrize("accum", ["additive", "concat"])
@pytest.mark.parametrize("training", [True, False])
def test_zeroed_bridges_decouple_branches(accum, training):
    model = build_model(ModelConfig.preset("nano", bridge_accum=accum), RngState(5))
    for _, p in model.bridge_parameters():
        p.data[...] = 0
    x = images(4, 32, 3)
    model.train(training)
    lsc, lsa, _ = model.forward(x)
    model.train(training)
    np.testing.assert_array_equal(lsc.data, model.forward_sc_only(x).data)
    np.testing.assert_array_equal(lsa.data, model.forward_sa_only(x).data)


def test_live_bridges_couple_branches():
    model = build_model(ModelConfig.preset("nano"), RngState(5))
    x = images(4, 32, 3)
    lsc, _, _ = model.forward(x)
    assert not np.array_equal(lsc.data, model.forward_sc_only(x).data)


# -- determinism / gradients ---------------------------------------------------------------------


def test_forward_is_bit_identical_across_runs():
    outs = []
    for _ in range(2):
        model = build_model(ModelConfig.preset("nano"), RngState(21))
        lsc, lsa, _ = model.forward(images(2, 32, 21), training=True)
        outs.append((lsc.data.copy(), lsa.data.copy()))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    np.testing.assert_array_equal(outs[0][1], outs[1][1])


def test_identical_batch_items_give_identical_rows():
    model = build_model(ModelConfig.preset("nano"), RngState(0))
    gray = Tensor(np.full((2, 3, 32, 32), 0.5, np.float32))
    lsc, lsa, _ = model.forward(gray, training=False)
    np.testing.assert_array_equal(lsc.data[0], lsc.data[1])
    np.testing.assert_array_equal(lsa.data[0], lsa.data[1])


def test_eval_mode_batch_independence():
    model = build_model(ModelConfig.preset("nano"), RngState(2)).eval()
    x = images(3, 32, 4)
    full, _, _ = model.forward(x)
    single, _, _ = model.forward(Tensor(x.data[1:2]))
    np.testing.assert_allclose(full.data[1:2], single.data, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("accum", ["additive", "concat"])
def test_gradient_reaches_every_parameter(accum):
    model = build_model(ModelConfig.preset("nano", bridge_accum=accum, down_mode="strided_conv"), RngState(3))
    randomize(model, 3)
    lsc, lsa, _ = model.forward(images(2, 32, 5), training=True)
    F.add(F.sum(F.mul(lsc, lsc)), F.sum(F.mul(lsa, lsa))).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert np.any(p.grad != 0), name


def _uniform_params(modules, seed):
    g = np.random.default_rng(seed)
    for mod in modules:
        for _, p in mod.named_parameters():
            p.data[...] = g.uniform(-1, 1, p.shape).astype(np.float32)


@pytest.mark.parametrize("training", [True, False])
def test_micro_model_end_to_end_gradients(training):
    """Float32 backward against a float64 finite-difference oracle.  Conv biases that feed a
    training-mode BatchNorm have gradients far below float32 loss resolution at h=1e-3, so the
    oracle is evaluated on the float64 reference path."""
    cfg = ModelConfig.preset("micro")
    assert cfg.input_size == (8, 8) and cfg.num_blocks == 1 and cfg.embed_dim == 8
    model = build_model(cfg, RngState(11))
    _uniform_params([model], 11)
    model.train(training)
    x = Tensor(np.random.default_rng(11).uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32), requires_grad=True)
    r = np.random.default_rng(12).standard_normal((2, 3)).astype(np.float32)

    def loss():
        lsc, lsa, _ = model.forward(x, training=training)
        return F.sum(F.mul(fuse_logits(lsc, lsa), Tensor(r)))

    errs = check_gradients(loss, [x] + model.parameters(), reference=True)
    assert max(errs.values()) <= 1e-2, {k: v for k, v in errs.items() if v > 1e-2}


@pytest.mark.parametrize("accum,index", [("additive", 1), ("concat", 2)])
def test_dcu_step_gradients(accum, index):
    down, up = _bridge_pair(19, index, accum=accum, c=3, d=4)
    _uniform_params([down, up], 19)
    g = np.random.default_rng(19)
    z = Tensor(g.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32), requires_grad=True)
    tok = Tensor(g.uniform(-1, 1, (2, 4, 4)).astype(np.float32), requires_grad=True)
    state = BridgeState(
        Tensor(g.uniform(-1, 1, (2, 4, 4)).astype(np.float32)),
        Tensor(g.uniform(-1, 1, (2, 4, 2, 2)).astype(np.float32)),
        index - 1,
        [Tensor(g.uniform(-1, 1, (2, 4, 4)).astype(np.float32)) for _ in range(index - 1)],
        [Tensor(g.uniform(-1, 1, (2, 4, 2, 2)).astype(np.float32)) for _ in range(index - 1)],
    )
    r1 = Tensor(g.standard_normal((2, 4, 4)).astype(np.float32))
    r2 = Tensor(g.standard_normal((2, 3, 4, 4)).astype(np.float32))
    # eval-mode BN with random statistics: a training-mode BN would cancel any per-channel
    # constant (such as the fuse bias), leaving a gradient that is exactly zero
    up.eval()
    up.norm.running_mean.data[...] = g.uniform(-1, 1, 3)
    up.norm.running_var.data[...] = g.uniform(0.5, 2, 3)

    def loss():
        t_out, st = down(z, tok, state)
        z_out, _ = up(t_out, z, st)
        return F.add(F.sum(F.mul(t_out, r1)), F.sum(F.mul(z_out, r2)))

    params = [p for m in (down, up) for _, p in m.named_parameters()]
    errs = check_gradients(loss, [z, tok] + params)
    assert max(errs.values()) <= 1e-2, errs


def test_training_batch_norm_cancels_per_channel_constant():
    down, up = _bridge_pair(19, 2, accum="concat", c=3, d=4)
    g = np.random.default_rng(5)
    tok = Tensor(g.uniform(-1, 1, (2, 4, 4)).astype(np.float32))
    z = Tensor(g.uniform(-1, 1, (2, 3, 4, 4)).astype(np.float32))
    state = BridgeState.zeros(2, 4, 4)
    state.history_sa.append(Tensor(g.uniform(-1, 1, (2, 4, 2, 2)).astype(np.float32)))
    r = Tensor(g.standard_normal((2, 3, 4, 4)).astype(np.float32))
    F.sum(F.mul(up(tok, z, state)[0], r)).backward()
    assert np.abs(up.fuse.bias.grad).max() < 1e-5
    assert np.abs(up.fuse.weight.grad).max() > 1e-3


# -- head fusion ------------------------------------------------------------------------------


def test_fuse_logits_modes():
    a = Tensor(np.array([[1.0, -2.0, 3.0]], np.float32))
    b = Tensor(np.array([[3.0, 0.0, -1.0]], np.float32))
    np.testing.assert_array_equal(fuse_logits(a, a).data, a.data)
    np.testing.assert_array_equal(fuse_logits(a, b, "sc_only").data, a.data)
    np.testing.assert_array_equal(fuse_logits(a, b, "sa_only").data, b.data)
    np.testing.assert_array_equal(fuse_logits(a, F.neg(a)).data, np.zeros((1, 3), np.float32))
    np.testing.assert_array_equal(fuse_logits(a, b).data, [[2.0, -1.0, 1.0]])
    with pytest.raises(DimensionError):
        fuse_logits(a, Tensor(np.zeros((1, 2), np.float32)))
