import math

import numpy as np
import pytest

from dpin import nn_core as nn
from dpin.errors import ConfigError, WindowError
from dpin.feed_sim import feasible_actions, generate_offline_log, uniform_policy
from dpin.harness import tiny_config
from dpin.model import (
    DpinConfig,
    DpinModel,
    channel_forward,
    constants,
    denoise,
    denoise_weights,
    denoise_weights_concat,
    embed_batch,
    encode_page,
    ipau,
    ipiu_interact,
    mcim,
    q_forward,
)
from dpin.page_features import EncodedBatch, FeatureSpace


def relu(x):
    return np.maximum(x, 0.0)


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def mlp_oracle(x, layers):
    for i, (W, b) in enumerate(layers):
        x = x @ W + b
        if i < len(layers) - 1:
            x = relu(x)
    return x


@pytest.fixture(scope="module")
def tiny():
    cfg = tiny_config()
    log = generate_offline_log(uniform_policy, 12, cfg.sim, seed=3)
    states = [tr.state for tr in log.transitions]
    return cfg, states


def copy_batch(batch):
    return EncodedBatch(*(getattr(batch, f).copy() for f in batch.__dataclass_fields__))


def tiny_model(cfg, **flags):
    return DpinModel(cfg.model.with_ablation(**flags), cfg.sim.feature_space())


# -- IPAU / page encoding ---------------------------------------------------


def test_ipau_identical_rows_identity_maps():
    cfg = DpinConfig(n_channels=1, n_c=4, mlp1_widths=(4,), mlp2_widths=(4, 1), mlp3_widths=(4, 1), ipiu_heads=2)
    r = np.array([0.5, -1.0, 2.0, 3.0])
    P = {"c.ipau.wq": np.eye(4), "c.ipau.wk": np.eye(4), "c.ipau.wv": np.eye(4),
         "c.mlp1.0.w": np.eye(4), "c.mlp1.0.b": np.zeros(4)}
    np.testing.assert_allclose(ipau(np.tile(r, (3, 1)), P, "c", cfg).data, r, atol=1e-14)


def test_ipau_width_default():
    cfg = DpinConfig()
    rng = np.random.default_rng(0)
    P = {f"c.ipau.{w}": rng.normal(size=(16, 16)) for w in ("wq", "wk", "wv")}
    P.update(nn.init_mlp(rng, "c.mlp1", 16, cfg.mlp1_widths))
    assert ipau(rng.normal(size=(3, 16)), P, "c", cfg).shape == (32,)


def test_ipau_matches_stepwise_oracle():
    rng = np.random.default_rng(1)
    cfg = DpinConfig(n_channels=1, n_c=4, mlp1_widths=(6, 4), mlp2_widths=(4, 1), mlp3_widths=(4, 1))
    H1 = rng.normal(size=(3, 4))
    P = {f"c.ipau.{w}": rng.normal(size=(4, 4)) for w in ("wq", "wk", "wv")}
    P.update(nn.init_mlp(rng, "c.mlp1", 4, (6, 4)))
    Q, K, V = H1 @ P["c.ipau.wq"], H1 @ P["c.ipau.wk"], H1 @ P["c.ipau.wv"]
    S = Q @ K.T / math.sqrt(4)
    H2 = np.array([softmax(row) for row in S]) @ V
    want = mlp_oracle(H2.mean(axis=0), [(P["c.mlp1.0.w"], P["c.mlp1.0.b"]), (P["c.mlp1.1.w"], P["c.mlp1.1.b"])])
    np.testing.assert_allclose(ipau(H1, P, "c", cfg).data, want, atol=1e-10, rtol=0)


def test_encode_page_shapes_and_window_error():
    cfg = DpinConfig(n_channels=3, n_c=8, d_item=8, d_pos=4, d_fb=4, mlp1_widths=(8,), mlp2_widths=(4, 1),
                     mlp3_widths=(4, 1))
    space = FeatureSpace(n_items=10, K=5, user_cardinalities=(2,), context_cardinalities=(2,), n_page_buckets=2)
    P = constants(DpinModel(cfg, space).init_params(0))
    E = np.random.default_rng(0).normal(size=(5, 16))
    H1 = nn.conv_page(E, P["ch2.conv.w"], P["ch2.conv.b"])
    assert H1.shape == (3, 8)
    assert encode_page(E, P, "ch2", cfg).shape == (8,)
    a = encode_page(E, P, "ch2", cfg).data
    assert a.tobytes() == encode_page(E, P, "ch2", cfg).data.tobytes()
    with pytest.raises(WindowError):
        encode_page(np.zeros((2, 16)), P, "ch2", cfg)


def test_receptive_field_wider_than_page_rejected():
    cfg = DpinConfig(n_channels=4)
    space = FeatureSpace(n_items=10, K=3, user_cardinalities=(2,), context_cardinalities=(2,), n_page_buckets=2)
    with pytest.raises(ConfigError):
        DpinModel(cfg, space).init_params(0)


# -- IPIU -------------------------------------------------------------------


def ipiu_oracle(h_t, seq, mask, P, heads):
    d = h_t.shape[0]
    dk = d // heads
    rows = np.vstack([h_t, seq])
    valid = np.concatenate([[True], mask])
    q = h_t @ P["wq"]
    k = rows @ P["wk"]
    v = rows @ P["wv"]
    out = np.zeros(d)
    for hd in range(heads):
        sl = slice(hd * dk, (hd + 1) * dk)
        s = np.array([q[sl] @ k[j, sl] / math.sqrt(dk) if valid[j] else -np.inf for j in range(len(rows))])
        out[sl] = softmax(s) @ v[:, sl]
    return out @ P["wo"]


def ipiu_params(rng, d):
    return {w: rng.normal(size=(d, d)) for w in ("wq", "wk", "wv", "wo")}


def test_ipiu_all_masked_gives_projected_target():
    rng = np.random.default_rng(0)
    P = ipiu_params(rng, 4)
    h_t = rng.normal(size=4)
    z = ipiu_interact(h_t, rng.normal(size=(3, 4)), np.zeros(3, bool), {f"x.{k}": v for k, v in P.items()}, "x", 2)
    np.testing.assert_allclose(z.data, h_t @ P["wv"] @ P["wo"], atol=1e-12)


def test_ipiu_identical_row_identity():
    h_t = np.array([1.0, -2.0, 0.5, 3.0])
    P = {f"x.{w}": np.eye(4) for w in ("wq", "wk", "wv", "wo")}
    z = ipiu_interact(h_t, h_t[None, :], np.ones(1, bool), P, "x", 1)
    np.testing.assert_allclose(z.data, h_t, atol=1e-14)


def test_ipiu_matches_multihead_oracle():
    rng = np.random.default_rng(2)
    P = ipiu_params(rng, 6)
    h_t, seq = rng.normal(size=6), rng.normal(size=(4, 6))
    mask = np.array([False, True, True, True])
    got = ipiu_interact(h_t, seq, mask, {f"x.{k}": v for k, v in P.items()}, "x", 2).data
    np.testing.assert_allclose(got, ipiu_oracle(h_t, seq, mask, P, 2), atol=1e-10, rtol=0)


# -- denoising --------------------------------------------------------------


def denoise_layers(rng, d):
    return [(rng.normal(size=(4 * d, 5)), rng.normal(size=5)), (rng.normal(size=(5, 1)), rng.normal(size=1))]


def test_denoise_single_page():
    rng = np.random.default_rng(0)
    pd = rng.normal(size=(3, 4))
    z = denoise(rng.normal(size=4), pd, np.array([False, False, True]), denoise_layers(rng, 4))
    np.testing.assert_allclose(z.data, pd[2], atol=1e-15)


def test_denoise_identical_pages():
    rng = np.random.default_rng(1)
    v = rng.normal(size=4)
    z = denoise(rng.normal(size=4), np.tile(v, (5, 1)), np.ones(5, bool), denoise_layers(rng, 4))
    np.testing.assert_allclose(z.data, v, atol=1e-14)


def test_denoise_empty_history_is_zero():
    rng = np.random.default_rng(1)
    z = denoise(rng.normal(size=4), rng.normal(size=(3, 4)), np.zeros(3, bool), denoise_layers(rng, 4))
    assert z.data.tolist() == [0.0] * 4


def test_denoise_matches_oracle_and_normalises():
    rng = np.random.default_rng(3)
    d = 4
    z_x, pd = rng.normal(size=d), rng.normal(size=(5, d))
    mask = np.array([True, True, False, True, True])
    layers = denoise_layers(rng, d)
    feats = np.hstack([pd, np.tile(z_x, (5, 1)), pd * z_x, pd - z_x])
    logits = mlp_oracle(feats, layers)[:, 0]
    w = np.where(mask, np.exp(logits - logits[mask].max()), 0.0)
    w /= w.sum()
    got_w = denoise_weights(z_x, pd, mask, layers).data
    np.testing.assert_allclose(got_w, w, atol=1e-12)
    assert np.all(got_w >= 0) and abs(got_w.sum() - 1) <= 1e-9
    np.testing.assert_allclose(denoise(z_x, pd, mask, layers).data, w @ pd, atol=1e-12)


def test_blockwise_first_layer_equals_concatenation():
    rng = np.random.default_rng(4)
    z_x, pd = rng.normal(size=(2, 3, 6)), rng.normal(size=(2, 1, 7, 6))
    mask = rng.random((2, 1, 7)) < 0.6
    layers = [(rng.normal(size=(24, 9)), rng.normal(size=9)), (rng.normal(size=(9, 4)), rng.normal(size=4)),
              (rng.normal(size=(4, 1)), rng.normal(size=1))]
    a = denoise_weights(z_x, pd, mask, layers).data
    b = denoise_weights_concat(z_x, pd, mask, layers).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- channel and whole network ---------------------------------------------


def _embedded(cfg, model, states, seed=0):
    params = model.init_params(seed)
    batch = model.encode(states, [feasible_actions(s, cfg.sim) for s in states])
    return params, batch


def test_channel_outputs_eight_vectors(tiny):
    cfg, states = tiny
    model = tiny_model(cfg)
    params, batch = _embedded(cfg, model, states[:2])
    P = constants(params)
    emb = embed_batch(P, batch, model.cfg)
    E_hist = {s: emb.E_hist[:, i : i + 1] for i, s in enumerate("ocpl")}
    E_hist = {s: nn.reshape(v, (2, 1) + v.shape[2:]) for s, v in E_hist.items()}
    masks = {s: batch.hist_mask[:, None, i] for i, s in enumerate("ocpl")}
    out = channel_forward(0, emb.E_t, E_hist, masks, P, model.cfg)
    assert list(out.parts) == ["z_o", "z_c", "z_p", "z_l", "z_p_o", "z_p_c", "z_p_l", "h_t"]
    for v in out.vectors():
        assert v.shape[-1] == model.cfg.d_h and np.all(np.isfinite(v.data))


def test_channel_with_empty_histories(tiny):
    cfg, states = tiny
    model = tiny_model(cfg)
    params, batch = _embedded(cfg, model, states[:1])
    batch.hist_mask[:] = False
    batch.hist_rows[:] = 0
    P = constants(params)
    emb = embed_batch(P, batch, model.cfg)
    E_hist = {s: nn.reshape(emb.E_hist[:, i : i + 1], (1, 1) + emb.E_hist.shape[2:]) for i, s in enumerate("ocpl")}
    masks = {s: batch.hist_mask[:, None, i] for i, s in enumerate("ocpl")}
    out = channel_forward(1, emb.E_t, E_hist, masks, P, model.cfg)
    h_t = out["h_t"].data
    for s in "ocpl":
        want = h_t @ params[f"ch1.ipiu.{s}.wv"] @ params[f"ch1.ipiu.{s}.wo"]
        np.testing.assert_allclose(out[f"z_{s}"].data, want, atol=1e-12)
    for x in "ocl":
        assert not out[f"z_p_{x}"].data.any()


def test_mcim_width():
    assert DpinConfig().mcim_width == 1280
    assert DpinConfig(n_channels=2, mlp1_widths=(8,), mlp2_widths=(4, 1), mlp3_widths=(4, 1)).mcim_width == 128


def test_mcim_width_matches_tensor(tiny):
    cfg, states = tiny
    model = tiny_model(cfg)
    params, batch = _embedded(cfg, model, states[:2])
    P = constants(params)
    out = mcim(P, embed_batch(P, batch, model.cfg), batch.hist_mask, model.cfg)
    assert out.shape[-1] == 8 * model.cfg.n_channels * model.cfg.d_h == model.cfg.mcim_width


def test_zero_weights_give_final_bias(tiny):
    cfg, states = tiny
    model = tiny_model(cfg)
    params = model.init_params(0)
    for k in params.names():
        params[k] = np.zeros_like(params[k])
    last = f"mlp3.{len(model.cfg.mlp3_widths) - 1}.b"
    params[last] = np.array([0.75])
    q = model.q_values(params, states[0], feasible_actions(states[0], cfg.sim))
    assert np.all(q == 0.75)


def test_padded_pages_are_airtight(tiny):
    cfg, states = tiny
    model = tiny_model(cfg)
    params, batch = _embedded(cfg, model, states)
    assert (~batch.hist_mask).any()
    base = q_forward(constants(params), batch, model.cfg).data
    rng = np.random.default_rng(0)
    pert = copy_batch(batch)
    pad = ~pert.hist_mask
    pert.hist_rows[pad] = rng.integers(0, cfg.sim.n_items + 2, size=pert.hist_rows[pad].shape)
    pert.hist_types[pad] = rng.integers(0, 2, size=pert.hist_types[pad].shape)
    p2 = params.copy()
    p2["emb.item"] = np.vstack([rng.normal(size=(1, params["emb.item"].shape[1])), params["emb.item"][1:]])
    got = q_forward(constants(p2), pert, model.cfg).data
    assert got.tobytes() == base.tobytes()


def test_channel_independence(tiny):
    cfg, states = tiny
    model = tiny_model(cfg)
    params, batch = _embedded(cfg, model, states[:3])
    P = constants(params)
    full = mcim(P, embed_batch(P, batch, model.cfg), batch.hist_mask, model.cfg).data
    zeroed = params.copy()
    for k in zeroed.names():
        if k.startswith("ch1."):
            zeroed[k] = np.zeros_like(zeroed[k])
    P0 = constants(zeroed)
    out = mcim(P0, embed_batch(P0, batch, model.cfg), batch.hist_mask, model.cfg).data
    w = model.cfg.channel_width * model.cfg.d_h
    np.testing.assert_array_equal(out[..., :w], full[..., :w])
    assert not np.allclose(out[..., w : 2 * w], full[..., w : 2 * w])


def test_no_ipiu_is_order_free_within_sequences(tiny):
    cfg, states = tiny
    model = tiny_model(cfg, no_ipiu=True)
    params, batch = _embedded(cfg, model, states)
    base = q_forward(constants(params), batch, model.cfg).data
    perm = copy_batch(batch)
    rng = np.random.default_rng(1)
    for b in range(perm.hist_rows.shape[0]):
        for j in range(4):
            order = rng.permutation(perm.hist_rows.shape[2])
            perm.hist_rows[b, j] = perm.hist_rows[b, j, order]
            perm.hist_types[b, j] = perm.hist_types[b, j, order]
            perm.hist_mask[b, j] = perm.hist_mask[b, j, order]
    np.testing.assert_allclose(q_forward(constants(params), perm, model.cfg).data, base, atol=1e-12)


@pytest.mark.parametrize("flags", [{}, {"no_cl": True}, {"no_ipau": True}, {"no_ipiu": True}, {"no_mcim": True},
                                   {"drop_pulldown_leave": True},
                                   {"drop_pulldown_leave": True, "drop_click": True}])
def test_every_variant_runs_and_removes_parameters(tiny, flags):
    cfg, states = tiny
    model = tiny_model(cfg, **flags)
    params, batch = _embedded(cfg, model, states[:2])
    q = q_forward(constants(params), batch, model.cfg).data
    assert q.shape == batch.action_mask.shape and np.all(np.isfinite(q))
    names = params.names()
    if flags.get("no_cl"):
        assert not any(".conv." in n for n in names)
    if flags.get("no_ipau"):
        assert not any(".ipau." in n for n in names)
    if flags.get("no_ipiu"):
        assert not any(".ipiu." in n or ".mlp2." in n for n in names)
    if flags.get("no_mcim"):
        assert not any(n.startswith("ch") for n in names)
    if flags.get("drop_pulldown_leave"):
        assert not any(".ipiu.p." in n or ".ipiu.l." in n or ".mlp2." in n for n in names)


def test_drop_variant_widths():
    base = DpinConfig()
    assert base.with_ablation(drop_pulldown_leave=True).channel_width == 3  # z_o, z_c, h_t
    assert base.with_ablation(drop_pulldown_leave=True, drop_click=True).channel_width == 2
    with pytest.raises(ConfigError):
        base.with_ablation(no_such_flag=True)


@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_gradient(seed):
    from dpin.gradcheck import model_case

    fn, params = model_case(tiny_config(), seed)
    rep = nn.grad_check(fn, params, eps=1e-6, max_coords=3, rng=np.random.default_rng(seed))
    assert rep.ok and rep.max_rel_error <= 1e-4, rep
