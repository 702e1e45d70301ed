from dataclasses import replace

import numpy as np
import pytest

from dpin.errors import ConfigError
from dpin.feed_sim import SimConfig, World, feasible_actions, make_world, sample_responses
from dpin.harness import (
    METRICS_HEADER,
    PRESETS,
    TABLE_NAMES,
    VARIANTS,
    ExperimentConfig,
    MetricsRow,
    evaluate_policy,
    load_config,
    metrics_csv,
    oracle_config,
    oracle_initial_states,
    read_metrics,
    run_ablation,
    tiny_config,
    value_iteration_oracle,
    write_metrics,
)
from dpin.model import DpinModel
from dpin.page_features import arrange

# -- configuration ----------------------------------------------------------


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_config_round_trip(name):
    cfg = load_config(name)
    assert ExperimentConfig.from_toml(cfg.to_toml()) == cfg
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_reference_config_snapshot():
    cfg = load_config("reference")
    m, t = cfg.model, cfg.training
    assert m.seq_len == 10 and m.n_channels == 5 and m.receptive_fields == (1, 2, 3, 4, 5)
    assert m.mlp1_widths == (128, 64, 32)
    assert m.mlp2_widths[:3] == m.mlp3_widths[:3] == (128, 64, 32)
    assert m.n_c == 16 and m.ipiu_heads == 2 and m.d_h == 32
    assert (t.learning_rate, t.tau, t.batch_size, t.gamma) == (1e-3, 0.9, 8192, 0.95)
    assert m.mcim_width == 1280


def test_desk_config_only_shrinks_scale():
    ref, desk = load_config("reference").to_dict(), load_config("desk").to_dict()
    diffs = {(sec, k) for sec in ("sim", "model", "training", "data", "eval")
             for k in set(ref[sec]) | set(desk[sec]) if ref[sec].get(k) != desk[sec].get(k)}
    assert diffs == {("training", "batch_size"), ("training", "epochs"), ("data", "requests"),
                     ("eval", "episodes")}
    assert desk["training"]["batch_size"] == 256


def test_unknown_keys_rejected():
    d = load_config("tiny").to_dict()
    d["model"]["n_chanels"] = 3
    with pytest.raises(ConfigError, match="n_chanels"):
        ExperimentConfig.from_dict(d)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"simulator": {}})
    with pytest.raises(ConfigError):
        load_config("tiny").with_overrides({"nope.x": "1"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_toml("[sim\nK = 3")


def test_overrides_and_channel_sweep():
    for T in (1, 3, 5):
        cfg = load_config("desk").with_overrides({"model.n_channels": str(T), "training.learning_rate": "0.01"})
        assert cfg.model.n_channels == T and cfg.model.receptive_fields == tuple(range(1, T + 1))
        assert cfg.model.mcim_width == 8 * T * cfg.model.d_h
        assert cfg.training.learning_rate == 0.01


def test_config_file_and_env(tmp_path, monkeypatch):
    path = tmp_path / "c.toml"
    path.write_text(load_config("tiny").to_toml())
    assert load_config(str(path)) == load_config("tiny")
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "missing.toml"))
    monkeypatch.setenv("DPIN_OUTPUT_DIR", str(tmp_path / "out"))
    assert load_config("tiny").resolved_output_dir() == tmp_path / "out"


# -- metrics files ----------------------------------------------------------


def test_metrics_csv_round_trip(tmp_path):
    rows = [MetricsRow("full-s0", 0, "full", 3, 1.25, 0.5, 0.175, 0.01),
            MetricsRow("no_cl-s1", 1, "no_cl", 3, 0.1 + 0.2, 0.0, 1 / 3, float("nan"))]
    text = metrics_csv(rows)
    assert text.splitlines()[0] == ",".join(METRICS_HEADER)
    assert len(text.splitlines()) == 3
    write_metrics(tmp_path / "m.csv", rows)
    back = read_metrics(tmp_path / "m.csv")
    assert back[0] == rows[0]
    assert back[1].R_ad == 0.1 + 0.2 and np.isnan(back[1].loss)


# -- evaluation -------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_world():
    cfg = tiny_config()
    return cfg, make_world(cfg.sim)


def test_zero_network_shows_no_ads(tiny_world):
    cfg, world = tiny_world
    model = DpinModel(cfg.model, cfg.sim.feature_space())
    params = model.init_params(0)
    for k in params.names():
        params[k] = np.zeros_like(params[k])
    traces = []
    row = evaluate_policy(params, model, world, 20, seed=4, traces=traces)
    assert row.R_ad == 0.0
    assert all(sum(a.bits) == 0 for t in traces for a in t.actions)


def test_evaluation_is_deterministic_and_sums_traces(tiny_world):
    cfg, world = tiny_world
    model = DpinModel(cfg.model, cfg.sim.feature_space())
    params = model.init_params(3)
    traces = []
    a = evaluate_policy(params, model, world, 25, seed=1, traces=traces)
    b = evaluate_policy(params, model, world, 25, seed=1)
    assert a == b
    assert a.R_ad == pytest.approx(sum(x for t in traces for x in t.r_ad), abs=1e-12)
    assert a.R_fee == pytest.approx(sum(x for t in traces for x in t.r_fee), abs=1e-12)
    assert a.mean_episode_reward == pytest.approx((a.R_ad + a.R_fee) / 25)
    assert a.R_ad > 0


def test_ablation_table_shape_and_names():
    cfg = tiny_config()
    rows = run_ablation(cfg, seeds=[0, 1])
    assert len(rows) == len(VARIANTS) * 2
    assert [(r.variant, r.seed) for r in rows] == sorted((v, s) for v in VARIANTS for s in (0, 1))
    assert set(TABLE_NAMES) == set(VARIANTS)
    assert TABLE_NAMES == {
        "full": "DPIN", "no_cl": "w/o CL", "no_ipau": "w/o IPAU", "no_ipiu": "w/o IPIU", "no_mcim": "w/o MCIM",
        "drop_pulldown_leave": "w/o {E^p}&{E^l}", "drop_pulldown_leave_click": "w/o {E^p}&{E^l}&{E^c}",
    }
    again = run_ablation(cfg, seeds=[0, 1])
    assert metrics_csv(rows) == metrics_csv(again)


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError):
        run_ablation(tiny_config(), seeds=[0], variants=["full", "no_attention"])


# -- value-iteration oracle -------------------------------------------------


def one_page(cfg: SimConfig, **kw) -> SimConfig:
    return replace(cfg, max_pages=1, **kw)


def test_single_page_oracle_matches_monte_carlo():
    world = World(one_page(oracle_config().sim))
    res = value_iteration_oracle(world, gamma=0.95)
    s = oracle_initial_states(world)[0]
    user = world.users[s.user.user_id]
    rng = np.random.default_rng(0)
    n = 1_000_000
    for a in feasible_actions(s, world.cfg)[::3]:
        page = arrange(s, a)
        bids = np.array([it.bid if it.is_ad else 0.0 for it in page.items])
        fees = np.array([it.fee_rate * it.price for it in page.items])
        clicks, orders, _ = sample_responses(page, user, rng, world, n)
        r = clicks @ bids + orders @ fees
        mean, se = r.mean(), r.std(ddof=1) / np.sqrt(n)
        assert abs(res.q_star(s, a) - mean) <= 3 * se


def test_zero_discount_equals_one_page():
    sim = oracle_config().sim
    two = value_iteration_oracle(World(sim), gamma=0.0)
    one = value_iteration_oracle(World(one_page(sim)), gamma=0.0)
    first = [k for k in two.keys if k[-1] == 0]
    assert first
    for k in first:
        np.testing.assert_allclose(two.q[two.index[k]], one.q[one.index[k]], atol=1e-15)


def test_zero_rewards_give_zero_q():
    sim = replace(oracle_config().sim, bid_range=(0.0, 0.0), fee_rate_range=(0.0, 0.0))
    res = value_iteration_oracle(World(sim), gamma=0.95)
    assert all(np.all(q == 0.0) for q in res.q)


def test_oracle_is_a_fixed_point():
    res = value_iteration_oracle(World(oracle_config().sim), gamma=0.95)
    after = res.backup()
    assert max(float(np.max(np.abs(a - b))) for a, b in zip(after, res.q)) <= 1e-10
    assert len(res) <= 10_000


def test_oracle_refuses_large_state_spaces():
    sim = replace(oracle_config().sim, n_catalog_ads=6, n_catalog_organics=6, ads_per_request=6,
                  organics_per_request=6, user_population=3)
    with pytest.raises(ConfigError, match=r"more than 5 states \(counted 6"):
        value_iteration_oracle(World(sim), gamma=0.95, max_states=5)


def test_oracle_needs_whole_catalog_requests():
    with pytest.raises(ConfigError):
        value_iteration_oracle(tiny_config().sim, gamma=0.95)
