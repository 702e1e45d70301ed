"""Seeded finite-difference checks over every differentiable building block."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import nn_core as nn
from .agent import bootstrap_values, prepare
from .feed_sim import feasible_actions, generate_offline_log, uniform_policy
from .model import DpinModel, q_forward

CaseFn = Callable[[dict[str, nn.Tensor]], nn.Tensor]

# Checked scalars are scaled to O(1e-3).  Softmax shift invariance makes some
# gradients exactly zero; their central differences are pure roundoff,
# about ulp(f) / eps, which must stay below the 1e-8 error floor.
OUTPUT_SCALE = 1e-3


def _weighted(out: nn.Tensor, rng: np.random.Generator) -> nn.Tensor:
    """Reduce to a scalar with random weights so every output coordinate matters."""
    return nn.sum_(out * (OUTPUT_SCALE * rng.normal(size=out.shape)))


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, CaseFn, dict[str, np.ndarray]]]:
    r = rng.normal
    K, d, n_c, m = 5, 6, 4, 3
    mask = rng.random((3, K)) < 0.7
    mask[:, 0] = True
    cases = [
        ("affine", lambda P: _weighted(nn.affine(P["x"], P["W"], P["b"]), np.random.default_rng(1)),
         {"x": r(size=(3, 4)), "W": r(size=(4, 5)), "b": r(size=5)}),
        ("mlp", lambda P: _weighted(nn.mlp(P["x"], [(P["w0"], P["b0"]), (P["w1"], P["b1"])]), np.random.default_rng(2)),
         {"x": r(size=(4, 3)), "w0": r(size=(3, 6)), "b0": r(size=6), "w1": r(size=(6, 2)), "b1": r(size=2)}),
        ("softmax_rows", lambda P: _weighted(nn.softmax_rows(P["M"], mask), np.random.default_rng(3)),
         {"M": r(size=(3, K))}),
        ("sdpa", lambda P: _weighted(nn.sdpa(P["Q"], P["K"], P["V"], 2.0, mask[:, None, :]), np.random.default_rng(4)),
         {"Q": r(size=(3, 2, 4)), "K": r(size=(3, K, 4)), "V": r(size=(3, K, 4))}),
        ("conv_page", lambda P: _weighted(nn.conv_page(P["E"], P["k"], P["b"]), np.random.default_rng(5)),
         {"E": r(size=(2, K, d)), "k": r(size=(n_c, m, d)), "b": r(size=n_c)}),
        ("avg_pool_rows", lambda P: _weighted(nn.avg_pool_rows(P["M"]), np.random.default_rng(6)),
         {"M": r(size=(2, K, 3))}),
        ("take_rows", lambda P: _weighted(nn.take_rows(P["T"], np.array([[0, 2, 2], [1, 0, 3]])), np.random.default_rng(7)),
         {"T": r(size=(4, 3))}),
        ("mask_fill_concat", lambda P: _weighted(nn.concat([nn.mask_fill(P["a"], mask), P["a"]], axis=-1),
                                                 np.random.default_rng(8)),
         {"a": r(size=(3, K))}),
    ]
    return cases


def model_case(cfg, seed: int, n_states: int = 3) -> tuple[CaseFn, nn.ParamSet]:
    """Weighted sum of Q over every feasible action of a few logged states."""
    world_log = generate_offline_log(uniform_policy, n_states, cfg.sim, seed=seed)
    states = [tr.state for tr in world_log.transitions][:n_states]
    model = DpinModel(cfg.model, cfg.sim.feature_space())
    batch = model.encode(states, [feasible_actions(s, cfg.sim) for s in states])
    weights = OUTPUT_SCALE * np.random.default_rng(seed).normal(size=batch.action_mask.shape) * batch.action_mask
    params = model.init_params(seed)
    return (lambda P: nn.sum_(q_forward(P, batch, model.cfg) * weights)), params


def td_case(cfg, seed: int, n: int = 4) -> tuple[CaseFn, nn.ParamSet]:
    """Gradient of the TD loss on a seeded batch of ``n`` transitions (bootstrap held fixed)."""
    log = generate_offline_log(uniform_policy, n, cfg.sim, seed=seed)
    model = DpinModel(cfg.model, cfg.sim.feature_space())
    data = prepare(log.transitions[:n], model, cfg.sim)
    online = model.init_params(seed)
    target = model.init_params(seed + 1)
    y = data.reward + cfg.training.gamma * bootstrap_values(data, target, model)

    def fn(P):
        q = nn.reshape(q_forward(P, data.cur, model.cfg), (len(data),))
        err = nn.add(q, -y)
        return nn.mean(err * err) * OUTPUT_SCALE

    return fn, online


@dataclass
class SuiteResult:
    max_rel_error: float
    worst: str
    n_instances: int
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= 1e-4


def run_suite(cfg, n_instances: int = 20, eps: float = 1e-6, max_coords: int = 4,
              base_seed: int = 0, include_model: bool = True) -> SuiteResult:
    """Every primitive plus end-to-end Q on ``n_instances`` seeds."""
    worst, where, checked = 0.0, "", 0
    for i in range(n_instances):
        seed = base_seed + i
        rng = np.random.default_rng(seed)
        cases = [(name, fn, p, None) for name, fn, p in primitive_cases(rng)]
        if include_model:
            fn, params = model_case(cfg, seed)
            cases.append(("q_value", fn, params, max_coords))
            if i % 4 == 0:
                fn, params = td_case(cfg, seed)
                cases.append(("td_loss", fn, params, max_coords))
        for name, fn, params, mc in cases:
            rep = nn.grad_check(fn, params, eps=eps, max_coords=mc, rng=np.random.default_rng(seed))
            checked += rep.n_checked
            err = rep.max_rel_error if rep.ok else float("inf")
            if err > worst or not where:
                worst, where = err, f"{name}[seed {seed}]:{rep.worst_path}"
    return SuiteResult(worst, where, n_instances, checked)
