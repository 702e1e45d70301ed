"""Experiment configuration, evaluation, ablations and the tabular oracle."""

from __future__ import annotations

import csv
import io
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from . import nn_core as nn
from .agent import EpochRecord, greedy_policy, prepare, train
from .errors import ConfigError
from .feed_sim import (
    OfflineLog,
    SimConfig,
    State,
    World,
    apply_response,
    enumerate_responses,
    feasible_actions,
    generate_offline_log,
    has_feasible_action,
    make_world,
    run_episode,
    uniform_policy,
)
from .model import DpinConfig, DpinModel
from .page_features import Action, arrange

OUTPUT_ENV = "DPIN_OUTPUT_DIR"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    """How the offline training log is produced."""

    requests: int = 2000


@dataclass
class EvalConfig:
    episodes: int = 200
    seed: int = 1_000_003
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)  # ablation seeds

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.episodes < 1:
            raise ConfigError("eval.episodes must be >= 1")


SECTIONS = {"sim": SimConfig, "model": DpinConfig, "training": nn.TrainingHyper, "data": DataConfig,
            "eval": EvalConfig}


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    model: DpinConfig = field(default_factory=DpinConfig)
    training: nn.TrainingHyper = field(default_factory=nn.TrainingHyper)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"
    ablation_name: str | None = None

    @property
    def eval_episodes(self) -> int:
        return self.eval.episodes

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for name in SECTIONS:
            out[name] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in asdict(getattr(self, name)).items() if v is not None}
        # Default receptive fields follow n_channels, so a channel-count override stays valid.
        if out["model"]["receptive_fields"] == list(range(1, self.model.n_channels + 1)):
            del out["model"]["receptive_fields"]
        out["output_dir"] = self.output_dir
        if self.ablation_name is not None:
            out["ablation_name"] = self.ablation_name
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        unknown = set(d) - set(SECTIONS) - {"output_dir", "ablation_name"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for name, klass in SECTIONS.items():
            section = d.get(name, {})
            if not isinstance(section, Mapping):
                raise ConfigError(f"[{name}] must be a table")
            allowed = {f.name for f in fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            try:
                kw[name] = klass(**section)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        kw["output_dir"] = str(d.get("output_dir", "runs"))
        kw["ablation_name"] = d.get("ablation_name")
        return cls(**kw)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(tomllib.loads(text))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

    def with_overrides(self, overrides: Mapping[str, str]) -> "ExperimentConfig":
        """Apply ``section.key=value`` overrides; values are parsed as TOML literals."""
        d = self.to_dict()
        for dotted, raw in overrides.items():
            parts = dotted.split(".")
            try:
                value = tomllib.loads(f"v = {raw}")["v"]
            except tomllib.TOMLDecodeError:
                value = raw
            if len(parts) == 1:
                d[parts[0]] = value
            elif len(parts) == 2:
                if parts[0] not in SECTIONS:
                    raise ConfigError(f"unknown config section {parts[0]!r}")
                d[parts[0]][parts[1]] = value
            else:
                raise ConfigError(f"bad override key {dotted!r}")
        return ExperimentConfig.from_dict(d)


def reference_config() -> ExperimentConfig:
    """Full-width network and optimiser settings."""
    return ExperimentConfig(
        training=nn.TrainingHyper(learning_rate=1e-3, batch_size=8192, gamma=0.95, tau=0.9, epochs=10),
        data=DataConfig(requests=20000),
        eval=EvalConfig(episodes=1000),
    )


def desk_config() -> ExperimentConfig:
    """Reference structure with laptop-sized batches and data."""
    base = reference_config()
    return replace(base, training=replace(base.training, batch_size=256, epochs=5),
                   data=DataConfig(requests=2000), eval=replace(base.eval, episodes=200))


def tiny_config() -> ExperimentConfig:
    """K=3, two channels, d_h=8: small enough for exhaustive gradient checks."""
    sim = SimConfig(K=3, max_pages=3, max_ads_per_page=2, user_population=12, n_user_segments=3,
                    n_time_buckets=2, n_catalog_ads=8, n_catalog_organics=12, ads_per_request=4,
                    organics_per_request=6, history_window=3, warmup_sessions=2)
    model = DpinConfig(n_channels=2, n_c=4, seq_len=3, d_item=4, d_pos=2, d_fb=2, d_user=2, d_ctx=2,
                       mlp1_widths=(8,), mlp2_widths=(8, 1), mlp3_widths=(8, 1))
    return ExperimentConfig(sim=sim, model=model,
                            training=nn.TrainingHyper(batch_size=32, epochs=2),
                            data=DataConfig(requests=40), eval=EvalConfig(episodes=10, seeds=(0, 1)))


def oracle_config() -> ExperimentConfig:
    """An MDP small enough for exact value iteration: K=3, two pages, 4 ads and 4 organics."""
    sim = SimConfig(K=3, max_pages=2, max_ads_per_page=2, user_population=3, n_user_segments=3,
                    n_genders=1, n_time_buckets=1, n_catalog_ads=4, n_catalog_organics=4,
                    ads_per_request=4, organics_per_request=4, history_window=0, warmup_sessions=0,
                    affinity_scale=0.5, click_bias=0.0, interaction_strength=0.5, ad_fatigue=3.0,
                    pulldown_base=0.7, ad_aversion=0.3, bid_range=(0.2, 4.0), fee_rate_range=(0.0, 0.01),
                    order_rate_range=(0.0, 0.3), seed=3)
    model = DpinConfig(n_channels=2, n_c=8, seq_len=2, d_item=8, d_pos=4, d_fb=4, d_user=4, d_ctx=4,
                       mlp1_widths=(16,), mlp2_widths=(16, 1), mlp3_widths=(64, 32, 1))
    return ExperimentConfig(sim=sim, model=model,
                            training=nn.TrainingHyper(learning_rate=1e-3, batch_size=128, epochs=30, tau=0.9),
                            data=DataConfig(requests=4000), eval=EvalConfig(episodes=200, seeds=(0, 1, 2)))


def calibration_config() -> ExperimentConfig:
    """Simulator settings tuned to target history-length means of 4.63, 10.10, 39.4 and 12.68."""
    sim = SimConfig(max_pages=12, pulldown_base=0.84, ad_aversion=0.3, click_bias=-3.4, ad_fatigue=1.5,
                    ads_per_request=30, organics_per_request=60, history_window=13, warmup_sessions=13)
    base = desk_config()
    return replace(base, sim=sim)


def bench_config() -> ExperimentConfig:
    """Reduced widths and data for the multi-seed ablation on one CPU core."""
    sim = SimConfig(K=5, max_pages=3, max_ads_per_page=2, user_population=60, n_user_segments=6,
                    n_time_buckets=2, n_catalog_ads=30, n_catalog_organics=60, ads_per_request=6,
                    organics_per_request=12, history_window=4, warmup_sessions=4)
    model = DpinConfig(n_channels=3, n_c=8, seq_len=6, mlp1_widths=(16, 8), mlp2_widths=(16, 8, 1),
                       mlp3_widths=(32, 16, 1))
    return ExperimentConfig(sim=sim, model=model,
                            training=nn.TrainingHyper(batch_size=256, epochs=4),
                            data=DataConfig(requests=1500), eval=EvalConfig(episodes=300))


PRESETS = {
    "reference": reference_config,
    "desk": desk_config,
    "tiny": tiny_config,
    "oracle": oracle_config,
    "calibration": calibration_config,
    "bench": bench_config,
}


def load_config(name: str | os.PathLike) -> ExperimentConfig:
    """A preset name or the path of a TOML file."""
    if isinstance(name, str) and name in PRESETS:
        return PRESETS[name]()
    path = Path(name)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"config file not found: {path}") from exc
    return ExperimentConfig.from_toml(text)


# ---------------------------------------------------------------------------
# metrics


METRICS_HEADER = ("run_id", "seed", "variant", "epoch", "R_ad", "R_fee", "mean_episode_reward", "loss")


@dataclass
class MetricsRow:
    run_id: str
    seed: int
    variant: str
    epoch: int
    R_ad: float
    R_fee: float
    mean_episode_reward: float
    loss: float = float("nan")

    def as_record(self) -> list[str]:
        return [self.run_id, str(self.seed), self.variant, str(self.epoch),
                repr(float(self.R_ad)), repr(float(self.R_fee)), repr(float(self.mean_episode_reward)),
                repr(float(self.loss))]


def metrics_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.as_record())
    return buf.getvalue()


def write_metrics(path: str | os.PathLike, rows: Iterable[MetricsRow]) -> None:
    Path(path).write_text(metrics_csv(rows), encoding="utf-8")


def read_metrics(path: str | os.PathLike) -> list[MetricsRow]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != METRICS_HEADER:
            raise ConfigError(f"unexpected metrics header {header}")
        return [MetricsRow(r[0], int(r[1]), r[2], int(r[3]), float(r[4]), float(r[5]), float(r[6]), float(r[7]))
                for r in reader]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EpisodeTrace:
    r_ad: list[float]
    r_fee: list[float]
    actions: list[Action]


def evaluate_policy(params: nn.ParamSet, model: DpinModel, world: World, n_episodes: int, seed: int,
                    run_id: str = "eval", variant: str = "full", epoch: int = 0, loss: float = float("nan"),
                    traces: list | None = None, policy=None) -> MetricsRow:
    """Greedy episodes on a private copy of ``world``; R_ad and R_fee are summed over all steps."""
    world = world.copy()
    policy = policy or greedy_policy(params, model, world.cfg)
    r_ad = r_fee = 0.0
    for ep in range(n_episodes):
        trs = run_episode(world, policy, seed, ep)
        ep_ad = [tr.r_ad for tr in trs]
        ep_fee = [tr.r_fee for tr in trs]
        r_ad += sum(ep_ad)
        r_fee += sum(ep_fee)
        if traces is not None:
            traces.append(EpisodeTrace(ep_ad, ep_fee, [tr.action for tr in trs]))
    return MetricsRow(run_id, seed, variant, epoch, r_ad, r_fee, (r_ad + r_fee) / n_episodes, loss)


# ---------------------------------------------------------------------------
# ablations


VARIANTS: dict[str, dict[str, bool]] = {
    "full": {},
    "no_cl": {"no_cl": True},
    "no_ipau": {"no_ipau": True},
    "no_ipiu": {"no_ipiu": True},
    "no_mcim": {"no_mcim": True},
    "drop_pulldown_leave": {"drop_pulldown_leave": True},
    "drop_pulldown_leave_click": {"drop_pulldown_leave": True, "drop_click": True},
}

TABLE_NAMES = {
    "full": "DPIN",
    "no_cl": "w/o CL",
    "no_ipau": "w/o IPAU",
    "no_ipiu": "w/o IPIU",
    "no_mcim": "w/o MCIM",
    "drop_pulldown_leave": "w/o {E^p}&{E^l}",
    "drop_pulldown_leave_click": "w/o {E^p}&{E^l}&{E^c}",
}


def variant_config(base: DpinConfig, variant: str) -> DpinConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return base.with_ablation(**VARIANTS[variant])


def train_and_evaluate(cfg: ExperimentConfig, log: OfflineLog, world: World, variant: str, seed: int,
                       eval_world: World | None = None) -> tuple[nn.ParamSet, list[EpochRecord], MetricsRow]:
    model = DpinModel(variant_config(cfg.model, variant), cfg.sim.feature_space())
    hyper = replace(cfg.training, seed=seed)
    params, history = train(prepare(log.transitions, model, cfg.sim), hyper, model, cfg.sim)
    loss = history[-1].loss if history else float("nan")
    row = evaluate_policy(params, model, eval_world or world, cfg.eval.episodes, cfg.eval.seed,
                          run_id=f"{variant}-s{seed}", variant=variant, epoch=hyper.epochs, loss=loss)
    row.seed = seed
    return params, history, row


def run_ablation(cfg: ExperimentConfig, seeds: Sequence[int] | None = None,
                 variants: Sequence[str] = tuple(VARIANTS)) -> list[MetricsRow]:
    """Train and evaluate every variant on the same per-seed log; rows sorted by (variant, seed)."""
    seeds = tuple(cfg.eval.seeds if seeds is None else seeds)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    base_world = make_world(cfg.sim)
    rows = []
    for seed in seeds:
        world = base_world.copy()
        log = generate_offline_log(uniform_policy, cfg.data.requests, cfg.sim, seed=seed, world=world)
        for v in variants:
            rows.append(train_and_evaluate(cfg, log, world, v, seed, eval_world=base_world)[2])
    return sorted(rows, key=lambda r: (r.variant, r.seed))


# ---------------------------------------------------------------------------
# exact value iteration on enumerable MDPs


def oracle_key(s: State) -> tuple:
    """Everything the dynamics depend on; histories only feed the network."""
    return (s.user.user_id, tuple(s.context), tuple(it.item_id for it in s.ads),
            tuple(it.item_id for it in s.organics), s.page_index)


def oracle_initial_states(world: World) -> list[State]:
    cfg = world.cfg
    if cfg.ads_per_request != cfg.n_catalog_ads or cfg.organics_per_request != cfg.n_catalog_organics:
        raise ConfigError("the oracle needs requests that contain the whole catalog")
    ads = sorted(world.ad_ids.tolist(), key=lambda i: -world.rank_score[i])
    orgs = sorted(world.organic_ids.tolist(), key=lambda i: -world.rank_score[i])
    return [world.initial_state(u.user_id, tb, ads, orgs)
            for u in world.users for tb in range(cfg.n_time_buckets)]


def _count_states(world: World, cap: int) -> int:
    """States reachable by actions alone (upper bound on the oracle table), stopping at ``cap``."""
    cfg = world.cfg
    seen = set()
    frontier = [(s, oracle_key(s)) for s in oracle_initial_states(world)]
    while frontier and len(seen) < cap:
        s, key = frontier.pop()
        if key in seen:
            continue
        seen.add(key)
        if s.page_index + 1 >= cfg.max_pages:
            continue
        for a in feasible_actions(s, cfg):
            n = a.n_ads
            nxt = State(ads=s.ads[n:], organics=s.organics[a.K - n:], user=s.user, context=s.context,
                        page_index=s.page_index + 1)
            if has_feasible_action(nxt, cfg):
                frontier.append((nxt, oracle_key(nxt)))
    return len(seen)


@dataclass
class OracleResult:
    gamma: float
    keys: list[tuple]
    actions: list[list[int]]  # feasible bit patterns per state key
    reward: list[np.ndarray]  # expected immediate reward per (state, action)
    successors: list[list[list[tuple[int, float]]]]  # (next state index, probability)
    q: list[np.ndarray]
    iterations: int
    index: dict[tuple, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.keys)

    def backup(self, q: list[np.ndarray] | None = None) -> list[np.ndarray]:
        q = self.q if q is None else q
        v = np.array([qs.max() for qs in q])
        return [np.array([r + self.gamma * sum(p * v[j] for j, p in succ) for r, succ in zip(rs, succs)])
                for rs, succs in zip(self.reward, self.successors)]

    def q_values(self, s: State) -> dict[int, float]:
        i = self.index[oracle_key(s)]
        return dict(zip(self.actions[i], self.q[i].tolist()))

    def q_star(self, s: State, a: Action) -> float:
        return self.q_values(s)[a.pattern]

    def best_patterns(self, s: State, tol: float = 1e-9) -> set[int]:
        qs = self.q_values(s)
        top = max(qs.values())
        return {p for p, v in qs.items() if v >= top - tol}

    def table(self) -> list[tuple[tuple, int, float]]:
        return [(k, p, float(v)) for k, pats, qs in zip(self.keys, self.actions, self.q) for p, v in zip(pats, qs)]


def value_iteration_oracle(world_or_cfg: World | SimConfig, gamma: float, max_states: int = 10_000,
                           tol: float = 1e-10, max_iter: int = 100_000) -> OracleResult:
    """Q* by Bellman backups with exact expectations over every user reaction."""
    world = world_or_cfg if isinstance(world_or_cfg, World) else World(world_or_cfg)
    cfg = world.cfg
    n_states = _count_states(world, max_states + 1)
    if n_states > max_states:
        raise ConfigError(f"state space has more than {max_states} states (counted {n_states} before stopping)")

    keys: list[tuple] = []
    index: dict[tuple, int] = {}
    reps: list[State] = []

    def intern(s: State) -> int:
        key = oracle_key(s)
        if key not in index:
            index[key] = len(keys)
            keys.append(key)
            reps.append(State(ads=s.ads, organics=s.organics, user=s.user, context=s.context,
                              page_index=s.page_index))
        return index[key]

    for s in oracle_initial_states(world):
        intern(s)
    actions, reward, successors = [], [], []
    i = 0
    while i < len(keys):
        s = reps[i]
        user = world.users[s.user.user_id]
        pats, rs, succs = [], [], []
        for a in feasible_actions(s, cfg):
            page = arrange(s, a)
            r = 0.0
            nxt: dict[int, float] = defaultdict(float)
            for p, resp in enumerate_responses(page, user, world):
                out = apply_response(s, a, resp, cfg)
                r += p * out.reward
                if not out.done:
                    nxt[intern(out.next_state)] += p
            pats.append(a.pattern)
            rs.append(r)
            succs.append(sorted(nxt.items()))
        actions.append(pats)
        reward.append(np.array(rs))
        successors.append(succs)
        i += 1

    res = OracleResult(gamma, keys, actions, reward, successors, [np.zeros(len(p)) for p in actions], 0, index)
    for it in range(1, max_iter + 1):
        new = res.backup()
        delta = max(float(np.max(np.abs(a - b))) for a, b in zip(new, res.q))
        res.q, res.iterations = new, it
        if delta < tol:
            break
    return res


def reachable_states(world: World, limit: int = 100_000) -> list[State]:
    """Every non-terminal full state (histories included) reachable with positive probability."""
    cfg = world.cfg
    seen: dict[State, None] = {}
    frontier = list(oracle_initial_states(world))
    while frontier:
        s = frontier.pop(0)
        if s in seen:
            continue
        seen[s] = None
        if len(seen) > limit:
            raise ConfigError(f"more than {limit} reachable states")
        user = world.users[s.user.user_id]
        for a in feasible_actions(s, cfg):
            page = arrange(s, a)
            for _, resp in enumerate_responses(page, user, world):
                out = apply_response(s, a, resp, cfg)
                if not out.done and out.next_state not in seen:
                    frontier.append(out.next_state)
    return list(seen)


def greedy_agreement(oracle: OracleResult, states: Sequence[State], params: nn.ParamSet, model: DpinModel,
                     cfg: SimConfig, tol: float = 1e-9, min_actions: int = 2) -> tuple[float, int]:
    """Share of states (with at least ``min_actions`` choices) where the greedy action is oracle-optimal."""
    hits = n = 0
    for s in states:
        acts = feasible_actions(s, cfg)
        if len(acts) < min_actions:
            continue
        q = model.q_values(params, s, acts)
        chosen = acts[int(np.argmax(q))].pattern
        hits += chosen in oracle.best_patterns(s, tol)
        n += 1
    return (hits / n if n else math.nan), n
