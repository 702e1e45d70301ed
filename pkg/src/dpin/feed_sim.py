"""Page-turn feed simulator for the ads-allocation MDP.

A request shows up to ``max_pages`` pages of ``K`` slots.  On each page the
policy picks which slots hold ads; the synthetic user clicks, orders,
and either pulls down to the next page or leaves.  Shown items leave the
candidate lists.  Each user carries page-level histories across requests.
"""

from __future__ import annotations

import functools
import hashlib
import itertools
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataCorruptionError, EpisodeEnd
from .page_features import (
    Action,
    FeatureSpace,
    FeedbackKind,
    Item,
    PageRecord,
    State,
    UserProfile,
    arrange,
    check_feasible,
)

LOG_SCHEMA = "dpin.offline_log"
LOG_VERSION = 1


@dataclass
class SimConfig:
    K: int = 5
    max_pages: int = 4
    max_ads_per_page: int = 2
    user_population: int = 200
    n_user_segments: int = 8
    n_genders: int = 2
    n_time_buckets: int = 4
    n_catalog_ads: int = 60
    n_catalog_organics: int = 150
    ads_per_request: int = 8
    organics_per_request: int = 20
    latent_dim: int = 4
    segment_spread: float = 0.3
    affinity_scale: float = 1.0
    click_bias: float = -2.0
    interaction_strength: float = 0.3
    ad_fatigue: float = 1.5
    pulldown_base: float = 0.8
    ad_aversion: float = 0.3
    order_rate_range: tuple[float, float] = (0.2, 0.6)
    bid_range: tuple[float, float] = (0.5, 1.5)
    price_range: tuple[float, float] = (10.0, 40.0)
    fee_rate_range: tuple[float, float] = (0.02, 0.08)
    history_window: int = 13  # past requests whose pages stay in the user's history
    warmup_sessions: int = 13  # exploratory requests per user before logging starts
    seed: int = 0

    def __post_init__(self):
        for name in ("order_rate_range", "bid_range", "price_range", "fee_rate_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name}: lower bound above upper bound")
            setattr(self, name, (float(lo), float(hi)))
        if self.K < 1 or self.max_pages < 1:
            raise ConfigError("K and max_pages must be >= 1")
        if not 1 <= self.max_ads_per_page <= self.K:
            raise ConfigError(f"max_ads_per_page must lie in [1, K], got {self.max_ads_per_page}")
        for name in ("pulldown_base", "ad_aversion"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        lo, hi = self.order_rate_range
        if lo < 0 or hi > 1:
            raise ConfigError("order rates must lie in [0, 1]")
        if self.fee_rate_range[0] < 0 or self.fee_rate_range[1] > 1:
            raise ConfigError("fee rates must lie in [0, 1]")
        if self.ads_per_request > self.n_catalog_ads or self.organics_per_request > self.n_catalog_organics:
            raise ConfigError("a request cannot hold more candidates than the catalog")
        if self.interaction_strength < 0 or self.ad_fatigue < 0:
            raise ConfigError("interaction_strength and ad_fatigue must be >= 0")
        if min(self.user_population, self.n_user_segments, self.n_genders, self.n_time_buckets) < 1:
            raise ConfigError("population and feature cardinalities must be >= 1")
        if self.history_window < 0 or self.warmup_sessions < 0:
            raise ConfigError("history_window and warmup_sessions must be >= 0")

    @property
    def n_items(self) -> int:
        return self.n_catalog_ads + self.n_catalog_organics

    def feature_space(self) -> FeatureSpace:
        return FeatureSpace(
            n_items=self.n_items,
            K=self.K,
            user_cardinalities=(self.n_user_segments, self.n_genders),
            context_cardinalities=(self.n_time_buckets,),
            n_page_buckets=self.max_pages,
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# actions


@functools.lru_cache(maxsize=4096)
def _feasible_patterns(K: int, max_ads: int, n_ads: int, n_orgs: int) -> tuple[int, ...]:
    out = []
    for pattern in range(2**K):
        pop = bin(pattern).count("1")
        if pop <= min(max_ads, n_ads) and K - pop <= n_orgs:
            out.append(pattern)
    return tuple(out)


def feasible_actions(s: State, cfg: SimConfig) -> list[Action]:
    """All legal slot assignments, in ascending bit-pattern order.

    Raises :class:`EpisodeEnd` when there are too few items to fill a page.
    """
    pats = _feasible_patterns(cfg.K, cfg.max_ads_per_page, min(len(s.ads), cfg.K), min(len(s.organics), cfg.K))
    if not pats:
        raise EpisodeEnd(f"no feasible action: {len(s.ads)} ads, {len(s.organics)} organics left for K={cfg.K}")
    return [Action.from_pattern(p, cfg.K) for p in pats]


def has_feasible_action(s: State, cfg: SimConfig) -> bool:
    return bool(_feasible_patterns(cfg.K, cfg.max_ads_per_page, min(len(s.ads), cfg.K), min(len(s.organics), cfg.K)))


def uniform_policy(state: State, actions: Sequence[Action], rng: np.random.Generator) -> Action:
    """The exploratory logging policy: uniform over feasible actions."""
    return actions[int(rng.integers(len(actions)))]


# ---------------------------------------------------------------------------
# world: catalog, users and their persistent histories


@dataclass
class User:
    user_id: int
    segment: int
    gender: int
    latent: np.ndarray

    @property
    def profile(self) -> UserProfile:
        return UserProfile(self.user_id, (self.segment, self.gender))


@dataclass
class Session:
    pages: dict[FeedbackKind, list[PageRecord]] = field(
        default_factory=lambda: {k: [] for k in (FeedbackKind.ORDER, FeedbackKind.CLICK,
                                                 FeedbackKind.PULLDOWN, FeedbackKind.LEAVE)})


class World:
    """Catalog, user population and per-user history, all fixed by ``cfg.seed``."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCA7]))
        n = cfg.n_items
        self.item_latent = rng.normal(size=(n, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
        self.order_rate = rng.uniform(*cfg.order_rate_range, size=n)
        self.rank_score = rng.random(n)
        bids = rng.uniform(*cfg.bid_range, size=n)
        prices = rng.uniform(*cfg.price_range, size=n)
        fee_rates = rng.uniform(*cfg.fee_rate_range, size=n)
        self.items: list[Item] = []
        for i in range(n):
            is_ad = i < cfg.n_catalog_ads
            self.items.append(Item(item_id=i, is_ad=is_ad, price=float(prices[i]), fee_rate=float(fee_rates[i]),
                                   bid=float(bids[i]) if is_ad else 0.0, category_id=int(i % 7)))
        self.ad_ids = np.arange(cfg.n_catalog_ads)
        self.organic_ids = np.arange(cfg.n_catalog_ads, n)

        centroids = rng.normal(size=(cfg.n_user_segments, cfg.latent_dim))
        self.users: list[User] = []
        for u in range(cfg.user_population):
            seg = int(rng.integers(cfg.n_user_segments))
            latent = centroids[seg] + cfg.segment_spread * rng.normal(size=cfg.latent_dim)
            self.users.append(User(u, seg, int(rng.integers(cfg.n_genders)), latent))
        self.sessions: list[deque[Session]] = [deque(maxlen=cfg.history_window) for _ in self.users]

    def copy(self) -> "World":
        other = object.__new__(World)
        other.__dict__.update(self.__dict__)
        other.sessions = [deque(list(d), maxlen=d.maxlen) for d in self.sessions]
        return other

    def user_history(self, user_id: int) -> dict[FeedbackKind, tuple[PageRecord, ...]]:
        out = {}
        for kind in (FeedbackKind.ORDER, FeedbackKind.CLICK, FeedbackKind.PULLDOWN, FeedbackKind.LEAVE):
            out[kind] = tuple(p for sess in self.sessions[user_id] for p in sess.pages[kind])
        return out

    def new_request(self, rng: np.random.Generator) -> State:
        """Draw a user, a time bucket and ranked candidate lists; return the first-page state."""
        cfg = self.cfg
        user = self.users[int(rng.integers(cfg.user_population))]
        time_bucket = int(rng.integers(cfg.n_time_buckets))
        ads = rng.choice(self.ad_ids, size=cfg.ads_per_request, replace=False)
        orgs = rng.choice(self.organic_ids, size=cfg.organics_per_request, replace=False)
        ads = sorted(ads.tolist(), key=lambda i: -self.rank_score[i])
        orgs = sorted(orgs.tolist(), key=lambda i: -self.rank_score[i])
        return self.initial_state(user.user_id, time_bucket, ads, orgs)

    def initial_state(self, user_id: int, time_bucket: int, ad_ids: Sequence[int], organic_ids: Sequence[int]) -> State:
        hist = self.user_history(user_id)
        return State(
            ads=tuple(self.items[i] for i in ad_ids),
            organics=tuple(self.items[i] for i in organic_ids),
            user=self.users[user_id].profile,
            context=(time_bucket,),
            hist_order=hist[FeedbackKind.ORDER],
            hist_click=hist[FeedbackKind.CLICK],
            hist_pulldown=hist[FeedbackKind.PULLDOWN],
            hist_leave=hist[FeedbackKind.LEAVE],
            page_index=0,
        )

    def close_session(self, user_id: int, final: State, initial: State) -> None:
        """Store the pages a finished request added to the user's histories."""
        sess = Session()
        for kind, before, after in zip(
            (FeedbackKind.ORDER, FeedbackKind.CLICK, FeedbackKind.PULLDOWN, FeedbackKind.LEAVE),
            initial.histories(), final.histories(),
        ):
            sess.pages[kind] = list(after[len(before):])
        self.sessions[user_id].append(sess)


# ---------------------------------------------------------------------------
# user model


@dataclass(frozen=True)
class Response:
    clicks: tuple[bool, ...]
    orders: tuple[bool, ...]
    cont: bool

    @property
    def leave(self) -> bool:
        return not self.cont


def click_probabilities(page: PageRecord, user_latent: np.ndarray, world: World) -> np.ndarray:
    """Per-slot click probability for one arrangement."""
    cfg = world.cfg
    K = page.K
    ids = np.array([it.item_id for it in page.items])
    aff = cfg.affinity_scale * (world.item_latent[ids] @ user_latent)
    ad = np.array(page.ad_bits, dtype=float)
    neighbour_aff = np.array([aff[max(0, k - 1) : k + 2].sum() for k in range(K)])
    adjacent_ads = np.array([(ad[k - 1] if k > 0 else 0.0) + (ad[k + 1] if k < K - 1 else 0.0) for k in range(K)])
    fatigue = np.where(adjacent_ads > 0, cfg.ad_fatigue * adjacent_ads, 0.0)
    return expit(cfg.click_bias + aff + cfg.interaction_strength * neighbour_aff - fatigue)


def order_probabilities_given_click(page: PageRecord, world: World) -> np.ndarray:
    return world.order_rate[[it.item_id for it in page.items]]


def continue_probability(page: PageRecord, world: World) -> float:
    cfg = world.cfg
    ad_share = sum(page.ad_bits) / page.K
    return float(np.clip(cfg.pulldown_base * (1.0 - cfg.ad_aversion * ad_share), 0.0, 1.0))


def user_response(page: PageRecord, user: User, rng: np.random.Generator, world: World) -> Response:
    """Sample one reaction.  Always consumes exactly 2K + 1 uniforms from ``rng``."""
    p_click = click_probabilities(page, user.latent, world)
    p_order = order_probabilities_given_click(page, world)
    u = rng.random(2 * page.K + 1)
    clicks = u[: page.K] < p_click
    orders = clicks & (u[page.K : 2 * page.K] < p_order)
    return Response(tuple(bool(c) for c in clicks), tuple(bool(o) for o in orders),
                    bool(u[-1] < continue_probability(page, world)))


def sample_responses(page: PageRecord, user: User, rng: np.random.Generator, world: World, n: int):
    """Vectorised draws: (clicks (n, K), orders (n, K), cont (n,))."""
    p_click = click_probabilities(page, user.latent, world)
    p_order = order_probabilities_given_click(page, world)
    u = rng.random((n, 2 * page.K + 1))
    clicks = u[:, : page.K] < p_click
    orders = clicks & (u[:, page.K : 2 * page.K] < p_order)
    return clicks, orders, u[:, -1] < continue_probability(page, world)


def enumerate_responses(page: PageRecord, user: User, world: World) -> Iterator[tuple[float, Response]]:
    """Every reaction with its exact probability (3^K · 2 outcomes)."""
    p_click = click_probabilities(page, user.latent, world)
    p_order = order_probabilities_given_click(page, world)
    p_cont = continue_probability(page, world)
    per_slot = [[((False, False), 1 - pc), ((True, False), pc * (1 - po)), ((True, True), pc * po)]
                for pc, po in zip(p_click, p_order)]
    for combo in itertools.product(*per_slot):
        p_slots = float(np.prod([p for _, p in combo]))
        clicks = tuple(c for (c, _), _ in combo)
        orders = tuple(o for (_, o), _ in combo)
        for cont, pc in ((True, p_cont), (False, 1 - p_cont)):
            prob = p_slots * pc
            if prob > 0:
                yield prob, Response(clicks, orders, cont)


# ---------------------------------------------------------------------------
# transitions


@dataclass
class StepOutcome:
    r_ad: float
    r_fee: float
    feedback: dict[FeedbackKind, PageRecord]
    next_state: State
    done: bool
    page: PageRecord
    response: Response

    @property
    def reward(self) -> float:
        return self.r_ad + self.r_fee


@dataclass
class Transition:
    state: State
    action: Action
    r_ad: float
    r_fee: float
    next_state: State
    done: bool
    episode_id: int = 0
    t: int = 0

    @property
    def reward(self) -> float:
        return self.r_ad + self.r_fee


def rewards(page: PageRecord, resp: Response) -> tuple[float, float]:
    r_ad = sum(it.bid for it, c in zip(page.items, resp.clicks) if c and it.is_ad)
    r_fee = sum(it.fee_rate * it.price for it, o in zip(page.items, resp.orders) if o)
    return float(r_ad), float(r_fee)


def apply_response(s: State, a: Action, resp: Response, cfg: SimConfig) -> StepOutcome:
    """Deterministic part of a step: rewards, history update, item removal, termination."""
    page = arrange(s, a, cfg.max_ads_per_page)
    r_ad, r_fee = rewards(page, resp)
    n_ads = a.n_ads
    ads, orgs = s.ads[n_ads:], s.organics[a.K - n_ads:]
    last_page = s.page_index + 1 >= cfg.max_pages
    probe = State(ads=ads, organics=orgs, user=s.user, context=s.context)
    done = resp.leave or last_page or not has_feasible_action(probe, cfg)

    feedback: dict[FeedbackKind, PageRecord] = {}
    if any(resp.orders):
        feedback[FeedbackKind.ORDER] = page.with_kind(FeedbackKind.ORDER)
    if any(resp.clicks):
        feedback[FeedbackKind.CLICK] = page.with_kind(FeedbackKind.CLICK)
    end_kind = FeedbackKind.LEAVE if done else FeedbackKind.PULLDOWN
    feedback[end_kind] = page.with_kind(end_kind)

    def grow(seq, kind):
        return seq + (feedback[kind],) if kind in feedback else seq

    nxt = State(
        ads=ads,
        organics=orgs,
        user=s.user,
        context=s.context,
        hist_order=grow(s.hist_order, FeedbackKind.ORDER),
        hist_click=grow(s.hist_click, FeedbackKind.CLICK),
        hist_pulldown=grow(s.hist_pulldown, FeedbackKind.PULLDOWN),
        hist_leave=grow(s.hist_leave, FeedbackKind.LEAVE),
        page_index=s.page_index + 1,
        terminal=done,
    )
    return StepOutcome(r_ad, r_fee, feedback, nxt, done, page, resp)


def step(s: State, a: Action, rng: np.random.Generator, world: World) -> StepOutcome:
    if s.terminal:
        raise EpisodeEnd("step called on a terminal state")
    check_feasible(s, a, world.cfg.max_ads_per_page)
    page = arrange(s, a)
    resp = user_response(page, world.users[s.user.user_id], rng, world)
    return apply_response(s, a, resp, world.cfg)


# ---------------------------------------------------------------------------
# episodes and offline logs

Policy = Callable[[State, Sequence[Action], np.random.Generator], Action]


def episode_rngs(seed: int, episode_id: int) -> tuple[np.random.Generator, ...]:
    """(request, response, policy) streams for one episode; independent of the policy used."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence([seed, episode_id]).spawn(3))


def run_episode(world: World, policy: Policy, seed: int, episode_id: int,
                record: bool = True, update_history: bool = True) -> list[Transition]:
    req_rng, resp_rng, pol_rng = episode_rngs(seed, episode_id)
    s0 = s = world.new_request(req_rng)
    out: list[Transition] = []
    t = 0
    while True:
        actions = feasible_actions(s, world.cfg)
        a = policy(s, actions, pol_rng)
        res = step(s, a, resp_rng, world)
        if record:
            out.append(Transition(s, a, res.r_ad, res.r_fee, res.next_state, res.done, episode_id, t))
        s = res.next_state
        t += 1
        if res.done:
            break
    if update_history:
        world.close_session(s0.user.user_id, s, s0)
    return out


def warm_up(world: World, policy: Policy = uniform_policy, seed: int | None = None) -> None:
    """Give every user ``warmup_sessions`` exploratory requests of history."""
    cfg = world.cfg
    seed = cfg.seed if seed is None else seed
    for rnd in range(cfg.warmup_sessions):
        for u in range(cfg.user_population):
            req_rng, resp_rng, pol_rng = episode_rngs(seed, 10_000_000 + rnd * cfg.user_population + u)
            user = world.users[u]
            ads = sorted(req_rng.choice(world.ad_ids, cfg.ads_per_request, replace=False).tolist(),
                         key=lambda i: -world.rank_score[i])
            orgs = sorted(req_rng.choice(world.organic_ids, cfg.organics_per_request, replace=False).tolist(),
                          key=lambda i: -world.rank_score[i])
            s0 = s = world.initial_state(user.user_id, int(req_rng.integers(cfg.n_time_buckets)), ads, orgs)
            while True:
                a = policy(s, feasible_actions(s, cfg), pol_rng)
                res = step(s, a, resp_rng, world)
                s = res.next_state
                if res.done:
                    break
            world.close_session(u, s, s0)


def make_world(cfg: SimConfig) -> World:
    world = World(cfg)
    warm_up(world)
    return world


@dataclass
class OfflineLog:
    transitions: list[Transition]
    n_episodes: int

    def __len__(self) -> int:
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)

    def history_length_means(self) -> dict[str, float]:
        return history_length_means(self.transitions)


def history_length_means(transitions: Sequence[Transition]) -> dict[str, float]:
    """Mean untruncated history length per sequence over all logged states."""
    lens = np.array([[len(h) for h in tr.state.histories()] for tr in transitions], dtype=float)
    means = lens.mean(axis=0) if len(lens) else np.zeros(4)
    return dict(zip(("order", "click", "pulldown", "leave"), map(float, means)))


def generate_offline_log(policy: Policy, n_requests: int, cfg: SimConfig, seed: int | None = None,
                         world: World | None = None) -> OfflineLog:
    """Run ``n_requests`` full episodes under ``policy`` and record every step."""
    world = make_world(cfg) if world is None else world
    seed = cfg.seed if seed is None else seed
    out: list[Transition] = []
    for ep in range(n_requests):
        out.extend(run_episode(world, policy, seed, ep))
    return OfflineLog(out, n_requests)


# ---------------------------------------------------------------------------
# log file: one JSON record per line after a schema header


def _state_snapshot(s: State) -> dict:
    return {
        "ads": [it.item_id for it in s.ads],
        "organics": [it.item_id for it in s.organics],
        "user_id": s.user.user_id,
        "user_features": list(s.user.features),
        "context": list(s.context),
        "page_index": s.page_index,
        "terminal": s.terminal,
        "hist": {
            name: [[it.item_id for it in p.items] for p in seq]
            for name, seq in zip(("order", "click", "pulldown", "leave"), s.histories())
        },
    }


def _state_from_snapshot(d: dict, world: World) -> State:
    items = world.items
    kinds = dict(order=FeedbackKind.ORDER, click=FeedbackKind.CLICK, pulldown=FeedbackKind.PULLDOWN,
                 leave=FeedbackKind.LEAVE)

    def pages(name):
        return tuple(PageRecord(tuple(items[i] for i in ids), kinds[name]) for ids in d["hist"][name])

    return State(
        ads=tuple(items[i] for i in d["ads"]),
        organics=tuple(items[i] for i in d["organics"]),
        user=UserProfile(int(d["user_id"]), tuple(d["user_features"])),
        context=tuple(d["context"]),
        hist_order=pages("order"),
        hist_click=pages("click"),
        hist_pulldown=pages("pulldown"),
        hist_leave=pages("leave"),
        page_index=int(d["page_index"]),
        terminal=bool(d["terminal"]),
    )


def write_log(path: str | Path, log: OfflineLog | Sequence[Transition], cfg: SimConfig) -> None:
    transitions = log.transitions if isinstance(log, OfflineLog) else list(log)
    header = {"schema": LOG_SCHEMA, "version": LOG_VERSION, "sim_config": cfg.digest(),
              "fields": ["episode_id", "t", "state", "action", "r_ad", "r_fee", "done", "next_state"]}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for tr in transitions:
            rec = {
                "episode_id": tr.episode_id,
                "t": tr.t,
                "state": _state_snapshot(tr.state),
                "action": list(tr.action.bits),
                "r_ad": tr.r_ad,
                "r_fee": tr.r_fee,
                "done": tr.done,
            }
            if tr.done:
                rec["next_state"] = _state_snapshot(tr.next_state)
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_log(path: str | Path, world: World) -> OfflineLog:
    """Parse a log file; non-terminal next states are rebuilt from the following record."""
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("schema") != LOG_SCHEMA or header.get("version") != LOG_VERSION:
            raise DataCorruptionError(f"unsupported log header {header}")
        if header.get("sim_config") != world.cfg.digest():
            raise DataCorruptionError("log was generated with a different simulator config")
        recs = [json.loads(line) for line in f if line.strip()]
    out: list[Transition] = []
    for i, rec in enumerate(recs):
        state = _state_from_snapshot(rec["state"], world)
        if rec["done"]:
            nxt = _state_from_snapshot(rec["next_state"], world)
        else:
            if i + 1 >= len(recs) or recs[i + 1]["episode_id"] != rec["episode_id"]:
                raise DataCorruptionError(f"record {i}: episode {rec['episode_id']} ends without done")
            nxt = _state_from_snapshot(recs[i + 1]["state"], world)
        action = Action(tuple(rec["action"]))
        try:
            check_feasible(state, action, world.cfg.max_ads_per_page)
        except Exception as exc:
            raise DataCorruptionError(f"record {i}: {exc}") from exc
        out.append(Transition(state, action, float(rec["r_ad"]), float(rec["r_fee"]), nxt, bool(rec["done"]),
                              int(rec["episode_id"]), int(rec["t"])))
    n_eps = len({tr.episode_id for tr in out})
    return OfflineLog(out, n_eps)
