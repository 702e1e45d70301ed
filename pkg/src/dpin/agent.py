"""Offline DQN on logged transitions: TD loss, target network, greedy control."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn_core as nn
from .errors import ConfigError, ConsistencyError, DataCorruptionError
from .feed_sim import SimConfig, Transition, feasible_actions
from .model import DpinModel, constants, q_forward
from .page_features import Action, EncodedBatch, State


def greedy_action(s: State, params: nn.ParamSet, model: DpinModel, sim_cfg: SimConfig) -> Action:
    """Highest-Q feasible action; exact ties go to the smallest bit pattern."""
    actions = sorted(feasible_actions(s, sim_cfg), key=lambda a: a.pattern)
    q = model.q_values(params, s, actions)
    return actions[int(np.argmax(q))]


def greedy_policy(params: nn.ParamSet, model: DpinModel, sim_cfg: SimConfig):
    def policy(state, actions, rng):
        actions = sorted(actions, key=lambda a: a.pattern)
        return actions[int(np.argmax(model.q_values(params, state, actions)))]

    return policy


# ---------------------------------------------------------------------------
# encoded replay data


@dataclass
class PreparedBatch:
    """Transitions encoded once for repeated sampling."""

    cur: EncodedBatch  # taken action only (A = 1)
    nxt: EncodedBatch  # every feasible next action, padded to a common A
    reward: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)

    def take(self, idx) -> "PreparedBatch":
        return PreparedBatch(self.cur.take(idx), self.nxt.take(idx), self.reward[idx], self.done[idx])


def prepare(transitions: Sequence[Transition], model: DpinModel, sim_cfg: SimConfig) -> PreparedBatch:
    cur_actions, nxt_actions = [], []
    for i, tr in enumerate(transitions):
        legal = feasible_actions(tr.state, sim_cfg)
        if tr.action not in legal:
            raise DataCorruptionError(f"transition {i}: stored action {tr.action} is not feasible")
        cur_actions.append([tr.action])
        nxt_actions.append([] if tr.done else feasible_actions(tr.next_state, sim_cfg))
    cur = model.encode([tr.state for tr in transitions], cur_actions)
    nxt = model.encode([tr.next_state for tr in transitions], nxt_actions)
    reward = np.array([tr.r_ad + tr.r_fee for tr in transitions])
    done = np.array([tr.done for tr in transitions], dtype=bool)
    return PreparedBatch(cur, nxt, reward, done)


class ReplayView:
    """Seeded shuffling: each epoch visits every transition exactly once."""

    def __init__(self, n: int, seed: int):
        if n < 1:
            raise ValueError("empty replay")
        self.n = n
        self.seed = seed

    def batches(self, epoch: int, batch_size: int) -> list[np.ndarray]:
        order = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        return [order[i : i + batch_size] for i in range(0, self.n, batch_size)]


# ---------------------------------------------------------------------------
# loss and target maintenance


def bootstrap_values(batch: PreparedBatch, target: nn.ParamSet, model: DpinModel) -> np.ndarray:
    """max over feasible a' of Q_target(s', a'); 0 for terminal transitions."""
    out = np.zeros(len(batch))
    live = ~batch.done
    if live.any():
        nxt = batch.nxt.take(np.flatnonzero(live))
        with nn.no_grad():
            q = q_forward(constants(target), nxt, model.cfg).data
        out[live] = np.where(nxt.action_mask, q, -np.inf).max(axis=1)
    return out


def td_loss_prepared(batch: PreparedBatch, online: nn.ParamSet, target: nn.ParamSet, gamma: float,
                     model: DpinModel) -> tuple[float, dict[str, np.ndarray]]:
    y = batch.reward + gamma * bootstrap_values(batch, target, model)
    leaves = online.leaves()
    q = nn.reshape(q_forward(leaves, batch.cur, model.cfg), (len(batch),))
    err = nn.add(q, -y)
    loss = nn.mean(err * err)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return loss.item(), grads


def td_loss(batch: Sequence[Transition], online: nn.ParamSet, target: nn.ParamSet, gamma: float,
            model: DpinModel, sim_cfg: SimConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared TD error against a detached target-network bootstrap, and its gradients."""
    if not batch:
        raise ValueError("td_loss needs a nonempty batch")
    return td_loss_prepared(prepare(batch, model, sim_cfg), online, target, gamma, model)


def soft_update(target: nn.ParamSet, online: nn.ParamSet, tau: float) -> None:
    """θ_target ← τ·θ_target + (1−τ)·θ_online, in place."""
    target.check_compatible(online)
    for k in target.names():
        target[k] = tau * target[k] + (1.0 - tau) * online[k]


def hard_update(target: nn.ParamSet, online: nn.ParamSet) -> None:
    soft_update(target, online, 0.0)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    steps: int
    extra: dict | None = None


def train(transitions: Sequence[Transition] | PreparedBatch, hyper: nn.TrainingHyper, model: DpinModel,
          sim_cfg: SimConfig, params: nn.ParamSet | None = None,
          on_epoch: Callable[[int, nn.ParamSet], dict] | None = None) -> tuple[nn.ParamSet, list[EpochRecord]]:
    """Offline DQN: shuffled batches, one Adam step and one target update per batch."""
    data = transitions if isinstance(transitions, PreparedBatch) else prepare(transitions, model, sim_cfg)
    if len(data) == 0:
        raise ValueError("cannot train on an empty log")
    online = model.init_params(hyper.seed) if params is None else params
    target = online.copy()
    view = ReplayView(len(data), hyper.seed)
    history: list[EpochRecord] = []
    step = 0
    for epoch in range(hyper.epochs):
        losses = []
        for idx in view.batches(epoch, hyper.batch_size):
            loss, grads = td_loss_prepared(data.take(idx), online, target, hyper.gamma, model)
            nn.adam_step(online, grads, hyper)
            step += 1
            if hyper.hard_sync_every:
                if step % hyper.hard_sync_every == 0:
                    hard_update(target, online)
            else:
                soft_update(target, online, hyper.tau)
            losses.append(loss * len(idx))
        rec = EpochRecord(epoch + 1, float(np.sum(losses) / len(data)), step)
        if on_epoch is not None:
            rec.extra = on_epoch(epoch + 1, online)
        history.append(rec)
    return online, history


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(model: DpinModel) -> str:
    blob = json.dumps({"model": asdict(model.cfg), "space": asdict(model.space)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, params: nn.ParamSet, model: DpinModel) -> None:
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays["config_hash"] = np.array(config_hash(model))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path: str | Path, model: DpinModel) -> nn.ParamSet:
    """Load parameters; refuses files written for a different configuration."""
    with np.load(path, allow_pickle=False) as z:
        stored = str(z["config_hash"])
        if stored != config_hash(model):
            raise ConfigError(f"checkpoint config hash {stored} does not match {config_hash(model)}")
        params = nn.ParamSet({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
    expected = model.init_params(0)
    try:
        expected.check_compatible(params)
    except ConsistencyError as exc:
        raise ConfigError(f"checkpoint parameters do not fit the model: {exc}") from exc
    return params
