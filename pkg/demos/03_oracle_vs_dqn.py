"""
Offline DQN against exact value iteration
=========================================

With three slots, two pages and four items of each kind, every user
reaction can be enumerated, so Q* is known exactly.  An exploratory log
is collected with uniform random actions, the network is trained on it
offline, and its greedy choices are compared with the optimal ones.
"""

import sys
from dataclasses import replace

from dpin.agent import prepare, train
from dpin.feed_sim import World, generate_offline_log, uniform_policy
from dpin.harness import greedy_agreement, oracle_config, reachable_states, value_iteration_oracle
from dpin.model import DpinModel

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = oracle_config()
world = World(cfg.sim)
oracle = value_iteration_oracle(world, cfg.training.gamma)
states = reachable_states(world)
print(f"{len(oracle)} dynamic states, {len(states)} reachable states with histories, "
      f"{oracle.iterations} Bellman sweeps")

s0 = states[0]
print("Q* on the first page:", {format(p, "03b"): round(q, 4) for p, q in oracle.q_values(s0).items()})

log = generate_offline_log(uniform_policy, cfg.data.requests, cfg.sim, seed=seed, world=world.copy())
model = DpinModel(cfg.model, cfg.sim.feature_space())
data = prepare(log.transitions, model, cfg.sim)


def progress(epoch, params):
    if epoch % 10 == 0:
        frac, n = greedy_agreement(oracle, states, params, model, cfg.sim)
        print(f"epoch {epoch}: greedy action optimal on {frac:.1%} of {n} decision states")


train(data, replace(cfg.training, seed=seed), model, cfg.sim, on_epoch=progress)
