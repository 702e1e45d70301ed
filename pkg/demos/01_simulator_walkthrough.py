"""
A feed request in the synthetic simulator
=========================================

One user pulls down a feed.  Each page has K slots and the agent decides,
slot by slot, whether to show the next ad or the next organic item.
"""

import numpy as np

from dpin.feed_sim import click_probabilities, continue_probability, feasible_actions, make_world, step
from dpin.harness import load_config
from dpin.page_features import Action, arrange

cfg = load_config("desk").sim
world = make_world(cfg)
rng = np.random.default_rng(0)
s = world.new_request(rng)
user = world.users[s.user.user_id]
print(f"user {s.user.user_id}: {len(s.ads)} ads and {len(s.organics)} organic candidates")
print("history pages per sequence (order, click, pull-down, leave):", [len(h) for h in s.histories()])

# the same two ads placed differently: adjacent ads depress each other's neighbours
for bits in [(1, 1, 0, 0, 0), (1, 0, 0, 1, 0), (0, 0, 0, 0, 0)]:
    page = arrange(s, Action(bits))
    p = click_probabilities(page, user.latent, world)
    print(bits, "click probs", np.round(p, 3), "continue", round(continue_probability(page, world), 3))

# play the request to the end with a fixed mid-density action
print(f"{len(feasible_actions(s, cfg))} feasible actions on the first page")
total = 0.0
while True:
    acts = feasible_actions(s, cfg)
    a = acts[len(acts) // 2]
    out = step(s, a, rng, world)
    total += out.reward
    print(f"page {s.page_index}: action {a.bits} r_ad={out.r_ad:.3f} r_fee={out.r_fee:.3f} "
          f"feedback={[k.name for k in out.feedback]}")
    s = out.next_state
    if out.done:
        break
print(f"episode over after {s.page_index} page(s), reward {total:.3f}")
