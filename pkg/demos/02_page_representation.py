"""
From a page to a Q-value
========================

Every candidate page passes through several channels.  Each channel
convolves the page with its own receptive field, pools it with intra-page
attention and compares the result with the user's order, click, pull-down
and leave histories.  The pull-down history is noisy, so it is summarised
with weights learned against the other three.
"""

import numpy as np

from dpin import nn_core as nn
from dpin.feed_sim import feasible_actions, generate_offline_log, uniform_policy
from dpin.harness import load_config
from dpin.model import DpinModel, channel_forward, constants, denoise_weights, embed_batch, encode_page

cfg = load_config("desk")
model = DpinModel(cfg.model, cfg.sim.feature_space())
params = model.init_params(0)
print(f"{params.size()} parameters, e_MCIM width {model.cfg.mcim_width}")

log = generate_offline_log(uniform_policy, 20, cfg.sim, seed=0)
state = max((tr.state for tr in log.transitions), key=lambda s: len(s.hist_pulldown))
actions = feasible_actions(state, cfg.sim)
batch = model.encode([state], [actions])
print("real history pages kept per sequence:", batch.hist_mask[0].sum(axis=1))

P = constants(params)
emb = embed_batch(P, batch, model.cfg)
E_hist = {s: nn.reshape(emb.E_hist[:, i : i + 1], (1, 1) + emb.E_hist.shape[2:]) for i, s in enumerate("ocpl")}
masks = {s: batch.hist_mask[:, None, i] for i, s in enumerate("ocpl")}
for t, ch in enumerate(model.cfg.channels):
    out = channel_forward(t, emb.E_t, E_hist, masks, P, model.cfg)
    print(f"channel {t} (window {ch.receptive_field}):", {k: v.shape for k, v in out.parts.items()})

# how channel 0 weighs the pull-down pages when matched against the click summary
out = channel_forward(0, emb.E_t, E_hist, masks, P, model.cfg)
h_p = nn.mask_fill(encode_page(E_hist["p"], P, "ch0", model.cfg), masks["p"][..., None])
w = denoise_weights(out["z_c"], h_p, masks["p"], nn.iter_layers(P, "ch0.mlp2"))
print("weights over pull-down slots for the first action (padding gets zero):", np.round(w.data[0, 0], 3))

q = model.q_values(params, state, actions)
print(f"Q over {len(actions)} feasible actions: best {actions[int(np.argmax(q))].bits}, spread {q.max() - q.min():.4f}")
