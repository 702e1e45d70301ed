"""The page-level-interest Q-network.

Per channel: a row-wise convolution over each page matrix, self-attention
inside the page (IPAU) and an MLP give one vector per page.  The target page
then attends over each history sequence (IPIU), and the pull-down sequence is
re-weighted against the order/click/leave summaries (denoising).  Channel
outputs, the context and the user embeddings feed the final Q-head.

All forward functions take a mapping of parameter name -> Tensor so the same
code serves training (grad-tracking leaves) and inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import nn_core as nn
from .errors import ConfigError, DimensionError
from .nn_core import Tensor
from .page_features import (
    Action,
    EncodedBatch,
    FeatureSpace,
    FeedbackKind,
    ROW_OFFSET,
    State,
    encode,
)

SEQ_NAMES = ("o", "c", "p", "l")  # order, click, pull-down, leave
DENOISED = ("o", "c", "l")  # trusted sequences the pull-down summary is matched against
ABLATION_FLAGS = ("no_cl", "no_ipau", "no_ipiu", "no_mcim", "drop_pulldown_leave", "drop_click")


@dataclass(frozen=True)
class ChannelConfig:
    receptive_field: int
    n_c: int
    head_count: int
    d_h: int


@dataclass
class DpinConfig:
    n_channels: int = 5
    receptive_fields: tuple[int, ...] | None = None  # defaults to 1..n_channels
    n_c: int = 16
    ipiu_heads: int = 2
    seq_len: int = 10
    d_item: int = 8
    d_pos: int = 4
    d_fb: int = 4
    d_user: int = 4
    d_ctx: int = 4
    mlp1_widths: tuple[int, ...] = (128, 64, 32)
    mlp2_widths: tuple[int, ...] = (128, 64, 32, 1)
    mlp3_widths: tuple[int, ...] = (128, 64, 32, 1)
    no_cl: bool = False
    no_ipau: bool = False
    no_ipiu: bool = False
    no_mcim: bool = False
    drop_pulldown_leave: bool = False
    drop_click: bool = False

    def __post_init__(self):
        for name in ("mlp1_widths", "mlp2_widths", "mlp3_widths"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.receptive_fields is None:
            self.receptive_fields = tuple(range(1, self.n_channels + 1))
        self.receptive_fields = tuple(int(m) for m in self.receptive_fields)
        if self.n_channels < 1:
            raise ConfigError(f"n_channels must be >= 1, got {self.n_channels}")
        if len(self.receptive_fields) != self.n_channels:
            raise ConfigError(f"{self.n_channels} channels but receptive fields {self.receptive_fields}")
        if any(b <= a for a, b in zip(self.receptive_fields, self.receptive_fields[1:])) or self.receptive_fields[0] < 1:
            raise ConfigError(f"receptive fields must be positive and strictly increasing: {self.receptive_fields}")
        if not (self.mlp1_widths and self.mlp2_widths and self.mlp3_widths):
            raise ConfigError("MLP width lists must be nonempty")
        if self.mlp2_widths[-1] != 1 or self.mlp3_widths[-1] != 1:
            raise ConfigError("MLP2 and MLP3 must end in a single output unit")
        if self.d_h % self.ipiu_heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by ipiu_heads={self.ipiu_heads}")
        if self.seq_len < 1 or self.n_c < 1:
            raise ConfigError("seq_len and n_c must be positive")

    @property
    def d_h(self) -> int:
        return self.mlp1_widths[-1]

    @property
    def d(self) -> int:
        return self.d_item + self.d_pos + self.d_fb

    @property
    def channels(self) -> list[ChannelConfig]:
        return [ChannelConfig(m, self.n_c, self.ipiu_heads, self.d_h) for m in self.receptive_fields]

    @property
    def active_sequences(self) -> tuple[str, ...]:
        drop = set()
        if self.drop_pulldown_leave:
            drop |= {"p", "l"}
        if self.drop_click:
            drop.add("c")
        return tuple(s for s in SEQ_NAMES if s not in drop)

    @property
    def active_denoisers(self) -> tuple[str, ...]:
        act = self.active_sequences
        return tuple(x for x in DENOISED if x in act) if "p" in act else ()

    @property
    def channel_width(self) -> int:
        """Number of d_h-wide vectors concatenated per channel (8 with every sequence)."""
        return len(self.active_sequences) + len(self.active_denoisers) + 1

    @property
    def mcim_width(self) -> int:
        return 0 if self.no_mcim else self.n_channels * self.channel_width * self.d_h

    def with_ablation(self, **flags) -> "DpinConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in flags:
            if k not in ABLATION_FLAGS:
                raise ConfigError(f"unknown ablation flag {k!r}")
        kw.update(flags)
        return DpinConfig(**kw)


@dataclass
class ChannelOutput:
    """The per-channel concatenands, in concatenation order."""

    parts: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Tensor:
        return self.parts[key]

    def vectors(self) -> list[Tensor]:
        return list(self.parts.values())


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: DpinConfig, space: FeatureSpace, seed: int = 0) -> nn.ParamSet:
    """Glorot-uniform weights, zero biases, every tensor named by its role."""
    rng = np.random.default_rng(seed)
    K = space.K
    for m in cfg.receptive_fields:
        if m > K and not cfg.no_cl and not cfg.no_mcim:
            raise ConfigError(f"receptive field {m} exceeds the page size K={K}")
    p: dict[str, np.ndarray] = {
        "emb.item": nn.glorot(rng, (space.n_items + ROW_OFFSET, cfg.d_item)),
        "emb.type": nn.glorot(rng, (2, cfg.d_item)),
        "emb.pos": nn.glorot(rng, (K, cfg.d_pos)),
        "emb.fb": nn.glorot(rng, (len(FeedbackKind), cfg.d_fb)),
    }
    for j, n in enumerate(space.user_cardinalities):
        p[f"emb.user.{j}"] = nn.glorot(rng, (n, cfg.d_user))
    for j, n in enumerate(space.all_context_cardinalities):
        p[f"emb.ctx.{j}"] = nn.glorot(rng, (n, cfg.d_ctx))

    d, d_h = cfg.d, cfg.d_h
    if not cfg.no_mcim:
        for t, ch in enumerate(cfg.channels):
            pre = f"ch{t}"
            width = d if cfg.no_cl else ch.n_c
            if not cfg.no_cl:
                p[f"{pre}.conv.w"] = nn.glorot(rng, (ch.n_c, ch.receptive_field, d))
                p[f"{pre}.conv.b"] = np.zeros(ch.n_c)
            if not cfg.no_ipau:
                for w in ("wq", "wk", "wv"):
                    p[f"{pre}.ipau.{w}"] = nn.glorot(rng, (width, width))
            p.update(nn.init_mlp(rng, f"{pre}.mlp1", width, cfg.mlp1_widths))
            if not cfg.no_ipiu:
                for s in cfg.active_sequences:
                    for w in ("wq", "wk", "wv", "wo"):
                        p[f"{pre}.ipiu.{s}.{w}"] = nn.glorot(rng, (d_h, d_h))
                if cfg.active_denoisers:
                    p.update(nn.init_mlp(rng, f"{pre}.mlp2", 4 * d_h, cfg.mlp2_widths))
    head_in = (d if cfg.no_mcim else cfg.mcim_width) + cfg.d_ctx * len(space.all_context_cardinalities) \
        + cfg.d_user * len(space.user_cardinalities)
    p.update(nn.init_mlp(rng, "mlp3", head_in, cfg.mlp3_widths))
    return nn.ParamSet(p)


# ---------------------------------------------------------------------------
# units


def ipau(H1, P: Mapping[str, Tensor], prefix: str, cfg: DpinConfig) -> Tensor:
    """Intra-page attention: project, attend within the page, average rows, MLP₁."""
    H1 = nn.as_tensor(H1)
    if cfg.no_ipau:
        pooled = nn.avg_pool_rows(H1)
    else:
        Qm = H1 @ P[f"{prefix}.ipau.wq"]
        Km = H1 @ P[f"{prefix}.ipau.wk"]
        Vm = H1 @ P[f"{prefix}.ipau.wv"]
        H2 = nn.sdpa(Qm, Km, Vm, math.sqrt(Km.shape[-1]))
        pooled = nn.avg_pool_rows(H2)
    return nn.mlp(pooled, nn.iter_layers(P, f"{prefix}.mlp1"))


def encode_page(E, P: Mapping[str, Tensor], prefix: str, cfg: DpinConfig) -> Tensor:
    """(..., K, d) page matrices -> (..., d_h) page representations."""
    E = nn.as_tensor(E)
    if cfg.no_cl:
        H1 = E
    else:
        H1 = nn.conv_page(E, P[f"{prefix}.conv.w"], P[f"{prefix}.conv.b"])
    return ipau(H1, P, prefix, cfg)


def _lead(h_t: Tensor, seq: Tensor) -> tuple[int, ...]:
    return np.broadcast_shapes(h_t.shape[:-1], seq.shape[:-2])


def ipiu_interact(h_t, seq, mask, P: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Multi-head attention of the target page over ``[h_t; seq]``; returns the target row.

    h_t: (..., d_h); seq: (..., N, d_h); mask: (..., N) True for real pages.
    Leading dimensions broadcast.  The target row is never masked.
    """
    h_t, seq = nn.as_tensor(h_t), nn.as_tensor(seq)
    d_h = h_t.shape[-1]
    if seq.shape[-1] != d_h:
        raise DimensionError(f"ipiu: target {h_t.shape} vs sequence {seq.shape}")
    if d_h % heads:
        raise ConfigError(f"d_h={d_h} not divisible by {heads} heads")
    dk = d_h // heads
    N = seq.shape[-2]
    L = _lead(h_t, seq)
    mask = np.asarray(mask, dtype=bool)
    full_mask = np.concatenate([np.ones(mask.shape[:-1] + (1,), dtype=bool), mask], axis=-1)

    def rows(W):
        own = nn.reshape(h_t @ W, h_t.shape[:-1] + (1, d_h))
        other = seq @ W
        both = nn.concat([nn.broadcast_to(own, L + (1, d_h)), nn.broadcast_to(other, L + (N, d_h))], axis=-2)
        both = nn.mask_fill(both, full_mask[..., None])
        return nn.swapaxes(nn.reshape(both, L + (N + 1, heads, dk)), -2, -3)  # (..., H, N+1, dk)

    q = nn.reshape(h_t @ P[f"{prefix}.wq"], h_t.shape[:-1] + (heads, 1, dk))
    att_mask = full_mask.reshape(full_mask.shape[:-1] + (1, 1, N + 1))
    out = nn.sdpa(q, rows(P[f"{prefix}.wk"]), rows(P[f"{prefix}.wv"]), math.sqrt(dk), att_mask)
    return nn.reshape(out, L + (d_h,)) @ P[f"{prefix}.wo"]


def pooled_interact(h_t, seq, mask) -> Tensor:
    """Order-free stand-in for IPIU: mean of the target row and the real history rows."""
    h_t, seq = nn.as_tensor(h_t), nn.as_tensor(seq)
    mask = np.asarray(mask, dtype=bool)
    total = h_t + nn.sum_(nn.mask_fill(seq, mask[..., None]), axis=-2)
    count = 1.0 + mask.sum(axis=-1, keepdims=True)
    return total * (1.0 / count)


def denoise_weights(z_x, pulldown, mask, layers: Sequence[tuple]) -> Tensor:
    """Softmax over real pull-down pages of MLP₂(hᵢ ∥ z ∥ hᵢ⊙z ∥ hᵢ−z).

    The first layer is evaluated blockwise, ``hᵢ(W₁+W₄) + z(W₂−W₄) + (hᵢ⊙z)W₃``,
    which equals the concatenated form but keeps the z-free term per state
    rather than per (state, action) pair.
    """
    z_x, pulldown = nn.as_tensor(z_x), nn.as_tensor(pulldown)
    d_h = z_x.shape[-1]
    N = pulldown.shape[-2]
    L = _lead(z_x, pulldown)
    if not layers:
        raise ConfigError("denoise needs at least one MLP layer")
    W, b = layers[0]
    W = nn.as_tensor(W)
    if W.shape[0] != 4 * d_h:
        raise DimensionError(f"denoise: first layer {W.shape} expects input width {4 * d_h}")
    Wh, Wz, Wp, Wd = (W[i * d_h : (i + 1) * d_h] for i in range(4))
    z_row = nn.reshape(z_x, z_x.shape[:-1] + (1, d_h))
    pre = pulldown @ (Wh + Wd) + z_row @ (Wz - Wd) + (pulldown * z_row) @ Wp + b
    h = pre if len(layers) == 1 else nn.mlp(nn.relu(pre), layers[1:])
    logits = nn.reshape(nn.broadcast_to(h, L + (N, 1)), L + (N,))
    return nn.masked_softmax(logits, np.asarray(mask, dtype=bool))


def denoise_weights_concat(z_x, pulldown, mask, layers: Sequence[tuple]) -> Tensor:
    """Reference form of :func:`denoise_weights` with the explicit concatenation."""
    z_x, pulldown = nn.as_tensor(z_x), nn.as_tensor(pulldown)
    d_h = z_x.shape[-1]
    N = pulldown.shape[-2]
    L = _lead(z_x, pulldown)
    hp = nn.broadcast_to(pulldown, L + (N, d_h))
    zb = nn.broadcast_to(nn.reshape(z_x, z_x.shape[:-1] + (1, d_h)), L + (N, d_h))
    feats = nn.concat([hp, zb, hp * zb, hp - zb], axis=-1)
    logits = nn.reshape(nn.mlp(feats, layers), L + (N,))
    return nn.masked_softmax(logits, np.asarray(mask, dtype=bool))


def denoise(z_x, pulldown, mask, layers: Sequence[tuple]) -> Tensor:
    """Attention-weighted pull-down summary; zero vector when no pull-down page is real."""
    pulldown = nn.as_tensor(pulldown)
    w = denoise_weights(z_x, pulldown, mask, layers)
    return nn.sum_(nn.reshape(w, w.shape + (1,)) * pulldown, axis=-2)


def uniform_denoise(pulldown, mask) -> Tensor:
    pulldown = nn.as_tensor(pulldown)
    mask = np.asarray(mask, dtype=bool)
    count = mask.sum(axis=-1, keepdims=True)
    w = np.divide(mask, count, out=np.zeros(mask.shape), where=count > 0)
    return nn.sum_(pulldown * w[..., None], axis=-2)


def channel_forward(t: int, E_t, E_hist: Mapping[str, Tensor], masks: Mapping[str, np.ndarray],
                    P: Mapping[str, Tensor], cfg: DpinConfig) -> ChannelOutput:
    """One MCIM channel.

    E_t: (..., K, d) target pages; ``E_hist[s]``: (..., N, K, d) history pages for
    each active sequence name ``s``; ``masks[s]``: (..., N).
    """
    pre = f"ch{t}"
    h_t = encode_page(E_t, P, pre, cfg)
    h = {s: nn.mask_fill(encode_page(E_hist[s], P, pre, cfg), masks[s][..., None]) for s in cfg.active_sequences}
    z = {}
    for s in cfg.active_sequences:
        if cfg.no_ipiu:
            z[s] = pooled_interact(h_t, h[s], masks[s])
        else:
            z[s] = ipiu_interact(h_t, h[s], masks[s], P, f"{pre}.ipiu.{s}", cfg.ipiu_heads)
    out = ChannelOutput()
    for s in cfg.active_sequences:
        out.parts[f"z_{s}"] = z[s]
    for x in cfg.active_denoisers:
        if cfg.no_ipiu:
            zp = uniform_denoise(h["p"], masks["p"])
            zp = nn.broadcast_to(zp, np.broadcast_shapes(zp.shape, h_t.shape))
        else:
            zp = denoise(z[x], h["p"], masks["p"], nn.iter_layers(P, f"{pre}.mlp2"))
        out.parts[f"z_p_{x}"] = zp
    out.parts["h_t"] = h_t
    return out


# ---------------------------------------------------------------------------
# whole network


@dataclass
class Embedded:
    E_t: Tensor  # (Bs, A, K, d)
    E_hist: Tensor  # (Bs, 4, N, K, d)
    e_u: Tensor  # (Bs, n_uf * d_user)
    e_c: Tensor  # (Bs, n_cf * d_ctx)


def embed_batch(P: Mapping[str, Tensor], batch: EncodedBatch, cfg: DpinConfig) -> Embedded:
    Bs, A, K = batch.tgt_rows.shape
    N = batch.hist_rows.shape[2]

    def pages(rows, types, kinds_shape, kind_ids):
        item = nn.take_rows(P["emb.item"], rows) + nn.take_rows(P["emb.type"], types)
        lead = rows.shape
        pos = nn.broadcast_to(P["emb.pos"], lead + (cfg.d_pos,))
        fb = nn.reshape(nn.take_rows(P["emb.fb"], kind_ids), kinds_shape + (cfg.d_fb,))
        fb = nn.broadcast_to(fb, lead + (cfg.d_fb,))
        return nn.concat([item, pos, fb], axis=-1)

    E_t = pages(batch.tgt_rows, batch.tgt_types, (1, 1, 1), np.array([int(FeedbackKind.TARGET_NONE)]))
    E_hist = pages(batch.hist_rows, batch.hist_types, (1, 4, 1, 1), np.arange(4))
    E_hist = nn.mask_fill(E_hist, batch.hist_mask[..., None, None])

    def feats(prefix, ids):
        return nn.concat([nn.take_rows(P[f"{prefix}.{j}"], ids[:, j]) for j in range(ids.shape[1])], axis=-1)

    return Embedded(E_t, E_hist, feats("emb.user", batch.user_ids), feats("emb.ctx", batch.ctx_ids))


def mcim(P: Mapping[str, Tensor], emb: Embedded, hist_mask: np.ndarray, cfg: DpinConfig) -> Tensor:
    """(Bs, A, T·8·d_h) concatenation of every channel's output."""
    idx = {s: i for i, s in enumerate(SEQ_NAMES)}
    E_hist = {s: nn.reshape(emb.E_hist[:, idx[s] : idx[s] + 1], (emb.E_hist.shape[0], 1) + emb.E_hist.shape[2:])
              for s in cfg.active_sequences}
    masks = {s: hist_mask[:, None, idx[s]] for s in cfg.active_sequences}
    parts = []
    for t in range(cfg.n_channels):
        parts.extend(channel_forward(t, emb.E_t, E_hist, masks, P, cfg).vectors())
    Bs, A = emb.E_t.shape[:2]
    parts = [nn.broadcast_to(v, (Bs, A, cfg.d_h)) for v in parts]
    return nn.concat(parts, axis=-1)


def q_from_embedded(P: Mapping[str, Tensor], emb: Embedded, hist_mask: np.ndarray, cfg: DpinConfig) -> Tensor:
    Bs, A = emb.E_t.shape[:2]
    if cfg.no_mcim:
        page = nn.avg_pool_rows(emb.E_t)
    else:
        page = mcim(P, emb, hist_mask, cfg)
    side = nn.concat([emb.e_c, emb.e_u], axis=-1)
    side = nn.broadcast_to(nn.reshape(side, (Bs, 1, side.shape[-1])), (Bs, A, side.shape[-1]))
    q = nn.mlp(nn.concat([page, side], axis=-1), nn.iter_layers(P, "mlp3"))
    return nn.reshape(q, (Bs, A))


def q_forward(P: Mapping[str, Tensor], batch: EncodedBatch, cfg: DpinConfig) -> Tensor:
    """Q for every (state, candidate action) pair in the batch: (Bs, A)."""
    return q_from_embedded(P, embed_batch(P, batch, cfg), batch.hist_mask, cfg)


def constants(params: nn.ParamSet) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


class DpinModel:
    """Binds a network configuration to a feature space."""

    def __init__(self, cfg: DpinConfig, space: FeatureSpace):
        self.cfg = cfg
        self.space = space

    def init_params(self, seed: int = 0) -> nn.ParamSet:
        return init_params(self.cfg, self.space, seed)

    def encode(self, states: Sequence[State], actions: Sequence[Sequence[Action]]) -> EncodedBatch:
        return encode(states, actions, self.cfg.seq_len, self.space)

    def q_values(self, params: nn.ParamSet, state: State, actions: Sequence[Action]) -> np.ndarray:
        batch = self.encode([state], [actions])
        with nn.no_grad():
            return q_forward(constants(params), batch, self.cfg).data[0, : len(actions)].copy()

    def q_value(self, state: State, action: Action, params: nn.ParamSet) -> float:
        return float(self.q_values(params, state, [action])[0])
