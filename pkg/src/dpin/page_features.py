"""Items, pages, states and actions, and their conversion to model inputs.

Item-table row layout: row 0 is the null item used by padding pages, row 1 is
the out-of-vocabulary row, catalog item ``i`` lives at row ``i + 2``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import FeasibilityError

NULL_ROW = 0
OOV_ROW = 1
ROW_OFFSET = 2


class FeedbackKind(enum.IntEnum):
    ORDER = 0
    CLICK = 1
    PULLDOWN = 2
    LEAVE = 3
    TARGET_NONE = 4


HISTORY_KINDS = (FeedbackKind.ORDER, FeedbackKind.CLICK, FeedbackKind.PULLDOWN, FeedbackKind.LEAVE)


@dataclass(frozen=True)
class Item:
    item_id: int
    is_ad: bool
    price: float = 0.0
    fee_rate: float = 0.0
    bid: float = 0.0
    category_id: int = 0

    def __post_init__(self):
        if self.price < 0 or self.bid < 0:
            raise ValueError(f"item {self.item_id}: price and bid must be nonnegative")
        if not 0.0 <= self.fee_rate <= 1.0:
            raise ValueError(f"item {self.item_id}: fee_rate must lie in [0, 1]")


NULL_ITEM = Item(item_id=-1, is_ad=False)


@dataclass(frozen=True)
class PageRecord:
    """One page of K slots; slot k (0-based here) is shown at position k + 1."""

    items: tuple[Item, ...]
    kind: FeedbackKind
    is_padding: bool = False

    @property
    def K(self) -> int:
        return len(self.items)

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(range(1, self.K + 1))

    @property
    def ad_bits(self) -> tuple[int, ...]:
        return tuple(int(it.is_ad) for it in self.items)

    @classmethod
    def padding(cls, K: int, kind: FeedbackKind = FeedbackKind.PULLDOWN) -> "PageRecord":
        return cls(items=(NULL_ITEM,) * K, kind=kind, is_padding=True)

    def with_kind(self, kind: FeedbackKind) -> "PageRecord":
        return PageRecord(self.items, kind, self.is_padding)


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    features: tuple[int, ...]


@dataclass(frozen=True)
class State:
    ads: tuple[Item, ...]
    organics: tuple[Item, ...]
    user: UserProfile
    context: tuple[int, ...]
    hist_order: tuple[PageRecord, ...] = ()
    hist_click: tuple[PageRecord, ...] = ()
    hist_pulldown: tuple[PageRecord, ...] = ()
    hist_leave: tuple[PageRecord, ...] = ()
    page_index: int = 0
    terminal: bool = False

    def histories(self) -> tuple[tuple[PageRecord, ...], ...]:
        """The four history sequences in (order, click, pull-down, leave) order."""
        return (self.hist_order, self.hist_click, self.hist_pulldown, self.hist_leave)


@dataclass(frozen=True)
class Action:
    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"action bits must be 0/1, got {self.bits}")

    @property
    def K(self) -> int:
        return len(self.bits)

    @property
    def n_ads(self) -> int:
        return sum(self.bits)

    @property
    def pattern(self) -> int:
        """The bits read as a binary numeral, slot 1 most significant."""
        out = 0
        for b in self.bits:
            out = (out << 1) | b
        return out

    @classmethod
    def from_pattern(cls, pattern: int, K: int) -> "Action":
        return cls(tuple((pattern >> (K - 1 - k)) & 1 for k in range(K)))

    def __str__(self) -> str:
        return "".join(map(str, self.bits))


def truncate_or_pad(seq: Sequence[PageRecord], N: int, K: int | None = None) -> tuple[list[PageRecord], list[bool]]:
    """Keep the ``N`` most recent pages; left-pad with padding pages."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    seq = list(seq)
    if len(seq) >= N:
        return seq[len(seq) - N :], [True] * N
    if K is None:
        if not seq:
            raise ValueError("K is required to pad an empty sequence")
        K = seq[0].K
    kind = seq[0].kind if seq else FeedbackKind.PULLDOWN
    n_pad = N - len(seq)
    return [PageRecord.padding(K, kind)] * n_pad + seq, [False] * n_pad + [True] * len(seq)


@dataclass
class EmbeddingTables:
    """Read-only views of the embedding parameters."""

    item_table: np.ndarray
    type_table: np.ndarray
    position_table: np.ndarray
    feedback_table: np.ndarray
    user_tables: list[np.ndarray] = field(default_factory=list)
    context_tables: list[np.ndarray] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.item_table.shape[1] + self.position_table.shape[1] + self.feedback_table.shape[1]

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray]) -> "EmbeddingTables":
        def tables(prefix):
            out, i = [], 0
            while f"{prefix}.{i}" in params:
                out.append(np.asarray(params[f"{prefix}.{i}"]))
                i += 1
            return out

        return cls(
            item_table=np.asarray(params["emb.item"]),
            type_table=np.asarray(params["emb.type"]),
            position_table=np.asarray(params["emb.pos"]),
            feedback_table=np.asarray(params["emb.fb"]),
            user_tables=tables("emb.user"),
            context_tables=tables("emb.ctx"),
        )

    def item_row(self, item: Item) -> int:
        return item_row(item, self.item_table.shape[0] - ROW_OFFSET)


def item_row(item: Item, n_items: int) -> int:
    if item.item_id < 0:
        return NULL_ROW
    if item.item_id >= n_items:
        return OOV_ROW
    return item.item_id + ROW_OFFSET


def embed_page(p: PageRecord, tables: EmbeddingTables) -> np.ndarray:
    """(K, d) page matrix: item ∥ position ∥ feedback-kind per row; zeros for padding."""
    K = p.K
    if p.is_padding:
        return np.zeros((K, tables.d))
    rows = [tables.item_row(it) for it in p.items]
    item = tables.item_table[rows] + tables.type_table[[int(it.is_ad) for it in p.items]]
    pos = tables.position_table[:K]
    fb = np.broadcast_to(tables.feedback_table[int(p.kind)], (K, tables.feedback_table.shape[1]))
    return np.concatenate([item, pos, fb], axis=1)


def check_feasible(s: State, a: Action, max_ads_per_page: int | None = None) -> None:
    n_ads = a.n_ads
    if n_ads > len(s.ads):
        raise FeasibilityError(f"action {a} needs {n_ads} ads but only {len(s.ads)} remain")
    if a.K - n_ads > len(s.organics):
        raise FeasibilityError(f"action {a} needs {a.K - n_ads} organics but only {len(s.organics)} remain")
    if max_ads_per_page is not None and n_ads > max_ads_per_page:
        raise FeasibilityError(f"action {a} shows {n_ads} ads, above max_ads_per_page={max_ads_per_page}")


def arrange(s: State, a: Action, max_ads_per_page: int | None = None) -> PageRecord:
    """Interleave ads and organics by the action bits, preserving each list's order."""
    check_feasible(s, a, max_ads_per_page)
    ads, orgs = iter(s.ads), iter(s.organics)
    items = tuple(next(ads) if b else next(orgs) for b in a.bits)
    return PageRecord(items, FeedbackKind.TARGET_NONE)


def cross_target(s: State, a: Action, tables: EmbeddingTables | None = None,
                 max_ads_per_page: int | None = None) -> tuple[PageRecord, np.ndarray | None]:
    page = arrange(s, a, max_ads_per_page)
    return page, (embed_page(page, tables) if tables is not None else None)


# ---------------------------------------------------------------------------
# batched integer encodings consumed by the model


@dataclass
class FeatureSpace:
    """Vocabulary sizes for every embedded feature."""

    n_items: int
    K: int
    user_cardinalities: tuple[int, ...]
    context_cardinalities: tuple[int, ...]  # excludes the page-index feature
    n_page_buckets: int

    @property
    def all_context_cardinalities(self) -> tuple[int, ...]:
        return tuple(self.context_cardinalities) + (self.n_page_buckets,)


@dataclass
class EncodedBatch:
    """Integer model inputs for ``Bs`` states each paired with ``A`` candidate actions.

    ``action_mask`` marks which of the ``A`` action slots are real (bootstrap
    batches pad every state to the same action count).
    """

    hist_rows: np.ndarray  # (Bs, 4, N, K)
    hist_types: np.ndarray  # (Bs, 4, N, K)
    hist_mask: np.ndarray  # (Bs, 4, N) bool
    tgt_rows: np.ndarray  # (Bs, A, K)
    tgt_types: np.ndarray  # (Bs, A, K)
    user_ids: np.ndarray  # (Bs, n_user_features)
    ctx_ids: np.ndarray  # (Bs, n_context_features)
    action_mask: np.ndarray  # (Bs, A) bool

    def take(self, idx) -> "EncodedBatch":
        return EncodedBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def encode_history(s: State, N: int, K: int, n_items: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.zeros((4, N, K), dtype=np.int64)
    types = np.zeros((4, N, K), dtype=np.int64)
    mask = np.zeros((4, N), dtype=bool)
    for j, seq in enumerate(s.histories()):
        kept = seq[-N:]
        off = N - len(kept)
        for i, page in enumerate(kept):
            if page.is_padding:
                continue
            mask[j, off + i] = True
            rows[j, off + i] = [item_row(it, n_items) for it in page.items]
            types[j, off + i] = [int(it.is_ad) for it in page.items]
    return rows, types, mask


def context_ids(s: State, space: FeatureSpace) -> tuple[int, ...]:
    """State context features plus the (clipped) page index as the last feature."""
    return tuple(s.context) + (min(s.page_index, space.n_page_buckets - 1),)


def encode(states: Sequence[State], actions: Sequence[Sequence[Action]], N: int,
           space: FeatureSpace) -> EncodedBatch:
    """Encode states with a (possibly ragged) list of candidate actions each."""
    Bs = len(states)
    A = max(1, max((len(a) for a in actions), default=1))
    K = space.K
    hist_rows = np.zeros((Bs, 4, N, K), dtype=np.int64)
    hist_types = np.zeros_like(hist_rows)
    hist_mask = np.zeros((Bs, 4, N), dtype=bool)
    tgt_rows = np.full((Bs, A, K), OOV_ROW, dtype=np.int64)
    tgt_types = np.zeros((Bs, A, K), dtype=np.int64)
    n_uf = len(space.user_cardinalities)
    n_cf = len(space.context_cardinalities) + 1
    user_ids = np.zeros((Bs, n_uf), dtype=np.int64)
    ctx_ids = np.zeros((Bs, n_cf), dtype=np.int64)
    action_mask = np.zeros((Bs, A), dtype=bool)
    for b, (s, acts) in enumerate(zip(states, actions)):
        hist_rows[b], hist_types[b], hist_mask[b] = encode_history(s, N, K, space.n_items)
        user_ids[b] = s.user.features
        ctx_ids[b] = context_ids(s, space)
        for j, a in enumerate(acts):
            page = arrange(s, a)
            tgt_rows[b, j] = [item_row(it, space.n_items) for it in page.items]
            tgt_types[b, j] = page.ad_bits
            action_mask[b, j] = True
    return EncodedBatch(hist_rows, hist_types, hist_mask, tgt_rows, tgt_types, user_ids, ctx_ids, action_mask)
