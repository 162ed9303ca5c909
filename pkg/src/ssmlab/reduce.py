"""Token reduction: grouping, cross-group distances, disjoint pair selection,
and merge/prune application with original-order restoration.

Selection policy: each group-1 token's candidate partner is its pair_rank-th
closest group-2 token; the r candidates with smallest distance win, and when
two group-1 tokens want the same partner the loser falls back to its next
closest untaken partner. Ties on distance break toward the lower group-2
index, then the lower group-1 index, so plans are deterministic.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, record


class ReduceError(ValueError):
    pass


class Feature(enum.Enum):
    X = "x"
    C = "c"
    B = "b"
    DELTA = "delta"


class Distance(enum.Enum):
    COSINE = "cosine"
    L1 = "l1"
    L2 = "l2"


class MergeOp(enum.Enum):
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"
    MIN = "min"


class Grouping(enum.Enum):
    ODD_EVEN = "odd_even"
    FRONT_BEHIND = "front_behind"
    RANDOM = "random"


class Selection(enum.Enum):
    TOP_R = "top_r"
    RANDOM_R = "random_r"


class Pairing(enum.Enum):
    NEAREST = "nearest"
    RANDOM_PAIR = "random_pair"


class Mode(enum.Enum):
    MERGE = "merge"
    PRUNE = "prune"


@dataclass
class ReductionConfig:
    r: int = 0
    sites: tuple = ()
    feature: Feature = Feature.X
    distance: Distance = Distance.COSINE
    merge_op: MergeOp = MergeOp.SUM
    grouping: Grouping = Grouping.ODD_EVEN
    pair_rank: int = 1
    selection: Selection = Selection.TOP_R
    pairing: Pairing = Pairing.NEAREST
    shuffle_ratio: float = 0.0
    mode: Mode = Mode.MERGE

    def __post_init__(self):
        if self.r < 0:
            raise ReduceError("r must be non-negative")
        if self.pair_rank < 1:
            raise ReduceError("pair_rank must be >= 1")
        if not 0.0 <= self.shuffle_ratio <= 1.0:
            raise ReduceError("shuffle_ratio must be in [0, 1]")
        sites = tuple(self.sites)
        if len(set(sites)) != len(sites):
            raise ReduceError("duplicate reduction sites")
        self.sites = sites


@dataclass
class TokenBatch:
    """Batched token sequences plus per-token original time indices."""

    values: Tensor                      # [B, T, D]
    positions: list                     # B arrays of length T, strictly increasing

    def __post_init__(self):
        b, t, _ = self.values.shape
        if len(self.positions) != b:
            raise ReduceError("positions/batch mismatch")
        for pos in self.positions:
            if len(pos) != t:
                raise ReduceError("positions length mismatch")
            if t > 1 and not np.all(np.diff(pos) > 0):
                raise ReduceError("positions must be strictly increasing")

    @classmethod
    def fresh(cls, values: Tensor):
        b, t, _ = values.shape
        return cls(values, [np.arange(t) for _ in range(b)])


@dataclass
class MergePlan:
    pairs: list                         # [(i, j)] sequence indices, disjoint
    survivors: list                     # indices untouched by any pair

    def __post_init__(self):
        used = [k for i, j in self.pairs for k in (i, j)]
        if len(set(used)) != len(used):
            raise ReduceError("overlapping pairs in plan")
        if set(used) & set(self.survivors):
            raise ReduceError("survivor listed in a pair")

    def serialize(self):
        lines = [f"pair {i} {j}" for i, j in self.pairs]
        lines += [f"survivor {k}" for k in sorted(self.survivors)]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text):
        pairs, survivors = [], []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "pair" and len(parts) == 3:
                pairs.append((int(parts[1]), int(parts[2])))
            elif parts[0] == "survivor" and len(parts) == 2:
                survivors.append(int(parts[1]))
            else:
                raise ReduceError(f"bad plan line: {line!r}")
        return cls(pairs, survivors)


def grouping(t_len, strategy: Grouping, rng=None):
    """Partition slot indices [0, T) into two disjoint groups."""
    if t_len < 2:
        raise ReduceError("grouping needs at least 2 tokens")
    idx = np.arange(t_len)
    if strategy is Grouping.ODD_EVEN:
        return idx[0::2], idx[1::2]
    if strategy is Grouping.FRONT_BEHIND:
        half = (t_len + 1) // 2
        return idx[:half], idx[half:]
    if strategy is Grouping.RANDOM:
        if rng is None:
            raise ReduceError("random grouping needs an rng")
        perm = rng.permutation(t_len)
        half = (t_len + 1) // 2
        return np.sort(perm[:half]), np.sort(perm[half:])
    raise ReduceError(f"unknown grouping {strategy}")


def pairwise_distance(g1, g2, metric: Distance):
    """All cross-group distances; g1: [m, D], g2: [n, D] -> [m, n]."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if metric is Distance.COSINE:
        n1 = np.linalg.norm(g1, axis=1)
        n2 = np.linalg.norm(g2, axis=1)
        if np.any(n1 == 0.0) or np.any(n2 == 0.0):
            raise ReduceError("zero vector under cosine distance")
        return 1.0 - (g1 / n1[:, None]) @ (g2 / n2[:, None]).T
    diff = g1[:, None, :] - g2[None, :, :]
    if metric is Distance.L1:
        return np.abs(diff).sum(axis=2)
    if metric is Distance.L2:
        return np.sqrt((diff * diff).sum(axis=2))
    raise ReduceError(f"unknown distance {metric}")


def select_pairs(dists, r, pair_rank=1, selection=Selection.TOP_R,
                 pairing=Pairing.NEAREST, rng=None, g1=None, g2=None):
    """Pick r disjoint cross-group pairs from a distance matrix.

    Returns a MergePlan in sequence indices when g1/g2 slot arrays are given,
    otherwise in group-local indices (g1 = rows, g2 = columns).
    """
    dists = np.asarray(dists, dtype=np.float64)
    m, n = dists.shape
    if r > min(m, n):
        raise ReduceError(f"r={r} exceeds available pairs min({m},{n})")
    if pair_rank > n:
        raise ReduceError(f"pair_rank={pair_rank} exceeds group-2 size {n}")
    if g1 is None:
        g1 = np.arange(m)
    if g2 is None:
        g2 = np.arange(m, m + n)
    order = np.argsort(dists, axis=1, kind="stable")  # ties -> lower column

    local = []
    taken = np.zeros(n, dtype=bool)
    if selection is Selection.TOP_R:
        heap = []
        start = pair_rank - 1
        for i in range(m):
            j = order[i, start]
            heapq.heappush(heap, (dists[i, j], i, start))
        while len(local) < r and heap:
            _, i, ptr = heapq.heappop(heap)
            j = int(order[i, ptr])
            if taken[j]:
                while ptr + 1 < n:
                    ptr += 1
                    j = int(order[i, ptr])
                    if not taken[j]:
                        heapq.heappush(heap, (dists[i, j], i, ptr))
                        break
                continue
            taken[j] = True
            local.append((i, j))
    elif selection is Selection.RANDOM_R:
        if rng is None:
            raise ReduceError("random selection needs an rng")
        for i in rng.permutation(m):
            if len(local) == r:
                break
            for ptr in range(pair_rank - 1, n):
                j = int(order[i, ptr])
                if not taken[j]:
                    taken[j] = True
                    local.append((int(i), j))
                    break
    else:
        raise ReduceError(f"unknown selection {selection}")

    if pairing is Pairing.RANDOM_PAIR and len(local) > 1:
        if rng is None:
            raise ReduceError("random pairing needs an rng")
        js = [j for _, j in local]
        shuffled = [js[k] for k in rng.permutation(len(js))]
        local = [(i, j) for (i, _), j in zip(local, shuffled)]
    elif pairing not in (Pairing.NEAREST, Pairing.RANDOM_PAIR):
        raise ReduceError(f"unknown pairing {pairing}")

    pairs = [(int(g1[i]), int(g2[j])) for i, j in local]
    used = {k for p in pairs for k in p}
    all_idx = set(int(v) for v in g1) | set(int(v) for v in g2)
    survivors = sorted(all_idx - used)
    return MergePlan(pairs, survivors)


def effective_r(t_current, r):
    """Pairs available under a bipartite split cap at floor(T/2)."""
    if t_current < 1:
        raise ReduceError("empty sequence")
    return min(r, t_current // 2)


def reduction_ratio(t0, sites, r, total_blocks):
    """1 - mean per-block token count / T0 under the capped schedule.

    A block at a reduction site processes the already-reduced count, so the
    ratio measures the average compute saved across the whole stack.
    """
    if t0 < 1:
        raise ReduceError("T0 must be >= 1")
    counts = simulate_site_counts(t0, sites, r, total_blocks)
    return 1.0 - float(np.mean(counts)) / t0


def simulate_site_counts(t0, sites, r, total_blocks):
    """Per-block token counts with reduction applied at each site's block."""
    sites = set(sites)
    t = t0
    counts = []
    for blk in range(total_blocks):
        if blk in sites and r > 0:
            t -= effective_r(t, r)
        counts.append(t)
    return counts


def trace_token_counts(t0, sites, r, total_blocks):
    """Token count entering each block when reduction runs after its site block."""
    sites = set(sites)
    t = t0
    counts = []
    for blk in range(total_blocks):
        counts.append(t)
        if blk in sites and r > 0:
            t -= effective_r(t, r)
    return counts


def _plans_for_batch(plans, batch):
    if isinstance(plans, MergePlan):
        return [plans] * batch
    plans = list(plans)
    if len(plans) != batch:
        raise ReduceError("one plan per batch element required")
    return plans


def merge(tokens: TokenBatch, plans, merge_op: MergeOp) -> TokenBatch:
    """Fuse each planned pair into one token and restore position order."""
    values = tokens.values
    b, t, d = values.shape
    plans = _plans_for_batch(plans, b)
    n_pairs = len(plans[0].pairs)
    if any(len(p.pairs) != n_pairs for p in plans):
        raise ReduceError("plans must remove the same number of tokens")
    t_out = t - n_pairs
    out = np.empty((b, t_out, d))
    new_positions = []
    # per batch element: (out_row -> sources) for the backward scatter
    routing = []
    for k, plan in enumerate(plans):
        pos = tokens.positions[k]
        entries = []
        for i, j in plan.pairs:
            if not (0 <= i < t and 0 <= j < t):
                raise ReduceError("plan index out of range")
            entries.append((min(pos[i], pos[j]), i, j))
        for s in plan.survivors:
            entries.append((pos[s], s, -1))
        if len(entries) != t_out:
            raise ReduceError("plan does not cover the sequence")
        entries.sort()
        new_positions.append(np.array([e[0] for e in entries]))
        rows = []
        vk = values.data[k]
        for row, (_, i, j) in enumerate(entries):
            if j < 0:
                out[k, row] = vk[i]
                rows.append((i, -1, None))
            else:
                if merge_op is MergeOp.SUM:
                    out[k, row] = vk[i] + vk[j]
                    rows.append((i, j, None))
                elif merge_op is MergeOp.MEAN:
                    out[k, row] = 0.5 * (vk[i] + vk[j])
                    rows.append((i, j, None))
                elif merge_op in (MergeOp.MAX, MergeOp.MIN):
                    pick_i = vk[i] >= vk[j] if merge_op is MergeOp.MAX else vk[i] <= vk[j]
                    out[k, row] = np.where(pick_i, vk[i], vk[j])
                    rows.append((i, j, pick_i))
                else:
                    raise ReduceError(f"unknown merge op {merge_op}")
        routing.append(rows)

    out_t = Tensor(out, _check=False)

    def backward(dout):
        din = np.zeros((b, t, d))
        for k, rows in enumerate(routing):
            for row, (i, j, pick_i) in enumerate(rows):
                g = dout[k, row]
                if j < 0:
                    din[k, i] += g
                elif merge_op is MergeOp.SUM:
                    din[k, i] += g
                    din[k, j] += g
                elif merge_op is MergeOp.MEAN:
                    din[k, i] += 0.5 * g
                    din[k, j] += 0.5 * g
                else:  # subgradient routed to the selected element
                    din[k, i] += np.where(pick_i, g, 0.0)
                    din[k, j] += np.where(pick_i, 0.0, g)
        return (din,)

    record(out_t, (values,), backward)
    return TokenBatch(out_t, new_positions)


def prune(tokens: TokenBatch, plans) -> TokenBatch:
    """Drop the group-2 member of each planned pair; no fusion."""
    values = tokens.values
    b, t, d = values.shape
    plans = _plans_for_batch(plans, b)
    n_pairs = len(plans[0].pairs)
    if any(len(p.pairs) != n_pairs for p in plans):
        raise ReduceError("plans must remove the same number of tokens")
    t_out = t - n_pairs
    keep_idx = []
    new_positions = []
    out = np.empty((b, t_out, d))
    for k, plan in enumerate(plans):
        dropped = {j for _, j in plan.pairs}
        if any(not (0 <= j < t) for j in dropped):
            raise ReduceError("plan index out of range")
        kept = np.array([i for i in range(t) if i not in dropped])
        keep_idx.append(kept)
        out[k] = values.data[k][kept]
        new_positions.append(tokens.positions[k][kept])
    out_t = Tensor(out, _check=False)

    def backward(dout):
        din = np.zeros((b, t, d))
        for k, kept in enumerate(keep_idx):
            din[k, kept] = dout[k]
        return (din,)

    record(out_t, (values,), backward)
    return TokenBatch(out_t, new_positions)


def shuffle_permutation(t_len, shuffle_ratio, rng):
    """Slot permutation realizing a partial odd-even interleave.

    Selects floor(ratio*T) slots uniformly and reorders the selected
    subsequence evens-first ([0,1,2,3] -> [0,2,1,3]); identity elsewhere.
    """
    if not 0.0 <= shuffle_ratio <= 1.0:
        raise ReduceError("shuffle_ratio must be in [0, 1]")
    k = int(shuffle_ratio * t_len)
    perm = np.arange(t_len)
    if k < 2:
        return perm
    sel = np.sort(rng.choice(t_len, size=k, replace=False))
    src = np.concatenate([sel[0::2], sel[1::2]])
    perm[sel] = src
    return perm


def shuffle_tokens(tokens: TokenBatch, shuffle_ratio, rng) -> TokenBatch:
    """Permute token values (not positions) by the partial odd-even rule."""
    from . import tensor as tt
    t_len = tokens.values.shape[1]
    perm = shuffle_permutation(t_len, shuffle_ratio, rng)
    if np.array_equal(perm, np.arange(t_len)):
        return tokens
    out = tt.permute_time(tokens.values, perm)
    return TokenBatch(out, [p.copy() for p in tokens.positions])


def extract_feature(block_state, choice: Feature):
    """Per-token similarity feature from a reduction-site block's forward pass."""
    if block_state is None:
        raise ReduceError("no intermediates captured at this block")
    key = choice.value
    if key not in block_state:
        raise ReduceError(f"feature {choice} not available")
    return block_state[key]
