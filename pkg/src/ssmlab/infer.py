"""Tape-free inference forward pass.

Mirrors model.forward numerically (same operation order) but runs on plain
ndarrays, so evaluation and the throughput benchmark skip autograd overhead.
A float32 mode exists here only for benchmarking; everything else is f64.
"""

from __future__ import annotations

import numpy as np

from . import model as mdl
from . import reduce as rd
from .reduce import Mode


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x):
    return x * _sigmoid(x)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _layer_norm(x, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def prepare_params(model, dtype=np.float64):
    """Flatten model parameters to ndarrays of the requested dtype."""
    cast = lambda t: t.data.astype(dtype, copy=True)
    blocks = []
    for blk in model.blocks:
        blocks.append({side: {k: cast(t) for k, t in getattr(blk, side).named()}
                       for side in ("fwd", "bwd")})
    return {
        "patch_proj": cast(model.patch_proj),
        "pos_embed": cast(model.pos_embed),
        "blocks": blocks,
        "head": cast(model.head),
    }


def _scan(ab, u, c):
    bsz, t_len, d, n = ab.shape
    h = np.zeros((bsz, d, n), dtype=ab.dtype)
    y = np.empty((bsz, t_len, d), dtype=ab.dtype)
    for t in range(t_len):
        h = ab[:, t] * h + u[:, t]
        y[:, t] = np.einsum("bdn,bn->bd", h, c[:, t])
    return y


def _branch(p, normed, reverse):
    x = _silu(normed @ p["w_in"])
    gate = _silu(normed @ p["w_gate"])
    delta1 = _softplus(x @ p["w_delta"] + p["delta_bias"])       # [B,T,1]
    d = x.shape[2]
    delta = delta1 * np.ones((1, 1, d), dtype=x.dtype)           # [B,T,D]
    a = -np.exp(p["a_log"])
    ab = np.exp(delta[..., None] * a)
    bt = x @ p["w_b"]
    ct = x @ p["w_c"]
    u = (delta[..., None] * bt[:, :, None, :]) * x[..., None]
    if reverse:
        y = _scan(ab[:, ::-1], u[:, ::-1], ct[:, ::-1])[:, ::-1]
    else:
        y = _scan(ab, u, ct)
    inter = {"b": bt, "c": ct, "delta": delta}
    return (y * gate) @ p["w_out"], inter


def _apply_merge(values, positions, plans, merge_op):
    b, t, d = values.shape
    t_out = t - len(plans[0].pairs)
    out = np.empty((b, t_out, d), dtype=values.dtype)
    new_positions = []
    for k, plan in enumerate(plans):
        pos = positions[k]
        entries = [(min(pos[i], pos[j]), i, j) for i, j in plan.pairs]
        entries += [(pos[s], s, -1) for s in plan.survivors]
        entries.sort()
        vk = values[k]
        for row, (_, i, j) in enumerate(entries):
            if j < 0:
                out[k, row] = vk[i]
            elif merge_op is rd.MergeOp.SUM:
                out[k, row] = vk[i] + vk[j]
            elif merge_op is rd.MergeOp.MEAN:
                out[k, row] = 0.5 * (vk[i] + vk[j])
            elif merge_op is rd.MergeOp.MAX:
                out[k, row] = np.maximum(vk[i], vk[j])
            else:
                out[k, row] = np.minimum(vk[i], vk[j])
        new_positions.append(np.array([e[0] for e in entries]))
    return out, new_positions


def _apply_prune(values, positions, plans):
    b, t, d = values.shape
    t_out = t - len(plans[0].pairs)
    out = np.empty((b, t_out, d), dtype=values.dtype)
    new_positions = []
    for k, plan in enumerate(plans):
        dropped = {j for _, j in plan.pairs}
        kept = np.array([i for i in range(t) if i not in dropped])
        out[k] = values[k][kept]
        new_positions.append(positions[k][kept])
    return out, new_positions


def fast_forward(model, images, dtype=np.float64, rng=None, params=None):
    """Returns (logits ndarray [B, K], per-block token-count trace)."""
    cfg = model.cfg
    red = cfg.reduction
    if params is None:
        params = prepare_params(model, dtype)
    patches = mdl.patchify(images, cfg).astype(dtype)
    b = patches.shape[0]
    values = patches @ params["patch_proj"] + params["pos_embed"]
    positions = [np.arange(cfg.tokens0) for _ in range(b)]
    if rng is None:
        rng = np.random.default_rng(0)
    trace = []
    sites = set(red.sites)
    for l, blk in enumerate(params["blocks"]):
        t_cur = values.shape[1]
        trace.append(t_cur)
        normed = _layer_norm(values)
        fwd_contrib, inter = _branch(blk["fwd"], normed, reverse=False)
        bwd_contrib, _ = _branch(blk["bwd"], normed, reverse=True)
        values = values + fwd_contrib + bwd_contrib
        if l not in sites or red.r <= 0:
            continue
        r_eff = rd.effective_r(t_cur, red.r)
        if r_eff == 0:
            continue
        inter["x"] = values
        feat = rd.extract_feature(inter, red.feature)
        if red.shuffle_ratio > 0:
            perm = rd.shuffle_permutation(t_cur, red.shuffle_ratio, rng)
            values = values[:, perm]
            feat = feat[:, perm]
            if red.feature is rd.Feature.X:
                feat = values
        g1, g2 = rd.grouping(t_cur, red.grouping, rng)
        plans = []
        for k in range(b):
            dists = rd.pairwise_distance(feat[k][g1], feat[k][g2], red.distance)
            plans.append(rd.select_pairs(dists, r_eff, red.pair_rank,
                                         red.selection, red.pairing,
                                         rng=rng, g1=g1, g2=g2))
        if red.mode is Mode.MERGE:
            values, positions = _apply_merge(values, positions, plans, red.merge_op)
        else:
            values, positions = _apply_prune(values, positions, plans)
    pooled = _layer_norm(values).sum(axis=1) / values.shape[1]
    logits = pooled @ params["head"]
    return logits, trace
