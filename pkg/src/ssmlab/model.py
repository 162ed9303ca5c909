"""Patch embedding + bidirectional SSM block stack + mean-pool classifier,
with token reduction interleaved at configured sites, and the versioned
binary checkpoint format.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import reduce as rd
from . import ssm
from . import tensor as tt
from .reduce import Mode, ReductionConfig, TokenBatch
from .tensor import Tensor


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 28
    patch_size: int = 4
    in_channels: int = 1
    depth: int = 8
    d_model: int = 64
    d_inner: int = 32
    d_state: int = 8
    num_classes: int = 10
    reduction: ReductionConfig = field(default_factory=ReductionConfig)

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ModelError("image_size must be divisible by patch_size")
        if self.depth < 1 or min(self.d_model, self.d_inner, self.d_state,
                                 self.num_classes) < 1:
            raise ModelError("all widths and depth must be >= 1")
        for s in self.reduction.sites:
            if not 0 <= s < self.depth:
                raise ModelError(f"reduction site {s} outside block range")

    @property
    def tokens0(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.in_channels


def default_sites(depth):
    """Even block indices except 0: the default reduction schedule."""
    return tuple(b for b in range(2, depth, 2))


@dataclass
class Model:
    cfg: ModelConfig
    patch_proj: Tensor            # [patch_dim, d_model]
    pos_embed: Tensor             # [T0, d_model]
    blocks: list                  # depth x SsmBlockParams
    head: Tensor                  # [d_model, num_classes]

    def named_params(self):
        out = [("patch_proj", self.patch_proj), ("pos_embed", self.pos_embed)]
        for l, blk in enumerate(self.blocks):
            out += [(f"blocks.{l}.{k}", t) for k, t in blk.named()]
        out.append(("head", self.head))
        return out

    def num_params(self):
        return sum(t.size for _, t in self.named_params())


def init_model(cfg: ModelConfig, seed=0) -> Model:
    rng = np.random.default_rng(seed)
    patch_proj = Tensor(rng.normal(0.0, cfg.patch_dim ** -0.5,
                                   (cfg.patch_dim, cfg.d_model)), requires_grad=True)
    pos_embed = Tensor(rng.normal(0.0, 0.02, (cfg.tokens0, cfg.d_model)),
                       requires_grad=True)
    blocks = [ssm.init_block(rng, cfg.d_model, cfg.d_inner, cfg.d_state,
                             out_scale=1.0 / np.sqrt(cfg.depth))
              for _ in range(cfg.depth)]
    head = Tensor(rng.normal(0.0, cfg.d_model ** -0.5,
                             (cfg.d_model, cfg.num_classes)), requires_grad=True)
    return Model(cfg, patch_proj, pos_embed, blocks, head)


def patchify(images, cfg: ModelConfig):
    """[B,H,W,Cin] ndarray -> [B, T0, patch_dim] ndarray, row-major patches."""
    images = np.asarray(images, dtype=np.float64)
    b, h, w, c = images.shape
    if h != cfg.image_size or w != cfg.image_size or c != cfg.in_channels:
        raise ModelError(f"image shape {images.shape[1:]} does not match config")
    p = cfg.patch_size
    g = h // p
    x = images.reshape(b, g, p, g, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, p * p * c)


def forward(model: Model, images, rng=None):
    """Full forward pass.

    Returns (logits [B, num_classes], trace) where trace lists the token
    count entering every block. Reduction (shuffle, feature, grouping,
    distance, pair selection, merge/prune) runs after each site block.
    """
    cfg = model.cfg
    red = cfg.reduction
    patches = patchify(images, cfg)
    b = patches.shape[0]
    tokens_v = tt.add(tt.matmul(Tensor(patches), model.patch_proj), model.pos_embed)
    tokens = TokenBatch.fresh(tokens_v)
    if red.shuffle_ratio > 0 or red.grouping is rd.Grouping.RANDOM \
            or red.selection is rd.Selection.RANDOM_R \
            or red.pairing is rd.Pairing.RANDOM_PAIR:
        if rng is None:
            rng = np.random.default_rng(0)
    trace = []
    sites = set(red.sites)
    for l, blk in enumerate(model.blocks):
        t_cur = tokens.values.shape[1]
        trace.append(t_cur)
        is_site = l in sites and red.r > 0
        out_v, inter = ssm.bidirectional_block(blk, tokens.values,
                                               want_intermediates=is_site)
        tokens = TokenBatch(out_v, tokens.positions)
        if not is_site:
            continue
        r_eff = rd.effective_r(t_cur, red.r)
        if r_eff == 0:
            continue
        feat = rd.extract_feature(inter, red.feature)
        if red.shuffle_ratio > 0:
            perm = rd.shuffle_permutation(t_cur, red.shuffle_ratio, rng)
            tokens = TokenBatch(tt.permute_time(tokens.values, perm),
                                tokens.positions)
            feat = feat[:, perm]
        g1, g2 = rd.grouping(t_cur, red.grouping, rng)
        plans = []
        for k in range(b):
            dists = rd.pairwise_distance(feat[k][g1], feat[k][g2], red.distance)
            plans.append(rd.select_pairs(dists, r_eff, red.pair_rank,
                                         red.selection, red.pairing,
                                         rng=rng, g1=g1, g2=g2))
        if red.mode is Mode.MERGE:
            tokens = rd.merge(tokens, plans, red.merge_op)
        else:
            tokens = rd.prune(tokens, plans)
    pooled = tt.tmean(tt.layer_norm(tokens.values), axis=1)   # [B, d_model]
    logits = tt.matmul(pooled, model.head)
    return logits, trace


def count_flops(model_cfg: ModelConfig):
    """Analytic multiply-add count for one image, under the reduction schedule.

    Uses the same per-block token accounting as reduction_ratio so the
    r-dependence of compute mirrors that ratio.
    """
    cfg = model_cfg
    red = cfg.reduction
    counts = rd.simulate_site_counts(cfg.tokens0, red.sites, red.r, cfg.depth)
    dm, d, n = cfg.d_model, cfg.d_inner, cfg.d_state
    per_token_block = 2 * (dm * d * 2      # in + gate projections
                           + d * n * 2     # B and C projections
                           + d             # delta projection
                           + 4 * d * n     # discretization + scan update
                           + d * n         # readout
                           + d * dm)       # out projection
    total = float(sum(counts)) * per_token_block
    total += cfg.tokens0 * cfg.patch_dim * dm          # patch embedding
    total += dm * cfg.num_classes                      # head
    return total


# ---------------------------------------------------------------------------
# checkpoint format: magic "MEETO1", length-prefixed config lines, tensors

_MAGIC = b"MEETO1"


def _config_lines(cfg: ModelConfig):
    red = cfg.reduction
    items = {
        "image_size": cfg.image_size, "patch_size": cfg.patch_size,
        "in_channels": cfg.in_channels, "depth": cfg.depth,
        "d_model": cfg.d_model, "d_inner": cfg.d_inner,
        "d_state": cfg.d_state, "num_classes": cfg.num_classes,
        "reduction.r": red.r,
        "reduction.sites": ",".join(str(s) for s in red.sites),
        "reduction.feature": red.feature.value,
        "reduction.distance": red.distance.value,
        "reduction.merge_op": red.merge_op.value,
        "reduction.grouping": red.grouping.value,
        "reduction.pair_rank": red.pair_rank,
        "reduction.selection": red.selection.value,
        "reduction.pairing": red.pairing.value,
        "reduction.shuffle_ratio": repr(red.shuffle_ratio),
        "reduction.mode": red.mode.value,
    }
    return [f"{k}={v}" for k, v in items.items()]


def _config_from_lines(lines):
    kv = dict(line.split("=", 1) for line in lines)
    sites = tuple(int(s) for s in kv["reduction.sites"].split(",") if s)
    red = ReductionConfig(
        r=int(kv["reduction.r"]), sites=sites,
        feature=rd.Feature(kv["reduction.feature"]),
        distance=rd.Distance(kv["reduction.distance"]),
        merge_op=rd.MergeOp(kv["reduction.merge_op"]),
        grouping=rd.Grouping(kv["reduction.grouping"]),
        pair_rank=int(kv["reduction.pair_rank"]),
        selection=rd.Selection(kv["reduction.selection"]),
        pairing=rd.Pairing(kv["reduction.pairing"]),
        shuffle_ratio=float(kv["reduction.shuffle_ratio"]),
        mode=rd.Mode(kv["reduction.mode"]),
    )
    return ModelConfig(
        image_size=int(kv["image_size"]), patch_size=int(kv["patch_size"]),
        in_channels=int(kv["in_channels"]), depth=int(kv["depth"]),
        d_model=int(kv["d_model"]), d_inner=int(kv["d_inner"]),
        d_state=int(kv["d_state"]), num_classes=int(kv["num_classes"]),
        reduction=red,
    )


def save_checkpoint(model: Model, path):
    buf = io.BytesIO()
    buf.write(_MAGIC)
    lines = _config_lines(model.cfg)
    buf.write(struct.pack("<Q", len(lines)))
    for line in lines:
        raw = line.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    params = model.named_params()
    buf.write(struct.pack("<Q", len(params)))
    for name, t in params:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", t.data.ndim))
        for dim in t.data.shape:
            buf.write(struct.pack("<q", dim))
        buf.write(t.data.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    view = io.BytesIO(data)
    if view.read(len(_MAGIC)) != _MAGIC:
        raise ModelError("bad checkpoint magic")

    def read_u64():
        raw = view.read(8)
        if len(raw) != 8:
            raise ModelError("truncated checkpoint")
        return struct.unpack("<Q", raw)[0]

    n_lines = read_u64()
    lines = []
    for _ in range(n_lines):
        ln = read_u64()
        lines.append(view.read(ln).decode("utf-8"))
    cfg = _config_from_lines(lines)
    model = init_model(cfg, seed=0)
    tensors = {}
    n_params = read_u64()
    for _ in range(n_params):
        ln = read_u64()
        name = view.read(ln).decode("utf-8")
        rank = read_u64()
        shape = tuple(struct.unpack("<q", view.read(8))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = view.read(count * 8)
        if len(payload) != count * 8:
            raise ModelError("truncated checkpoint payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    for name, t in model.named_params():
        if name not in tensors:
            raise ModelError(f"missing parameter {name} in checkpoint")
        if tensors[name].shape != t.data.shape:
            raise ModelError(f"shape mismatch for {name}")
        t.data = tensors[name]
    return model
