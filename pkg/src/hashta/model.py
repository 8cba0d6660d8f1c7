"""A small CTR model whose long-sequence block is swappable.

Per sample the model embeds the user, a context bucket, the candidate
item (item embedding + category embedding), a short recent window, and a
long window, then feeds the five d-vectors through a leaky-ReLU MLP to a
single sigmoid.  Behavior embeddings are item + category (+ an optional
bucketed-age embedding, bucket = min(9, floor(log2(1 + age_days)))) with
id 0 reserved for padding: row 0 of every table is frozen at zero and
padded positions are masked out of attention and pooling.

The `variant` field picks the long-window representation:

  POOLING       masked mean over both windows (no attention anywhere)
  DIN_SHORT     attention over the short window only, long rep is zero
  DIN_LONG_AVG  attention short, masked mean long
  ETA           attention over the top-k rows by fingerprint Hamming
                distance (hashes recomputed from current embeddings on
                every forward, so training always sees fresh bits)
  FULL_TA       attention over the whole long window
  SIM_HARD      attention over a category-match top-k with recency backfill
  ETA_DOT       attention over an exact dot-product top-k

The hash family always hashes the item + category embedding, never the
age component, so a per-item fingerprint table precomputed from the same
weights reproduces the online bits exactly.  Retrieval is a fixed gather
as far as gradients are concerned; everything else is differentiated by
hand and the training loop is plain Adam (0.9 / 0.999 / 1e-8) with L2 on
MLP and projection weights only.  All randomness is derived from
config.seed, so runs are reproducible bit for bit.

Checkpoint layout ("HTAC"): magic, little-endian u32 version (1), u32
length of a JSON echo of the config, the JSON bytes, then every
parameter tensor as little-endian float32 in `param_names` order (item,
category, user, context, optional age table, short-attention wq/wk/wv/wo,
long-attention wq/wk/wv/wo, then MLP weight/bias pairs).
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ._scratch import scratch_buf
from .attention import AttentionInput, MHTAParams, mhta_backward, mhta_with_cache
from .data import Sample, SECONDS_PER_DAY
from .errors import FormatError, NumericError
from .fingerprint import FingerprintTable, HashFamily, fingerprint_batch, new_hash_family, simhash
from .retrieval import TopKResult, category_hard_search, hamming_top_k_batch, top_k_by_dot, top_k_by_hamming

VARIANTS = ("POOLING", "DIN_SHORT", "DIN_LONG_AVG", "ETA", "FULL_TA", "SIM_HARD", "ETA_DOT")
SELECTING_VARIANTS = ("ETA", "SIM_HARD", "ETA_DOT")

N_TIME_BUCKETS = 10
LEAKY_SLOPE = 0.01
_PROB_EPS = 1e-15

CHECKPOINT_MAGIC = b"HTAC"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")


@dataclass
class ModelConfig:
    d: int = 16
    l_st: int = 16
    l_lt: int = 256
    k: int = 16
    n_heads: int = 2
    m: int = 32  # hash bits per round
    n_rounds: int = 2
    variant: str = "ETA"
    use_time_buckets: bool = False
    hash_projected: bool = False
    mlp_widths: tuple = (64, 32)
    seed: int = 7
    learning_rate: float = 2e-3
    l2: float = 1e-6
    batch_size: int = 256
    epochs: int = 5
    n_items: int = 0
    n_categories: int = 0
    n_users: int = 0
    n_contexts: int = 24

    def __post_init__(self):
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        for name in ("d", "l_st", "l_lt", "k", "n_heads", "m", "n_rounds", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if any(w < 1 for w in self.mlp_widths):
            raise ValueError(f"mlp widths must be positive, got {self.mlp_widths}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class ModelParams:
    item_emb: np.ndarray
    cat_emb: np.ndarray
    user_emb: np.ndarray
    ctx_emb: np.ndarray
    time_emb: Optional[np.ndarray]
    short_attn: MHTAParams
    long_attn: MHTAParams
    mlp_w: list
    mlp_b: list
    family: HashFamily


def _derived_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _attn_from_rng(rng, d, n_heads):
    d_h = d // n_heads
    bound = 1.0 / np.sqrt(d)
    shape = (n_heads, d, d_h)
    return MHTAParams(
        rng.uniform(-bound, bound, shape),
        rng.uniform(-bound, bound, shape),
        rng.uniform(-bound, bound, shape),
        rng.uniform(-bound, bound, (n_heads * d_h, d)),
        1.0 / np.sqrt(d_h),
    )


def init_params(config: ModelConfig) -> ModelParams:
    if config.n_items < 1 or config.n_categories < 1 or config.n_users < 1:
        raise ValueError("config needs positive n_items, n_categories and n_users")
    d = config.d
    bound = 1.0 / np.sqrt(d)
    rng = np.random.default_rng(_derived_seed(config.seed, 0))

    def table(n):
        t = rng.uniform(-bound, bound, (n + 1, d))
        t[0] = 0.0  # padding row stays zero forever
        return t

    item_emb = table(config.n_items)
    cat_emb = table(config.n_categories)
    user_emb = table(config.n_users)
    ctx_emb = table(config.n_contexts)
    time_emb = (
        rng.uniform(-bound, bound, (N_TIME_BUCKETS, d)) if config.use_time_buckets else None
    )
    short_attn = _attn_from_rng(np.random.default_rng(_derived_seed(config.seed, 1)), d, config.n_heads)
    long_attn = _attn_from_rng(np.random.default_rng(_derived_seed(config.seed, 2)), d, config.n_heads)
    mlp_rng = np.random.default_rng(_derived_seed(config.seed, 3))
    dims = (5 * d,) + config.mlp_widths + (1,)
    mlp_w, mlp_b = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        b = 1.0 / np.sqrt(fan_in)
        mlp_w.append(mlp_rng.uniform(-b, b, (fan_in, fan_out)))
        mlp_b.append(np.zeros(fan_out))
    hash_dim = d // config.n_heads if config.hash_projected else d
    family = new_hash_family(hash_dim, config.m, config.n_rounds, config.seed)
    return ModelParams(
        item_emb, cat_emb, user_emb, ctx_emb, time_emb,
        short_attn, long_attn, mlp_w, mlp_b, family,
    )


def param_names(config: ModelConfig) -> list:
    names = ["item_emb", "cat_emb", "user_emb", "ctx_emb"]
    if config.use_time_buckets:
        names.append("time_emb")
    for block in ("short", "long"):
        names += [f"{block}.wq", f"{block}.wk", f"{block}.wv", f"{block}.wo"]
    for i in range(len(config.mlp_widths) + 1):
        names += [f"mlp.w{i}", f"mlp.b{i}"]
    return names


def flatten(params: ModelParams, config: ModelConfig) -> dict:
    """Live views of every trainable tensor, in checkpoint order."""
    out = {
        "item_emb": params.item_emb,
        "cat_emb": params.cat_emb,
        "user_emb": params.user_emb,
        "ctx_emb": params.ctx_emb,
    }
    if config.use_time_buckets:
        out["time_emb"] = params.time_emb
    for block, attn in (("short", params.short_attn), ("long", params.long_attn)):
        out[f"{block}.wq"] = attn.wq
        out[f"{block}.wk"] = attn.wk
        out[f"{block}.wv"] = attn.wv
        out[f"{block}.wo"] = attn.wo
    for i, (w, b) in enumerate(zip(params.mlp_w, params.mlp_b)):
        out[f"mlp.w{i}"] = w
        out[f"mlp.b{i}"] = b
    return out


_L2_PREFIXES = ("short.", "long.", "mlp.w")


def clone_params(params: ModelParams) -> ModelParams:
    def cp(a):
        return None if a is None else a.copy()

    def cp_attn(a: MHTAParams) -> MHTAParams:
        return MHTAParams(a.wq.copy(), a.wk.copy(), a.wv.copy(), a.wo.copy(), a.alpha)

    return ModelParams(
        params.item_emb.copy(), params.cat_emb.copy(), params.user_emb.copy(),
        params.ctx_emb.copy(), cp(params.time_emb),
        cp_attn(params.short_attn), cp_attn(params.long_attn),
        [w.copy() for w in params.mlp_w], [b.copy() for b in params.mlp_b],
        params.family,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _dleaky(x):
    return np.where(x > 0, 1.0, LEAKY_SLOPE)


def _check_id(name, value, hi, allow_zero=False):
    lo = 0 if allow_zero else 1
    if not lo <= value <= hi:
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


def _seq_arrays(seq):
    if len(seq) == 0:
        z = np.empty(0, dtype=np.int64)
        return z, z, z
    arr = np.asarray(seq, dtype=np.int64).reshape(len(seq), 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def _time_buckets(ts: np.ndarray, now: int) -> np.ndarray:
    age_days = np.maximum(0.0, (now - ts) / SECONDS_PER_DAY)
    return np.minimum(np.floor(np.log2(1.0 + age_days)), 9).astype(np.int64)


class _SeqData:
    __slots__ = ("items", "cats", "buckets", "mask", "base", "emb")


def _embed_sequence(seq, now, params: ModelParams, config: ModelConfig, name: str) -> _SeqData:
    items, cats, ts = _seq_arrays(seq)
    n = items.shape[0]
    if n and (items.min() < 0 or items.max() > config.n_items):
        raise ValueError(f"{name} item id outside [0, {config.n_items}]")
    if n and (cats.min() < 0 or cats.max() > config.n_categories):
        raise ValueError(f"{name} category id outside [0, {config.n_categories}]")
    out = _SeqData()
    out.items, out.cats = items, cats
    out.mask = items != 0
    out.base = params.item_emb[items] + params.cat_emb[cats]
    if config.use_time_buckets:
        out.buckets = _time_buckets(ts, now)
        out.emb = out.base + params.time_emb[out.buckets]
        out.emb[~out.mask] = 0.0
    else:
        out.buckets = None
        out.emb = out.base
    return out


def _masked_mean(emb: np.ndarray, mask: np.ndarray, d: int) -> np.ndarray:
    if not mask.any():
        return np.zeros(d)
    return emb[mask].mean(axis=0)


def _select_long(target, lt: _SeqData, params: ModelParams, config: ModelConfig,
                 target_category: int, item_fps: Optional[FingerprintTable]) -> TopKResult:
    if config.variant == "ETA":
        if config.hash_projected:
            qfp = simhash(target @ params.long_attn.wq[0], params.family)
            kfps = fingerprint_batch(lt.base @ params.long_attn.wk[0], params.family)
        else:
            qfp = simhash(target, params.family)
            if item_fps is not None:
                kfps = item_fps.take(lt.items)
            else:
                kfps = fingerprint_batch(lt.base, params.family)
        return top_k_by_hamming(qfp, kfps, lt.mask, config.k)
    if config.variant == "SIM_HARD":
        return category_hard_search(target_category, lt.cats, lt.mask, config.k)
    if config.variant == "ETA_DOT":
        return top_k_by_dot(target, lt.base, lt.mask, config.k, metric="dot")
    raise ValueError(f"variant {config.variant} does not retrieve")


class _Fwd:
    __slots__ = (
        "sample", "st", "lt", "target", "user_vec", "ctx_vec",
        "short_mode", "short_cache", "long_mode", "long_cache", "selection", "sel_sorted",
        "x", "acts", "pres", "z",
    )


def _forward_sample(
    sample: Sample, params: ModelParams, config: ModelConfig,
    item_fps: Optional[FingerprintTable] = None,
    frozen_selection: Optional[np.ndarray] = None,
) -> _Fwd:
    if len(sample.short_seq) > config.l_st:
        raise ValueError(f"short_seq length {len(sample.short_seq)} exceeds l_st={config.l_st}")
    if len(sample.long_seq) > config.l_lt:
        raise ValueError(f"long_seq length {len(sample.long_seq)} exceeds l_lt={config.l_lt}")
    _check_id("user_id", sample.user_id, config.n_users)
    _check_id("target_item", sample.target_item, config.n_items)
    _check_id("target_category", sample.target_category, config.n_categories)
    _check_id("context_bucket", sample.context_bucket, config.n_contexts)

    f = _Fwd()
    f.sample = sample
    f.user_vec = params.user_emb[sample.user_id]
    f.ctx_vec = params.ctx_emb[sample.context_bucket]
    f.target = params.item_emb[sample.target_item] + params.cat_emb[sample.target_category]
    f.st = _embed_sequence(sample.short_seq, sample.timestamp, params, config, "short_seq")
    f.lt = _embed_sequence(sample.long_seq, sample.timestamp, params, config, "long_seq")
    d = config.d

    if config.variant == "POOLING":
        f.short_mode = "mean"
        short_rep = _masked_mean(f.st.emb, f.st.mask, d)
        f.short_cache = None
    else:
        f.short_mode = "attn"
        short_rep, f.short_cache = mhta_with_cache(
            AttentionInput(f.target, f.st.emb, f.st.mask), params.short_attn
        )

    f.selection = None
    f.sel_sorted = None
    variant = config.variant
    if variant == "DIN_SHORT":
        f.long_mode = "zeros"
        long_rep = np.zeros(d)
        f.long_cache = None
    elif variant in ("POOLING", "DIN_LONG_AVG"):
        f.long_mode = "mean"
        long_rep = _masked_mean(f.lt.emb, f.lt.mask, d)
        f.long_cache = None
    elif variant == "FULL_TA":
        f.long_mode = "attn_full"
        long_rep, f.long_cache = mhta_with_cache(
            AttentionInput(f.target, f.lt.emb, f.lt.mask), params.long_attn
        )
    else:
        f.long_mode = "attn_sel"
        if frozen_selection is not None:
            f.sel_sorted = np.sort(np.asarray(frozen_selection, dtype=np.int64))
        else:
            f.selection = _select_long(
                f.target, f.lt, params, config, sample.target_category, item_fps
            )
            f.sel_sorted = np.sort(f.selection.indices)
        sub = f.lt.emb[f.sel_sorted]
        long_rep, f.long_cache = mhta_with_cache(
            AttentionInput(f.target, sub, np.ones(sub.shape[0], dtype=bool)),
            params.long_attn,
        )

    f.x = np.concatenate([f.user_vec, f.ctx_vec, f.target, short_rep, long_rep])
    f.acts = [f.x]
    f.pres = []
    a = f.x
    for w, b in zip(params.mlp_w[:-1], params.mlp_b[:-1]):
        pre = a @ w + b
        a = _leaky(pre)
        f.pres.append(pre)
        f.acts.append(a)
    f.z = float(a @ params.mlp_w[-1][:, 0] + params.mlp_b[-1][0])
    if not np.isfinite(f.z):
        raise NumericError(_diagnose_nonfinite(f))
    return f


def _diagnose_nonfinite(f: _Fwd) -> str:
    stages = [
        ("embeddings", np.concatenate([f.user_vec, f.ctx_vec, f.target])),
        ("short_sequence", f.st.emb), ("long_sequence", f.lt.emb),
        ("mlp_input", f.x),
    ] + [(f"mlp_hidden_{i}", a) for i, a in enumerate(f.acts[1:])]
    for name, arr in stages:
        if arr.size and not np.isfinite(arr).all():
            return f"non-finite value first seen at stage {name!r}"
    return "non-finite logit"


def forward(sample: Sample, params: ModelParams, config: ModelConfig,
            item_fps: Optional[FingerprintTable] = None) -> float:
    """Click probability in (0, 1) for one sample."""
    f = _forward_sample(sample, params, config, item_fps)
    p = float(_sigmoid(np.array([f.z]))[0])
    return float(np.clip(p, _PROB_EPS, 1.0 - _PROB_EPS))


def long_selection(sample: Sample, params: ModelParams, config: ModelConfig,
                   item_fps: Optional[FingerprintTable] = None) -> TopKResult:
    """The long-window retrieval a forward pass would use right now."""
    if config.variant not in SELECTING_VARIANTS:
        raise ValueError(f"variant {config.variant} has no retrieval stage")
    target = params.item_emb[sample.target_item] + params.cat_emb[sample.target_category]
    lt = _embed_sequence(sample.long_seq, sample.timestamp, params, config, "long_seq")
    return _select_long(target, lt, params, config, sample.target_category, item_fps)


def _scatter_seq(g, sd: _SeqData, g_rows: np.ndarray, rows: np.ndarray, config: ModelConfig):
    if rows.shape[0] == 0:
        return
    np.add.at(g["item_emb"], sd.items[rows], g_rows)
    np.add.at(g["cat_emb"], sd.cats[rows], g_rows)
    if config.use_time_buckets:
        np.add.at(g["time_emb"], sd.buckets[rows], g_rows)


def _backward_sample(f: _Fwd, params: ModelParams, config: ModelConfig, g_z: float, g: dict):
    d = config.d
    # MLP
    g_a = params.mlp_w[-1][:, 0] * g_z
    g["mlp.w%d" % (len(params.mlp_w) - 1)] += np.outer(f.acts[-1], [g_z])
    g["mlp.b%d" % (len(params.mlp_w) - 1)] += g_z
    for i in range(len(params.mlp_w) - 2, -1, -1):
        g_pre = g_a * _dleaky(f.pres[i])
        g["mlp.w%d" % i] += np.outer(f.acts[i], g_pre)
        g["mlp.b%d" % i] += g_pre
        g_a = params.mlp_w[i] @ g_pre

    g_user, g_ctx, g_target, g_short, g_long = (
        g_a[0:d], g_a[d : 2 * d], g_a[2 * d : 3 * d].copy(), g_a[3 * d : 4 * d], g_a[4 * d : 5 * d]
    )
    g["user_emb"][f.sample.user_id] += g_user
    g["ctx_emb"][f.sample.context_bucket] += g_ctx

    # short window
    if f.short_mode == "mean":
        valid = np.flatnonzero(f.st.mask)
        if valid.shape[0]:
            per_row = np.broadcast_to(g_short / valid.shape[0], (valid.shape[0], d))
            _scatter_seq(g, f.st, per_row, valid, config)
    else:
        ag = mhta_backward(f.short_cache, params.short_attn, g_short)
        g["short.wq"] += ag.wq
        g["short.wk"] += ag.wk
        g["short.wv"] += ag.wv
        g["short.wo"] += ag.wo
        g_target += ag.target
        valid = np.flatnonzero(f.st.mask)
        if valid.shape[0]:
            _scatter_seq(g, f.st, ag.sequence[valid], valid, config)

    # long window
    if f.long_mode == "mean":
        valid = np.flatnonzero(f.lt.mask)
        if valid.shape[0]:
            per_row = np.broadcast_to(g_long / valid.shape[0], (valid.shape[0], d))
            _scatter_seq(g, f.lt, per_row, valid, config)
    elif f.long_mode == "attn_full":
        ag = mhta_backward(f.long_cache, params.long_attn, g_long)
        g["long.wq"] += ag.wq
        g["long.wk"] += ag.wk
        g["long.wv"] += ag.wv
        g["long.wo"] += ag.wo
        g_target += ag.target
        valid = np.flatnonzero(f.lt.mask)
        if valid.shape[0]:
            _scatter_seq(g, f.lt, ag.sequence[valid], valid, config)
    elif f.long_mode == "attn_sel":
        ag = mhta_backward(f.long_cache, params.long_attn, g_long)
        g["long.wq"] += ag.wq
        g["long.wk"] += ag.wk
        g["long.wv"] += ag.wv
        g["long.wo"] += ag.wo
        g_target += ag.target
        if f.sel_sorted.shape[0]:
            _scatter_seq(g, f.lt, ag.sequence, f.sel_sorted, config)

    g["item_emb"][f.sample.target_item] += g_target
    g["cat_emb"][f.sample.target_category] += g_target


def loss_and_gradients(
    batch, params: ModelParams, config: ModelConfig,
    frozen_selections: Optional[list] = None,
):
    """Mean logit-space BCE + L2, and its analytic gradients.

    frozen_selections optionally pins the per-sample retrieval (a list of
    index arrays aligned with the batch); used to compare against finite
    differences, where the selection must not move under perturbation."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    flat = flatten(params, config)
    g = {name: np.zeros_like(arr) for name, arr in flat.items()}
    total = 0.0
    inv = 1.0 / len(batch)
    for i, sample in enumerate(batch):
        sel = None if frozen_selections is None else frozen_selections[i]
        f = _forward_sample(sample, params, config, frozen_selection=sel)
        y = float(sample.label)
        total += float(np.logaddexp(0.0, f.z)) - y * f.z
        g_z = (float(_sigmoid(np.array([f.z]))[0]) - y) * inv
        _backward_sample(f, params, config, g_z, g)
    loss = total * inv
    for name, arr in flat.items():
        if name.startswith(_L2_PREFIXES):
            loss += config.l2 * float((arr * arr).sum())
            g[name] += 2.0 * config.l2 * arr
    for name in ("item_emb", "cat_emb", "user_emb", "ctx_emb"):
        g[name][0] = 0.0  # padding row is frozen
    if not np.isfinite(loss):
        raise NumericError("loss is non-finite")
    return loss, g


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(flat: dict) -> AdamState:
    return AdamState(
        {k: np.zeros_like(v) for k, v in flat.items()},
        {k: np.zeros_like(v) for k, v in flat.items()},
    )


def adam_step(flat: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, arr in flat.items():
        gr = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * gr
        v *= beta2
        v += (1.0 - beta2) * gr * gr
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TrainResult:
    params: ModelParams  # weights at the best validation AUC
    metrics: list  # one dict per epoch
    best_epoch: int = -1


def train(train_samples, val_samples, config: ModelConfig,
          params: Optional[ModelParams] = None, log=None) -> TrainResult:
    """Single-threaded deterministic training; keeps the best-val-AUC weights."""
    if params is None:
        params = init_params(config)
    if config.epochs == 0:
        return TrainResult(params, [], -1)
    if len(train_samples) == 0:
        raise ValueError("no training samples")
    flat = flatten(params, config)
    adam = adam_init(flat)
    rng = np.random.default_rng(_derived_seed(config.seed, 4))
    best = clone_params(params)
    best_auc = -1.0
    best_epoch = -1
    metrics = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = [train_samples[i] for i in idx]
            try:
                loss, grads = loss_and_gradients(batch, params, config)
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at epoch {epoch} batch {start // config.batch_size}: {exc}"
                ) from exc
            adam_step(flat, grads, adam, config.learning_rate)
            losses.append(loss)
        val_auc = float("nan")
        if len(val_samples) > 0:
            val_auc = evaluate(val_samples, params, config).auc
            if val_auc > best_auc:
                best_auc = val_auc
                best = clone_params(params)
                best_epoch = epoch
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_auc": val_auc,
            "seconds": time.perf_counter() - t0,
        }
        metrics.append(row)
        if log is not None:
            log(row)
    if best_epoch < 0:  # no validation data: keep the final weights
        best = params
    return TrainResult(best, metrics, best_epoch)


def auc(scores, labels) -> float:
    """Rank-based AUC with tied scores counted half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal 1-d shapes")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.isfinite(s).all():
        raise ValueError("scores contain non-finite values")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes required to compute AUC")
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    # average ranks within tie groups (1-based)
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0  # mean of ranks start+1 .. end
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalResult:
    auc: float
    scores: np.ndarray
    labels: np.ndarray


def evaluate(samples, params: ModelParams, config: ModelConfig,
             item_fps: Optional[FingerprintTable] = None) -> EvalResult:
    if len(samples) == 0:
        raise ValueError("no samples to evaluate")
    scores = np.empty(len(samples))
    labels = np.empty(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        scores[i] = forward(s, params, config, item_fps)
        labels[i] = s.label
    return EvalResult(auc(scores, labels), scores, labels)


def fingerprint_items(params: ModelParams, config: ModelConfig, item_cats: np.ndarray) -> FingerprintTable:
    """Per-item fingerprint table over ids 0..n_items.

    item_cats[i] is the category of item i (0 for the padding row)."""
    if config.hash_projected:
        raise ValueError("precomputed tables are unavailable with hash_projected")
    cats = np.asarray(item_cats, dtype=np.int64)
    if cats.shape != (config.n_items + 1,):
        raise ValueError(f"item_cats shape {cats.shape}, expected ({config.n_items + 1},)")
    vecs = params.item_emb + params.cat_emb[cats]
    vecs[0] = 0.0
    return fingerprint_batch(vecs, params.family)


def item_categories_from_samples(samples, config: ModelConfig) -> np.ndarray:
    """item -> category array recovered from sample targets and behaviors."""
    cats = np.zeros(config.n_items + 1, dtype=np.int64)
    for s in samples:
        cats[s.target_item] = s.target_category
        for item, cat, _ in s.short_seq:
            if item:
                cats[item] = cat
        for item, cat, _ in s.long_seq:
            if item:
                cats[item] = cat
    return cats


def verify_item_fingerprints(table: FingerprintTable, params: ModelParams,
                             config: ModelConfig, item_cats: np.ndarray) -> None:
    """Refuse stale tables: header shape plus a bit-exact spot check."""
    if table.rounds != config.n_rounds or table.bits_per_round != config.m:
        raise FormatError(
            f"fingerprint table is {table.rounds} rounds x {table.bits_per_round} bits,"
            f" config wants {config.n_rounds} x {config.m}"
        )
    if len(table) != config.n_items + 1:
        raise FormatError(
            f"fingerprint table has {len(table)} rows, config wants {config.n_items + 1}"
        )
    cats = np.asarray(item_cats, dtype=np.int64)
    probe = np.unique(np.linspace(1, config.n_items, num=min(64, config.n_items), dtype=np.int64))
    vecs = params.item_emb[probe] + params.cat_emb[cats[probe]]
    fresh = fingerprint_batch(vecs, params.family)
    if not np.array_equal(fresh.words, table.words[probe]):
        raise FormatError("fingerprint table does not match current weights (stale seed or embeddings)")


# ---------------------------------------------------------------------------
# request scoring (one user state, many candidates)


@dataclass(frozen=True)
class Request:
    user_id: int
    context_bucket: int
    timestamp: int
    short_seq: tuple
    long_seq: tuple


def request_from_sample(sample: Sample) -> Request:
    return Request(
        sample.user_id, sample.context_bucket, sample.timestamp,
        sample.short_seq, sample.long_seq,
    )


class RequestState:
    __slots__ = ("req", "user_vec", "ctx_vec", "st", "lt", "st_kv", "lt_kv", "long_fps", "item_fps")


def _kv_stacks(emb: np.ndarray, attn: MHTAParams):
    ks = np.stack([emb @ attn.wk[h] for h in range(attn.n_heads)])
    vs = np.stack([emb @ attn.wv[h] for h in range(attn.n_heads)])
    return ks, vs


def prepare_request(request: Request, params: ModelParams, config: ModelConfig,
                    item_fps: Optional[FingerprintTable] = None) -> RequestState:
    """Per-request work shared by all candidates: embeddings, K/V, key bits."""
    _check_id("user_id", request.user_id, config.n_users)
    _check_id("context_bucket", request.context_bucket, config.n_contexts)
    if len(request.short_seq) > config.l_st:
        raise ValueError(f"short_seq length {len(request.short_seq)} exceeds l_st={config.l_st}")
    if len(request.long_seq) > config.l_lt:
        raise ValueError(f"long_seq length {len(request.long_seq)} exceeds l_lt={config.l_lt}")
    state = RequestState()
    state.req = request
    state.user_vec = params.user_emb[request.user_id]
    state.ctx_vec = params.ctx_emb[request.context_bucket]
    state.st = _embed_sequence(request.short_seq, request.timestamp, params, config, "short_seq")
    state.lt = _embed_sequence(request.long_seq, request.timestamp, params, config, "long_seq")
    state.st_kv = None if config.variant == "POOLING" else _kv_stacks(state.st.emb, params.short_attn)
    needs_long_attn = config.variant in ("FULL_TA", "ETA", "SIM_HARD", "ETA_DOT")
    state.lt_kv = _kv_stacks(state.lt.emb, params.long_attn) if needs_long_attn else None
    state.long_fps = None
    state.item_fps = item_fps
    if config.variant == "ETA" and not config.hash_projected:
        if item_fps is not None:
            state.long_fps = item_fps.take(state.lt.items)
        else:
            state.long_fps = fingerprint_batch(state.lt.base, params.family)
    return state


def candidate_embeddings(candidates, params: ModelParams, config: ModelConfig):
    """(items, categories, base embeddings) for a list of (item, category)."""
    n = len(candidates)
    arr = np.asarray(candidates, dtype=np.int64).reshape(n, 2) if n else np.empty((0, 2), np.int64)
    items, cats = arr[:, 0], arr[:, 1]
    if n and (items.min() < 1 or items.max() > config.n_items):
        raise ValueError(f"candidate item id outside [1, {config.n_items}]")
    if n and (cats.min() < 1 or cats.max() > config.n_categories):
        raise ValueError(f"candidate category id outside [1, {config.n_categories}]")
    return items, cats, params.item_emb[items] + params.cat_emb[cats]


def retrieval_stage(state: RequestState, cand_items: np.ndarray, cand_emb: np.ndarray,
                    cand_cats: np.ndarray, params: ModelParams,
                    config: ModelConfig) -> Optional[np.ndarray]:
    """(n_candidates, k_eff) selected positions, or None when the variant
    attends to everything.  Row order matches the per-sample selectors.

    With a fingerprint table on the request state, candidate query bits
    are read from it by item id: candidates are catalog items, so their
    fingerprints are table rows (the table binds each item to its catalog
    category; hashing the embedding gives the same bits)."""
    variant = config.variant
    lt = state.lt
    length = lt.mask.shape[0]
    if variant == "ETA":
        if config.hash_projected:
            rows = [
                long_selection_like(state, cand_emb[i], params, config).indices
                for i in range(cand_emb.shape[0])
            ]
            return np.stack(rows) if rows else np.empty((0, 0), np.int64)
        if state.item_fps is not None:
            qfps = state.item_fps.take(cand_items)
        else:
            qfps = fingerprint_batch(cand_emb, params.family)
        idx, _ = hamming_top_k_batch(qfps, state.long_fps, lt.mask, config.k)
        return idx
    if variant == "SIM_HARD":
        match = (lt.cats[None, :] == cand_cats[:, None]) & lt.mask[None, :]
        recency = np.arange(length - 1, -1, -1, dtype=np.int64)
        composite = np.where(match, np.int64(0), np.int64(length)) + recency[None, :]
        composite[:, ~lt.mask] = np.int64(2**62)
        k_eff = min(config.k, int(lt.mask.sum()))
        if k_eff == 0:
            return np.empty((cand_emb.shape[0], 0), np.int64)
        part = (
            np.argpartition(composite, k_eff - 1, axis=1)[:, :k_eff]
            if k_eff < length else np.broadcast_to(np.arange(length), composite.shape).copy()
        )
        order = np.argsort(np.take_along_axis(composite, part, axis=1), axis=1, kind="stable")
        return np.take_along_axis(part, order, axis=1).astype(np.int64)
    if variant == "ETA_DOT":
        rows = [
            top_k_by_dot(cand_emb[i], lt.base, lt.mask, config.k, metric="dot").indices
            for i in range(cand_emb.shape[0])
        ]
        return np.stack(rows) if rows else np.empty((0, 0), np.int64)
    return None


def long_selection_like(state: RequestState, target: np.ndarray,
                        params: ModelParams, config: ModelConfig) -> TopKResult:
    qfp = simhash(target @ params.long_attn.wq[0], params.family)
    kfps = fingerprint_batch(state.lt.base @ params.long_attn.wk[0], params.family)
    return top_k_by_hamming(qfp, kfps, state.lt.mask, config.k)


def _attend_full_batch(kv, cand_q: np.ndarray, mask: np.ndarray, attn: MHTAParams):
    ks, vs = kv
    n = cand_q.shape[0]
    heads = np.empty((n, attn.n_heads * attn.d_head))
    if not mask.any():
        return np.zeros((n, attn.wo.shape[1]))
    for h in range(attn.n_heads):
        q = cand_q @ attn.wq[h]  # (n, d_head)
        logits = attn.alpha * (q @ ks[h].T)  # (n, L)
        logits[:, ~mask] = -np.inf
        shift = logits.max(axis=1, keepdims=True)
        w = np.exp(logits - shift)
        w[:, ~mask] = 0.0
        w /= w.sum(axis=1, keepdims=True)
        heads[:, h * attn.d_head : (h + 1) * attn.d_head] = w @ vs[h]
    return heads @ attn.wo


def _attend_selected_batch(kv, cand_q: np.ndarray, sel: np.ndarray, attn: MHTAParams):
    ks, vs = kv
    n, k = sel.shape
    if k == 0:
        return np.zeros((n, attn.wo.shape[1]))
    sel = np.sort(sel, axis=1)  # same gather order as the per-sample path
    flat = sel.ravel()  # np.take on a flat index is the fastest row gather
    d_h = attn.d_head
    heads = np.empty((n, attn.n_heads * d_h))
    k_buf = scratch_buf("attend.k", (n * k, d_h), np.float64)
    v_buf = scratch_buf("attend.v", (n * k, d_h), np.float64)
    for h in range(attn.n_heads):
        q = cand_q @ attn.wq[h]
        k_sel = np.take(ks[h], flat, axis=0, out=k_buf).reshape(n, k, d_h)
        v_sel = np.take(vs[h], flat, axis=0, out=v_buf).reshape(n, k, d_h)
        logits = attn.alpha * (k_sel @ q[:, :, None])[:, :, 0]
        shift = logits.max(axis=1, keepdims=True)
        w = np.exp(logits - shift)
        w /= w.sum(axis=1, keepdims=True)
        heads[:, h * attn.d_head : (h + 1) * attn.d_head] = (w[:, None, :] @ v_sel)[:, 0, :]
    return heads @ attn.wo


def attention_stage(state: RequestState, cand_emb: np.ndarray, sel: Optional[np.ndarray],
                    params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Long-window representation for every candidate, (n_candidates, d)."""
    n, d = cand_emb.shape
    variant = config.variant
    if variant == "DIN_SHORT":
        return np.zeros((n, d))
    if variant in ("POOLING", "DIN_LONG_AVG"):
        return np.broadcast_to(_masked_mean(state.lt.emb, state.lt.mask, d), (n, d)).copy()
    if variant == "FULL_TA":
        return _attend_full_batch(state.lt_kv, cand_emb, state.lt.mask, params.long_attn)
    return _attend_selected_batch(state.lt_kv, cand_emb, sel, params.long_attn)


def finish_stage(state: RequestState, cand_emb: np.ndarray, long_rep: np.ndarray,
                 params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Short-window representation, MLP, sigmoid; returns probabilities."""
    n, d = cand_emb.shape
    if config.variant == "POOLING":
        short_rep = np.broadcast_to(_masked_mean(state.st.emb, state.st.mask, d), (n, d))
    else:
        short_rep = _attend_full_batch(state.st_kv, cand_emb, state.st.mask, params.short_attn)
    x = np.concatenate(
        [
            np.broadcast_to(state.user_vec, (n, d)),
            np.broadcast_to(state.ctx_vec, (n, d)),
            cand_emb, short_rep, long_rep,
        ],
        axis=1,
    )
    a = x
    for w, b in zip(params.mlp_w[:-1], params.mlp_b[:-1]):
        a = _leaky(a @ w + b)
    z = a @ params.mlp_w[-1][:, 0] + params.mlp_b[-1][0]
    return np.clip(_sigmoid(z), _PROB_EPS, 1.0 - _PROB_EPS)


def predict_request(request: Request, candidates, params: ModelParams, config: ModelConfig,
                    item_fps: Optional[FingerprintTable] = None) -> np.ndarray:
    """Scores for all candidates against one user state.

    Computes request-side embeddings, K/V projections and key fingerprints
    once and reuses them across candidates; per-candidate scores match
    forward() on the equivalent sample to within 1e-6.  When item_fps is
    given, both the sequence keys and the candidate queries read their
    bits from the table instead of rehashing embeddings; scores are
    unchanged as long as the table matches the current weights and the
    candidates carry their catalog categories (verify_item_fingerprints
    checks the former)."""
    if len(candidates) == 0:
        return np.empty(0)
    state = prepare_request(request, params, config, item_fps)
    items, cats, cand_emb = candidate_embeddings(candidates, params, config)
    sel = retrieval_stage(state, items, cand_emb, cats, params, config)
    long_rep = attention_stage(state, cand_emb, sel, params, config)
    return finish_stage(state, cand_emb, long_rep, params, config)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    cfg = asdict(config)
    cfg["mlp_widths"] = list(config.mlp_widths)
    blob = json.dumps(cfg).encode("utf-8")
    flat = flatten(params, config)
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in param_names(config):
            fh.write(flat[name].astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (params, config).  Validates header, config echo and shapes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CKPT_HEADER.size:
        raise FormatError(f"truncated header: {len(data)} bytes (offset 0)")
    magic, version, blob_len = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    off = _CKPT_HEADER.size
    if len(data) < off + blob_len:
        raise FormatError(f"truncated config echo at offset {off}")
    try:
        cfg_dict = json.loads(data[off : off + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config echo at offset {off}: {exc}") from exc
    known = {f.name for f in ModelConfig.__dataclass_fields__.values()}
    unknown = set(cfg_dict) - known
    if unknown:
        raise FormatError(f"unknown config keys in checkpoint: {sorted(unknown)}")
    try:
        config = ModelConfig(**cfg_dict)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid config echo: {exc}") from exc
    off += blob_len
    params = init_params(config)
    flat = flatten(params, config)
    for name in param_names(config):
        arr = flat[name]
        nbytes = 4 * arr.size
        if len(data) < off + nbytes:
            raise FormatError(
                f"truncated tensor {name!r} at offset {off}: need {nbytes} bytes,"
                f" have {len(data) - off}"
            )
        arr[...] = np.frombuffer(data, dtype="<f4", count=arr.size, offset=off).reshape(arr.shape)
        off += nbytes
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes at offset {off}")
    return params, config
