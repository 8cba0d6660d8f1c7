"""Latency and ablation harness.

Measurements use the monotonic clock (perf_counter_ns), score simulated
request streams (random full-length histories, fixed candidate count),
and run single-threaded by default: BLAS pools are clamped to one thread
via threadpoolctl when available so variant comparisons stay
apples-to-apples.  Every grid runs warm-up requests before any timed
ones.  Reports go to CSV (one row per grid cell) and JSON (same records
plus an environment note); latencies are microseconds.

Two measurement shapes, chosen by what the numbers feed:

* ``run_ablation`` times each trained cell on its own (sequentially);
  its downstream checks are strict orderings with wide gaps, so
  cell-to-cell drift does not matter.
* ``run_comparison`` and ``run_scaling`` feed ratio checks with tight
  windows, so their cells share one request loop with a rotating lead:
  every timed step scores one request per cell, and the cell that goes
  first rotates, which spreads slow host drift (thermal state, cache
  pressure from the measurement itself) evenly over all cells.
  ``run_scaling`` additionally times the retrieval and attention stages
  by repeating each stage call ``STAGE_INNER`` times inside one clock
  window on the same prepared request; single calls would charge
  sub-millisecond stages for refilling caches the bookkeeping between
  calls evicted, which flattens the very trend being measured.

Report labels follow the technique/retrieval/L/K notation, e.g. a
hash-retrieved attention model over 1024 behaviors keeping 48 of them is
``TA/HASH/1024/48`` and the unrestricted model is ``TA/-/1024/-``.
"""

from __future__ import annotations

import csv
import json
import platform
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from . import model as M
from .data import item_category_of

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - present in the dev environment
    threadpool_limits = None


def single_thread():
    return threadpool_limits(limits=1) if threadpool_limits is not None else nullcontext()


def environment_note() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "timestamp_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "single_threaded": threadpool_limits is not None,
    }


def variant_label(variant: str, l_lt: int, k: int) -> str:
    if variant == "ETA":
        return f"TA/HASH/{l_lt}/{k}"
    if variant == "ETA_DOT":
        return f"TA/DOT/{l_lt}/{k}"
    if variant == "SIM_HARD":
        return f"TA/CAT/{l_lt}/{k}"
    if variant == "FULL_TA":
        return f"TA/-/{l_lt}/-"
    if variant == "DIN_SHORT":
        return "TA/-/0/-"
    return f"AVG/-/{l_lt}/-"  # POOLING, DIN_LONG_AVG


@dataclass
class BenchRecord:
    label: str
    variant: str
    l_lt: int
    k: int
    n_candidates: int
    d: int
    m: int
    n_rounds: int
    auc: float
    n_requests: int
    warmup: int
    mean_us: float
    p50_us: float
    p95_us: float
    retrieval_mean_us: float
    attention_mean_us: float
    stage_inner: int = 0  # stage calls per clock window; 0 = stages not timed
    error: Optional[str] = None


CSV_FIELDS = list(BenchRecord.__dataclass_fields__)


def simulated_requests(config: M.ModelConfig, n: int, seed: int, n_candidates: int):
    """Random full-length request pool plus candidate lists."""
    rng = np.random.default_rng(seed)
    now = 1_700_000_000
    requests = []
    candidate_lists = []
    for _ in range(n):
        def seq(length):
            items = rng.integers(1, config.n_items + 1, size=length)
            return tuple(
                (int(it), item_category_of(int(it), config.n_categories), now - 3600 * (length - j))
                for j, it in enumerate(items)
            )
        requests.append(
            M.Request(
                int(rng.integers(1, config.n_users + 1)),
                int(rng.integers(1, config.n_contexts + 1)),
                now, seq(config.l_st), seq(config.l_lt),
            )
        )
        items = rng.integers(1, config.n_items + 1, size=n_candidates)
        candidate_lists.append(
            [(int(it), item_category_of(int(it), config.n_categories)) for it in items]
        )
    return requests, candidate_lists


def measure_scoring(params, config: M.ModelConfig, requests, candidate_lists,
                    n_requests: int, warmup: int, stage_times=False,
                    item_fps=None) -> dict:
    """Time predict_request over a cycled request pool; microsecond stats.

    When an item fingerprint table is given, hash retrieval reads key bits
    from it instead of rehashing the sequence per request (the serving
    setup: fingerprints are refreshed offline whenever weights change, and
    scores are identical either way)."""
    pool = len(requests)
    totals = np.empty(n_requests)
    retrievals = np.empty(n_requests) if stage_times else None
    attentions = np.empty(n_requests) if stage_times else None
    with single_thread():
        for i in range(warmup):
            M.predict_request(requests[i % pool], candidate_lists[i % pool], params, config,
                              item_fps=item_fps)
        for i in range(n_requests):
            req = requests[i % pool]
            cands = candidate_lists[i % pool]
            if stage_times:
                t0 = time.perf_counter_ns()
                state = M.prepare_request(req, params, config, item_fps)
                items, cats, cand_emb = M.candidate_embeddings(cands, params, config)
                t1 = time.perf_counter_ns()
                sel = M.retrieval_stage(state, items, cand_emb, cats, params, config)
                t2 = time.perf_counter_ns()
                long_rep = M.attention_stage(state, cand_emb, sel, params, config)
                t3 = time.perf_counter_ns()
                M.finish_stage(state, cand_emb, long_rep, params, config)
                t4 = time.perf_counter_ns()
                totals[i] = (t4 - t0) / 1e3
                retrievals[i] = (t2 - t1) / 1e3
                attentions[i] = (t3 - t2) / 1e3
            else:
                t0 = time.perf_counter_ns()
                M.predict_request(req, cands, params, config, item_fps=item_fps)
                totals[i] = (time.perf_counter_ns() - t0) / 1e3
    out = {
        "mean_us": float(totals.mean()),
        "p50_us": float(np.percentile(totals, 50)),
        "p95_us": float(np.percentile(totals, 95)),
    }
    out["retrieval_mean_us"] = float(retrievals.mean()) if stage_times else float("nan")
    out["attention_mean_us"] = float(attentions.mean()) if stage_times else float("nan")
    out["stage_inner"] = 1 if stage_times else 0
    return out


def serving_fingerprints(params, config: M.ModelConfig):
    """Per-item fingerprint table for hash retrieval, or None if unused.

    Simulated candidates and histories draw from the full catalog with the
    canonical item-to-category layout, so the table covers every id the
    scorer will see."""
    if config.variant != "ETA" or config.hash_projected:
        return None
    ids = np.arange(1, config.n_items + 1)
    cats = np.concatenate([[0], item_category_of(ids, config.n_categories)])
    return M.fingerprint_items(params, config, cats)


def run_cell(config: M.ModelConfig, samples, n_candidates: int, n_requests: int,
             warmup: int, pool_size: int = 64, stage_times=False, log=None) -> BenchRecord:
    """Train (epochs per config; 0 means score a fresh init), measure AUC on
    the test split when data is given, then time the scoring path."""
    auc_value = float("nan")
    if samples is not None and len(samples.train) and config.epochs > 0:
        result = M.train(samples.train, samples.val, config, log=log)
        params = result.params
    else:
        params = M.init_params(config)
    if samples is not None and len(samples.test):
        auc_value = M.evaluate(samples.test, params, config).auc
    requests, cand_lists = simulated_requests(
        config, min(pool_size, n_requests), config.seed, n_candidates
    )
    stats = measure_scoring(params, config, requests, cand_lists, n_requests, warmup,
                            stage_times=stage_times,
                            item_fps=serving_fingerprints(params, config))
    return BenchRecord(
        label=variant_label(config.variant, config.l_lt, config.k),
        variant=config.variant, l_lt=config.l_lt, k=config.k,
        n_candidates=n_candidates, d=config.d, m=config.m, n_rounds=config.n_rounds,
        auc=auc_value, n_requests=n_requests, warmup=warmup,
        **stats,
    )


def run_ablation(base: M.ModelConfig, cells, samples, n_candidates: int,
                 n_requests: int, warmup: int, log=None):
    """One record per cell; a failing cell is recorded and the sweep goes on."""
    records = []
    for cell in cells:
        config = replace(base, **cell)
        try:
            records.append(
                run_cell(config, samples, n_candidates, n_requests, warmup, log=log)
            )
        except Exception as exc:  # keep the sweep alive, report the cell
            records.append(
                BenchRecord(
                    label=variant_label(config.variant, config.l_lt, config.k),
                    variant=config.variant, l_lt=config.l_lt, k=config.k,
                    n_candidates=n_candidates, d=config.d, m=config.m,
                    n_rounds=config.n_rounds, auc=float("nan"),
                    n_requests=n_requests, warmup=warmup,
                    mean_us=float("nan"), p50_us=float("nan"), p95_us=float("nan"),
                    retrieval_mean_us=float("nan"), attention_mean_us=float("nan"),
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    return records


def _timing_jobs(configs, n_candidates_per, n_requests, pool_size):
    """Fresh weights, request pool, and fingerprint table per timing cell."""
    jobs = []
    for config, n_candidates in zip(configs, n_candidates_per):
        params = M.init_params(config)
        requests, cand_lists = simulated_requests(
            config, min(pool_size, n_requests), config.seed, n_candidates
        )
        jobs.append((params, config, requests, cand_lists,
                     serving_fingerprints(params, config)))
    return jobs


def measure_paired(jobs, n_requests: int, warmup: int) -> np.ndarray:
    """Total scoring latencies for several cells on one interleaved stream.

    Each job is (params, config, requests, candidate_lists, item_fps).
    Every timed step scores one request per job with a rotating lead, so
    slow host drift lands evenly on each cell and their means stay
    directly comparable.  Returns microsecond totals, one row per job."""
    n_jobs = len(jobs)
    totals = np.empty((n_jobs, n_requests))
    with single_thread():
        for i in range(warmup):
            for params, config, requests, cand_lists, item_fps in jobs:
                M.predict_request(requests[i % len(requests)],
                                  cand_lists[i % len(cand_lists)],
                                  params, config, item_fps=item_fps)
        for i in range(n_requests):
            lead = i % n_jobs
            for off in range(n_jobs):
                j = (lead + off) % n_jobs
                params, config, requests, cand_lists, item_fps = jobs[j]
                req = requests[i % len(requests)]
                cands = cand_lists[i % len(cand_lists)]
                t0 = time.perf_counter_ns()
                M.predict_request(req, cands, params, config, item_fps=item_fps)
                totals[j, i] = (time.perf_counter_ns() - t0) / 1e3
    return totals


def run_comparison(base: M.ModelConfig, cells, n_candidates: int,
                   n_requests: int, warmup: int, pool_size: int = 64):
    """Latency head-to-head across config tweaks, untrained weights.

    All cells run inside one interleaved loop (measure_paired), so mean
    ratios between them are trustworthy; AUC fields are NaN."""
    configs = [replace(base, **cell) for cell in cells]
    jobs = _timing_jobs(configs, [n_candidates] * len(configs), n_requests, pool_size)
    totals = measure_paired(jobs, n_requests, warmup)
    return [
        BenchRecord(
            label=variant_label(config.variant, config.l_lt, config.k),
            variant=config.variant, l_lt=config.l_lt, k=config.k,
            n_candidates=n_candidates, d=config.d, m=config.m,
            n_rounds=config.n_rounds, auc=float("nan"),
            n_requests=n_requests, warmup=warmup,
            mean_us=float(t.mean()),
            p50_us=float(np.percentile(t, 50)),
            p95_us=float(np.percentile(t, 95)),
            retrieval_mean_us=float("nan"), attention_mean_us=float("nan"),
        )
        for config, t in zip(configs, totals)
    ]


STAGE_INNER = 4  # stage calls per clock window in run_scaling


def run_scaling(base: M.ModelConfig, lengths, n_candidates,
                n_requests: int, warmup: int, pool_size: int = 64):
    """Stage-timed sweep over (long length, candidate count) cells.

    Untrained weights; cells interleave with a rotating lead as in
    measure_paired.  Totals come from single predict_request calls; the
    retrieval and attention stages are then re-run STAGE_INNER times on
    the same prepared request inside one clock window, amortizing the
    cache refills that the per-request bookkeeping would otherwise
    charge to sub-millisecond stages."""
    if isinstance(n_candidates, int):
        n_candidates = [n_candidates]
    grid = [(l_lt, nc) for l_lt in lengths for nc in n_candidates]
    configs = [replace(base, l_lt=l_lt) for l_lt, _ in grid]
    jobs = _timing_jobs(configs, [nc for _, nc in grid], n_requests, pool_size)
    n_jobs = len(jobs)
    totals = np.empty((n_jobs, n_requests))
    retrievals = np.empty((n_jobs, n_requests))
    attentions = np.empty((n_jobs, n_requests))
    with single_thread():
        for i in range(warmup):
            for params, config, requests, cand_lists, item_fps in jobs:
                M.predict_request(requests[i % len(requests)],
                                  cand_lists[i % len(cand_lists)],
                                  params, config, item_fps=item_fps)
        for i in range(n_requests):
            lead = i % n_jobs
            for off in range(n_jobs):
                j = (lead + off) % n_jobs
                params, config, requests, cand_lists, item_fps = jobs[j]
                req = requests[i % len(requests)]
                cands = cand_lists[i % len(cand_lists)]
                t0 = time.perf_counter_ns()
                M.predict_request(req, cands, params, config, item_fps=item_fps)
                totals[j, i] = (time.perf_counter_ns() - t0) / 1e3
                state = M.prepare_request(req, params, config, item_fps)
                items, cats, cand_emb = M.candidate_embeddings(cands, params, config)
                t0 = time.perf_counter_ns()
                for _ in range(STAGE_INNER):
                    sel = M.retrieval_stage(state, items, cand_emb, cats, params, config)
                retrievals[j, i] = (time.perf_counter_ns() - t0) / 1e3 / STAGE_INNER
                t0 = time.perf_counter_ns()
                for _ in range(STAGE_INNER):
                    M.attention_stage(state, cand_emb, sel, params, config)
                attentions[j, i] = (time.perf_counter_ns() - t0) / 1e3 / STAGE_INNER
    return [
        BenchRecord(
            label=variant_label(config.variant, config.l_lt, config.k),
            variant=config.variant, l_lt=l_lt, k=config.k, n_candidates=nc,
            d=config.d, m=config.m, n_rounds=config.n_rounds, auc=float("nan"),
            n_requests=n_requests, warmup=warmup,
            mean_us=float(totals[j].mean()),
            p50_us=float(np.percentile(totals[j], 50)),
            p95_us=float(np.percentile(totals[j], 95)),
            retrieval_mean_us=float(retrievals[j].mean()),
            attention_mean_us=float(attentions[j].mean()),
            stage_inner=STAGE_INNER,
        )
        for j, ((l_lt, nc), config) in enumerate(zip(grid, configs))
    ]


def format_record(rec: BenchRecord) -> str:
    """One aligned report line; stage columns appear when measured."""
    if rec.error:
        return f"{rec.label:<20} ERROR {rec.error}"
    extra = ""
    if np.isfinite(rec.retrieval_mean_us):
        extra = (
            f" retrieve={rec.retrieval_mean_us:9.1f}us"
            f" attend={rec.attention_mean_us:9.1f}us"
        )
    return (
        f"{rec.label:<20} auc={rec.auc:.5f} mean={rec.mean_us:9.1f}us"
        f" p50={rec.p50_us:9.1f}us p95={rec.p95_us:9.1f}us{extra}"
    )


def write_report_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for rec in records:
            writer.writerow(asdict(rec))


def write_report_json(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"environment": environment_note(), "records": [asdict(r) for r in records]},
            fh, indent=2,
        )
        fh.write("\n")
