"""Behavior logs, training samples, and the synthetic interest generator.

Log files are CSV lines ``user_id,item_id,category_id,behavior_type,
timestamp`` with behavior tokens pv / fav / cart / buy (stored internally
as click / favorite / cart / purchase).  Raw ids are remapped to dense
1-based integers in first-appearance order at load time (0 is reserved
for padding); the mapping is kept on the loaded log and can be persisted
next to derived datasets.  Malformed rows are counted and tolerated up
to 1% of the file, beyond which loading fails and names the first bad
line.

Samples follow the last-item protocol: per user the final event is the
positive target, the preceding events provide the short and long
windows, and negatives are drawn from the positive's category excluding
everything the user ever touched (falling back to the global pool for
degenerate categories).  The split is chronological 80/10/10 over
impressions ordered by timestamp, so the validation and test periods
never precede training data.

Sample files are a one-line schema header followed by one JSON object
per line.

The synthetic generator plants a long-term structure: each user gets a
few interest categories and a small pool of favorite items inside them.
Events older than the gap are favorites with probability 1 - noise_rate
(uniform noise otherwise).  Events inside the gap are window shopping:
with probability 1 - noise_rate a fresh non-favorite item from an
interest category, otherwise uniform noise.  The final event revisits a
favorite that already occurred in the old segment and never appears in
the recent one.  Models that read only the recent window therefore
cannot tell the positive from a same-category negative, while a model
that retrieves old occurrences of the target item can.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

BEHAVIOR_TOKENS = {"pv": "click", "fav": "favorite", "cart": "cart", "buy": "purchase"}
TOKEN_OF = {v: k for k, v in BEHAVIOR_TOKENS.items()}

SAMPLES_SCHEMA = "hashta-samples/1"

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class BehaviorEvent:
    user_id: int
    item_id: int
    category_id: int
    behavior_type: str  # click | favorite | cart | purchase
    timestamp: int


@dataclass
class BehaviorLog:
    """Parsed log with dense ids.  events_by_user lists are chronological."""

    events_by_user: dict
    user_map: dict  # raw -> dense
    item_map: dict
    category_map: dict
    item_category: dict  # dense item -> dense category (first seen)
    n_rows: int = 0
    n_malformed: int = 0

    @property
    def n_users(self) -> int:
        return len(self.user_map)

    @property
    def n_items(self) -> int:
        return len(self.item_map)

    @property
    def n_categories(self) -> int:
        return len(self.category_map)


def _parse_line(line: str):
    parts = line.split(",")
    if len(parts) != 5:
        return None
    try:
        user, item, cat = int(parts[0]), int(parts[1]), int(parts[2])
        ts = int(parts[4])
    except ValueError:
        return None
    btype = BEHAVIOR_TOKENS.get(parts[3].strip())
    if btype is None or ts <= 0:
        return None
    return user, item, cat, btype, ts


def load_behavior_log(path) -> BehaviorLog:
    user_map: dict = {}
    item_map: dict = {}
    cat_map: dict = {}
    item_category: dict = {}
    rows = []
    n_rows = 0
    n_malformed = 0
    first_bad = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            n_rows += 1
            parsed = _parse_line(line)
            if parsed is None:
                n_malformed += 1
                if first_bad is None:
                    first_bad = lineno
                continue
            user, item, cat, btype, ts = parsed
            u = user_map.setdefault(user, len(user_map) + 1)
            i = item_map.setdefault(item, len(item_map) + 1)
            c = cat_map.setdefault(cat, len(cat_map) + 1)
            item_category.setdefault(i, c)
            rows.append((u, i, c, btype, ts))
    if n_rows > 0 and n_malformed / n_rows > 0.01:
        raise FormatError(
            f"{n_malformed} of {n_rows} rows malformed (>1%), first at line {first_bad}"
        )
    events_by_user: dict = {}
    for u, i, c, btype, ts in rows:
        events_by_user.setdefault(u, []).append(
            BehaviorEvent(u, i, c, btype, ts)
        )
    for u in events_by_user:
        events_by_user[u].sort(key=lambda e: e.timestamp)
    return BehaviorLog(
        events_by_user, user_map, item_map, cat_map, item_category, n_rows, n_malformed
    )


def log_from_events(events) -> BehaviorLog:
    """Index in-memory events exactly as load_behavior_log would from disk."""
    user_map: dict = {}
    item_map: dict = {}
    cat_map: dict = {}
    item_category: dict = {}
    events_by_user: dict = {}
    for e in events:
        u = user_map.setdefault(e.user_id, len(user_map) + 1)
        i = item_map.setdefault(e.item_id, len(item_map) + 1)
        c = cat_map.setdefault(e.category_id, len(cat_map) + 1)
        item_category.setdefault(i, c)
        events_by_user.setdefault(u, []).append(
            BehaviorEvent(u, i, c, e.behavior_type, e.timestamp)
        )
    for u in events_by_user:
        events_by_user[u].sort(key=lambda e: e.timestamp)
    return BehaviorLog(
        events_by_user, user_map, item_map, cat_map, item_category, len(events), 0
    )


def write_behavior_log(path, events) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(
                f"{e.user_id},{e.item_id},{e.category_id},{TOKEN_OF[e.behavior_type]},{e.timestamp}\n"
            )


def save_id_maps(path, log: BehaviorLog) -> None:
    """Persist the raw-to-dense id mapping next to a derived dataset."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "users": {str(k): v for k, v in log.user_map.items()},
                "items": {str(k): v for k, v in log.item_map.items()},
                "categories": {str(k): v for k, v in log.category_map.items()},
                "item_category": {str(k): v for k, v in log.item_category.items()},
            },
            fh,
        )


def build_category_index(log: BehaviorLog) -> dict:
    """Dense category -> sorted list of dense items in it."""
    index: dict = {}
    for item, cat in log.item_category.items():
        index.setdefault(cat, []).append(item)
    for cat in index:
        index[cat].sort()
    return index


@dataclass(frozen=True)
class Sample:
    """One scoring instance: a candidate item against a user state."""

    user_id: int
    target_item: int
    target_category: int
    context_bucket: int
    timestamp: int  # impression time
    label: int
    short_seq: tuple  # ((item, category, ts), ...) oldest first, len <= L_st
    long_seq: tuple  # same, len <= L_lt


@dataclass
class SampleSet:
    train: list
    val: list
    test: list
    stats: dict = field(default_factory=dict)

    def __iter__(self):
        yield from self.train
        yield from self.val
        yield from self.test


def _context_bucket(ts: int) -> int:
    # hour of day, 1-based so 0 stays a padding id
    return (ts // 3600) % 24 + 1


def build_samples(
    sequences: dict,
    l_st: int,
    l_lt: int,
    negatives_per_positive: int,
    category_index: dict,
    seed: int,
) -> SampleSet:
    """Last-item-positive samples plus seeded same-category negatives."""
    if l_st < 1 or l_lt < 1:
        raise ValueError(f"window lengths must be positive, got {l_st}, {l_lt}")
    if negatives_per_positive < 0:
        raise ValueError(f"negatives_per_positive must be >= 0, got {negatives_per_positive}")
    item_of_cat = category_index
    cat_of_item = {}
    for cat, items in item_of_cat.items():
        for item in items:
            cat_of_item[item] = cat
    all_items = np.array(sorted(cat_of_item), dtype=np.int64)
    rng = np.random.default_rng(seed)
    units = []  # (ts, user, [samples]) kept together across the split
    skipped = 0
    fallback = 0
    dropped_negatives = 0
    for user in sorted(sequences):
        events = sequences[user]
        if len(events) < 2:
            skipped += 1
            continue
        target = events[-1]
        history = [e for e in events[:-1] if e.timestamp < target.timestamp]
        if not history:
            skipped += 1
            continue
        short = tuple((e.item_id, e.category_id, e.timestamp) for e in history[-l_st:])
        long = tuple((e.item_id, e.category_id, e.timestamp) for e in history[-l_lt:])
        ctx = _context_bucket(target.timestamp)
        seen = {e.item_id for e in events}
        samples = [
            Sample(user, target.item_id, target.category_id, ctx, target.timestamp, 1, short, long)
        ]
        if negatives_per_positive > 0:
            pool = [i for i in item_of_cat.get(target.category_id, ()) if i not in seen]
            if not pool:
                pool = [i for i in all_items.tolist() if i not in seen]
                if pool:
                    fallback += 1
            if not pool:
                dropped_negatives += negatives_per_positive
            else:
                arr = np.array(pool, dtype=np.int64)
                picks = rng.choice(
                    arr, size=negatives_per_positive, replace=len(arr) < negatives_per_positive
                )
                for item in picks.tolist():
                    samples.append(
                        Sample(
                            user, item, cat_of_item[item], ctx, target.timestamp, 0, short, long
                        )
                    )
        units.append((target.timestamp, user, samples))
    units.sort(key=lambda t: (t[0], t[1]))
    n = len(units)
    cut_train = int(n * 0.8)
    cut_val = int(n * 0.9)
    train = [s for _, _, ss in units[:cut_train] for s in ss]
    val = [s for _, _, ss in units[cut_train:cut_val] for s in ss]
    test = [s for _, _, ss in units[cut_val:] for s in ss]
    stats = {
        "users_total": len(sequences),
        "users_skipped": skipped,
        "fallback_negatives": fallback,
        "dropped_negatives": dropped_negatives,
        "units": n,
    }
    return SampleSet(train, val, test, stats)


def save_samples(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SAMPLES_SCHEMA + "\n")
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "u": s.user_id,
                        "i": s.target_item,
                        "c": s.target_category,
                        "x": s.context_bucket,
                        "t": s.timestamp,
                        "y": s.label,
                        "s": [list(b) for b in s.short_seq],
                        "l": [list(b) for b in s.long_seq],
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def load_samples(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != SAMPLES_SCHEMA:
            raise FormatError(
                f"bad sample schema line {header!r}, expected {SAMPLES_SCHEMA!r}"
            )
        out = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Sample(
                        rec["u"], rec["i"], rec["c"], rec["x"], rec["t"], rec["y"],
                        tuple(tuple(b) for b in rec["s"]),
                        tuple(tuple(b) for b in rec["l"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"bad sample record at line {lineno}: {exc}") from exc
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 1000
    n_items: int = 5000
    n_categories: int = 50
    events_per_user: int = 300
    interest_categories_per_user: int = 4
    favorites_per_category: int = 3
    noise_rate: float = 0.2
    long_term_gap_days: int = 14
    impression_window_days: int = 30
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_categories, self.events_per_user) < 1:
            raise ValueError("all synthetic sizes must be positive")
        if self.n_categories > self.n_items:
            raise ValueError("need at least one item per category")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must be in [0, 1], got {self.noise_rate}")
        if self.interest_categories_per_user > self.n_categories:
            raise ValueError("more interest categories than categories")
        if self.favorites_per_category < 1:
            raise ValueError("favorites_per_category must be >= 1")


def item_category_of(item: int, n_categories: int) -> int:
    """Fixed item -> category layout used by the generator (both 1-based)."""
    return (item - 1) % n_categories + 1


_BASE_TS = 1_700_000_000


def generate_synthetic(spec: SyntheticSpec):
    """Returns (events, interests): a flat event list (grouped by user,
    chronological) and the planted user -> interest categories map."""
    rng = np.random.default_rng(spec.seed)
    n_cat = spec.n_categories
    cat_items = {
        c: np.arange(c, spec.n_items + 1, n_cat, dtype=np.int64)
        for c in range(1, n_cat + 1)
    }
    gap_s = spec.long_term_gap_days * SECONDS_PER_DAY
    span_s = 4 * gap_s  # history reaches well past the gap
    n_ev = spec.events_per_user
    events = []
    interests = {}
    type_pool = np.array(["click", "favorite", "cart", "purchase"])
    type_p = np.array([0.85, 0.05, 0.05, 0.05])
    for user in range(1, spec.n_users + 1):
        cats = rng.choice(n_cat, size=spec.interest_categories_per_user, replace=False) + 1
        interests[user] = tuple(sorted(int(c) for c in cats))
        favs = np.concatenate(
            [
                rng.choice(
                    cat_items[c],
                    size=min(spec.favorites_per_category, cat_items[c].shape[0]),
                    replace=False,
                )
                for c in cats
            ]
        )
        target_ts = _BASE_TS + int(
            rng.integers(0, spec.impression_window_days * SECONDS_PER_DAY)
        )
        n_hist = n_ev - 1
        ages = (np.arange(n_hist, 0, -1, dtype=np.int64) * span_s) // (n_hist + 1)
        early = ages > gap_s
        items = rng.integers(1, spec.n_items + 1, size=n_hist)  # noise by default
        use_fav = early & (rng.random(n_hist) >= spec.noise_rate)
        items[use_fav] = rng.choice(favs, size=int(use_fav.sum()))
        # the planted positive: a favorite the user already touched long ago
        early_favs = np.unique(items[use_fav])
        target_item = int(rng.choice(early_favs if early_favs.size else favs))
        # window shopping inside the gap: fresh items from the interest
        # categories, never one of the committed favorites
        browse = ~early & (rng.random(n_hist) >= spec.noise_rate)
        which = rng.integers(len(cats), size=n_hist)
        for j, c in enumerate(cats):
            pool = cat_items[c][~np.isin(cat_items[c], favs)]
            slots = browse & (which == j)
            if pool.size and slots.any():
                items[slots] = pool[rng.integers(pool.size, size=int(slots.sum()))]
        # keep the positive out of the recent segment so only the old
        # occurrences carry the evidence
        hits = ~early & (items == target_item)
        if hits.any():
            off = rng.integers(1, spec.n_items, size=int(hits.sum()))
            items[hits] = (target_item - 1 + off) % spec.n_items + 1
        types = rng.choice(type_pool, size=n_ev, p=type_p)
        for i in range(n_hist):
            item = int(items[i])
            events.append(
                BehaviorEvent(
                    user, item, item_category_of(item, n_cat), str(types[i]),
                    target_ts - int(ages[i]),
                )
            )
        events.append(
            BehaviorEvent(
                user, target_item, item_category_of(target_item, n_cat),
                str(types[-1]), target_ts,
            )
        )
    return events, interests


def interest_oracle(events, gap_days: int, top_n: int) -> dict:
    """Frequency count of categories among events older than the gap
    (relative to each user's last event); top_n per user."""
    by_user: dict = {}
    for e in events:
        by_user.setdefault(e.user_id, []).append(e)
    out = {}
    for user, evs in by_user.items():
        evs = sorted(evs, key=lambda e: e.timestamp)
        horizon = evs[-1].timestamp - gap_days * SECONDS_PER_DAY
        counts: dict = {}
        for e in evs[:-1]:
            if e.timestamp < horizon:
                counts[e.category_id] = counts.get(e.category_id, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        out[user] = tuple(sorted(c for c, _ in ranked[:top_n]))
    return out
