"""Brute-force reference computations used to check the analysis modules.

Nothing here imports from the rest of shockkit: each function recomputes its
answer from first principles so that agreement is meaningful.
"""

from __future__ import annotations

import json
import math
from itertools import combinations
from typing import Callable, Iterable, Sequence

SECONDS_PER_WEEK = 7 * 24 * 3600


def _logsumexp(values: Sequence[float]) -> float:
    top = max(values)
    if top == -math.inf:
        return -math.inf
    return top + math.log(sum(math.exp(v - top) for v in values))


def _segment_log_marginal(segment: Sequence[Sequence[int]], alpha0: Sequence[float], beta0: Sequence[float]) -> float:
    """log of the Gamma-Poisson marginal likelihood of a whole segment."""
    n = len(segment)
    total = 0.0
    for d, (a, b) in enumerate(zip(alpha0, beta0)):
        s = sum(row[d] for row in segment)
        total += a * math.log(b) - math.lgamma(a) + math.lgamma(a + s) - (a + s) * math.log(b + n)
        total -= sum(math.lgamma(row[d] + 1) for row in segment)
    return total


def oracle_changepoint_exact(
    series: Sequence[Sequence[int]] | Sequence[int],
    alpha0: float | Sequence[float] = 1.0,
    beta0: float | Sequence[float] = 1.0,
    hazard: float = 0.01,
) -> list[float]:
    """Filtering probability that a new segment starts at each step.

    Sums over every segmentation of ``y_1..y_t``: a boundary may sit before
    any of ``y_2..y_t`` independently with probability ``hazard``, and each
    segment contributes its marginal likelihood.  Step 1 always opens a
    segment, so its value is the prior ``hazard``.
    """
    rows = [list(r) if isinstance(r, (list, tuple)) else [r] for r in series]
    if len(rows) > 12:
        raise ValueError("exhaustive enumeration is limited to 12 steps")
    dims = len(rows[0]) if rows else 0
    a0 = [float(alpha0)] * dims if isinstance(alpha0, (int, float)) else [float(a) for a in alpha0]
    b0 = [float(beta0)] * dims if isinstance(beta0, (int, float)) else [float(b) for b in beta0]
    log_h, log_1mh = math.log(hazard), math.log1p(-hazard)
    out = []
    for t in range(1, len(rows) + 1):
        if t == 1:
            out.append(hazard)
            continue
        everything = []
        boundary_at_t = []
        for pattern in range(2 ** (t - 1)):
            # bit i set: a segment starts at position i + 2 (1-based)
            starts = [0] + [i + 1 for i in range(t - 1) if pattern >> i & 1]
            n_cuts = len(starts) - 1
            weight = n_cuts * log_h + (t - 1 - n_cuts) * log_1mh
            bounds = starts + [t]
            for lo, hi in zip(bounds, bounds[1:]):
                weight += _segment_log_marginal(rows[lo:hi], a0, b0)
            everything.append(weight)
            if pattern >> (t - 2) & 1:
                boundary_at_t.append(weight)
        out.append(math.exp(_logsumexp(boundary_at_t) - _logsumexp(everything)))
    return out


def oracle_permutation_exact(
    pool: Sequence,
    group_size: int,
    statistic: Callable[[tuple], float],
) -> list[float]:
    """``statistic`` evaluated on every subset of ``pool`` of ``group_size``."""
    if math.comb(len(pool), group_size) > 1_000_000:
        raise ValueError("too many subsets to enumerate")
    return [statistic(subset) for subset in combinations(pool, group_size)]


def _scan(paths: Iterable[str]) -> list[dict]:
    """Valid, deduplicated records from raw NDJSON, first occurrence wins."""
    seen = set()
    records = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                try:
                    obj = json.loads(line)
                except ValueError:
                    continue
                if not isinstance(obj, dict) or not all(k in obj for k in ("author", "subreddit", "created_utc", "id")):
                    continue
                if obj["author"] == "[deleted]":
                    continue
                rid = str(obj["id"])
                if rid in seen:
                    continue
                seen.add(rid)
                records.append(obj)
    return records


def oracle_recount(paths: Sequence[str], query: dict) -> int | list[list[int]]:
    """Answer a count or weekly-bin query by scanning raw NDJSON.

    ``{"type": "count", "user", "t0", "t1", "subreddit"?}`` returns an int.
    ``{"type": "bins", "user", "anchor", "dimensions" | None, "weeks": [lo, hi],
    "missing": [...]}`` returns a weeks x dimensions nested list; ``None``
    dimensions means one platform-wide column.
    """
    records = [r for r in _scan(paths) if r["author"] == query["user"]]
    if query["type"] == "count":
        sub = query.get("subreddit")
        return sum(
            1
            for r in records
            if query["t0"] <= int(r["created_utc"]) < query["t1"] and (sub is None or r["subreddit"] == sub)
        )
    if query["type"] == "bins":
        lo, hi = query["weeks"]
        dims = query.get("dimensions")
        labels = sorted(set(dims)) if dims is not None else [None]
        grid = [[0] * len(labels) for _ in range(hi - lo + 1)]
        missing = set(query.get("missing", ()))
        for r in records:
            offset = int(r["created_utc"]) - query["anchor"]
            week = math.floor(offset / SECONDS_PER_WEEK)
            if not lo <= week <= hi or week in missing:
                continue
            if dims is None:
                grid[week - lo][0] += 1
            elif r["subreddit"] in labels:
                grid[week - lo][labels.index(r["subreddit"])] += 1
        return grid
    raise ValueError(f"unknown query type {query['type']!r}")
