"""Weekly activity series and difference-in-differences with a permutation test.

Group series are per-week means of platform-wide record counts with a fixed
denominator, so users who leave keep contributing zeros.  Week 0 (the event
week) belongs to the post period.  Significance comes from pseudo-treatment
groups sampled from the unmatched Control A candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .cohort import Cohort
from .errors import DataError
from .store import DEFAULT_WEEKS, EventStore

DEFAULT_MASK = (-52, 53)
DEFAULT_SIMS = 2000


@dataclass
class WeeklySeries:
    anchor: int
    first_week: int
    last_week: int
    values: np.ndarray
    mask: frozenset[int]
    size: int

    @property
    def weeks(self) -> np.ndarray:
        return np.arange(self.first_week, self.last_week + 1)

    @property
    def observed(self) -> np.ndarray:
        return np.array([w not in self.mask for w in self.weeks], dtype=bool)

    def value(self, week: int) -> float | None:
        if week in self.mask:
            return None
        return float(self.values[week - self.first_week])


@dataclass(frozen=True)
class DidResult:
    delta_pre: float
    delta_post: float
    did: float
    n_sims: int
    p_one_tailed_lower: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "delta_pre": self.delta_pre,
            "delta_post": self.delta_post,
            "did": self.did,
            "n_sims": self.n_sims,
            "seed": self.seed,
            "p": self.p_one_tailed_lower,
        }


def series_from_counts(
    counts: np.ndarray,
    anchor: int,
    weeks: tuple[int, int] = DEFAULT_WEEKS,
    mask: Iterable[int] = DEFAULT_MASK,
) -> WeeklySeries:
    """Mean series from a users x weeks count matrix."""
    counts = np.asarray(counts)
    first, last = weeks
    if counts.ndim != 2 or counts.shape[1] != last - first + 1:
        raise ValueError("counts must be users x weeks")
    if counts.shape[0] == 0:
        raise DataError("cannot average over an empty group")
    mask = frozenset(int(w) for w in mask)
    values = counts.sum(axis=0) / counts.shape[0]
    for w in mask:
        if first <= w <= last:
            values[w - first] = 0.0
    return WeeklySeries(anchor, first, last, values, mask, counts.shape[0])


def weekly_mean_series(
    store: EventStore,
    users: Sequence[str],
    anchor: int,
    mask: Iterable[int] = DEFAULT_MASK,
    weeks: tuple[int, int] = DEFAULT_WEEKS,
) -> WeeklySeries:
    return series_from_counts(store.weekly_totals(list(users), anchor, weeks), anchor, weeks, mask)


def _period_masks(weeks: np.ndarray, observed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pre = (weeks < 0) & observed
    post = (weeks >= 0) & observed
    if not pre.any():
        raise DataError("every pre-event week is masked")
    if not post.any():
        raise DataError("every post-event week is masked")
    return pre, post


def did_statistic(treatment: WeeklySeries, control: WeeklySeries) -> tuple[float, float, float]:
    """``(delta_pre, delta_post, did)`` with ``did = delta_post - delta_pre``."""
    if (treatment.anchor, treatment.first_week, treatment.last_week) != (
        control.anchor,
        control.first_week,
        control.last_week,
    ):
        raise ValueError("series must share anchor and week range")
    if treatment.mask != control.mask:
        raise ValueError("series must share the same mask")
    pre, post = _period_masks(treatment.weeks, treatment.observed)
    delta_pre = float(treatment.values[pre].mean() - control.values[pre].mean())
    delta_post = float(treatment.values[post].mean() - control.values[post].mean())
    return delta_pre, delta_post, delta_post - delta_pre


def _user_period_means(counts: np.ndarray, pre: np.ndarray, post: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = np.asarray(counts, dtype=float)
    return counts[:, pre].mean(axis=1), counts[:, post].mean(axis=1)


def simulated_dids(
    pool_counts: np.ndarray,
    group_size: int,
    control: WeeklySeries,
    n_sims: int = DEFAULT_SIMS,
    seed: int = 0,
) -> np.ndarray:
    """DiD of pseudo-treatment groups drawn from ``pool_counts`` against ``control``.

    Simulation ``i`` draws ``group_size`` rows without replacement using a
    generator seeded with ``(seed, i)``, so any subset of simulations can be
    reproduced independently.  When the pool admits no more than ``n_sims``
    distinct groups, every group is evaluated once instead.
    """
    pool_counts = np.asarray(pool_counts)
    n_pool = pool_counts.shape[0]
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    if n_pool < group_size:
        raise DataError(f"permutation pool has {n_pool} users, need at least {group_size}")
    pre, post = _period_masks(control.weeks, control.observed)
    pre_u, post_u = _user_period_means(pool_counts, pre, post)
    c_pre = control.values[pre].mean()
    c_post = control.values[post].mean()
    if math.comb(n_pool, group_size) <= n_sims:
        groups = np.array(list(combinations(range(n_pool), group_size)), dtype=np.int64)
        return (post_u[groups].mean(axis=1) - c_post) - (pre_u[groups].mean(axis=1) - c_pre)
    out = np.empty(n_sims)
    for i in range(n_sims):
        idx = np.random.default_rng([seed, i]).choice(n_pool, size=group_size, replace=False)
        out[i] = (post_u[idx].mean() - c_post) - (pre_u[idx].mean() - c_pre)
    return out


def smoothed_lower_p(observed: float, simulated: np.ndarray) -> float:
    """Add-one smoothed share of simulated values below ``observed``."""
    simulated = np.asarray(simulated)
    return (int(np.count_nonzero(simulated < observed)) + 1) / (simulated.size + 1)


def did_analysis(
    store: EventStore,
    cohort: Cohort,
    control: str = "control_a",
    *,
    n_sims: int = DEFAULT_SIMS,
    seed: int = 0,
    mask: Iterable[int] = DEFAULT_MASK,
    weeks: tuple[int, int] = DEFAULT_WEEKS,
) -> tuple[DidResult, WeeklySeries, WeeklySeries]:
    """DiD of the treatment group against one matched control group.

    The permutation pool is always the unmatched Control A candidates.
    """
    group = cohort.group(control)
    if not group.pairs:
        raise DataError(f"{control} has no matched users")
    if not cohort.treatment_users:
        raise DataError("cohort has no treatment users")
    anchor = cohort.spec.event_time
    mask = frozenset(mask)
    treat = weekly_mean_series(store, cohort.treatment_users, anchor, mask, weeks)
    ctrl = weekly_mean_series(store, group.controls, anchor, mask, weeks)
    d_pre, d_post, did = did_statistic(treat, ctrl)
    pool = cohort.control_a.unmatched_candidates()
    if len(pool) < len(cohort.treatment_users):
        raise DataError(
            f"permutation pool has {len(pool)} unmatched control_a candidates, "
            f"need at least {len(cohort.treatment_users)}"
        )
    sims = simulated_dids(store.weekly_totals(pool, anchor, weeks), len(cohort.treatment_users), ctrl, n_sims, seed)
    p = smoothed_lower_p(did, sims)
    return DidResult(d_pre, d_post, did, int(sims.size), p, seed), treat, ctrl


def permutation_pvalue(
    store: EventStore,
    cohort: Cohort,
    observed: float,
    *,
    control: str = "control_a",
    pool: Sequence[str] | None = None,
    n_sims: int = DEFAULT_SIMS,
    seed: int = 0,
    mask: Iterable[int] = DEFAULT_MASK,
    weeks: tuple[int, int] = DEFAULT_WEEKS,
) -> float:
    anchor = cohort.spec.event_time
    pool = cohort.control_a.unmatched_candidates() if pool is None else list(pool)
    ctrl = weekly_mean_series(store, cohort.group(control).controls, anchor, mask, weeks)
    sims = simulated_dids(store.weekly_totals(pool, anchor, weeks), len(cohort.treatment_users), ctrl, n_sims, seed)
    return smoothed_lower_p(observed, sims)
