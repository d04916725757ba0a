"""Treatment and matched control cohorts for one (subreddit, event) pair.

Treatment users are the active members of the shocked subreddit.  Control A
draws candidates from the subreddits where treatment users are most
concentrated; Control B draws them from a large hub subreddit.  Each
treatment user is paired with one candidate by greedy Mahalanobis
nearest-neighbour matching on log account age, log karma and log activity.
"""

from __future__ import annotations

import csv
import heapq
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .errors import DataError
from .store import DAY, EventStore

log = logging.getLogger(__name__)

CONTROL_RULES = ("active_contributors", "total_posts")
DEFAULT_HUB = "AskReddit"


@dataclass(frozen=True)
class EventSpec:
    treatment_subreddit: str
    event_time: int
    min_activity: int = 10
    pre_window: int = 365 * DAY
    post_window: int = 365 * DAY

    def __post_init__(self) -> None:
        if self.min_activity < 1:
            raise ValueError("min_activity must be >= 1")
        if self.pre_window <= 0 or self.post_window <= 0:
            raise ValueError("windows must be positive")
        if not self.treatment_subreddit:
            raise ValueError("treatment_subreddit is required")

    @property
    def pre_start(self) -> int:
        return self.event_time - self.pre_window

    @property
    def post_end(self) -> int:
        return self.event_time + self.post_window


@dataclass(frozen=True)
class MatchVector:
    log_account_age: float
    log_karma: float
    log_posts_last_year: float

    def as_array(self) -> np.ndarray:
        return np.array([self.log_account_age, self.log_karma, self.log_posts_last_year])


@dataclass(frozen=True)
class Match:
    treatment: str
    control: str
    distance: float


@dataclass
class ControlGroup:
    name: str
    pairs: list[Match] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)
    candidates: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def controls(self) -> list[str]:
        return [m.control for m in self.pairs]

    def unmatched_candidates(self) -> list[str]:
        used = set(self.controls)
        return [c for c in self.candidates if c not in used]

    def partner(self) -> dict[str, str]:
        """Control user -> matched treatment user."""
        return {m.control: m.treatment for m in self.pairs}


@dataclass
class Cohort:
    spec: EventSpec
    treatment_users: list[str]
    pre_counts: dict[str, int]
    control_subreddits: list[str]
    control_a: ControlGroup
    control_b: ControlGroup
    hub: str = DEFAULT_HUB
    store_path: str | None = None
    store_checksum: str | None = None
    warnings: list[str] = field(default_factory=list)

    def group(self, name: str) -> ControlGroup:
        if name == "control_a":
            return self.control_a
        if name == "control_b":
            return self.control_b
        raise KeyError(name)

    def to_dict(self) -> dict:
        def group(g: ControlGroup) -> dict:
            return {
                "pairs": [asdict(m) for m in g.pairs],
                "unmatched": g.unmatched,
                "candidates": g.candidates,
                "error": g.error,
            }

        return {
            "event": asdict(self.spec),
            "hub": self.hub,
            "store": {"path": self.store_path, "checksum": self.store_checksum},
            "treatment_users": [{"user": u, "pre_count": self.pre_counts[u]} for u in self.treatment_users],
            "control_subreddits": self.control_subreddits,
            "control_a": group(self.control_a),
            "control_b": group(self.control_b),
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> Cohort:
        def group(name: str, g: Mapping) -> ControlGroup:
            return ControlGroup(
                name=name,
                pairs=[Match(p["treatment"], p["control"], float(p["distance"])) for p in g["pairs"]],
                unmatched=list(g["unmatched"]),
                candidates=list(g["candidates"]),
                error=g.get("error"),
            )

        users = data["treatment_users"]
        store = data.get("store") or {}
        return cls(
            spec=EventSpec(**data["event"]),
            treatment_users=[u["user"] for u in users],
            pre_counts={u["user"]: int(u["pre_count"]) for u in users},
            control_subreddits=list(data["control_subreddits"]),
            control_a=group("control_a", data["control_a"]),
            control_b=group("control_b", data["control_b"]),
            hub=data.get("hub", DEFAULT_HUB),
            store_path=store.get("path"),
            store_checksum=store.get("checksum"),
            warnings=list(data.get("warnings", [])),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> Cohort:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls.from_dict(data)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"cannot read cohort {path}: {exc}") from exc


def _window_counts(store: EventStore, subreddit: str, t0: int, t1: int) -> dict[str, int]:
    cols = store.columns()
    code = cols.sub_code.get(subreddit)
    if code is None:
        return {}
    mask = (cols.sub == code) & (cols.ts >= t0) & (cols.ts < t1)
    authors, counts = np.unique(cols.author[mask], return_counts=True)
    return {cols.authors[a]: int(n) for a, n in zip(authors, counts)}


def treatment_pre_counts(store: EventStore, spec: EventSpec) -> dict[str, int]:
    """Pre-window record counts in the treatment subreddit, every contributor."""
    return _window_counts(store, spec.treatment_subreddit, spec.pre_start, spec.event_time)


def treatment_users(store: EventStore, spec: EventSpec) -> set[str]:
    counts = treatment_pre_counts(store, spec)
    users = {u for u, n in counts.items() if n >= spec.min_activity}
    if not users:
        log.warning("no active users in %s before %d", spec.treatment_subreddit, spec.event_time)
    return users


def control_subreddits_a(
    store: EventStore,
    treated: Sequence[str] | set[str],
    spec: EventSpec,
    *,
    rule: str = "active_contributors",
    min_users: int = 10,
    min_posts: int = 10,
    limit: int = 200,
) -> list[str]:
    """Subreddits where treatment users are concentrated, best first.

    Under ``active_contributors`` a subreddit qualifies when at least
    ``min_users`` treatment users each made ``min_posts`` pre-window records
    there.  ``total_posts`` instead requires ``min_users`` distinct treatment
    contributors and ``min_posts`` treatment records in total.  Qualifying
    subreddits are ranked by the share of their pre-window contributors who
    are treatment users, ties broken by name.
    """
    if rule not in CONTROL_RULES:
        raise ValueError(f"unknown control rule {rule!r}")
    if not treated:
        raise DataError("control subreddits need at least one treatment user")
    cols = store.columns()
    authors, subs, counts = store.window_pair_counts(spec.pre_start, spec.event_time)
    treated_codes = np.array(sorted(cols.author_code[u] for u in treated if u in cols.author_code), dtype=np.int64)
    is_treated = np.isin(authors, treated_codes)
    n_subs = len(cols.subreddits)
    contributors = np.bincount(subs, minlength=n_subs)
    treat_contrib = np.bincount(subs[is_treated], minlength=n_subs)
    if rule == "active_contributors":
        active = is_treated & (counts >= min_posts)
        qualifies = np.bincount(subs[active], minlength=n_subs) >= min_users
    else:
        treat_posts = np.bincount(subs[is_treated], weights=counts[is_treated], minlength=n_subs)
        qualifies = (treat_contrib >= min_users) & (treat_posts >= min_posts)
    excluded = cols.sub_code.get(spec.treatment_subreddit)
    if excluded is not None:
        qualifies[excluded] = False
    ranked = sorted(
        (-(treat_contrib[s] / contributors[s]), cols.subreddits[s]) for s in np.flatnonzero(qualifies)
    )
    if not ranked:
        raise DataError(f"no subreddit qualifies as a control subreddit for {spec.treatment_subreddit}")
    return [name for _, name in ranked[:limit]]


def _active_in(store: EventStore, subreddits: Sequence[str], spec: EventSpec) -> set[str]:
    users: set[str] = set()
    for sub in subreddits:
        counts = _window_counts(store, sub, spec.pre_start, spec.event_time)
        users.update(u for u, n in counts.items() if n >= spec.min_activity)
    return users


def candidate_control_users_a(store: EventStore, control_subs: Sequence[str], spec: EventSpec) -> set[str]:
    return _active_in(store, control_subs, spec) - store.ever_posted_in(spec.treatment_subreddit)


def candidate_control_users_b(store: EventStore, spec: EventSpec, hub: str = DEFAULT_HUB) -> set[str]:
    return _active_in(store, [hub], spec) - store.ever_posted_in(spec.treatment_subreddit)


def load_karma(path: str | os.PathLike) -> dict[str, float]:
    """Read a ``user,karma`` sidecar CSV; leading ``#`` lines are skipped."""
    karma: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        if reader.fieldnames is None or not {"user", "karma"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns user,karma")
        for row in reader:
            try:
                karma[row["user"]] = float(row["karma"])
            except ValueError as exc:
                raise DataError(f"{path}: bad karma for {row['user']!r}") from exc
    return karma


def covariates(
    store: EventStore,
    user: str,
    spec: EventSpec,
    karma: Mapping[str, float] | None = None,
) -> MatchVector:
    """Matching covariates; every component is ``ln(1 + x)``.

    Account age is measured from the user's first record in the store and
    floors at zero.  Negative karma is clipped to zero.
    """
    first = store.first_timestamp(user)
    age_days = 0.0 if first is None else max(spec.event_time - first, 0) / DAY
    k = 0.0 if karma is None else max(float(karma.get(user, 0.0)), 0.0)
    posts = 0 if first is None else store.user_activity_count(user, spec.pre_start, spec.event_time)
    return MatchVector(math.log1p(age_days), math.log1p(k), math.log1p(posts))


def regularized_covariance(points: np.ndarray) -> np.ndarray:
    """Sample covariance plus ``1e-8 * trace / dim`` on the diagonal.

    Falls back to the identity when the sample has no spread at all (one
    point, or all points equal), which reduces matching to Euclidean.
    """
    points = np.asarray(points, dtype=float)
    dim = points.shape[1]
    if len(points) < 2:
        return np.eye(dim)
    cov = np.atleast_2d(np.cov(points, rowvar=False, ddof=1))
    trace = float(np.trace(cov))
    if trace <= 0.0:
        return np.eye(dim)
    return cov + (1e-8 * trace / dim) * np.eye(dim)


def _whitener(cov: np.ndarray):
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise DataError("covariance matrix is not positive definite") from exc
    return lambda pts: linalg.solve_triangular(chol, np.asarray(pts, dtype=float).T, lower=True).T


def mahalanobis_match(
    treated: Mapping[str, np.ndarray],
    candidates: Mapping[str, np.ndarray],
    *,
    cov: np.ndarray | None = None,
    shortlist: int = 16,
) -> tuple[list[Match], list[str]]:
    """Greedy 1:1 Mahalanobis matching without replacement.

    The pair with the smallest distance is fixed first, then the next smallest
    among remaining users, and so on; ties fall to the smaller candidate id,
    then the smaller treatment id.  ``cov`` defaults to the regularized
    covariance of the candidates.  Returns ``(pairs, unmatched)``.
    """
    if not candidates:
        raise DataError("no candidate control users to match against")
    t_ids = sorted(treated)
    c_ids = sorted(candidates)
    if not t_ids:
        return [], []
    cand = np.array([np.asarray(candidates[c], dtype=float) for c in c_ids])
    if cov is None:
        cov = regularized_covariance(cand)
    whiten = _whitener(np.asarray(cov, dtype=float))
    tw = whiten(np.array([np.asarray(treated[t], dtype=float) for t in t_ids]))
    cw = whiten(cand)

    taken = np.zeros(len(c_ids), dtype=bool)

    def ranked(i: int) -> list[tuple[float, int]]:
        dist = np.sqrt(((cw - tw[i]) ** 2).sum(axis=1))
        free = np.flatnonzero(~taken)
        if free.size == 0:
            return []
        d_free = dist[free]
        k = min(shortlist, free.size)
        cut = np.partition(d_free, k - 1)[k - 1]
        near = free[d_free <= cut]
        return sorted((float(dist[j]), int(j)) for j in near)

    queues = [ranked(i) for i in range(len(t_ids))]
    heap = [(q[0][0], q[0][1], i, 0) for i, q in enumerate(queues) if q]
    heapq.heapify(heap)
    pairs: list[Match] = []
    matched = set()
    while heap:
        d, j, i, pos = heapq.heappop(heap)
        if not taken[j]:
            taken[j] = True
            matched.add(i)
            pairs.append(Match(t_ids[i], c_ids[j], d))
            continue
        queue = queues[i]
        pos += 1
        while pos < len(queue) and taken[queue[pos][1]]:
            pos += 1
        if pos == len(queue):
            queue = queues[i] = ranked(i)
            pos = 0
        if queue:
            heapq.heappush(heap, (queue[pos][0], queue[pos][1], i, pos))
    unmatched = [t for i, t in enumerate(t_ids) if i not in matched]
    return pairs, unmatched


def _match_group(
    name: str,
    store: EventStore,
    spec: EventSpec,
    treated: Mapping[str, np.ndarray],
    candidate_users: set[str],
    karma: Mapping[str, float] | None,
) -> ControlGroup:
    group = ControlGroup(name=name, candidates=sorted(candidate_users))
    if not candidate_users:
        group.error = "no candidate control users"
        group.unmatched = sorted(treated)
        return group
    cand_vectors = {u: covariates(store, u, spec, karma).as_array() for u in group.candidates}
    group.pairs, group.unmatched = mahalanobis_match(treated, cand_vectors)
    return group


def build_cohort(
    store: EventStore,
    spec: EventSpec,
    *,
    hub: str = DEFAULT_HUB,
    karma: Mapping[str, float] | None = None,
    control_rule: str = "active_contributors",
    max_control_subreddits: int = 200,
) -> Cohort:
    time_range = store.time_range
    if time_range is None or not time_range[0] <= spec.event_time <= time_range[1]:
        raise DataError(f"event time {spec.event_time} lies outside the store time range {time_range}")

    pre = treatment_pre_counts(store, spec)
    users = sorted(u for u, n in pre.items() if n >= spec.min_activity)
    cohort = Cohort(
        spec=spec,
        treatment_users=users,
        pre_counts={u: pre[u] for u in users},
        control_subreddits=[],
        control_a=ControlGroup("control_a"),
        control_b=ControlGroup("control_b"),
        hub=hub,
        store_path=str(store.root),
        store_checksum=store.checksum,
    )
    if not users:
        cohort.warnings.append(f"no users with >= {spec.min_activity} records in {spec.treatment_subreddit}")
        return cohort
    treated = {u: covariates(store, u, spec, karma).as_array() for u in users}

    try:
        cohort.control_subreddits = control_subreddits_a(
            store, users, spec, rule=control_rule, limit=max_control_subreddits
        )
    except DataError as exc:
        cohort.control_a.error = str(exc)
        cohort.control_a.unmatched = list(users)
    else:
        pool = candidate_control_users_a(store, cohort.control_subreddits, spec)
        cohort.control_a = _match_group("control_a", store, spec, treated, pool, karma)

    pool_b = candidate_control_users_b(store, spec, hub)
    cohort.control_b = _match_group("control_b", store, spec, treated, pool_b, karma)
    for group in (cohort.control_a, cohort.control_b):
        if group.error:
            cohort.warnings.append(f"{group.name}: {group.error}")
        elif group.unmatched:
            cohort.warnings.append(f"{group.name}: {len(group.unmatched)} treatment users unmatched")
    return cohort
