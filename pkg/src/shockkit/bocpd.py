"""Multivariate Bayesian online changepoint detection for weekly count vectors.

Each dimension is Poisson with a Gamma(alpha0, beta0) prior on its rate, and
all dimensions share one run length.  The state after observing ``y_t`` is
the posterior over run lengths, where run length 0 means ``y_t`` opened a
new segment.  ``p(r_t = 0 | y_1..y_t)`` is reported as the changepoint
probability for that week.

The segment likelihood is the Gamma-Poisson (negative binomial) predictive

    log p(y | a, b) = lgamma(a + y) - lgamma(a) - lgamma(y + 1)
                      + a log(b / (b + 1)) - y log(b + 1)

with ``a = alpha0 + sum(y in run)`` and ``b = beta0 + len(run)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .attrition import BRACKET_EDGES, ALL_BRACKET, activity_bracket, bracket_labels, one_tailed_upper, two_proportion_test
from .cohort import Cohort
from .did import DEFAULT_MASK
from .errors import DataError
from .store import DEFAULT_WEEKS, ActivityMatrix, EventStore, WEEK

DEFAULT_HAZARD = 0.01
DEFAULT_ALPHA0 = 1.0
DEFAULT_BETA0 = 0.01
THRESHOLD = 0.90
TRUNCATE_BELOW = 1e-12
MAX_DIMS = 200
OTHER = "__other__"
WINDOW_WEEKS = 4


def log_predictive(y: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Elementwise Gamma-Poisson log predictive."""
    return (
        gammaln(alpha + y)
        - gammaln(alpha)
        - gammaln(y + 1.0)
        + alpha * (np.log(beta) - np.log1p(beta))
        - y * np.log1p(beta)
    )


@dataclass(frozen=True)
class RunLengthPosterior:
    """Run-length posterior with per-run Gamma sufficient statistics.

    Row ``i`` describes run length ``lengths[i]``: its log probability, the
    per-dimension count sums of the observations in the run, and how many
    observations that is.  Posterior Gamma parameters for row ``i`` are
    ``alpha0 + sums[i]`` and ``beta0 + counts[i]``.
    """

    t: int
    lengths: np.ndarray
    log_probs: np.ndarray
    sums: np.ndarray
    counts: np.ndarray
    hazard: float
    alpha0: np.ndarray
    beta0: np.ndarray
    log_evidence: float = 0.0
    truncate_below: float = TRUNCATE_BELOW

    @classmethod
    def initial(
        cls,
        dims: int,
        hazard: float = DEFAULT_HAZARD,
        alpha0: float | Sequence[float] = DEFAULT_ALPHA0,
        beta0: float | Sequence[float] = DEFAULT_BETA0,
        truncate_below: float = TRUNCATE_BELOW,
    ) -> RunLengthPosterior:
        if not 0.0 < hazard < 1.0:
            raise ValueError("hazard must lie in (0, 1)")
        a0 = np.broadcast_to(np.asarray(alpha0, dtype=float), (dims,)).copy()
        b0 = np.broadcast_to(np.asarray(beta0, dtype=float), (dims,)).copy()
        if np.any(a0 <= 0) or np.any(b0 <= 0):
            raise ValueError("prior parameters must be positive")
        return cls(
            t=0,
            lengths=np.zeros(1, dtype=np.int64),
            log_probs=np.zeros(1),
            sums=np.zeros((1, dims)),
            counts=np.zeros(1),
            hazard=hazard,
            alpha0=a0,
            beta0=b0,
            truncate_below=truncate_below,
        )

    @property
    def dims(self) -> int:
        return self.alpha0.shape[0]

    def probabilities(self) -> np.ndarray:
        """Dense posterior over run lengths ``0..t``."""
        out = np.zeros(self.t + 1)
        out[self.lengths] = np.exp(self.log_probs)
        return out

    def alpha(self) -> np.ndarray:
        return self.alpha0 + self.sums

    def beta(self) -> np.ndarray:
        return self.beta0[None, :] + self.counts[:, None]

    def rate_means(self) -> np.ndarray:
        """Posterior mean rate per run length and dimension."""
        return self.alpha() / self.beta()


def _as_counts(y: Sequence[int] | np.ndarray, dims: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.shape != (dims,):
        raise ValueError(f"observation has shape {arr.shape}, expected ({dims},)")
    if arr.dtype.kind not in "iu":
        if arr.dtype.kind != "f" or not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
            raise ValueError("observations must be integer counts")
    if np.any(arr < 0):
        raise ValueError("observations must be non-negative")
    return arr.astype(float)


def bocpd_step(state: RunLengthPosterior, y: Sequence[int] | np.ndarray) -> tuple[RunLengthPosterior, float]:
    """Advance the run-length posterior by one observation.

    Returns the new state and ``p(r_t = 0 | y_1..y_t)``.
    """
    y = _as_counts(y, state.dims)
    lp_runs = log_predictive(y, state.alpha(), state.beta()).sum(axis=1)
    lp_fresh = float(log_predictive(y, state.alpha0, state.beta0).sum())
    joint = np.empty(state.log_probs.size + 1)
    joint[0] = math.log(state.hazard) + lp_fresh + logsumexp(state.log_probs)
    joint[1:] = state.log_probs + math.log1p(-state.hazard) + lp_runs
    log_z = float(logsumexp(joint))
    log_post = joint - log_z
    cp_prob = float(math.exp(log_post[0]))

    lengths = np.concatenate(([0], state.lengths + 1))
    sums = np.vstack((y[None, :], state.sums + y))
    counts = np.concatenate(([1.0], state.counts + 1.0))
    keep = log_post >= math.log(state.truncate_below) if state.truncate_below > 0 else None
    if keep is not None and not keep.all():
        keep[int(np.argmax(log_post))] = True
        log_post = log_post[keep]
        log_post = log_post - logsumexp(log_post)
        lengths, sums, counts = lengths[keep], sums[keep], counts[keep]
    new = RunLengthPosterior(
        t=state.t + 1,
        lengths=lengths,
        log_probs=log_post,
        sums=sums,
        counts=counts,
        hazard=state.hazard,
        alpha0=state.alpha0,
        beta0=state.beta0,
        log_evidence=state.log_evidence + log_z,
        truncate_below=state.truncate_below,
    )
    return new, cp_prob


def changepoint_probabilities(
    series: np.ndarray,
    hazard: float = DEFAULT_HAZARD,
    alpha0: float | Sequence[float] = DEFAULT_ALPHA0,
    beta0: float | Sequence[float] = DEFAULT_BETA0,
    truncate_below: float = TRUNCATE_BELOW,
) -> np.ndarray:
    """``p(r_t = 0 | y_1..y_t)`` for each row of a T x d count array."""
    series = np.asarray(series)
    if series.ndim == 1:
        series = series[:, None]
    state = RunLengthPosterior.initial(series.shape[1], hazard, alpha0, beta0, truncate_below)
    out = np.empty(series.shape[0])
    for t, y in enumerate(series):
        state, out[t] = bocpd_step(state, y)
    return out


@dataclass(frozen=True)
class ChangepointParams:
    hazard: float = DEFAULT_HAZARD
    alpha0: float = DEFAULT_ALPHA0
    beta0: float = DEFAULT_BETA0
    threshold: float = THRESHOLD
    max_dims: int = MAX_DIMS
    weeks: tuple[int, int] = DEFAULT_WEEKS
    mask: tuple[int, ...] = DEFAULT_MASK


@dataclass
class ChangepointTrace:
    weeks: np.ndarray
    probabilities: np.ndarray
    threshold: float

    @property
    def flagged(self) -> list[int]:
        return [int(w) for w, p in zip(self.weeks, self.probabilities) if p >= self.threshold]

    def __len__(self) -> int:
        return len(self.weeks)


def detect_changepoints(
    matrix: ActivityMatrix,
    hazard: float = DEFAULT_HAZARD,
    alpha0: float = DEFAULT_ALPHA0,
    beta0: float = DEFAULT_BETA0,
    threshold: float = THRESHOLD,
) -> ChangepointTrace:
    """Run the detector over a user's weeks in order, skipping missing weeks."""
    if matrix.counts.size == 0:
        return ChangepointTrace(np.zeros(0, dtype=np.int64), np.zeros(0), threshold)
    observed = matrix.observed
    weeks = matrix.weeks[observed]
    probs = changepoint_probabilities(matrix.counts[observed], hazard, alpha0, beta0)
    return ChangepointTrace(weeks, probs, threshold)


def user_matrix(
    store: EventStore,
    user: str,
    anchor: int,
    weeks: tuple[int, int] = DEFAULT_WEEKS,
    mask: Iterable[int] = DEFAULT_MASK,
    max_dims: int = MAX_DIMS,
) -> ActivityMatrix:
    """Per-subreddit weekly counts with the long tail pooled into one column.

    The ``max_dims`` busiest subreddits in the span (ties by name) keep their
    own column; everything else is summed into ``__other__``.
    """
    first, last = weeks
    per_sub = store.user_subreddit_counts(user, anchor + first * WEEK, anchor + (last + 1) * WEEK)
    ranked = sorted(per_sub, key=lambda s: (-per_sub[s], s))
    kept, rest = ranked[:max_dims], ranked[max_dims:]
    matrix = store.weekly_bins(user, anchor, kept or [], weeks, mask)
    if rest:
        other = store.weekly_bins(user, anchor, rest, weeks, mask).counts.sum(axis=1, keepdims=True)
        matrix.counts = np.hstack((matrix.counts, other))
        matrix.dimensions = matrix.dimensions + (OTHER,)
    return matrix


def _detect_all(matrices: list[ActivityMatrix], params: ChangepointParams) -> list[ChangepointTrace]:
    return [detect_changepoints(m, params.hazard, params.alpha0, params.beta0, params.threshold) for m in matrices]


def cohort_groups(cohort: Cohort) -> dict[str, list[str]]:
    if not cohort.treatment_users:
        raise DataError("cohort has no treatment users")
    groups = {"treatment": list(cohort.treatment_users)}
    for name in ("control_a", "control_b"):
        controls = cohort.group(name).controls
        if controls:
            groups[name] = controls
    return groups


def cohort_traces(
    store: EventStore,
    cohort: Cohort,
    params: ChangepointParams = ChangepointParams(),
    threads: int = 1,
) -> dict[str, dict[str, ChangepointTrace]]:
    """Changepoint trace for every member of every available group."""
    anchor = cohort.spec.event_time
    out: dict[str, dict[str, ChangepointTrace]] = {}
    for group, users in cohort_groups(cohort).items():
        matrices = [user_matrix(store, u, anchor, params.weeks, params.mask, params.max_dims) for u in users]
        if threads > 1 and len(matrices) > 1:
            size = math.ceil(len(matrices) / threads)
            chunks = [matrices[i:i + size] for i in range(0, len(matrices), size)]
            with ProcessPoolExecutor(max_workers=threads) as pool:
                traces = [t for part in pool.map(_detect_all, chunks, [params] * len(chunks)) for t in part]
        else:
            traces = _detect_all(matrices, params)
        out[group] = dict(zip(users, traces))
    return out


@dataclass
class ChangepointRates:
    weeks: np.ndarray
    observed: np.ndarray
    fractions: dict[str, np.ndarray]
    sizes: dict[str, int]
    bands: dict[str, float] = field(default_factory=dict)

    def exceeding(self, group: str = "treatment", control: str = "control_a") -> list[int]:
        """Observed weeks where ``group`` lies above ``control``'s band."""
        band = self.bands[control]
        frac = self.fractions[group]
        return [int(w) for w, ok, f in zip(self.weeks, self.observed, frac) if ok and f > band]


def control_band(fractions: np.ndarray, observed: np.ndarray, sigmas: float = 3.0) -> float:
    """Mean plus ``sigmas`` standard deviations of weekly flagged fractions."""
    values = np.asarray(fractions)[observed]
    return float(values.mean() + sigmas * values.std(ddof=1)) if values.size > 1 else float(values.mean())


def cohort_changepoint_rates(
    store: EventStore,
    cohort: Cohort,
    params: ChangepointParams = ChangepointParams(),
    *,
    threads: int = 1,
    traces: dict[str, dict[str, ChangepointTrace]] | None = None,
) -> ChangepointRates:
    """Share of each group flagged in each week, plus a 3-sigma band per control."""
    if traces is None:
        traces = cohort_traces(store, cohort, params, threads)
    first, last = params.weeks
    weeks = np.arange(first, last + 1)
    observed = np.array([w not in set(params.mask) for w in weeks], dtype=bool)
    rates = ChangepointRates(weeks, observed, {}, {})
    for group, per_user in traces.items():
        if not per_user:
            raise DataError(f"group {group} has no users")
        flagged = np.zeros(weeks.size)
        for trace in per_user.values():
            for w in trace.flagged:
                flagged[w - first] += 1
        rates.fractions[group] = flagged / len(per_user)
        rates.sizes[group] = len(per_user)
        if group != "treatment":
            rates.bands[group] = control_band(rates.fractions[group], observed)
    return rates


@dataclass(frozen=True)
class WindowRate:
    group: str
    bracket: str
    changed: int
    size: int

    @property
    def rate(self) -> float | None:
        return self.changed / self.size if self.size else None


@dataclass(frozen=True)
class WindowTest:
    bracket: str
    control: str
    z: float
    p_one_tailed: float
    significant: bool


def changepoint_window_rate(
    store: EventStore,
    cohort: Cohort,
    params: ChangepointParams = ChangepointParams(),
    *,
    window_weeks: int = WINDOW_WEEKS,
    edges: Sequence[int] = BRACKET_EDGES,
    alpha: float = 0.05,
    threads: int = 1,
    traces: dict[str, dict[str, ChangepointTrace]] | None = None,
) -> tuple[list[WindowRate], list[WindowTest]]:
    """Share of users with a flagged week within ``window_weeks`` of the event.

    Stratified by activity bracket; matched controls use their partner's
    bracket.  Tests are one-tailed (treatment rate higher).
    """
    if traces is None:
        traces = cohort_traces(store, cohort, params, threads)
    brackets = {u: activity_bracket(cohort.pre_counts[u], edges) for u in cohort.treatment_users}
    user_bracket = {"treatment": brackets}
    for name in ("control_a", "control_b"):
        user_bracket[name] = {c: brackets[t] for c, t in cohort.group(name).partner().items()}
    labels = bracket_labels(edges) + [ALL_BRACKET]
    rates: list[WindowRate] = []
    table: dict[tuple[str, str], tuple[int, int]] = {}
    for group, per_user in traces.items():
        hit = {u: any(-window_weeks <= w <= window_weeks for w in tr.flagged) for u, tr in per_user.items()}
        for label in labels:
            users = [u for u in per_user if label in (ALL_BRACKET, user_bracket[group][u])]
            changed = sum(hit[u] for u in users)
            rates.append(WindowRate(group, label, changed, len(users)))
            table[(group, label)] = (changed, len(users))
    tests: list[WindowTest] = []
    for control in ("control_a", "control_b"):
        if control not in traces:
            continue
        for label in labels:
            k1, n1 = table[("treatment", label)]
            k2, n2 = table[(control, label)]
            if n1 == 0 or n2 == 0:
                continue
            z, p = two_proportion_test(k1, n1, k2, n2)
            p_one = one_tailed_upper(z, p)
            tests.append(WindowTest(label, control, z, p_one, p_one < alpha))
    return rates, tests
