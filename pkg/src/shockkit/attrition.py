"""User attrition after a shock.

A user is inactive after a grace period of ``g`` weeks when they have no
record anywhere on the platform in ``(event + g weeks, event + horizon]``.
Rates are stratified by pre-event activity bracket and compared against
each control group with a pooled two-sample z test for proportions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from scipy.stats import norm

from .cohort import Cohort
from .store import DAY, WEEK, EventStore

GRACE_WEEKS = (1, 2, 3, 4)
BRACKET_EDGES = (10, 20, 40, 80)
ALL_BRACKET = "all"
GROUPS = ("treatment", "control_a", "control_b")
CSV_COLUMNS = (
    "group",
    "bracket",
    "grace_weeks",
    "inactive",
    "size",
    "rate",
    "control",
    "z",
    "p_two_sided",
    "sig_one_tailed",
)


def is_inactive(
    store: EventStore,
    user: str,
    event_time: int,
    grace_weeks: int,
    horizon: int = 365 * DAY,
) -> bool:
    start = event_time + grace_weeks * WEEK
    end = event_time + horizon
    if start >= end:
        return True
    # (start, end] as a half-open integer interval
    return store.user_activity_count(user, start + 1, end + 1) == 0


def bracket_labels(edges: Sequence[int] = BRACKET_EDGES) -> list[str]:
    labels = [f"[{lo},{hi})" for lo, hi in zip(edges, edges[1:])]
    labels.append(f"[{edges[-1]},inf)")
    return labels


def activity_bracket(count: int, edges: Sequence[int] = BRACKET_EDGES) -> str:
    """Bracket label for a pre-event record count; edges are inclusive-low."""
    if count < edges[0]:
        raise ValueError(f"count {count} is below the lowest bracket edge {edges[0]}")
    labels = bracket_labels(edges)
    for i in range(len(edges) - 1, -1, -1):
        if count >= edges[i]:
            return labels[i]
    raise AssertionError("unreachable")


def two_proportion_test(k1: int, n1: int, k2: int, n2: int) -> tuple[float, float]:
    """Pooled two-sample z test without continuity correction.

    Returns ``(z, two-sided p)``.  When the pooled proportion is 0 or 1 the
    samples carry no evidence and the result is ``(0.0, 1.0)``.
    """
    if n1 < 1 or n2 < 1:
        raise ValueError("sample sizes must be >= 1")
    if not (0 <= k1 <= n1 and 0 <= k2 <= n2):
        raise ValueError("counts must lie in [0, n]")
    pooled = (k1 + k2) / (n1 + n2)
    if pooled <= 0.0 or pooled >= 1.0:
        return 0.0, 1.0
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    z = (k1 / n1 - k2 / n2) / se
    return z, float(min(1.0, 2.0 * norm.sf(abs(z))))


def one_tailed_upper(z: float, p_two_sided: float) -> float:
    """p for the alternative that the first proportion is larger."""
    return p_two_sided / 2.0 if z > 0 else 1.0 - p_two_sided / 2.0


@dataclass(frozen=True)
class AttritionCell:
    group: str
    bracket: str
    grace_weeks: int
    inactive: int
    size: int

    @property
    def rate(self) -> float | None:
        return self.inactive / self.size if self.size else None


@dataclass(frozen=True)
class AttritionTest:
    bracket: str
    grace_weeks: int
    control: str
    z: float
    p_two_sided: float
    p_one_tailed: float
    significant: bool


@dataclass
class AttritionTable:
    cells: list[AttritionCell] = field(default_factory=list)
    tests: list[AttritionTest] = field(default_factory=list)

    def cell(self, group: str, bracket: str, grace: int) -> AttritionCell:
        for c in self.cells:
            if (c.group, c.bracket, c.grace_weeks) == (group, bracket, grace):
                return c
        raise KeyError((group, bracket, grace))

    def test(self, bracket: str, grace: int, control: str) -> AttritionTest:
        for t in self.tests:
            if (t.bracket, t.grace_weeks, t.control) == (bracket, grace, control):
                return t
        raise KeyError((bracket, grace, control))

    def csv_rows(self) -> list[list]:
        """Rows matching ``CSV_COLUMNS``.

        Treatment rows repeat once per control with that comparison's
        statistics; control rows leave the comparison columns empty.
        """
        tests = {(t.bracket, t.grace_weeks, t.control): t for t in self.tests}
        controls = sorted({t.control for t in self.tests})
        rows = []
        for c in self.cells:
            rate = "" if c.rate is None else f"{c.rate:.6f}"
            base = [c.group, c.bracket, c.grace_weeks, c.inactive, c.size, rate]
            if c.group != "treatment":
                rows.append(base + ["", "", "", ""])
                continue
            compared = False
            for ctrl in controls:
                t = tests.get((c.bracket, c.grace_weeks, ctrl))
                if t is None:
                    continue
                compared = True
                rows.append(base + [ctrl, f"{t.z:.6f}", f"{t.p_two_sided:.6g}", int(t.significant)])
            if not compared:
                rows.append(base + ["", "", "", ""])
        return rows


def group_members(cohort: Cohort, edges: Sequence[int] = BRACKET_EDGES) -> dict[str, list[tuple[str, str]]]:
    """(user, bracket) lists per group.

    Matched control users carry the bracket of their treatment partner.
    """
    brackets = {u: activity_bracket(cohort.pre_counts[u], edges) for u in cohort.treatment_users}
    members = {"treatment": [(u, brackets[u]) for u in cohort.treatment_users]}
    for name in ("control_a", "control_b"):
        group = cohort.group(name)
        if group.pairs:
            members[name] = [(m.control, brackets[m.treatment]) for m in group.pairs]
    return members


def attrition_report(
    store: EventStore,
    cohort: Cohort,
    graces: Iterable[int] = GRACE_WEEKS,
    edges: Sequence[int] = BRACKET_EDGES,
    *,
    horizon: int | None = None,
    alpha: float = 0.05,
) -> AttritionTable:
    graces = sorted(set(graces))
    horizon = cohort.spec.post_window if horizon is None else horizon
    event = cohort.spec.event_time
    labels = bracket_labels(edges) + [ALL_BRACKET]
    table = AttritionTable()
    counts: dict[tuple[str, str, int], tuple[int, int]] = {}
    for group, members in group_members(cohort, edges).items():
        flags = {u: [is_inactive(store, u, event, g, horizon) for g in graces] for u, _ in members}
        for label in labels:
            users = [u for u, b in members if label in (ALL_BRACKET, b)]
            for gi, g in enumerate(graces):
                inactive = sum(flags[u][gi] for u in users)
                table.cells.append(AttritionCell(group, label, g, inactive, len(users)))
                counts[(group, label, g)] = (inactive, len(users))
    for control in ("control_a", "control_b"):
        for label in labels:
            for g in graces:
                if (control, label, g) not in counts:
                    continue
                k1, n1 = counts[("treatment", label, g)]
                k2, n2 = counts[(control, label, g)]
                if n1 == 0 or n2 == 0:
                    continue
                z, p = two_proportion_test(k1, n1, k2, n2)
                p_one = one_tailed_upper(z, p)
                table.tests.append(AttritionTest(label, g, control, z, p, p_one, p_one < alpha))
    return table
