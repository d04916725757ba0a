"""Seeded synthetic activity logs with planted effects and ground truth.

Every user has a base weekly Poisson rate per subreddit.  Counts are drawn
per (user, subreddit, week) and expanded to records with timestamps uniform
inside the week.  Treatment users can be given planted departures, a shift
in post-event weekly volume and rate-multiplier changepoints; the ground
truth manifest records all of it together with per-user recounts.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

WEEK = 7 * 86_400
DAY = 86_400
DEFAULT_EVENT = 1_483_228_800  # 2017-01-01T00:00:00Z
GRACE_WEEKS = (1, 2, 3, 4)
ROLES = ("treatment", "control", "hub", "background")
_ROLE_PREFIX = {"treatment": "t", "control": "c", "hub": "h", "background": "b"}


@dataclass(frozen=True)
class ChangepointInjection:
    week: int
    multiplier: float
    fraction: float


@dataclass
class SynthSpec:
    seed: int = 0
    event_time: int = DEFAULT_EVENT
    first_week: int = -70
    last_week: int = 56
    treatment_subreddit: str = "target"
    hub: str = "AskReddit"
    n_similar: int = 5
    n_background_subs: int = 20
    n_treatment: int = 200
    n_control: int = 400
    n_hub: int = 300
    n_background: int = 200
    treatment_rate: float = 1.0
    similar_rate: float = 0.6
    hub_rate: float = 0.6
    background_rate: float = 0.15
    rate_shape: float = 4.0
    post_fraction: float = 0.2
    attrition_fraction: float = 0.0
    departure_weeks: tuple[int, int] = (0, 1)
    baseline_attrition: float = 0.0
    did_shift: float = 0.0
    ban: bool = False
    changepoints: list[ChangepointInjection] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.departure_weeks = tuple(self.departure_weeks)
        self.changepoints = [
            c if isinstance(c, ChangepointInjection) else ChangepointInjection(**c) for c in self.changepoints
        ]
        for name in ("attrition_fraction", "baseline_attrition", "post_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("treatment_rate", "similar_rate", "hub_rate", "background_rate", "rate_shape"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for c in self.changepoints:
            if not 0.0 <= c.fraction <= 1.0 or c.multiplier < 0:
                raise ValueError("changepoint fraction must lie in [0, 1] and multiplier be >= 0")
        if self.last_week < self.first_week:
            raise ValueError("empty week span")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SynthSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SynthSpec keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> SynthSpec:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["departure_weeks"] = list(self.departure_weeks)
        return data

    @property
    def similar_subreddits(self) -> list[str]:
        return [f"similar{i:02d}" for i in range(self.n_similar)]

    @property
    def background_subreddits(self) -> list[str]:
        return [f"bg{i:03d}" for i in range(self.n_background_subs)]


@dataclass
class SynthUser:
    name: str
    role: str
    join_week: int
    rates: dict[str, float]
    leaver: bool = False
    departure_week: int | None = None
    shifted: bool = False
    changepoint_week: int | None = None
    multiplier: float = 1.0


def _gamma_rate(rng: np.random.Generator, mean: float, shape: float) -> float:
    if mean <= 0:
        return 0.0
    return float(rng.gamma(shape, mean / shape))


def _make_user(spec: SynthSpec, role: str, index: int) -> tuple[SynthUser, np.random.Generator]:
    rng = np.random.default_rng([spec.seed, ROLES.index(role), index])
    name = f"{_ROLE_PREFIX[role]}{index:05d}"
    join = int(rng.integers(spec.first_week, max(spec.first_week + 1, -52)))
    rates: dict[str, float] = {}
    sims = spec.similar_subreddits
    bgs = spec.background_subreddits
    if role == "treatment":
        rates[spec.treatment_subreddit] = _gamma_rate(rng, spec.treatment_rate, spec.rate_shape)
    if role in ("treatment", "control") and sims:
        for sub in rng.choice(sims, size=min(2, len(sims)), replace=False):
            rates[str(sub)] = _gamma_rate(rng, spec.similar_rate, spec.rate_shape)
    if role == "hub" or (role == "treatment" and rng.random() < 0.3):
        rates[spec.hub] = _gamma_rate(rng, spec.hub_rate, spec.rate_shape)
    if bgs:
        for sub in rng.choice(bgs, size=min(2, len(bgs)), replace=False):
            rates[str(sub)] = _gamma_rate(rng, spec.background_rate, spec.rate_shape)
    user = SynthUser(name, role, join, rates)

    dep_lo, dep_hi = spec.departure_weeks
    if role == "treatment" and rng.random() < spec.attrition_fraction:
        user.leaver = True
        user.departure_week = int(rng.integers(dep_lo, max(dep_hi, dep_lo + 1)))
    elif rng.random() < spec.baseline_attrition:
        user.leaver = True
        user.departure_week = int(rng.integers(0, 52))
    if role == "treatment":
        user.shifted = spec.did_shift != 0.0
        for inj in spec.changepoints:
            if rng.random() < inj.fraction:
                user.changepoint_week = inj.week
                user.multiplier = inj.multiplier
    return user, rng


def _weekly_rates(spec: SynthSpec, user: SynthUser) -> tuple[list[str], np.ndarray]:
    """Expected counts, weeks x subreddits, after all planted effects."""
    subs = sorted(user.rates)
    weeks = np.arange(spec.first_week, spec.last_week + 1)
    lam = np.tile(np.array([user.rates[s] for s in subs]), (weeks.size, 1))
    lam[weeks < user.join_week] = 0.0
    post = weeks >= 0
    if spec.ban and spec.treatment_subreddit in user.rates:
        lam[post, subs.index(spec.treatment_subreddit)] = 0.0
    if user.shifted:
        total = lam[post].sum(axis=1, keepdims=True)
        scale = np.divide(np.maximum(total + spec.did_shift, 0.0), total, out=np.zeros_like(total), where=total > 0)
        lam[post] *= scale
    if user.changepoint_week is not None:
        lam[weeks >= user.changepoint_week] *= user.multiplier
    if user.leaver:
        lam[weeks >= user.departure_week] = 0.0
    return subs, lam


@dataclass
class GroundTruth:
    spec: SynthSpec
    users: dict[str, dict]
    record_count: int
    files: list[str]

    def role(self, role: str) -> list[str]:
        return sorted(u for u, info in self.users.items() if info["role"] == role)

    def qualifying_treatment(self, min_activity: int = 10) -> list[str]:
        return sorted(u for u, info in self.users.items() if info["target_pre_count"] >= min_activity)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "record_count": self.record_count, "files": self.files, "users": self.users}

    @classmethod
    def load(cls, path: str | os.PathLike) -> GroundTruth:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(SynthSpec.from_dict(data["spec"]), data["users"], data["record_count"], data["files"])


def generate(spec: SynthSpec, out_dir: str | os.PathLike) -> GroundTruth:
    """Write ``RS_synth.ndjson``, ``RC_synth.ndjson``, ``karma.csv`` and ``truth.json``.

    Output bytes depend only on ``spec``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    event = spec.event_time
    posts: list[tuple[int, str, str]] = []
    comments: list[tuple[int, str, str]] = []
    truth: dict[str, dict] = {}
    karma_rows: list[str] = []
    counts = {"treatment": spec.n_treatment, "control": spec.n_control, "hub": spec.n_hub, "background": spec.n_background}
    pre_lo, pre_hi = event - 365 * DAY, event
    for role in ROLES:
        for index in range(counts[role]):
            user, rng = _make_user(spec, role, index)
            subs, lam = _weekly_rates(spec, user)
            drawn = rng.poisson(lam)
            stamps: list[int] = []
            n_records = 0
            target_pre = 0
            for wi, week in enumerate(range(spec.first_week, spec.last_week + 1)):
                for si, sub in enumerate(subs):
                    k = int(drawn[wi, si])
                    if not k:
                        continue
                    offsets = rng.integers(0, WEEK, size=k)
                    is_post = rng.random(k) < spec.post_fraction
                    for off, post in zip(offsets, is_post):
                        ts = event + week * WEEK + int(off)
                        rid = f"{user.name}-{n_records:x}"
                        n_records += 1
                        line = (
                            f'{{"author":"{user.name}","created_utc":{ts},"id":"{rid}",'
                            f'"subreddit":"{sub}"}}\n'
                        )
                        (posts if post else comments).append((ts, rid, line))
                        stamps.append(ts)
                        if sub == spec.treatment_subreddit and pre_lo <= ts < pre_hi:
                            target_pre += 1
            last_after = {
                g: not any(event + g * WEEK < ts <= event + 365 * DAY for ts in stamps) for g in GRACE_WEEKS
            }
            karma_rows.append(f"{user.name},{int(rng.lognormal(5.0, 1.5))}\n")
            truth[user.name] = {
                "role": role,
                "rates": user.rates,
                "join_week": user.join_week,
                "leaver": user.leaver,
                "departure_week": user.departure_week,
                "shifted": user.shifted,
                "changepoint_week": user.changepoint_week,
                "multiplier": user.multiplier,
                "records": n_records,
                "target_pre_count": target_pre,
                "inactive_by_grace": {str(g): v for g, v in last_after.items()},
            }
    files = []
    for name, rows in (("RS_synth.ndjson", posts), ("RC_synth.ndjson", comments)):
        rows.sort()
        with open(out / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(line for _, _, line in rows)
        files.append(name)
    with open(out / "karma.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user,karma\n")
        fh.writelines(karma_rows)
    gt = GroundTruth(spec, truth, len(posts) + len(comments), files)
    (out / "truth.json").write_text(json.dumps(gt.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return gt


def generate_store(spec: SynthSpec, out_dir: str | os.PathLike, threads: int = 1):
    """Generate raw files under ``out_dir/raw`` and ingest them into ``out_dir/store``."""
    from ..store import ingest

    out = Path(out_dir)
    truth = generate(spec, out / "raw")
    store, _ = ingest([out / "raw" / f for f in truth.files], out / "store", threads=threads)
    return store, truth


def simulate_weekly_counts(
    rng: np.random.Generator,
    n_users: int,
    weeks: tuple[int, int] = (-52, 53),
    base_rate: float = 10.0,
    rate_shape: float = 4.0,
    shift: float = 0.0,
) -> np.ndarray:
    """users x weeks Poisson counts with heterogeneous rates.

    Post-event weeks (week >= 0) have each user's rate moved by ``shift``
    (floored at zero).
    """
    first, last = weeks
    week_idx = np.arange(first, last + 1)
    rates = rng.gamma(rate_shape, base_rate / rate_shape, size=(n_users, 1))
    lam = np.repeat(rates, week_idx.size, axis=1)
    lam[:, week_idx >= 0] = np.maximum(lam[:, week_idx >= 0] + shift, 0.0)
    return rng.poisson(lam)


def random_corpus(path: str | os.PathLike, n_records: int, seed: int = 0, n_users: int = 20_000, n_subs: int = 500) -> None:
    """Flat NDJSON corpus for ingestion benchmarks (ids unique, times random)."""
    rng = np.random.default_rng(seed)
    block = 100_000
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for start in range(0, n_records, block):
            n = min(block, n_records - start)
            users = rng.integers(0, n_users, size=n)
            subs = rng.integers(0, n_subs, size=n)
            times = rng.integers(1_400_000_000, 1_500_000_000, size=n)
            fh.writelines(
                f'{{"author":"u{u}","subreddit":"s{s}","created_utc":{t},"id":"r{start + i:x}"}}\n'
                for i, (u, s, t) in enumerate(zip(users.tolist(), subs.tolist(), times.tolist()))
            )
