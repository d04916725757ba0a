from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shockkit.bocpd import (
    OTHER,
    ChangepointParams,
    RunLengthPosterior,
    bocpd_step,
    changepoint_probabilities,
    changepoint_window_rate,
    cohort_changepoint_rates,
    cohort_traces,
    control_band,
    detect_changepoints,
    user_matrix,
)
from shockkit.cohort import EventSpec, build_cohort
from shockkit.errors import DataError
from shockkit.store import ActivityMatrix, WEEK
from shockkit.synthlab import SynthSpec, generate_store, oracle_changepoint_exact

from conftest import make_store, rec


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))


# recursion

@pytest.mark.parametrize("h", [0.001, 0.01, 0.3, 0.9])
def test_first_step_is_hazard(h):
    _, p = bocpd_step(RunLengthPosterior.initial(2, hazard=h), [3, 0])
    assert p == pytest.approx(h, rel=1e-12)


def test_hazard_monotone_at_first_step():
    values = [bocpd_step(RunLengthPosterior.initial(1, hazard=h), [4])[1] for h in np.linspace(0.01, 0.99, 25)]
    assert values == sorted(values)


def test_all_zero_series_never_flags():
    probs = changepoint_probabilities(np.zeros((10, 1), dtype=int), hazard=0.01)
    assert probs.max() < 0.9


def test_documented_example_matches_enumeration():
    y = [1, 1, 1, 9, 9, 9]
    probs = changepoint_probabilities(np.array(y), hazard=0.1, alpha0=1.0, beta0=1.0)
    assert rel_err(probs, oracle_changepoint_exact(y, 1.0, 1.0, 0.1)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(
    data=st.data(),
    t=st.integers(1, 8),
    dims=st.integers(1, 2),
    h=st.sampled_from([0.01, 0.1, 0.5]),
    a0=st.sampled_from([0.5, 1.0, 2.0]),
    b0=st.sampled_from([0.01, 1.0, 3.0]),
)
def test_recursion_matches_enumeration(data, t, dims, h, a0, b0):
    series = data.draw(st.lists(st.lists(st.integers(0, 10), min_size=dims, max_size=dims), min_size=t, max_size=t))
    probs = changepoint_probabilities(np.array(series), hazard=h, alpha0=a0, beta0=b0)
    assert rel_err(probs, oracle_changepoint_exact(series, a0, b0, h)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(series=st.lists(st.lists(st.integers(0, 30), min_size=3, max_size=3), min_size=1, max_size=40))
def test_posterior_stays_normalized(series):
    state = RunLengthPosterior.initial(3, hazard=0.05)
    for y in series:
        state, p = bocpd_step(state, y)
        probs = state.probabilities()
        assert abs(probs.sum() - 1.0) <= 1e-9
        assert (probs >= 0).all() and 0.0 <= p <= 1.0
        assert np.isfinite(state.rate_means()).all()


@settings(max_examples=40, deadline=None)
@given(
    prefix=st.lists(st.integers(0, 12), min_size=2, max_size=8),
    tail=st.lists(st.integers(0, 12), max_size=4),
    seed=st.integers(0, 1000),
)
def test_full_run_mass_exchangeable(prefix, tail, seed):
    """Joint mass of the no-changepoint hypothesis ignores order within the run."""

    def full_run(ys):
        state = RunLengthPosterior.initial(1, hazard=0.1, truncate_below=0.0)
        for y in ys:
            state, _ = bocpd_step(state, [y])
        i = int(np.flatnonzero(state.lengths == len(ys) - 1)[0])
        return state.log_probs[i] + state.log_evidence, state.alpha()[i], state.beta()[i]

    shuffled = list(np.random.default_rng(seed).permutation(prefix))
    a = full_run(prefix + tail)
    b = full_run(shuffled + tail)
    assert a[0] == pytest.approx(b[0], rel=1e-10)
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


def test_conjugate_parameters():
    state = RunLengthPosterior.initial(2, alpha0=1.0, beta0=1.0, truncate_below=0.0)
    for y in ([1, 2], [3, 4], [5, 6]):
        state, _ = bocpd_step(state, y)
    i = int(np.flatnonzero(state.lengths == 2)[0])
    assert state.alpha()[i].tolist() == [10.0, 13.0]
    assert state.beta()[i].tolist() == [4.0, 4.0]


@pytest.mark.parametrize("bad", [[-1, 0], [1.5, 0], [np.nan, 0], [1, 2, 3]])
def test_invalid_observations(bad):
    with pytest.raises(ValueError):
        bocpd_step(RunLengthPosterior.initial(2), bad)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        RunLengthPosterior.initial(1, hazard=0.0)
    with pytest.raises(ValueError):
        RunLengthPosterior.initial(1, beta0=0.0)


def test_truncation_keeps_state_small():
    rng = np.random.default_rng(0)
    state = RunLengthPosterior.initial(1, hazard=0.01)
    # after a large regime change the old long runs fall below the cutoff
    for y in np.concatenate((rng.poisson(5, size=150), rng.poisson(60, size=50))):
        state, _ = bocpd_step(state, [y])
    assert state.lengths.max() < 150
    assert state.lengths.size < 200
    assert abs(np.exp(state.log_probs).sum() - 1.0) < 1e-9


# detection

def _matrix(counts, first=-52, missing=()):
    counts = np.asarray(counts)
    return ActivityMatrix("u", 0, first, first + counts.shape[0] - 1, tuple(f"d{i}" for i in range(counts.shape[1])), counts, frozenset(missing))


def test_empty_matrix_gives_empty_trace():
    trace = detect_changepoints(_matrix(np.zeros((0, 0), dtype=int), first=0))
    assert len(trace) == 0 and trace.flagged == []


def test_masked_weeks_are_skipped():
    counts = np.random.default_rng(1).poisson(5, size=(10, 2))
    full = detect_changepoints(_matrix(counts, first=-5))
    masked = detect_changepoints(_matrix(counts, first=-5, missing={-5, 4}))
    assert masked.weeks.tolist() == list(range(-4, 4))
    assert np.allclose(masked.probabilities, changepoint_probabilities(counts[1:-1]))
    assert full.weeks.size == 10


def test_planted_jump_is_flagged_near_week_zero():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng([seed, 99])
        rates = np.where(np.arange(-52, 54)[:, None] < 0, 5.0, 20.0) * np.ones((1, 3))
        trace = detect_changepoints(_matrix(rng.poisson(rates)))
        hits += any(-2 <= w <= 2 for w in trace.flagged)
    assert hits >= 18


def test_flags_respect_threshold():
    rng = np.random.default_rng(3)
    counts = np.vstack((rng.poisson(2, (30, 2)), rng.poisson(15, (30, 2))))
    trace = detect_changepoints(_matrix(counts, first=-30), threshold=0.5)
    assert all(p >= 0.5 for w, p in zip(trace.weeks, trace.probabilities) if w in trace.flagged)
    assert all(0 <= p <= 1 for p in trace.probabilities)


def test_user_matrix_pools_long_tail(tmp_path):
    anchor = 60 * WEEK
    records = [rec("u", f"s{i}", anchor + i, f"r{i}-{k}") for i in range(5) for k in range(5 - i)]
    store = make_store(tmp_path, [dict(r, id=f"{r['id']}") for r in records])
    m = user_matrix(store, "u", anchor, max_dims=2)
    assert m.dimensions == ("s0", "s1", OTHER)
    assert m.counts.sum(axis=0).tolist() == [5, 4, 3 + 2 + 1]


def test_control_band():
    fractions = np.array([0.1, 0.2, 0.3, 5.0])
    observed = np.array([True, True, True, False])
    assert control_band(fractions, observed) == pytest.approx(0.2 + 3 * 0.1)


# cohort level

def _world(tmp_path_factory, name, changepoints):
    spec = SynthSpec.from_dict(
        dict(
            seed=21,
            n_treatment=80,
            n_control=120,
            n_hub=100,
            n_background=10,
            treatment_rate=5.0,
            similar_rate=2.0,
            hub_rate=2.0,
            changepoints=changepoints,
        )
    )
    store, truth = generate_store(spec, tmp_path_factory.mktemp(name))
    cohort = build_cohort(store, EventSpec("target", spec.event_time))
    return store, cohort


@pytest.fixture(scope="module")
def shock_world(tmp_path_factory):
    return _world(tmp_path_factory, "shock", [{"week": 0, "multiplier": 4.0, "fraction": 0.3}])


@pytest.fixture(scope="module")
def null_world(tmp_path_factory):
    return _world(tmp_path_factory, "null", [])


def test_planted_shock_exceeds_band(shock_world):
    store, cohort = shock_world
    rates = cohort_changepoint_rates(store, cohort)
    for control in ("control_a", "control_b"):
        assert any(-1 <= w <= 1 for w in rates.exceeding("treatment", control))
    _, tests = changepoint_window_rate(store, cohort)
    assert all(t.significant for t in tests if t.bracket == "all")


def test_null_world_stays_quiet(null_world):
    store, cohort = null_world
    rates = cohort_changepoint_rates(store, cohort)
    observed_weeks = int(rates.observed.sum())
    for control in ("control_a", "control_b"):
        # a 3-sigma band admits a handful of chance exceedances at most
        assert len(rates.exceeding("treatment", control)) <= max(3, 0.05 * observed_weeks)
    _, tests = changepoint_window_rate(store, cohort)
    assert not any(t.significant for t in tests if t.bracket == "all")


def test_parallel_traces_match_serial(shock_world):
    store, cohort = shock_world
    params = ChangepointParams()
    serial = cohort_traces(store, cohort, params, threads=1)
    parallel = cohort_traces(store, cohort, params, threads=2)
    for group in serial:
        for user, trace in serial[group].items():
            assert np.array_equal(trace.probabilities, parallel[group][user].probabilities)


def test_group_without_users_is_an_error(shock_world):
    store, cohort = shock_world
    empty = build_cohort(store, EventSpec("nowhere", cohort.spec.event_time))
    with pytest.raises(DataError):
        cohort_changepoint_rates(store, empty)
