from __future__ import annotations

import json
from pathlib import Path

import pytest

from shockkit.store import ingest
from shockkit.synthlab import SynthSpec, generate_store


def write_ndjson(path: Path, records) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write((r if isinstance(r, str) else json.dumps(r)) + "\n")
    return path


def rec(author: str, sub: str, ts: int, rid: str, **extra) -> dict:
    return {"author": author, "subreddit": sub, "created_utc": ts, "id": rid, **extra}


def make_store(tmp_path: Path, records, name: str = "store", **kwargs):
    raw = write_ndjson(tmp_path / f"{name}.ndjson", records)
    store, stats = ingest([raw], tmp_path / name, **kwargs)
    return store


SMALL_SPEC = dict(
    seed=7,
    n_treatment=60,
    n_control=150,
    n_hub=120,
    n_background=40,
    attrition_fraction=0.4,
    departure_weeks=[0, 2],
    baseline_attrition=0.05,
)


@pytest.fixture(scope="session")
def synth_world(tmp_path_factory):
    """A small generated corpus shared by the cohort-level tests."""
    out = tmp_path_factory.mktemp("synth")
    spec = SynthSpec.from_dict(SMALL_SPEC)
    store, truth = generate_store(spec, out)
    return store, truth, out


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((name, ok, detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
