from __future__ import annotations

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from shockkit.cli import main, parse_time
from shockkit.provenance import read_csv, read_header

SPEC = dict(
    seed=4,
    n_treatment=40,
    n_control=100,
    n_hub=80,
    n_background=10,
    attrition_fraction=0.4,
    baseline_attrition=0.05,
)


def run(*argv):
    return main([str(a) for a in argv])


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    work = tmp_path_factory.mktemp("cli")
    (work / "spec.json").write_text(json.dumps(SPEC))
    codes = {}
    codes["synth"] = run("synth", "--spec", work / "spec.json", "--out", work / "raw")
    codes["ingest"] = run("ingest", "--input", str(work / "raw" / "R*_synth.ndjson"), "--out", work / "store", "--threads", 2)
    digest = tree_digest(work / "store")
    codes["cohort"] = run(
        "cohort", "--store", work / "store", "--subreddit", "target", "--event", "2017-01-01T00:00:00Z",
        "--karma", work / "raw" / "karma.csv", "--out", work / "cohort.json",
    )
    codes["attrition"] = run("attrition", "--cohort", work / "cohort.json", "--out", work / "attrition.csv")
    codes["did"] = run("did", "--cohort", work / "cohort.json", "--sims", 300, "--seed", 7, "--out", work / "did.json")
    codes["changepoint"] = run("changepoint", "--cohort", work / "cohort.json", "--threads", 1, "--out", work / "cp.csv")
    codes["predict"] = run("predict", "--train", work / "cohort.json", "--epochs", 20, "--out", work / "pred.csv")
    return work, codes, digest


def test_all_commands_succeed(pipeline):
    _, codes, _ = pipeline
    assert codes == dict.fromkeys(codes, 0)


def test_store_is_not_mutated(pipeline):
    work, _, digest = pipeline
    assert tree_digest(work / "store") == digest


def test_every_output_has_provenance(pipeline):
    work, _, _ = pipeline
    store = json.loads((work / "store" / "manifest.json").read_text())
    csvs = ["attrition.csv", "did_series.csv", "cp.csv", "cp_window.csv", "pred.csv", "raw/karma.csv"]
    jsons = ["store/provenance.json", "cohort.json", "did.json", "cp_band.json", "pred_model.json", "raw/truth.json"]
    for name in csvs:
        header = read_header(work / name)
        assert header["command"].startswith("shockkit "), name
        assert "seed" in header and "store_checksum" in header
    for name in jsons:
        prov = json.loads((work / name).read_text())["provenance"]
        assert prov["command"].startswith("shockkit "), name
    assert read_header(work / "attrition.csv")["store_checksum"] == store["checksum"]
    assert read_header(work / "pred.csv")["seed"] == "0"
    assert json.loads((work / "did.json").read_text())["provenance"]["seed"] == 7


def test_output_schemas(pipeline):
    work, _, _ = pipeline
    attrition = read_csv(work / "attrition.csv")
    assert list(attrition[0]) == ["group", "bracket", "grace_weeks", "inactive", "size", "rate", "control", "z", "p_two_sided", "sig_one_tailed"]
    did = json.loads((work / "did.json").read_text())
    assert {"delta_pre", "delta_post", "did", "n_sims", "seed", "p", "control"} <= set(did["results"][0])
    assert list(read_csv(work / "cp.csv")[0]) == ["group", "week", "fraction_flagged"]
    assert list(read_csv(work / "pred.csv")[0])[:5] == ["cohort", "mode", "fold", "auc", "f1"]


def test_did_is_byte_identical_on_rerun(pipeline):
    work, _, _ = pipeline
    before = (work / "did.json").read_bytes()
    assert run("did", "--cohort", work / "cohort.json", "--sims", 300, "--seed", 7, "--out", work / "did.json") == 0
    assert (work / "did.json").read_bytes() == before


def test_event_outside_store_range(pipeline, capsys):
    work, _, _ = pipeline
    code = run("cohort", "--store", work / "store", "--subreddit", "target", "--event", "1990-01-01", "--out", work / "bad.json")
    assert code == 3
    assert "outside the store time range" in capsys.readouterr().err
    assert not (work / "bad.json").exists()


def test_ingest_refuses_existing_store(pipeline):
    work, _, digest = pipeline
    assert run("ingest", "--input", str(work / "raw" / "R*_synth.ndjson"), "--out", work / "store") == 3
    assert tree_digest(work / "store") == digest


def test_transfer_mode(pipeline):
    work, _, _ = pipeline
    code = run("predict", "--train", work / "cohort.json", "--eval", work / "cohort.json", "--epochs", 5, "--out", work / "tr.csv")
    assert code == 0
    rows = read_csv(work / "tr.csv")
    assert rows[0]["mode"] == "transfer" and rows[0]["cohort"] == "target->target"


def test_config_file_and_flag_precedence(pipeline):
    work, _, _ = pipeline
    cfg = work / "did_config.json"
    cfg.write_text(json.dumps({"cohort": str(work / "cohort.json"), "sims": 50, "seed": 2, "out": str(work / "cfg.json")}))
    assert run("did", "--config", cfg) == 0
    doc = json.loads((work / "cfg.json").read_text())
    assert doc["results"][0]["n_sims"] == 50 and doc["results"][0]["seed"] == 2
    assert run("did", "--config", cfg, "--seed", 9) == 0
    assert json.loads((work / "cfg.json").read_text())["results"][0]["seed"] == 9


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"cohort": "x.json", "sim": 5}))
    assert run("did", "--config", cfg, "--out", tmp_path / "o.json") == 2


@pytest.mark.parametrize(
    "argv",
    [[], ["frobnicate"], ["did"], ["did", "--cohort", "x.json"], ["did", "--cohort", "x", "--out", "y", "--sims", "many"]],
)
def test_usage_errors(argv):
    assert main(argv) == 2


def test_missing_cohort_is_data_error(tmp_path):
    assert run("attrition", "--cohort", tmp_path / "none.json", "--out", tmp_path / "a.csv") == 3


def test_bad_synth_spec(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"seed": 1, "bogus": 2}))
    assert run("synth", "--spec", tmp_path / "s.json", "--out", tmp_path / "o") == 3


def test_parse_time():
    assert parse_time("2017-01-01") == 1483228800
    assert parse_time("2017-01-01T00:00:00Z") == 1483228800
    assert parse_time("2017-01-01T01:00:00+01:00") == 1483228800
    assert parse_time("1483228800") == 1483228800


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "shockkit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "changepoint" in proc.stdout


def test_shipped_wide_predict_config(pipeline):
    work, _, _ = pipeline
    config = Path(__file__).resolve().parents[1] / "configs" / "predict_wide.json"
    code = run("predict", "--config", config, "--train", work / "cohort.json", "--epochs", 1, "--cv", 2,
               "--out", work / "wide.csv")
    model = json.loads((work / "wide_model.json").read_text())["model"]
    assert code == 0 and model["layers"][1:3] == [1000, 1000]
