"""Command line entry point: ingest, cohort, attrition, did, changepoint, predict, synth.

Exit codes: 0 success, 2 usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import attrition as attr
from . import bocpd, did, predictor
from .cohort import CONTROL_RULES, DEFAULT_HUB, Cohort, EventSpec, build_cohort, load_karma
from .errors import DataError
from .provenance import header_lines, provenance, write_csv, write_json
from .store import EventStore, ingest

EXIT_USAGE = 2
EXIT_DATA = 3

# Flags that must be present after merging --config.
REQUIRED = {
    "ingest": ("input", "out"),
    "cohort": ("store", "subreddit", "event", "out"),
    "attrition": ("cohort", "out"),
    "did": ("cohort", "out"),
    "changepoint": ("cohort", "out"),
    "predict": ("train", "out"),
    "synth": ("spec", "out"),
}


class UsageError(Exception):
    pass


def parse_time(text: str) -> int:
    """ISO 8601 date or datetime to epoch seconds; naive values are UTC."""
    if text.lstrip("-").isdigit():
        return int(text)
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise UsageError(f"invalid ISO 8601 time {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from exc


def default_threads() -> int:
    return os.cpu_count() or 1


def _open_cohort(args) -> tuple[Cohort, EventStore]:
    cohort = Cohort.load(args.cohort)
    return cohort, _cohort_store(cohort, args.store)


def _cohort_store(cohort: Cohort, override: str | None) -> EventStore:
    path = override or cohort.store_path
    if not path:
        raise DataError("cohort does not record a store path; pass --store")
    store = EventStore.open(path)
    if cohort.store_checksum and store.checksum != cohort.store_checksum:
        raise DataError(f"store {path} checksum {store.checksum} does not match the cohort's {cohort.store_checksum}")
    return store


def _sibling(path: str, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


# --------------------------------------------------------------------------- commands


def cmd_ingest(args, argv: Sequence[str]) -> int:
    patterns = args.input if isinstance(args.input, list) else [args.input]
    sources = sorted({p for pattern in patterns for p in glob.glob(str(pattern))})
    if not sources:
        raise DataError(f"no input files match {patterns}")
    time_from = parse_time(args.time_from) if args.time_from else None
    time_to = parse_time(args.time_to) if args.time_to else None
    store, stats = ingest(
        sources, args.out, kind=args.kind, time_from=time_from, time_to=time_to, threads=args.threads
    )
    # kept beside the manifest so the manifest itself stays independent of --threads
    write_json(store.root / "provenance.json", provenance(argv, None, store.checksum), {"stats": stats.as_dict()})
    print(json.dumps({"store": str(store.root), "checksum": store.checksum, **stats.as_dict()}, sort_keys=True))
    return 0


def cmd_cohort(args, argv: Sequence[str]) -> int:
    store = EventStore.open(args.store)
    spec = EventSpec(args.subreddit, parse_time(args.event), min_activity=args.min_activity)
    karma = load_karma(args.karma) if args.karma else None
    cohort = build_cohort(
        store,
        spec,
        hub=args.hub,
        karma=karma,
        control_rule=args.control_rule,
        max_control_subreddits=args.max_control_subreddits,
    )
    for warning in cohort.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    write_json(args.out, provenance(argv, None, store.checksum), cohort.to_dict())
    return 0


def cmd_attrition(args, argv: Sequence[str]) -> int:
    cohort, store = _open_cohort(args)
    if not cohort.treatment_users:
        raise DataError("cohort has no treatment users")
    table = attr.attrition_report(store, cohort, args.grace, args.brackets, alpha=args.alpha)
    write_csv(args.out, provenance(argv, None, store.checksum), attr.CSV_COLUMNS, table.csv_rows())
    return 0


def cmd_did(args, argv: Sequence[str]) -> int:
    cohort, store = _open_cohort(args)
    controls = [c for c in args.control if cohort.group(c).pairs]
    if not controls:
        raise DataError("no control group has matched users")
    prov = provenance(argv, args.seed, store.checksum)
    results = []
    series_rows = []
    for control in controls:
        result, treat, ctrl = did.did_analysis(store, cohort, control, n_sims=args.sims, seed=args.seed)
        results.append({"control": control, **result.to_dict()})
        for w, ok, tv, cv in zip(treat.weeks, treat.observed, treat.values, ctrl.values):
            if ok:
                series_rows.append([control, int(w), f"{tv:.6f}", f"{cv:.6f}"])
    write_json(args.out, prov, {"results": results, "treatment_size": len(cohort.treatment_users)})
    write_csv(_sibling(args.out, "_series.csv"), prov, ["control", "week", "treatment_mean", "control_mean"], series_rows)
    return 0


def cmd_changepoint(args, argv: Sequence[str]) -> int:
    cohort, store = _open_cohort(args)
    params = bocpd.ChangepointParams(
        hazard=args.hazard, alpha0=args.alpha0, beta0=args.beta0, threshold=args.threshold
    )
    traces = bocpd.cohort_traces(store, cohort, params, threads=args.threads)
    rates = bocpd.cohort_changepoint_rates(store, cohort, params, traces=traces)
    window_rates, tests = bocpd.changepoint_window_rate(
        store, cohort, params, window_weeks=args.window, traces=traces
    )
    prov = provenance(argv, None, store.checksum)
    rows = [
        [group, int(w), f"{frac[i]:.6f}"]
        for group, frac in rates.fractions.items()
        for i, (w, ok) in enumerate(zip(rates.weeks, rates.observed))
        if ok
    ]
    write_csv(args.out, prov, ["group", "week", "fraction_flagged"], rows)
    bands = {
        name: {
            "band": band,
            "size": rates.sizes[name],
            "treatment_weeks_above": rates.exceeding("treatment", name),
        }
        for name, band in rates.bands.items()
    }
    params_doc = {"hazard": args.hazard, "alpha0": args.alpha0, "beta0": args.beta0, "threshold": args.threshold}
    write_json(
        _sibling(args.out, "_band.json"),
        prov,
        {"bands": bands, "params": params_doc, "sizes": rates.sizes, "window_weeks": args.window},
    )
    test_of = {(t.bracket, t.control): t for t in tests}
    window_rows = []
    for r in window_rates:
        rate = "" if r.rate is None else f"{r.rate:.6f}"
        row = [r.group, r.bracket, r.changed, r.size, rate]
        if r.group == "treatment":
            for control in ("control_a", "control_b"):
                t = test_of.get((r.bracket, control))
                if t is not None:
                    window_rows.append(row + [control, f"{t.z:.6f}", f"{t.p_one_tailed:.6g}", int(t.significant)])
            continue
        window_rows.append(row + ["", "", "", ""])
    write_csv(
        _sibling(args.out, "_window.csv"),
        prov,
        ["group", "bracket", "changed", "size", "rate", "control", "z", "p_one_tailed", "significant"],
        window_rows,
    )
    return 0


def cmd_predict(args, argv: Sequence[str]) -> int:
    train_cohort = Cohort.load(args.train)
    train_store = _cohort_store(train_cohort, args.store)
    config = predictor.TrainConfig(
        hidden=args.hidden, learning_rate=args.lr, epochs=args.epochs, seed=args.seed, loss=args.loss
    )
    train_fs = predictor.build_features(train_store, train_cohort)
    if not train_fs.users:
        raise DataError("training cohort has no treatment users")
    prov = provenance(argv, args.seed, train_store.checksum)
    columns = ["cohort", "mode", "fold", "auc", "f1", "n_train", "n_eval"]
    name = train_cohort.spec.treatment_subreddit
    rows = []
    if args.eval:
        eval_cohort = Cohort.load(args.eval)
        eval_fs = predictor.build_features(_cohort_store(eval_cohort, None), eval_cohort)
        if not eval_fs.users:
            raise DataError("evaluation cohort has no treatment users")
        try:
            result = predictor.transfer_eval(train_fs, eval_fs, config)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        model = result.model
        label = f"{name}->{eval_cohort.spec.treatment_subreddit}"
        n_train, n_eval = len(train_fs.users), len(eval_fs.users)
        rows.append([label, "transfer", "", f"{result.auc:.6f}", f"{result.f1:.6f}", n_train, n_eval])
    else:
        cv = predictor.cross_validate(train_fs, args.cv, config)
        n = len(train_fs.users)
        for fold in cv.folds:
            rows.append([name, "cv", fold.fold, f"{fold.auc:.6f}", f"{fold.f1:.6f}", "", ""])
        (auc_mean, auc_half), (f1_mean, f1_half) = cv.summary("auc"), cv.summary("f1")
        rows.append([name, "cv_mean", "", f"{auc_mean:.6f}", f"{f1_mean:.6f}", n, ""])
        rows.append([name, "cv_ci95_half_width", "", f"{auc_half:.6f}", f"{f1_half:.6f}", n, ""])
        model = predictor.train(train_fs.features(), train_fs.labels, config, train_fs.vocabulary)
    write_csv(args.out, prov, columns, rows)
    model_path = args.model or _sibling(args.out, "_model.json")
    write_json(model_path, prov, {"model": model.to_dict()})
    return 0


def cmd_synth(args, argv: Sequence[str]) -> int:
    from .synthlab import SynthSpec, generate

    try:
        spec = SynthSpec.load(args.spec)
    except (OSError, ValueError, TypeError) as exc:
        raise DataError(f"cannot read synth spec {args.spec}: {exc}") from exc
    truth = generate(spec, args.out)
    prov = provenance(argv, spec.seed, None)
    out = Path(args.out)
    write_json(out / "truth.json", prov, truth.to_dict())
    karma = out / "karma.csv"
    karma.write_text("".join(header_lines(prov)) + karma.read_text(encoding="utf-8"), encoding="utf-8")
    print(json.dumps({"records": truth.record_count, "users": len(truth.users), "files": truth.files}))
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "cohort": cmd_cohort,
    "attrition": cmd_attrition,
    "did": cmd_did,
    "changepoint": cmd_changepoint,
    "predict": cmd_predict,
    "synth": cmd_synth,
}


# --------------------------------------------------------------------------- parsing


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="shockkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of option values; flags on the command line win")
        subs[name] = p
        return p

    p = add("ingest", "build an event store from NDJSON dumps")
    p.add_argument("--input", nargs="+", help="input file glob(s)")
    p.add_argument("--out", help="new store directory")
    p.add_argument("--from", dest="time_from", help="keep records at or after this time (ISO 8601)")
    p.add_argument("--to", dest="time_to", help="keep records before this time (ISO 8601)")
    p.add_argument("--kind", choices=("post", "comment"), help="record kind for every input")
    p.add_argument("--threads", type=int, default=default_threads())

    p = add("cohort", "select treatment users and matched controls")
    p.add_argument("--store")
    p.add_argument("--subreddit")
    p.add_argument("--event", help="event time (ISO 8601)")
    p.add_argument("--min-activity", type=int, default=10)
    p.add_argument("--karma", help="user,karma CSV")
    p.add_argument("--hub", default=DEFAULT_HUB)
    p.add_argument("--control-rule", choices=CONTROL_RULES, default="active_contributors")
    p.add_argument("--max-control-subreddits", type=int, default=200)
    p.add_argument("--out")

    p = add("attrition", "inactivity rates and tests by bracket and grace period")
    p.add_argument("--cohort")
    p.add_argument("--store", help="override the store path recorded in the cohort")
    p.add_argument("--grace", type=int_list, default=list(attr.GRACE_WEEKS))
    p.add_argument("--brackets", type=int_list, default=list(attr.BRACKET_EDGES))
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out")

    p = add("did", "difference in differences with a permutation test")
    p.add_argument("--cohort")
    p.add_argument("--store")
    p.add_argument("--sims", type=int, default=did.DEFAULT_SIMS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--control", nargs="+", choices=("control_a", "control_b"), default=["control_a", "control_b"])
    p.add_argument("--out", help="result JSON; weekly series go to <stem>_series.csv")

    p = add("changepoint", "per-user changepoint detection and weekly rates")
    p.add_argument("--cohort")
    p.add_argument("--store")
    p.add_argument("--threshold", type=float, default=bocpd.THRESHOLD)
    p.add_argument("--hazard", type=float, default=bocpd.DEFAULT_HAZARD)
    p.add_argument("--alpha0", type=float, default=bocpd.DEFAULT_ALPHA0)
    p.add_argument("--beta0", type=float, default=bocpd.DEFAULT_BETA0)
    p.add_argument("--window", type=int, default=bocpd.WINDOW_WEEKS)
    p.add_argument("--threads", type=int, default=default_threads())
    p.add_argument("--out", help="weekly rates CSV; window rates go to <stem>_window.csv")

    p = add("predict", "train and evaluate the attrition classifier")
    p.add_argument("--train", help="training cohort JSON")
    p.add_argument("--store", help="override the training cohort's store path")
    p.add_argument("--eval", help="evaluation cohort JSON (transfer); default is cross validation")
    p.add_argument("--cv", type=int, default=5)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--loss", choices=("lmse", "mse"), default="lmse")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="metrics CSV")
    p.add_argument("--model", help="model JSON (default <stem>_model.json)")

    p = add("synth", "generate a synthetic corpus with ground truth")
    p.add_argument("--spec", help="SynthSpec JSON")
    p.add_argument("--out")
    return parser, subs


def _apply_config(sub: argparse.ArgumentParser, path: str) -> None:
    try:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(config, dict):
        raise UsageError("config must be a JSON object")
    dests = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    aliases = {k.replace("-", "_"): k for k in config}
    unknown = sorted(k for k in aliases if k not in dests)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(aliases[k] for k in unknown)}")
    defaults = {}
    for key, value in config.items():
        action = dests[key.replace("-", "_")]
        if action.type is not None and isinstance(value, (str, int, float)) and not isinstance(value, bool):
            value = action.type(str(value)) if action.type is int_list else action.type(value)
        if action.choices is not None:
            values = value if isinstance(value, list) else [value]
            if any(v not in action.choices for v in values):
                raise UsageError(f"config value {value!r} not allowed for {key}")
        defaults[action.dest] = value
    sub.set_defaults(**defaults)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            _apply_config(subs[args.command], args.config)
            args = parser.parse_args(argv)
        missing = [name for name in REQUIRED[args.command] if getattr(args, name) in (None, [])]
        if missing:
            raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"shockkit {argv[0] if argv else ''}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"shockkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
