"""Provenance headers for every file the command line writes.

CSV files start with ``# key: value`` comment lines; JSON documents carry a
top-level ``provenance`` object.  Nothing time-dependent goes in, so reruns
with the same arguments produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shlex
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import __version__


def provenance(argv: Sequence[str], seed: int | None = None, store_checksum: str | None = None) -> dict:
    return {
        "command": shlex.join(["shockkit", *argv]),
        "seed": seed,
        "store_checksum": store_checksum,
        "version": __version__,
    }


def header_lines(prov: dict) -> list[str]:
    return [f"# {key}: {'' if prov[key] is None else prov[key]}\n" for key in ("command", "seed", "store_checksum", "version")]


def read_header(path: str | os.PathLike) -> dict[str, str]:
    """Parse the ``#`` header of a CSV written by :func:`write_csv`."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition(": ")
            out[key] = value
    return out


def finite(value: Any) -> Any:
    """Replace non-finite floats with ``None`` throughout a JSON-able tree."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [finite(v) for v in value]
    return value


def write_json(path: str | os.PathLike, prov: dict, payload: dict) -> None:
    doc = {"provenance": prov, **payload}
    text = json.dumps(finite(doc), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_csv(path: str | os.PathLike, prov: dict, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(header_lines(prov))
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(columns)
        writer.writerows(rows)


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))
