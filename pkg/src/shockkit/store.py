"""Activity event store.

Records are ingested from Pushshift-style NDJSON dumps into a directory of
subreddit-hashed partition files.  Each partition is sorted by
``(timestamp, record_id)``; an author index maps users to byte offsets.
Ingest streams through bounded buffers and sorts externally, so memory use
does not grow with the size of the input.

Layout of a finalized store::

    manifest.json        record count, time range, partition list, checksums
    index.tsv            author<TAB>partition<TAB>byte offset, sorted
    partitions/pNNN.ndjson

Analytic queries run against an in-memory columnar view that is built on
first use and shared between threads.
"""

from __future__ import annotations

import bz2
import gzip
import hashlib
import heapq
import json
import logging
import lzma
import os
import shutil
import threading
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from json.encoder import encode_basestring_ascii as _quote
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, RecordError

log = logging.getLogger(__name__)

DAY = 86_400
WEEK = 7 * DAY
DELETED_AUTHOR = "[deleted]"
KINDS = ("post", "comment")
ALL = "ALL"
DEFAULT_WEEKS = (-52, 53)
STORE_FORMAT = "shockkit-store/1"
MERGE_FANIN = 32
DEFAULT_CHUNK = 4096

_REQUIRED = ("author", "subreddit", "created_utc", "id")
_TS_WIDTH = 12
_KIND_CODE = {"post": "p", "comment": "c"}
_KIND_NAME = {"p": "post", "c": "comment"}


@dataclass(frozen=True)
class ActivityRecord:
    author: str
    subreddit: str
    timestamp: int
    kind: str
    record_id: str


def _clean_text(obj: dict, key: str) -> str:
    value = obj.get(key)
    if isinstance(value, int) and not isinstance(value, bool) and key == "id":
        value = str(value)
    if not isinstance(value, str) or not value:
        raise RecordError(f"field {key!r} must be a non-empty string")
    if any(ch < " " for ch in value):
        raise RecordError(f"field {key!r} contains control characters")
    return value


def _clean_timestamp(value: object) -> int:
    if isinstance(value, bool):
        raise RecordError("created_utc must be an integer")
    if isinstance(value, str):
        value = value.strip()
        if not value.isdigit():
            raise RecordError(f"created_utc {value!r} is not an integer")
        value = int(value)
    elif isinstance(value, float):
        if not value.is_integer():
            raise RecordError("created_utc must be integral")
        value = int(value)
    if not isinstance(value, int):
        raise RecordError("created_utc must be an integer")
    if value < 0 or value >= 10**_TS_WIDTH:
        raise RecordError(f"created_utc {value} out of range")
    return value


def parse_activity_record(line: str | bytes, kind: str = "comment") -> ActivityRecord:
    """Parse one NDJSON line.

    ``kind`` is the default supplied by the caller (normally derived from the
    source file); a ``"kind"`` key inside the record overrides it.  Unknown
    keys are ignored.  Raises :class:`RecordError` on malformed input.
    """
    try:
        obj = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise RecordError(f"malformed JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise RecordError("record is not a JSON object")
    for key in _REQUIRED:
        if key not in obj:
            raise RecordError(f"missing required key {key!r}")
    record_kind = obj.get("kind", kind)
    if record_kind not in _KIND_CODE:
        raise RecordError(f"unknown kind {record_kind!r}")
    return ActivityRecord(
        author=_clean_text(obj, "author"),
        subreddit=_clean_text(obj, "subreddit"),
        timestamp=_clean_timestamp(obj["created_utc"]),
        kind=record_kind,
        record_id=_clean_text(obj, "id"),
    )


# ---------------------------------------------------------------------------
# ingest


@dataclass
class IngestStats:
    read: int = 0
    kept: int = 0
    malformed: int = 0
    deleted: int = 0
    out_of_range: int = 0
    duplicates: int = 0

    @property
    def skipped(self) -> int:
        return self.malformed + self.deleted + self.out_of_range

    def merge(self, other: IngestStats) -> None:
        for name in ("read", "kept", "malformed", "deleted", "out_of_range", "duplicates"):
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def as_dict(self) -> dict[str, int]:
        return {
            "read": self.read,
            "kept": self.kept,
            "malformed": self.malformed,
            "deleted": self.deleted,
            "out_of_range": self.out_of_range,
            "duplicates": self.duplicates,
            "skipped": self.skipped,
        }


def source_kind(path: str | os.PathLike, default: str | None = None) -> str:
    """Kind for a source file: explicit default, else Pushshift RS_/RC_ naming."""
    if default is not None:
        if default not in _KIND_CODE:
            raise ValueError(f"unknown kind {default!r}")
        return default
    name = Path(path).name
    if name.startswith("RS_"):
        return "post"
    return "comment"


def _open_source(path: Path):
    suffix = path.suffix.lower()
    if suffix == ".gz":
        return gzip.open(path, "rb")
    if suffix == ".bz2":
        return bz2.open(path, "rb")
    if suffix in (".xz", ".lzma"):
        return lzma.open(path, "rb")
    return open(path, "rb")


def _bucket_of(key: str, n: int) -> int:
    return zlib.crc32(key.encode("utf-8")) % n


def partition_of(subreddit: str, n_partitions: int) -> int:
    return _bucket_of(subreddit, n_partitions)


class _Spool:
    """Line buffers keyed by bucket, appended to files when full."""

    def __init__(self, paths: Sequence[Path], limit: int) -> None:
        self.paths = paths
        self.limit = limit
        self.buffers: list[list[str]] = [[] for _ in paths]
        self.size = 0

    def add(self, bucket: int, line: str) -> None:
        self.buffers[bucket].append(line)
        self.size += 1
        if self.size >= self.limit:
            self.flush()

    def flush(self) -> None:
        for path, buf in zip(self.paths, self.buffers):
            if buf:
                with open(path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.writelines(buf)
                buf.clear()
        self.size = 0


def _merge_runs(runs: list[Path], out: Path) -> None:
    handles = [open(run, encoding="utf-8", newline="\n") for run in runs]
    try:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(heapq.merge(*handles))
    finally:
        for h in handles:
            h.close()
    for run in runs:
        run.unlink()


def _sorted_lines(paths: Iterable[Path], chunk: int, spill_dir: Path) -> Iterator[str]:
    """Yield all lines of ``paths`` in string order using bounded memory.

    Sorted runs of ``chunk`` lines are spilled to disk and merged at most
    ``MERGE_FANIN`` at a time, so the number of open run files (and their
    buffers) does not grow with the input.
    """
    runs: list[Path] = []
    buf: list[str] = []
    serial = 0

    def next_run() -> Path:
        nonlocal serial
        serial += 1
        return spill_dir / f"run{serial:06d}.tsv"

    def spill() -> None:
        buf.sort()
        run = next_run()
        with open(run, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(buf)
        runs.append(run)
        buf.clear()

    for path in paths:
        with open(path, encoding="utf-8", newline="\n") as fh:
            for line in fh:
                buf.append(line)
                if len(buf) >= chunk:
                    spill()
    if not runs:
        buf.sort()
        yield from buf
        return
    if buf:
        spill()
    while len(runs) > MERGE_FANIN:
        merged = []
        for i in range(0, len(runs), MERGE_FANIN):
            group = runs[i:i + MERGE_FANIN]
            if len(group) == 1:
                merged.append(group[0])
                continue
            out = next_run()
            _merge_runs(group, out)
            merged.append(out)
        runs = merged
    handles = [open(run, encoding="utf-8", newline="\n") for run in runs]
    try:
        yield from heapq.merge(*handles)
    finally:
        for fh in handles:
            fh.close()
        for run in runs:
            run.unlink()


@dataclass(frozen=True)
class _IngestPlan:
    work: Path
    root: Path
    n_buckets: int
    n_partitions: int
    chunk: int
    time_from: int | None
    time_to: int | None


def _map_source(plan: _IngestPlan, src_idx: int, path: str, kind: str) -> IngestStats:
    stats = IngestStats()
    bucket_paths = [plan.work / "map" / f"b{b:03d}" / f"s{src_idx:06d}.tsv" for b in range(plan.n_buckets)]
    spool = _Spool(bucket_paths, plan.chunk)
    lo, hi = plan.time_from, plan.time_to
    with _open_source(Path(path)) as fh:
        for line_no, raw in enumerate(fh):
            if not raw.strip():
                continue
            stats.read += 1
            try:
                rec = parse_activity_record(raw, kind)
            except RecordError:
                stats.malformed += 1
                continue
            if rec.author == DELETED_AUTHOR:
                stats.deleted += 1
                continue
            ts = rec.timestamp
            if (lo is not None and ts < lo) or (hi is not None and ts >= hi):
                stats.out_of_range += 1
                continue
            spool.add(
                _bucket_of(rec.record_id, plan.n_buckets),
                f"{rec.record_id}\t{src_idx:06d}\t{line_no:012d}\t{rec.author}\t"
                f"{rec.subreddit}\t{ts:012d}\t{_KIND_CODE[rec.kind]}\n",
            )
    spool.flush()
    return stats


def _dedup_bucket(plan: _IngestPlan, bucket: int) -> tuple[int, int]:
    src_dir = plan.work / "map" / f"b{bucket:03d}"
    spill_dir = plan.work / "spill" / f"d{bucket:03d}"
    spill_dir.mkdir(parents=True, exist_ok=True)
    route_paths = [plan.work / "route" / f"p{p:03d}" / f"b{bucket:03d}.tsv" for p in range(plan.n_partitions)]
    spool = _Spool(route_paths, plan.chunk)
    kept = dups = 0
    previous = None
    for line in _sorted_lines(sorted(src_dir.iterdir()), plan.chunk, spill_dir):
        rid, _src, _line_no, author, sub, ts, kind = line.rstrip("\n").split("\t")
        if rid == previous:
            dups += 1
            continue
        previous = rid
        kept += 1
        spool.add(partition_of(sub, plan.n_partitions), f"{ts}\t{rid}\t{author}\t{sub}\t{kind}\n")
    spool.flush()
    shutil.rmtree(src_dir)
    return kept, dups


def _write_partition(plan: _IngestPlan, part: int) -> dict:
    src_dir = plan.work / "route" / f"p{part:03d}"
    spill_dir = plan.work / "spill" / f"p{part:03d}"
    spill_dir.mkdir(parents=True, exist_ok=True)
    name = f"p{part:03d}.ndjson"
    out_path = plan.root / "partitions" / name
    idx_spool = _Spool([plan.work / "idx" / f"p{part:03d}.tsv"], plan.chunk)
    digest = hashlib.sha256()
    count = 0
    offset = 0
    t_min = t_max = None
    pending: list[str] = []
    with open(out_path, "w", encoding="ascii", newline="\n") as out:
        for line in _sorted_lines(sorted(src_dir.iterdir()), plan.chunk, spill_dir):
            ts, rid, author, sub, kind = line.rstrip("\n").split("\t")
            ts_int = int(ts)
            text = (
                f'{{"author":{_quote(author)},"created_utc":{ts_int},"id":{_quote(rid)},'
                f'"kind":"{_KIND_NAME[kind]}","subreddit":{_quote(sub)}}}\n'
            )
            idx_spool.add(0, f"{author}\t{part:04d}\t{offset:012d}\n")
            pending.append(text)
            offset += len(text)
            count += 1
            if t_min is None:
                t_min = ts_int
            t_max = ts_int
            if len(pending) >= plan.chunk:
                chunk_text = "".join(pending)
                out.write(chunk_text)
                digest.update(chunk_text.encode("ascii"))
                pending.clear()
        if pending:
            chunk_text = "".join(pending)
            out.write(chunk_text)
            digest.update(chunk_text.encode("ascii"))
    idx_spool.flush()
    shutil.rmtree(src_dir)
    return {
        "name": name,
        "records": count,
        "bytes": offset,
        "time_range": [t_min, t_max],
        "sha256": digest.hexdigest(),
    }


def _write_index(plan: _IngestPlan, n_parts: int) -> dict:
    idx_dir = plan.work / "idx"
    spill_dir = plan.work / "spill" / "index"
    spill_dir.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    authors = 0
    previous = None
    entries = 0
    buf: list[str] = []
    paths = sorted(p for p in idx_dir.iterdir()) if idx_dir.exists() else []
    with open(plan.root / "index.tsv", "w", encoding="utf-8", newline="\n") as out:
        for line in _sorted_lines(paths, plan.chunk, spill_dir):
            author, part, offset = line.rstrip("\n").split("\t")
            if author != previous:
                authors += 1
                previous = author
            entry = f"{author}\t{int(part)}\t{int(offset)}\n"
            buf.append(entry)
            entries += 1
            if len(buf) >= plan.chunk:
                text = "".join(buf)
                out.write(text)
                digest.update(text.encode("utf-8"))
                buf.clear()
        if buf:
            text = "".join(buf)
            out.write(text)
            digest.update(text.encode("utf-8"))
    return {"file": "index.tsv", "authors": authors, "entries": entries, "sha256": digest.hexdigest()}


def _run_tasks(threads: int, fn, arg_lists: list[tuple]) -> list:
    if threads <= 1 or len(arg_lists) <= 1:
        return [fn(*args) for args in arg_lists]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, *args) for args in arg_lists]
        return [f.result() for f in futures]


def ingest(
    sources: Sequence[str | os.PathLike | tuple[str | os.PathLike, str]],
    out: str | os.PathLike,
    *,
    kind: str | None = None,
    time_from: int | None = None,
    time_to: int | None = None,
    threads: int = 1,
    partitions: int = 16,
    buckets: int = 64,
    chunk_records: int = DEFAULT_CHUNK,
) -> tuple[EventStore, IngestStats]:
    """Build a store at ``out`` from NDJSON ``sources``.

    A source may be a path or a ``(path, kind)`` pair.  Records outside
    ``[time_from, time_to)`` are skipped, as are ``[deleted]`` authors and
    malformed lines.  Duplicate record ids keep the first occurrence in
    source order.  The output is identical for any ``threads`` value.
    """
    root = Path(out)
    if root.exists() and any(root.iterdir()):
        raise DataError(f"output path {root} is not empty")
    resolved: list[tuple[str, str]] = []
    for src in sources:
        if isinstance(src, tuple):
            path, src_kind = src
            resolved.append((str(path), source_kind(path, src_kind)))
        else:
            resolved.append((str(src), source_kind(src, kind)))
    for path, _ in resolved:
        if not os.access(path, os.R_OK) or not Path(path).is_file():
            raise DataError(f"cannot read source {path}")

    created = not root.exists()
    root.mkdir(parents=True, exist_ok=True)
    work = root / "_work"
    plan = _IngestPlan(work, root, buckets, partitions, chunk_records, time_from, time_to)
    try:
        for b in range(buckets):
            (work / "map" / f"b{b:03d}").mkdir(parents=True)
        for p in range(partitions):
            (work / "route" / f"p{p:03d}").mkdir(parents=True)
        (work / "idx").mkdir()
        (root / "partitions").mkdir()

        stats = IngestStats()
        for part_stats in _run_tasks(
            threads, _map_source, [(plan, i, path, k) for i, (path, k) in enumerate(resolved)]
        ):
            stats.merge(part_stats)
        for kept, dups in _run_tasks(threads, _dedup_bucket, [(plan, b) for b in range(buckets)]):
            stats.kept += kept
            stats.duplicates += dups
        parts = _run_tasks(threads, _write_partition, [(plan, p) for p in range(partitions)])
        index = _write_index(plan, partitions)
        shutil.rmtree(work)
    except OSError as exc:
        _cleanup(root, created)
        raise DataError(f"ingest failed: {exc}") from exc
    except BaseException:
        _cleanup(root, created)
        raise

    ranges = [p["time_range"] for p in parts if p["records"]]
    checksum = hashlib.sha256()
    for p in parts:
        checksum.update(f"{p['name']}:{p['sha256']}\n".encode())
    checksum.update(f"index:{index['sha256']}\n".encode())
    manifest = {
        "format": STORE_FORMAT,
        "record_count": stats.kept,
        "time_range": [min(r[0] for r in ranges), max(r[1] for r in ranges)] if ranges else None,
        "partitions": parts,
        "index": index,
        "ingest": stats.as_dict(),
        "checksum": checksum.hexdigest(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("ingested %d records (%d duplicates, %d skipped)", stats.kept, stats.duplicates, stats.skipped)
    return EventStore(root), stats


def _cleanup(root: Path, created: bool) -> None:
    if created:
        shutil.rmtree(root, ignore_errors=True)
    else:
        for child in root.iterdir():
            if child.is_dir():
                shutil.rmtree(child, ignore_errors=True)
            else:
                child.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# queries


@dataclass
class ActivityMatrix:
    """Per-week activity counts for one user, anchored at an event time.

    Row ``i`` holds week ``first_week + i``.  Rows for ``missing_weeks`` are
    zero and must be skipped by consumers.
    """

    user: str
    anchor: int
    first_week: int
    last_week: int
    dimensions: tuple[str, ...]
    counts: np.ndarray
    missing_weeks: frozenset[int] = field(default_factory=frozenset)

    @property
    def weeks(self) -> np.ndarray:
        return np.arange(self.first_week, self.last_week + 1)

    @property
    def observed(self) -> np.ndarray:
        """Boolean mask of rows that are not missing."""
        return np.array([w not in self.missing_weeks for w in self.weeks], dtype=bool)


def week_of(timestamp: int, anchor: int) -> int:
    """Week index of ``timestamp``; week 0 is ``[anchor, anchor + 7d)``."""
    return (timestamp - anchor) // WEEK


@dataclass
class _Columns:
    authors: list[str]
    author_code: dict[str, int]
    starts: np.ndarray  # records of author k are rows starts[k]:starts[k+1]
    subreddits: list[str]
    sub_code: dict[str, int]
    ts: np.ndarray
    sub: np.ndarray
    kind: np.ndarray
    author: np.ndarray


class EventStore:
    """Read-only view of a finalized store directory."""

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.is_file():
            raise DataError(f"{self.root} is not a shockkit store (no manifest.json)")
        self.manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if self.manifest.get("format") != STORE_FORMAT:
            raise DataError(f"unsupported store format {self.manifest.get('format')!r}")
        self._lock = threading.Lock()
        self._columns: _Columns | None = None
        self._index: dict[str, list[tuple[int, int]]] | None = None

    @classmethod
    def open(cls, root: str | os.PathLike) -> EventStore:
        return cls(root)

    @property
    def checksum(self) -> str:
        return self.manifest["checksum"]

    @property
    def record_count(self) -> int:
        return self.manifest["record_count"]

    @property
    def time_range(self) -> tuple[int, int] | None:
        tr = self.manifest["time_range"]
        return None if tr is None else (tr[0], tr[1])

    def _partition_paths(self) -> list[Path]:
        return [self.root / "partitions" / p["name"] for p in self.manifest["partitions"]]

    def iter_records(self) -> Iterator[ActivityRecord]:
        """All records, partition by partition, each in (timestamp, id) order."""
        for path in self._partition_paths():
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    yield _decode(line)

    def records_for_user(self, user: str) -> list[ActivityRecord]:
        """Point lookup through the author index, sorted by (timestamp, id)."""
        index = self._load_index()
        entries = index.get(user, [])
        paths = self._partition_paths()
        out = []
        for part, offset in entries:
            with open(paths[part], "rb") as fh:
                fh.seek(offset)
                out.append(_decode(fh.readline()))
        out.sort(key=lambda r: (r.timestamp, r.record_id))
        return out

    def _load_index(self) -> dict[str, list[tuple[int, int]]]:
        with self._lock:
            if self._index is None:
                index: dict[str, list[tuple[int, int]]] = {}
                with open(self.root / "index.tsv", encoding="utf-8") as fh:
                    for line in fh:
                        author, part, offset = line.rstrip("\n").split("\t")
                        index.setdefault(author, []).append((int(part), int(offset)))
                self._index = index
            return self._index

    def columns(self) -> _Columns:
        with self._lock:
            if self._columns is None:
                self._columns = self._build_columns()
            return self._columns

    def _build_columns(self) -> _Columns:
        authors: list[str] = []
        subs: list[str] = []
        ts: list[int] = []
        kinds: list[int] = []
        loads = json.loads
        for path in self._partition_paths():
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    obj = loads(line)
                    authors.append(obj["author"])
                    subs.append(obj["subreddit"])
                    ts.append(obj["created_utc"])
                    kinds.append(0 if obj["kind"] == "post" else 1)
        author_names, author_idx = np.unique(np.array(authors, dtype=object), return_inverse=True)
        sub_names, sub_idx = np.unique(np.array(subs, dtype=object), return_inverse=True)
        ts_arr = np.array(ts, dtype=np.int64)
        order = np.lexsort((ts_arr, author_idx))
        author_sorted = author_idx[order].astype(np.int64)
        starts = np.searchsorted(author_sorted, np.arange(len(author_names) + 1), side="left")
        author_list = [str(a) for a in author_names]
        sub_list = [str(s) for s in sub_names]
        return _Columns(
            authors=author_list,
            author_code={a: i for i, a in enumerate(author_list)},
            starts=starts,
            subreddits=sub_list,
            sub_code={s: i for i, s in enumerate(sub_list)},
            ts=ts_arr[order],
            sub=sub_idx[order].astype(np.int64),
            kind=np.array(kinds, dtype=np.int8)[order],
            author=author_sorted,
        )

    # -- per-user queries -------------------------------------------------

    def _user_rows(self, user: str) -> slice | None:
        cols = self.columns()
        code = cols.author_code.get(user)
        if code is None:
            return None
        return slice(int(cols.starts[code]), int(cols.starts[code + 1]))

    def users(self) -> list[str]:
        return list(self.columns().authors)

    def subreddits(self) -> list[str]:
        return list(self.columns().subreddits)

    def user_activity_count(self, user: str, t0: int, t1: int, subreddit: str | None = None) -> int:
        """Records by ``user`` in ``[t0, t1)``, optionally in one subreddit."""
        if t0 >= t1:
            raise ValueError("interval must satisfy t0 < t1")
        rows = self._user_rows(user)
        if rows is None:
            return 0
        cols = self.columns()
        ts = cols.ts[rows]
        lo = int(np.searchsorted(ts, t0, side="left"))
        hi = int(np.searchsorted(ts, t1, side="left"))
        if subreddit is None:
            return hi - lo
        code = cols.sub_code.get(subreddit)
        if code is None:
            return 0
        return int(np.count_nonzero(cols.sub[rows][lo:hi] == code))

    def first_timestamp(self, user: str) -> int | None:
        rows = self._user_rows(user)
        if rows is None:
            return None
        return int(self.columns().ts[rows.start])

    def user_subreddit_counts(self, user: str, t0: int, t1: int) -> dict[str, int]:
        rows = self._user_rows(user)
        if rows is None:
            return {}
        cols = self.columns()
        ts = cols.ts[rows]
        lo = int(np.searchsorted(ts, t0, side="left"))
        hi = int(np.searchsorted(ts, t1, side="left"))
        codes, counts = np.unique(cols.sub[rows][lo:hi], return_counts=True)
        return {cols.subreddits[c]: int(n) for c, n in zip(codes, counts)}

    def weekly_bins(
        self,
        user: str,
        anchor: int,
        dimensions: Sequence[str] | str = ALL,
        weeks: tuple[int, int] = DEFAULT_WEEKS,
        missing_weeks: Iterable[int] = (),
    ) -> ActivityMatrix:
        """Bin a user's records into 7-day windows relative to ``anchor``.

        ``weeks`` is an inclusive ``(first, last)`` range.  ``dimensions`` is a
        list of subreddits (one column each, sorted) or ``ALL`` for a single
        platform-wide column.
        """
        first, last = weeks
        if last < first:
            raise ValueError("week range is empty")
        missing = frozenset(int(w) for w in missing_weeks)
        if dimensions == ALL:
            labels: tuple[str, ...] = (ALL,)
        else:
            labels = tuple(sorted(set(dimensions)))
        counts = np.zeros((last - first + 1, len(labels)), dtype=np.int64)
        rows = self._user_rows(user)
        if rows is not None and labels:
            cols = self.columns()
            ts = cols.ts[rows]
            lo = int(np.searchsorted(ts, anchor + first * WEEK, side="left"))
            hi = int(np.searchsorted(ts, anchor + (last + 1) * WEEK, side="left"))
            wk = (ts[lo:hi] - anchor) // WEEK - first
            if dimensions == ALL:
                col = np.zeros(hi - lo, dtype=np.int64)
                keep = np.ones(hi - lo, dtype=bool)
            else:
                lookup = np.full(len(cols.subreddits), -1, dtype=np.int64)
                for j, name in enumerate(labels):
                    code = cols.sub_code.get(name)
                    if code is not None:
                        lookup[code] = j
                col = lookup[cols.sub[rows][lo:hi]]
                keep = col >= 0
            np.add.at(counts, (wk[keep], col[keep]), 1)
        for w in missing:
            if first <= w <= last:
                counts[w - first] = 0
        return ActivityMatrix(user, anchor, first, last, labels, counts, missing)

    # -- bulk queries -------------------------------------------------------

    def weekly_totals(
        self,
        users: Sequence[str],
        anchor: int,
        weeks: tuple[int, int] = DEFAULT_WEEKS,
    ) -> np.ndarray:
        """Platform-wide weekly counts, one row per user (no masking)."""
        first, last = weeks
        out = np.zeros((len(users), last - first + 1), dtype=np.int64)
        cols = self.columns()
        t_lo, t_hi = anchor + first * WEEK, anchor + (last + 1) * WEEK
        for i, user in enumerate(users):
            code = cols.author_code.get(user)
            if code is None:
                continue
            ts = cols.ts[cols.starts[code]:cols.starts[code + 1]]
            ts = ts[(ts >= t_lo) & (ts < t_hi)]
            np.add.at(out[i], (ts - anchor) // WEEK - first, 1)
        return out

    def window_pair_counts(self, t0: int, t1: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(author code, subreddit code, count) for every pair active in ``[t0, t1)``."""
        cols = self.columns()
        mask = (cols.ts >= t0) & (cols.ts < t1)
        n_subs = max(len(cols.subreddits), 1)
        pairs = cols.author[mask] * n_subs + cols.sub[mask]
        keys, counts = np.unique(pairs, return_counts=True)
        return keys // n_subs, keys % n_subs, counts

    def ever_posted_in(self, subreddit: str) -> set[str]:
        """Users with at least one record in ``subreddit`` at any time."""
        cols = self.columns()
        code = cols.sub_code.get(subreddit)
        if code is None:
            return set()
        return {cols.authors[a] for a in np.unique(cols.author[cols.sub == code])}


def _decode(line: str | bytes) -> ActivityRecord:
    obj = json.loads(line)
    return ActivityRecord(obj["author"], obj["subreddit"], obj["created_utc"], obj["kind"], obj["id"])
