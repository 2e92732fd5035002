"""Corpus and query-set ingestion, schema-based deduplication, persistence.

Tables sharing a name (their title, or their id when untitled) are grouped;
within a group, the first table seen for each distinct header signature is
kept and renamed ``name__1``, ``name__2``, ... in first-seen order. Query gold
ids are rewritten through the same mapping.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .tables import Table

logger = logging.getLogger(__name__)

FORMATS = ("csv-dir", "tsv-dir", "records")
TABLES_FILE = "tables.jsonl"
QUERIES_FILE = "queries.jsonl"
MANIFEST_FILE = "manifest.json"
REMAP_FILE = "remap.tsv"


class CorpusError(Exception):
    pass


class ParseError(CorpusError):
    def __init__(self, path: str | os.PathLike, line: int | None, message: str) -> None:
        self.path = str(path)
        self.line = line
        locus = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{locus}: {message}")


class DuplicateId(CorpusError):
    pass


class DanglingGold(CorpusError):
    pass


@dataclass(frozen=True)
class QueryRecord:
    qid: str
    question: str
    gold_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "gold_ids", tuple(self.gold_ids))
        if not self.gold_ids:
            raise ValueError(f"query {self.qid!r} has no gold ids")

    def to_json(self) -> dict:
        return {"qid": self.qid, "question": self.question, "gold_ids": list(self.gold_ids)}


@dataclass
class IngestReport:
    n_tables: int = 0
    skipped: int = 0
    skipped_ids: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class SchemaSignature:
    headers: tuple[str, ...]

    @property
    def column_count(self) -> int:
        return len(self.headers)

    def digest(self) -> str:
        payload = json.dumps(list(self.headers), ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class RemapEntry:
    name: str
    signature: SchemaSignature
    new_id: str


@dataclass
class IdRemap:
    entries: list[RemapEntry] = field(default_factory=list)
    # every original table id -> id of its representative
    id_map: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, old_id: str) -> str:
        return self.id_map[old_id]

    @property
    def is_identity(self) -> bool:
        return all(k == v for k, v in self.id_map.items())

    def to_lines(self) -> list[str]:
        return [f"{e.name}\t{e.signature.digest()}\t{e.new_id}" for e in self.entries]


def _normalize_text(value: str) -> str:
    return value.replace("\r\n", "\n").replace("\r", "\n")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float, str)):
        return _normalize_text(str(value))
    raise TypeError(f"unsupported cell type {type(value).__name__}")


def _read_delimited(path: Path, delimiter: str) -> Table | None:
    rows: list[tuple[str, ...]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter, strict=True)
        try:
            for record in reader:
                if record:
                    rows.append(tuple(_normalize_text(c) for c in record))
        except (csv.Error, UnicodeDecodeError) as exc:
            raise ParseError(path, reader.line_num, str(exc)) from exc
    if not rows:
        return None
    fmt = "csv" if delimiter == "," else "tsv"
    return Table(id=path.stem, rows=tuple(rows), title=path.stem, provenance=(str(path), fmt))


def _table_from_record(rec: dict, path: Path, line: int) -> Table | None:
    if not isinstance(rec, dict) or "id" not in rec:
        raise ParseError(path, line, "record must be an object with an 'id' field")
    raw_rows = rec.get("rows") or []
    if not isinstance(raw_rows, list) or not all(isinstance(r, list) for r in raw_rows):
        raise ParseError(path, line, "'rows' must be a list of lists")
    try:
        rows = tuple(tuple(_cell(c) for c in r) for r in raw_rows if r)
    except TypeError as exc:
        raise ParseError(path, line, str(exc)) from exc
    if not rows:
        return None
    return Table(
        id=str(rec["id"]),
        rows=rows,
        title=rec.get("title"),
        sheet_name=rec.get("sheet"),
        provenance=(str(path), "records"),
    )


def _iter_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from exc


def _records_path(path: Path) -> Path:
    return path / TABLES_FILE if path.is_dir() else path


def ingest_corpus(path: str | os.PathLike, fmt: str, workers: int = 1) -> tuple[list[Table], IngestReport]:
    """Load a table corpus.

    ``fmt`` is one of ``csv-dir``, ``tsv-dir`` (one table per file, id from the
    file stem) or ``records`` (JSON lines ``{id, title, sheet, rows}``; ``path``
    may be the file or a directory holding ``tables.jsonl``). Tables without
    rows are skipped and counted in the report.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown corpus format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)

    report = IngestReport()
    loaded: list[tuple[str, Table | None]] = []
    if fmt == "records":
        src = _records_path(path)
        for lineno, rec in _iter_jsonl(src):
            loaded.append((str(rec.get("id", "")) if isinstance(rec, dict) else "", _table_from_record(rec, src, lineno)))
    else:
        suffix, delim = (".csv", ",") if fmt == "csv-dir" else (".tsv", "\t")
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == suffix)
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            tables = list(pool.map(lambda p: _read_delimited(p, delim), files))
        loaded = [(p.stem, t) for p, t in zip(files, tables)]

    out: list[Table] = []
    seen: set[str] = set()
    for ident, table in loaded:
        if table is None:
            logger.warning("skipping empty table %s", ident)
            report.skipped += 1
            report.skipped_ids.append(ident)
            continue
        if table.id in seen:
            raise DuplicateId(f"duplicate table id {table.id!r} in {path}")
        seen.add(table.id)
        out.append(table)
    report.n_tables = len(out)
    logger.info("ingested %d tables from %s (skipped=%d)", len(out), path, report.skipped)
    return out, report


def load_queries(path: str | os.PathLike) -> list[QueryRecord]:
    path = Path(path)
    src = path / QUERIES_FILE if path.is_dir() else path
    queries: list[QueryRecord] = []
    seen: set[str] = set()
    for lineno, rec in _iter_jsonl(src):
        try:
            q = QueryRecord(str(rec["qid"]), str(rec["question"]), tuple(str(g) for g in rec["gold_ids"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(src, lineno, f"bad query record: {exc}") from exc
        if q.qid in seen:
            raise DuplicateId(f"duplicate qid {q.qid!r} in {src}")
        seen.add(q.qid)
        queries.append(q)
    return queries


def schema_signature(table: Table) -> SchemaSignature:
    """Lower-cased, whitespace-collapsed first-row cells."""
    return SchemaSignature(tuple(" ".join(c.split()).lower() for c in table.rows[0]))


def table_name(table: Table) -> str:
    return table.title or table.id


def deduplicate(
    tables: Sequence[Table], queries: Sequence[QueryRecord]
) -> tuple[list[Table], list[QueryRecord], IdRemap]:
    ids = {t.id for t in tables}
    for q in queries:
        missing = [g for g in q.gold_ids if g not in ids]
        if missing:
            raise DanglingGold(f"query {q.qid!r} references unknown tables {missing}")

    remap = IdRemap()
    reps: dict[tuple[str, SchemaSignature], str] = {}
    variants: dict[str, int] = {}
    out: list[Table] = []
    for t in tables:
        name = table_name(t)
        key = (name, schema_signature(t))
        new_id = reps.get(key)
        if new_id is None:
            variants[name] = variants.get(name, 0) + 1
            new_id = f"{name}__{variants[name]}"
            reps[key] = new_id
            remap.entries.append(RemapEntry(name, key[1], new_id))
            # title carries the group name so a second pass regroups identically
            out.append(Table(new_id, t.rows, name, t.sheet_name, t.provenance))
        remap.id_map[t.id] = new_id

    new_queries = []
    for q in queries:
        gold = tuple(dict.fromkeys(remap[g] for g in q.gold_ids))
        if len(gold) != len(q.gold_ids):
            logger.warning("query %s: gold tables collapsed by dedup %s -> %s", q.qid, q.gold_ids, gold)
        new_queries.append(QueryRecord(q.qid, q.question, gold))
    logger.info("dedup: %d -> %d tables", len(tables), len(out))
    return out, new_queries, remap


def table_to_json(t: Table) -> dict:
    return {"id": t.id, "title": t.title, "sheet": t.sheet_name, "rows": [list(r) for r in t.rows]}


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")
    os.replace(tmp, path)


def write_corpus(
    tables: Sequence[Table],
    queries: Sequence[QueryRecord],
    path: str | os.PathLike,
    remap: IdRemap | None = None,
    skipped: int = 0,
) -> dict:
    """Write ``tables.jsonl``, ``queries.jsonl``, ``manifest.json`` and ``remap.tsv``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / TABLES_FILE, (table_to_json(t) for t in tables))
    _write_jsonl(out / QUERIES_FILE, (q.to_json() for q in queries))
    remap = remap or IdRemap()
    manifest = {
        "n_tables": len(tables),
        "n_queries": len(queries),
        "skipped": skipped,
        "remap": [
            {"name": e.name, "signature": e.signature.digest(), "new_id": e.new_id} for e in remap.entries
        ],
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    lines = remap.to_lines()
    (out / REMAP_FILE).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest
