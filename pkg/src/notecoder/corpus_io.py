"""Corpus file formats.

The native corpus format is line-delimited JSON, one record per line:
``{"note_id": str, "text": str, "codes": [str, ...]}``.  A CSV adapter
with columns ``note_id,text,codes`` (codes joined by ";") is accepted on
ingest.  Ingestion validates ids, codes, and record shape, normalizes
the note text, and writes the native format.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable

from .errors import ParseError, ValidationError
from .icd9 import parse_code
from .textpipe import RawNote, normalize_text


def read_corpus_jsonl(path: str) -> list[RawNote]:
    notes: list[RawNote] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
            notes.append(_validate_record(rec, f"{path}:{lineno}", seen))
    if not notes:
        raise ValidationError(f"{path}: no records")
    return notes


def read_corpus_csv(path: str) -> list[RawNote]:
    notes: list[RawNote] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"note_id", "text", "codes"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ParseError(f"{path}: CSV header must contain columns {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            codes = [c for c in (row["codes"] or "").split(";") if c.strip()]
            rec = {"note_id": row["note_id"], "text": row["text"], "codes": codes}
            notes.append(_validate_record(rec, f"{path}:{lineno}", seen))
    if not notes:
        raise ValidationError(f"{path}: no records")
    return notes


def _validate_record(rec: dict, where: str, seen: set[str]) -> RawNote:
    if not isinstance(rec, dict):
        raise ParseError(f"{where}: record must be an object")
    for key, kind in (("note_id", str), ("text", str), ("codes", list)):
        if key not in rec:
            raise ParseError(f"{where}: missing field {key!r}")
        if not isinstance(rec[key], kind):
            raise ParseError(f"{where}: field {key!r} must be {kind.__name__}")
    note_id = rec["note_id"]
    if not note_id:
        raise ParseError(f"{where}: empty note_id")
    if note_id in seen:
        raise ParseError(f"{where}: duplicate note_id {note_id!r}")
    seen.add(note_id)
    for code in rec["codes"]:
        parse_code(code)  # raises ParseError on malformed codes
    return RawNote(note_id, rec["text"], list(rec["codes"]))


def write_corpus_jsonl(notes: Iterable[RawNote], path: str):
    with open(path, "w", encoding="utf-8") as fh:
        for note in notes:
            fh.write(json.dumps(
                {"note_id": note.note_id, "text": note.text, "codes": note.codes},
                sort_keys=True) + "\n")


@dataclass
class IngestSummary:
    notes: int
    total_codes: int
    distinct_codes: int


def ingest(input_path: str, output_path: str) -> IngestSummary:
    """Validate a corpus file, normalize note text, write native JSONL."""
    if input_path.endswith(".csv"):
        notes = read_corpus_csv(input_path)
    else:
        notes = read_corpus_jsonl(input_path)
    normalized = [RawNote(n.note_id, normalize_text(n.text), n.codes) for n in notes]
    write_corpus_jsonl(normalized, output_path)
    distinct = {parse_code(c).canonical for n in notes for c in n.codes}
    total = sum(len(n.codes) for n in notes)
    return IngestSummary(len(notes), total, len(distinct))
