"""ICD-9 code parsing, chapter mapping, and multi-hot label spaces.

Codes come in dotted ("428.0") and undotted MIMIC style ("4280"); both
parse to one canonical form.  Numeric codes map to one of the 17
top-level chapters via a range table shipped as a CSV data file; V and E
supplementary codes carry their own kind tag and stay outside the
17-chapter space.  Chapter roots on the exclusion list (by default 798)
also map to no chapter.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, ValidationError

DEFAULT_EXCLUDED_ROOTS = (798,)

_ROOT_DIGITS = {"numeric": 3, "V": 2, "E": 3}
_MAX_SUBDIVISION = {"numeric": 2, "V": 2, "E": 1}


@dataclass(frozen=True)
class IcdCode:
    kind: str  # "numeric" | "V" | "E"
    root: str  # zero-padded, prefix included for V/E ("428", "V30", "E825")
    subdivision: str = ""

    @property
    def canonical(self) -> str:
        return self.root + ("." + self.subdivision if self.subdivision else "")

    @property
    def numeric_root(self) -> int | None:
        return int(self.root) if self.kind == "numeric" else None

    def __str__(self) -> str:
        return self.canonical


def parse_code(raw: str) -> IcdCode:
    """Parse a dotted or undotted ICD-9 code string to canonical form."""
    s = raw.strip().upper() if isinstance(raw, str) else ""
    if not s:
        raise ParseError(f"empty ICD-9 code: {raw!r}")
    kind = "numeric"
    body = s
    if s[0] in "VE":
        kind = s[0]
        body = s[1:]
    n_root = _ROOT_DIGITS[kind]
    if "." in body:
        head, _, sub = body.partition(".")
        if "." in sub:
            raise ParseError(f"ICD-9 code has more than one dot: {raw!r}")
    else:
        head, sub = body[:n_root], body[n_root:]
    if not head.isdigit() or len(head) > n_root or (sub and not sub.isdigit()):
        raise ParseError(f"malformed ICD-9 code: {raw!r}")
    if len(sub) > _MAX_SUBDIVISION[kind]:
        raise ParseError(f"ICD-9 code subdivision too long: {raw!r}")
    head = head.zfill(n_root)
    if kind == "numeric" and not 1 <= int(head) <= 999:
        raise ParseError(f"ICD-9 code root out of range 001-999: {raw!r}")
    prefix = "" if kind == "numeric" else kind
    return IcdCode(kind, prefix + head, sub)


def parse_codes(raw_codes: Iterable[str]) -> list[IcdCode]:
    return [parse_code(c) for c in raw_codes]


@dataclass(frozen=True)
class Chapter:
    chapter_id: int
    lo: int
    hi: int
    name: str


class ChapterTable:
    """The 17 top-level numeric ranges. Validated on construction."""

    def __init__(self, chapters: Sequence[Chapter]):
        chapters = sorted(chapters, key=lambda c: c.lo)
        if len(chapters) != 17:
            raise ValidationError(f"chapter table must have exactly 17 entries, got {len(chapters)}")
        if chapters[0].lo != 1 or chapters[-1].hi != 999:
            raise ValidationError("chapter ranges must cover 001-999")
        for prev, cur in zip(chapters, chapters[1:]):
            if cur.lo != prev.hi + 1:
                raise ValidationError(
                    f"chapter ranges must be disjoint and gap-free: "
                    f"{prev.chapter_id} ends {prev.hi}, {cur.chapter_id} starts {cur.lo}")
        for c in chapters:
            if c.lo > c.hi:
                raise ValidationError(f"chapter {c.chapter_id} has empty range {c.lo}-{c.hi}")
        self.chapters = list(chapters)
        self.by_id = {c.chapter_id: c for c in self.chapters}
        if len(self.by_id) != 17:
            raise ValidationError("chapter ids must be unique")

    def __iter__(self):
        return iter(self.chapters)

    def find(self, numeric_root: int) -> Chapter | None:
        for c in self.chapters:
            if c.lo <= numeric_root <= c.hi:
                return c
        return None


def load_chapter_table(path: str | None = None) -> ChapterTable:
    """Load the chapter CSV (chapter_id,lo,hi,name); default is the packaged file."""
    if path is None:
        src = resources.files("notecoder").joinpath("data/icd9_chapters.csv")
        text = src.read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    rows = list(csv.DictReader(text.splitlines()))
    try:
        chapters = [Chapter(int(r["chapter_id"]), int(r["lo"]), int(r["hi"]), r["name"]) for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad chapter table row: {exc}") from exc
    return ChapterTable(chapters)


def chapter_of(code: IcdCode, table: ChapterTable,
               excluded_roots: Iterable[int] = DEFAULT_EXCLUDED_ROOTS) -> int | None:
    """Map a code to its chapter id; V/E and excluded roots map to None."""
    if code.kind != "numeric":
        return None
    root = code.numeric_root
    if root in set(excluded_roots):
        return None
    chapter = table.find(root)
    return chapter.chapter_id if chapter else None


@dataclass
class LabelSpace:
    """The class universe: 17 chapters or the top-K level-5 codes.

    For level1 mode the classes are chapter-id strings and the instance
    carries the table plus exclusion list it maps through; for topk mode
    the classes are canonical code strings.
    """

    mode: str  # "level1" | "topk"
    classes: list[str]
    table: ChapterTable | None = None
    excluded_roots: tuple[int, ...] = DEFAULT_EXCLUDED_ROOTS
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.mode not in ("level1", "topk"):
            raise ValidationError(f"unknown label mode {self.mode!r}")
        if self.mode == "level1" and self.table is None:
            raise ValidationError("level1 label space needs a chapter table")
        self.index = {c: i for i, c in enumerate(self.classes)}
        if len(self.index) != len(self.classes):
            raise ValidationError("label space classes must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "classes": self.classes,
                "excluded_roots": list(self.excluded_roots)}

    @classmethod
    def from_dict(cls, d: dict, table: ChapterTable | None = None) -> "LabelSpace":
        if d["mode"] == "level1" and table is None:
            table = load_chapter_table()
        return cls(d["mode"], list(d["classes"]), table, tuple(d.get("excluded_roots", DEFAULT_EXCLUDED_ROOTS)))


def level1_space(table: ChapterTable | None = None,
                 excluded_roots: Iterable[int] = DEFAULT_EXCLUDED_ROOTS) -> LabelSpace:
    """Label space of the 17 depth-1 chapters."""
    table = table or load_chapter_table()
    classes = [str(c.chapter_id) for c in table]
    return LabelSpace("level1", classes, table, tuple(excluded_roots))


def top_k_codes(corpus: Sequence, k: int) -> LabelSpace:
    """Label space of the k most common level-5 codes by note count.

    Each distinct code counts once per note; ties break by canonical
    code order so the result is independent of corpus order.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    counts: dict[str, int] = {}
    for note in corpus:
        for canonical in {parse_code(c).canonical for c in note.codes}:
            counts[canonical] = counts.get(canonical, 0) + 1
    if len(counts) < k:
        raise ValidationError(f"corpus has only {len(counts)} distinct codes, need {k}")
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    return LabelSpace("topk", ranked[:k])


def encode_labels(codes: Sequence[IcdCode], space: LabelSpace) -> np.ndarray:
    """Multi-hot float vector over the label space; out-of-space codes drop out."""
    vec = np.zeros(space.num_classes, dtype=np.float64)
    for code in codes:
        if space.mode == "level1":
            ch = chapter_of(code, space.table, space.excluded_roots)
            key = str(ch) if ch is not None else None
        else:
            key = code.canonical
        if key is not None and key in space.index:
            vec[space.index[key]] = 1.0
    return vec


def penetration_report(corpus: Sequence, space: LabelSpace) -> list[tuple[str, int, float]]:
    """Per-class note counts and fractions (fractions can sum above 1)."""
    if not corpus:
        raise ValidationError("cannot compute penetration on an empty corpus")
    counts = np.zeros(space.num_classes, dtype=np.int64)
    for note in corpus:
        vec = encode_labels(parse_codes(note.codes), space)
        counts += vec.astype(np.int64)
    n = len(corpus)
    return [(cls, int(counts[i]), counts[i] / n) for i, cls in enumerate(space.classes)]


def write_penetration_csv(rows: list[tuple[str, int, float]], path: str):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "count", "fraction"])
        for cls, count, fraction in rows:
            writer.writerow([cls, count, f"{fraction:.6f}"])
