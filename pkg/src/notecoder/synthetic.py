"""Synthetic note corpora with planted, recoverable label signal.

Real discharge notes cannot ship with the repository, so learnability is
validated on generated corpora: each note draws a label set, plants
class-specific keyword tokens among filler noise, and carries genuine
ICD-9 codes drawn from the matching chapter's numeric range.  Keywords
are letter-only on purpose; digit tokens would collapse to the <num>
marker during normalization.  Output is bitwise deterministic per seed.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .icd9 import DEFAULT_EXCLUDED_ROOTS, ChapterTable, load_chapter_table
from .rng import RngState
from .textpipe import RawNote

_NOISE_POOL = tuple("nz" + a + b for a in string.ascii_lowercase[:8]
                    for b in string.ascii_lowercase[:5])


@dataclass
class SyntheticSpec:
    num_notes: int = 1000
    num_classes: int = 8
    keywords_per_class: int = 1
    note_len_range: tuple[int, int] = (30, 80)
    label_cardinality: tuple[float, ...] = (0.5, 0.3, 0.2)  # P(1 label), P(2), ...
    noise_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_notes < 1:
            raise ValidationError(f"num_notes must be >= 1, got {self.num_notes}")
        if not 1 <= self.num_classes <= 17:
            raise ValidationError(f"num_classes must be in 1..17, got {self.num_classes}")
        if not 1 <= self.keywords_per_class <= 26:
            raise ValidationError(f"keywords_per_class must be in 1..26, got {self.keywords_per_class}")
        lo, hi = self.note_len_range
        max_card = len(self.label_cardinality)
        if max_card < 1 or max_card > self.num_classes:
            raise ValidationError("label_cardinality length must be in 1..num_classes")
        if any(p < 0 for p in self.label_cardinality) or sum(self.label_cardinality) <= 0:
            raise ValidationError("label_cardinality must be non-negative with positive sum")
        if not 1 <= lo <= hi:
            raise ValidationError(f"bad note_len_range {self.note_len_range}")
        if lo < max_card * self.keywords_per_class:
            raise ValidationError("note_len_range minimum cannot fit the planted keywords")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValidationError(f"noise_fraction must be in [0, 1], got {self.noise_fraction}")


def class_keywords(spec: SyntheticSpec) -> list[list[str]]:
    letters = string.ascii_lowercase
    return [[f"kw{letters[c]}{letters[j]}" for j in range(spec.keywords_per_class)]
            for c in range(spec.num_classes)]


def class_codes(spec: SyntheticSpec, table: ChapterTable,
                rng: np.random.Generator) -> list[str]:
    """One canonical level-5 code per class, rooted in the class's chapter range."""
    codes = []
    for chapter in table.chapters[:spec.num_classes]:
        root = int(rng.integers(chapter.lo, chapter.hi + 1))
        while root in DEFAULT_EXCLUDED_ROOTS:
            root = int(rng.integers(chapter.lo, chapter.hi + 1))
        codes.append(f"{root:03d}.{int(rng.integers(0, 10))}")
    return codes


def generate(spec: SyntheticSpec, table: ChapterTable | None = None) -> list[RawNote]:
    """Generate the corpus; class c's label is recoverable from its keywords."""
    table = table or load_chapter_table()
    rng = RngState(spec.seed).stream("synthesis")
    keywords = class_keywords(spec)
    codes = class_codes(spec, table, rng)
    card = np.asarray(spec.label_cardinality, dtype=np.float64)
    card = card / card.sum()
    lo, hi = spec.note_len_range

    notes = []
    for i in range(spec.num_notes):
        n_labels = 1 + int(rng.choice(len(card), p=card))
        classes = sorted(int(c) for c in rng.choice(spec.num_classes, size=n_labels, replace=False))
        length = int(rng.integers(lo, hi + 1))
        tokens = [kw for c in classes for kw in keywords[c]]  # guaranteed plant
        while len(tokens) < length:
            if rng.random() < spec.noise_fraction:
                tokens.append(_NOISE_POOL[int(rng.integers(len(_NOISE_POOL)))])
            else:
                c = classes[int(rng.integers(len(classes)))]
                tokens.append(keywords[c][int(rng.integers(spec.keywords_per_class))])
        rng.shuffle(tokens)
        text = _with_sentences(tokens, rng)
        notes.append(RawNote(f"syn-{i:05d}", text, [codes[c] for c in classes]))
    return notes


def _with_sentences(tokens: list[str], rng: np.random.Generator) -> str:
    """Join tokens, ending a sentence every 6-12 tokens so the note has structure."""
    out = []
    remaining = int(rng.integers(6, 13))
    for tok in tokens:
        out.append(tok)
        remaining -= 1
        if remaining == 0:
            out.append(".")
            remaining = int(rng.integers(6, 13))
    return " ".join(out)
