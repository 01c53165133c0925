"""Discharge-note text pipeline: normalize, tokenize, sentence-split,
vocabulary construction, and fixed-length id encoding.

Normalization keeps only [a-z0-9 .,'/-] plus newlines: everything else
becomes a space.  Contractions split at the apostrophe ("patient's" ->
"patient 's"), maximal digit runs (with internal dots) collapse to the
reserved ``<num>`` token, and . , / - become standalone tokens.  The
function is idempotent, so re-normalizing an already-normalized corpus
is harmless.
"""

from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

PAD_ID, UNK_ID, NUM_ID = 0, 1, 2
PAD_TOKEN, UNK_TOKEN, NUM_TOKEN = "<pad>", "<unk>", "<num>"
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, NUM_TOKEN)

DEFAULT_MAX_LEN = 5000
DEFAULT_MAX_SENTENCE_LEN = 50

_DISALLOWED = re.compile(r"[^a-z0-9 .,'/\n-]")
_CONTRACTION = re.compile(r"(?<=[a-z0-9])'")
_NUMBER = re.compile(r"\d+(?:\.\d+)+|\d+")
_PUNCT = re.compile(r"([.,/-])")
_SPACE_RUN = re.compile(r"[ \t]+")
_NEWLINE_RUN = re.compile(r"[ \t]*\n[ \t\n]*")


@dataclass
class RawNote:
    note_id: str
    text: str
    codes: list[str] = field(default_factory=list)


@dataclass
class TokenizedNote:
    note_id: str
    tokens: list[str]
    sentence_spans: list[tuple[int, int]]
    codes: list[str] = field(default_factory=list)


@dataclass
class EncodedNote:
    note_id: str
    ids: np.ndarray  # int64, length == max_len
    true_length: int
    sentence_spans: list[tuple[int, int]]
    codes: list[str] = field(default_factory=list)


def normalize_text(text: str) -> str:
    """Lowercase, strip special characters, split contractions, canonize numbers."""
    text = text.lower()
    # Existing <num> markers are kept atomic so the function is idempotent.
    parts = []
    for part in text.split(NUM_TOKEN):
        part = _DISALLOWED.sub(" ", part)
        part = _CONTRACTION.sub(" '", part)
        part = _NUMBER.sub(f" {NUM_TOKEN} ", part)
        part = _PUNCT.sub(r" \1 ", part)
        parts.append(part)
    joined = f" {NUM_TOKEN} ".join(parts)
    joined = _NEWLINE_RUN.sub("\n", joined)
    joined = _SPACE_RUN.sub(" ", joined)
    return joined.strip()


def tokenize(normalized: str) -> list[str]:
    """Split an already-normalized string on whitespace."""
    return normalized.split()


def split_sentences(tokens: Sequence[str], max_sentence_len: int = DEFAULT_MAX_SENTENCE_LEN,
                    extra_breaks: Iterable[int] = ()) -> list[tuple[int, int]]:
    """Partition token indices into sentence spans.

    A span ends after each "." token and at every position listed in
    ``extra_breaks`` (token indices recorded for newlines).  Spans longer
    than ``max_sentence_len`` are split greedily; over-long "sentences"
    in discharge notes are typically lab reports, not prose.
    """
    if max_sentence_len < 1:
        raise ValidationError(f"max_sentence_len must be >= 1, got {max_sentence_len}")
    n = len(tokens)
    if n == 0:
        return []
    breaks = {i + 1 for i, tok in enumerate(tokens) if tok == "."}
    breaks.update(b for b in extra_breaks if 0 < b < n)
    spans: list[tuple[int, int]] = []
    start = 0
    for cut in sorted(breaks | {n}):
        while cut - start > max_sentence_len:
            spans.append((start, start + max_sentence_len))
            start += max_sentence_len
        if cut > start:
            spans.append((start, cut))
            start = cut
    return spans


def tokenize_note(raw: RawNote, max_sentence_len: int = DEFAULT_MAX_SENTENCE_LEN) -> TokenizedNote:
    """Full per-note pipeline: normalize, tokenize, record sentence spans.

    Newlines survive normalization, so line ends become sentence breaks
    in addition to "." tokens.
    """
    normalized = normalize_text(raw.text)
    tokens: list[str] = []
    newline_breaks: list[int] = []
    for line in normalized.split("\n"):
        tokens.extend(line.split())
        newline_breaks.append(len(tokens))
    spans = split_sentences(tokens, max_sentence_len, extra_breaks=newline_breaks)
    return TokenizedNote(raw.note_id, tokens, spans, list(raw.codes))


class Vocabulary:
    """Token <-> id map with reserved ids 0=PAD, 1=UNK, 2=NUM."""

    def __init__(self, id_to_token: list[str], min_frequency: int = 1):
        if list(id_to_token[:3]) != list(RESERVED_TOKENS):
            raise ValidationError(f"vocabulary must start with reserved tokens {RESERVED_TOKENS}")
        self.id_to_token = list(id_to_token)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValidationError("vocabulary contains duplicate tokens")
        self.min_frequency = min_frequency

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.id_to_token[idx]

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def to_dict(self) -> dict:
        return {"min_frequency": self.min_frequency, "tokens": self.id_to_token}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d.get("min_frequency", 1))


def build_vocab(corpus: Sequence[TokenizedNote], min_frequency: int = 1) -> Vocabulary:
    """Count tokens over the corpus and keep those seen >= min_frequency times.

    Ids after the reserved three are assigned by (frequency desc, token
    asc), so rebuilding on the same corpus reproduces the same mapping.
    """
    if min_frequency < 1:
        raise ValidationError(f"min_frequency must be >= 1, got {min_frequency}")
    if not corpus:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for note in corpus:
        counts.update(note.tokens)
    kept = sorted(
        (t for t, c in counts.items() if c >= min_frequency and t not in RESERVED_TOKENS),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(list(RESERVED_TOKENS) + kept, min_frequency)


def encode_pad(note: TokenizedNote, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> EncodedNote:
    """Map tokens to ids, truncate at max_len (keeping the head), right-pad."""
    if max_len < 1:
        raise ValidationError(f"max_len must be >= 1, got {max_len}")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    kept = note.tokens[:max_len]
    for i, tok in enumerate(kept):
        ids[i] = vocab.id_of(tok)
    spans = []
    for start, stop in note.sentence_spans:
        start, stop = min(start, max_len), min(stop, max_len)
        if stop > start:
            spans.append((start, stop))
    return EncodedNote(note.note_id, ids, len(kept), spans, list(note.codes))


def decode_ids(ids: np.ndarray, vocab: Vocabulary, true_length: int) -> list[str]:
    """Inverse of encode_pad over the unpadded prefix (UNK stays UNK)."""
    return [vocab.token_of(int(i)) for i in ids[:true_length]]


@dataclass
class LengthStats:
    mean: float
    buckets: dict[int, int]  # bucket start -> note count
    total_notes: int


def corpus_length_stats(corpus: Sequence[TokenizedNote], bucket_width: int = 1) -> LengthStats:
    """Histogram of note lengths in tokens, plus the mean."""
    if not corpus:
        raise ValidationError("cannot compute length stats on an empty corpus")
    if bucket_width < 1:
        raise ValidationError(f"bucket_width must be >= 1, got {bucket_width}")
    lengths = [len(n.tokens) for n in corpus]
    buckets: Counter[int] = Counter((ln // bucket_width) * bucket_width for ln in lengths)
    return LengthStats(float(np.mean(lengths)), dict(sorted(buckets.items())), len(corpus))


def write_length_histogram(stats: LengthStats, path: str):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["length_bucket", "count"])
        for bucket, count in stats.buckets.items():
            writer.writerow([bucket, count])
