"""Dataset splitting, the training loop, threshold calibration, micro-F1,
and the experiment harness.

The protocol: seeded 70/15/15 split, Adam on multi-label cross entropy
plus an L2 penalty over weight matrices, per-epoch validation micro-F1
at threshold 0.5, then a constant decision threshold calibrated on the
validation scores over the grid {0.01, ..., 0.99} and final micro-F1 on
the held-out test split.  Test rows never influence training or
calibration; the label space and the baseline's class frequencies come
from the training split only.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from .checkpoint import config_hash, save_checkpoint
from .errors import NotecoderError, TrainingDiverged, ValidationError
from .icd9 import LabelSpace, encode_labels, level1_space, load_chapter_table, parse_codes, top_k_codes
from .models import BaselinePredictor, ModelConfig, build_model
from .optim import Adam
from .rng import RngState
from .tensor import (Tensor, _sigmoid, add, backward, concat_rows, l2_penalty,
                     multilabel_cross_entropy, reshape, zero_grads)
from .textpipe import EncodedNote, RawNote, TokenizedNote, Vocabulary, build_vocab, encode_pad, tokenize_note

log = logging.getLogger(__name__)

THRESHOLD_GRID = tuple(i / 100 for i in range(1, 100))

Example = tuple[EncodedNote, np.ndarray]


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    train_fraction: float = 0.70
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must sum to 1, got {total}")
        if min(self.train_fraction, self.val_fraction, self.test_fraction) <= 0:
            raise ValidationError("split fractions must all be positive")


def split_dataset(corpus: Sequence, spec: SplitSpec) -> tuple[list, list, list]:
    """Seeded shuffle then contiguous cut; partitions are disjoint and exhaustive."""
    n = len(corpus)
    if n < 3:
        raise ValidationError(f"need at least 3 notes to split, got {n}")
    order = RngState(spec.seed).stream("split").permutation(n)
    n_train = int(round(spec.train_fraction * n))
    n_val = int(round(spec.val_fraction * n))
    n_train = min(n_train, n - 2)
    n_val = min(max(n_val, 1), n - n_train - 1)
    idx = list(order)
    train = [corpus[i] for i in idx[:n_train]]
    val = [corpus[i] for i in idx[n_train:n_train + n_val]]
    test = [corpus[i] for i in idx[n_train + n_val:]]
    return train, val, test


# ---------------------------------------------------------------------------
# Metrics and threshold calibration
# ---------------------------------------------------------------------------

@dataclass
class Threshold:
    tau: float

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValidationError(f"threshold must be in (0, 1), got {self.tau}")


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    per_class: list[tuple[int, int, int]]  # (tp, fp, fn) per class index
    threshold: float | None = None
    partition: str = ""


def micro_f1(pred: np.ndarray, truth: np.ndarray,
             threshold: float | None = None, partition: str = "") -> MetricsReport:
    """Micro-averaged P/R/F1 from TP/FP/FN pooled over every note-class cell."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValidationError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    p = pred != 0
    t = truth != 0
    tp_c = np.logical_and(p, t).sum(axis=0)
    fp_c = np.logical_and(p, ~t).sum(axis=0)
    fn_c = np.logical_and(~p, t).sum(axis=0)
    tp, fp, fn = int(tp_c.sum()), int(fp_c.sum()), int(fn_c.sum())
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    per_class = [(int(a), int(b), int(c)) for a, b, c in zip(tp_c, fp_c, fn_c)]
    return MetricsReport(precision, recall, f1, tp, fp, fn, per_class, threshold, partition)


def calibrate_threshold(scores: np.ndarray, labels: np.ndarray) -> Threshold:
    """Pick the grid threshold maximizing micro-F1; smallest tau wins ties.

    Scores at or above tau count as positive predictions.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2 or scores.shape[0] < 1:
        raise ValidationError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    truth = labels != 0
    best_tau = THRESHOLD_GRID[0]
    best = (0, 1)  # F1 as an exact fraction (numerator, denominator)
    first = True
    for tau in THRESHOLD_GRID:
        pred = scores >= tau
        tp = int(np.logical_and(pred, truth).sum())
        fp = int(np.logical_and(pred, ~truth).sum())
        fn = int(np.logical_and(~pred, truth).sum())
        denom = 2 * tp + fp + fn
        f1 = (2 * tp, denom) if denom > 0 else (0, 1)
        # Exact integer comparison: ties keep the smallest tau.
        if first or f1[0] * best[1] > best[0] * f1[1]:
            best_tau, best, first = tau, f1, False
    return Threshold(best_tau)


def predict_scores(model, notes: Sequence[EncodedNote]) -> np.ndarray:
    """Per-class sigmoid scores in inference mode (dropout off)."""
    out = np.empty((len(notes), model.config.num_classes))
    for i, note in enumerate(notes):
        out[i] = _sigmoid(model.forward(note, training=False).data)
    return out


def evaluate(model, tau: Threshold, data: Sequence[Example], partition: str) -> MetricsReport:
    """Binarize sigmoid scores at tau and compare against the true labels."""
    truth = np.stack([label for _, label in data])
    scores = predict_scores(model, [note for note, _ in data])
    return micro_f1(scores >= tau.tau, truth, threshold=tau.tau, partition=partition)


def evaluate_baseline(baseline: BaselinePredictor, data: Sequence[Example],
                      partition: str) -> MetricsReport:
    truth = np.stack([label for _, label in data])
    pred = baseline.predict_matrix(len(data))
    return micro_f1(pred, truth, threshold=None, partition=partition)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 0.001
    seed: int = 0
    patience: int | None = None
    keep_best: bool = True  # False mirrors fixed-epoch-count table captions

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_f1: float


@dataclass
class TrainResult:
    model: object
    history: list[EpochStats]


def _snapshot(model) -> list[np.ndarray]:
    return [t.data.copy() for _, t in model.parameters()]


def _restore(model, snap: list[np.ndarray]):
    for (_, t), arr in zip(model.parameters(), snap):
        t.data[...] = arr


def train(model_config: ModelConfig, train_data: Sequence[Example],
          val_data: Sequence[Example], config: TrainConfig, vocab_size: int) -> TrainResult:
    """Train one neural variant; returns the best-validation-epoch parameters.

    With ``epochs=0`` the freshly initialized model comes back untouched.
    A non-finite loss aborts immediately with diagnostics.
    """
    if not train_data:
        raise ValidationError("training set is empty")
    rngs = RngState(config.seed)
    model = build_model(model_config, vocab_size, rngs.stream("init"))
    dropout_rng = rngs.stream("dropout")
    shuffle_rng = rngs.stream("shuffle")
    opt = Adam(model.tensors(), lr=config.learning_rate)
    weights = model.weight_tensors()
    lam = model_config.l2_lambda

    history: list[EpochStats] = []
    keep_best = config.keep_best and len(val_data) > 0
    best_f1, best_snap, best_epoch = -1.0, None, -1
    n = len(train_data)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = [train_data[i] for i in order[start:start + config.batch_size]]
            zero_grads(model.tensors())
            logits_rows = [reshape(model.forward(note, training=True, dropout_rng=dropout_rng), (1, -1))
                           for note, _ in batch]
            targets = np.stack([label for _, label in batch])
            data_loss = multilabel_cross_entropy(concat_rows(logits_rows), targets)
            loss = add(data_loss, l2_penalty(weights, lam)) if lam > 0 else data_loss
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss {float(loss.data)} at epoch {epoch + 1}, "
                    f"batch starting {start} (variant {model_config.variant})")
            backward(loss)
            opt.step()
            total_loss += float(data_loss.data) * len(batch)
        train_loss = total_loss / n
        val_f1 = evaluate(model, Threshold(0.5), val_data, "val").f1 if val_data else 0.0
        history.append(EpochStats(epoch + 1, train_loss, val_f1))
        if keep_best and val_f1 > best_f1:
            best_f1, best_snap, best_epoch = val_f1, _snapshot(model), epoch
        if config.patience is not None and keep_best and epoch - best_epoch >= config.patience:
            break
    if keep_best and best_snap is not None:
        _restore(model, best_snap)
    return TrainResult(model, history)


# ---------------------------------------------------------------------------
# Experiment harness
# ---------------------------------------------------------------------------

@dataclass
class ExperimentManifest:
    data_path: str
    variants: list[str]
    label_mode: str = "level1"
    top_k: int = 20
    max_records: int | None = None
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.001
    dropout_rate: float = 0.5
    l2_lambda: float = 1e-4
    seed: int = 0
    embedding_dim: int = 100
    cnn_window_sizes: tuple[int, ...] = (2, 3, 4, 5)
    cnn_filters_per_window: int = 100
    lstm_hidden_dim: int = 128
    attention_dim: int = 64
    max_len: int = 5000
    max_sentences: int = 60
    max_sentence_len: int = 50
    rnn_cell: str = "lstm"
    min_frequency: int = 1
    train_fraction: float = 0.70
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    keep_best: bool = True
    patience: int | None = None
    excluded_roots: tuple[int, ...] = (798,)

    def __post_init__(self):
        if self.label_mode not in ("level1", "topk"):
            raise ValidationError(f"label_mode must be 'level1' or 'topk', got {self.label_mode!r}")
        if not self.variants:
            raise ValidationError("manifest lists no variants")
        from .models import VARIANTS
        for v in self.variants:
            if v not in VARIANTS:
                raise ValidationError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        self.cnn_window_sizes = tuple(self.cnn_window_sizes)
        self.excluded_roots = tuple(self.excluded_roots)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["cnn_window_sizes"] = list(self.cnn_window_sizes)
        d["excluded_roots"] = list(self.excluded_roots)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, variant: str, num_classes: int) -> ModelConfig:
        return ModelConfig(
            variant=variant, num_classes=num_classes, embedding_dim=self.embedding_dim,
            cnn_window_sizes=self.cnn_window_sizes,
            cnn_filters_per_window=self.cnn_filters_per_window,
            lstm_hidden_dim=self.lstm_hidden_dim, attention_dim=self.attention_dim,
            dropout_rate=self.dropout_rate, l2_lambda=self.l2_lambda, max_len=self.max_len,
            max_sentences=self.max_sentences, max_sentence_len=self.max_sentence_len,
            rnn_cell=self.rnn_cell)


@dataclass
class PreparedData:
    vocab: Vocabulary
    space: LabelSpace
    train: list[Example]
    val: list[Example]
    test: list[Example]
    records: int
    dropped: dict[str, int]


def _encode_split(notes: list[TokenizedNote], vocab: Vocabulary, space: LabelSpace,
                  max_len: int, name: str, dropped: dict[str, int]) -> list[Example]:
    out: list[Example] = []
    dropped[name] = 0
    for note in notes:
        label = encode_labels(parse_codes(note.codes), space)
        if not label.any():
            dropped[name] += 1
            continue
        out.append((encode_pad(note, vocab, max_len), label))
    return out


def prepare_data(manifest: ExperimentManifest, corpus: Sequence[RawNote],
                 vocab: Vocabulary | None = None,
                 space: LabelSpace | None = None) -> PreparedData:
    """Tokenize, subsample, split, then build label space and vocabulary.

    The label space comes from the training split only, so test labels
    cannot leak into the prediction universe.  Evaluation of an existing
    checkpoint pins ``vocab`` and ``space`` to the saved artifacts.
    """
    tokenized = [tokenize_note(raw, manifest.max_sentence_len) for raw in corpus]
    if manifest.max_records is not None and manifest.max_records < len(tokenized):
        rng = RngState(manifest.seed).stream("sample")
        keep = sorted(rng.choice(len(tokenized), size=manifest.max_records, replace=False))
        tokenized = [tokenized[i] for i in keep]
    spec = SplitSpec(manifest.train_fraction, manifest.val_fraction,
                     manifest.test_fraction, manifest.seed)
    train_notes, val_notes, test_notes = split_dataset(tokenized, spec)
    if space is None:
        if manifest.label_mode == "level1":
            space = level1_space(load_chapter_table(), manifest.excluded_roots)
        else:
            space = top_k_codes(train_notes, manifest.top_k)
    if vocab is None:
        vocab = build_vocab(tokenized, manifest.min_frequency)
    dropped: dict[str, int] = {}
    train = _encode_split(train_notes, vocab, space, manifest.max_len, "train", dropped)
    val = _encode_split(val_notes, vocab, space, manifest.max_len, "val", dropped)
    test = _encode_split(test_notes, vocab, space, manifest.max_len, "test", dropped)
    total_dropped = sum(dropped.values())
    if total_dropped:
        log.info("dropped %d notes with empty label vectors (%s)", total_dropped, dropped)
    return PreparedData(vocab, space, train, val, test, len(tokenized), dropped)


@dataclass
class ResultRow:
    variant: str
    label_mode: str
    records: int
    epochs: int
    threshold: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    error: str = ""

    def csv_values(self) -> list[str]:
        def num(x, fmt="{:.6f}"):
            return "" if x is None else fmt.format(x)
        return [self.variant, self.label_mode, str(self.records), str(self.epochs),
                num(self.threshold, "{:.2f}"), num(self.precision), num(self.recall), num(self.f1)]


RESULTS_HEADER = ["variant", "label_mode", "records", "epochs",
                  "threshold", "precision", "recall", "f1"]


def write_results_csv(path: str, rows: list[ResultRow]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for row in rows:
            writer.writerow(row.csv_values())


def write_history_csv(path: str, history: list[EpochStats]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_f1"])
        for h in history:
            writer.writerow([h.epoch, f"{h.train_loss:.12g}", f"{h.val_f1:.12g}"])


def write_metrics_csv(path: str, report: MetricsReport, classes: list[str]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["partition", "scope", "threshold", "precision", "recall",
                         "f1", "tp", "fp", "fn"])
        tau = "" if report.threshold is None else f"{report.threshold:.2f}"
        writer.writerow([report.partition, "micro", tau, f"{report.precision:.6f}",
                         f"{report.recall:.6f}", f"{report.f1:.6f}",
                         report.tp, report.fp, report.fn])
        for cls, (tp, fp, fn) in zip(classes, report.per_class):
            writer.writerow([report.partition, cls, "", "", "", "", tp, fp, fn])


def run_experiment(manifest: ExperimentManifest, out_dir: str,
                   corpus: Sequence[RawNote] | None = None) -> list[ResultRow]:
    """Run every manifest variant through split/train/calibrate/evaluate.

    Writes per-variant artifacts under ``out_dir/<variant>/`` plus
    ``results.csv`` (test partition) and ``results_val.csv`` at the top
    level.  A failing variant is recorded in the table with empty metric
    cells instead of aborting the whole run.
    """
    from .corpus_io import read_corpus_jsonl
    if corpus is None:
        corpus = read_corpus_jsonl(manifest.data_path)
    os.makedirs(out_dir, exist_ok=True)
    data = prepare_data(manifest, corpus)
    if not data.train or not data.val or not data.test:
        raise ValidationError("a split is empty after label filtering; corpus too small")
    _write_json(os.path.join(out_dir, "manifest.json"), manifest.to_dict())
    _write_json(os.path.join(out_dir, "vocab.json"), data.vocab.to_dict())
    _write_json(os.path.join(out_dir, "labels.json"), data.space.to_dict())
    rows: list[ResultRow] = []
    rows_val: list[ResultRow] = []
    for variant in manifest.variants:
        run_dir = os.path.join(out_dir, variant)
        os.makedirs(run_dir, exist_ok=True)
        try:
            test_report, val_report = _run_variant(manifest, variant, data, run_dir)
            rows.append(_to_row(manifest, variant, data.records, test_report))
            rows_val.append(_to_row(manifest, variant, data.records, val_report))
        except NotecoderError as exc:
            log.error("variant %s failed: %s", variant, exc)
            failed = ResultRow(variant, manifest.label_mode, data.records, manifest.epochs,
                               None, None, None, None, error=str(exc))
            rows.append(failed)
            rows_val.append(replace(failed))
        _write_row_json(os.path.join(run_dir, "result_test.json"), rows[-1])
        _write_row_json(os.path.join(run_dir, "result_val.json"), rows_val[-1])
    write_results_csv(os.path.join(out_dir, "results.csv"), rows)
    write_results_csv(os.path.join(out_dir, "results_val.csv"), rows_val)
    return rows


def _to_row(manifest: ExperimentManifest, variant: str, records: int,
            report: MetricsReport) -> ResultRow:
    return ResultRow(variant, manifest.label_mode, records, manifest.epochs,
                     report.threshold, report.precision, report.recall, report.f1)


def _write_json(path: str, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def _write_row_json(path: str, row: ResultRow):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"variant": row.variant, "label_mode": row.label_mode,
                   "records": row.records, "epochs": row.epochs, "threshold": row.threshold,
                   "precision": row.precision, "recall": row.recall, "f1": row.f1,
                   "error": row.error}, fh, sort_keys=True)
        fh.write("\n")


def _run_variant(manifest: ExperimentManifest, variant: str, data: PreparedData,
                 run_dir: str) -> tuple[MetricsReport, MetricsReport]:
    classes = data.space.classes
    if variant == "baseline":
        labels = np.stack([label for _, label in data.train])
        baseline = BaselinePredictor.fit(labels)
        val_report = evaluate_baseline(baseline, data.val, "val")
        test_report = evaluate_baseline(baseline, data.test, "test")
        with open(os.path.join(run_dir, "baseline.json"), "w", encoding="utf-8") as fh:
            json.dump({"top_indices": list(baseline.top_indices),
                       "num_classes": baseline.num_classes}, fh, sort_keys=True)
            fh.write("\n")
    else:
        model_config = manifest.model_config(variant, data.space.num_classes)
        train_config = TrainConfig(epochs=manifest.epochs, batch_size=manifest.batch_size,
                                   learning_rate=manifest.learning_rate, seed=manifest.seed,
                                   patience=manifest.patience, keep_best=manifest.keep_best)
        result = train(model_config, data.train, data.val, train_config, len(data.vocab))
        write_history_csv(os.path.join(run_dir, "history.csv"), result.history)
        scores_val = predict_scores(result.model, [n for n, _ in data.val])
        truth_val = np.stack([label for _, label in data.val])
        tau = calibrate_threshold(scores_val, truth_val)
        val_report = micro_f1(scores_val >= tau.tau, truth_val,
                              threshold=tau.tau, partition="val")
        test_report = evaluate(result.model, tau, data.test, "test")
        cfg_hash = config_hash(manifest.to_dict())
        save_checkpoint(os.path.join(run_dir, "checkpoint.bin"), variant, cfg_hash,
                        manifest.seed, result.model.parameters())
    write_metrics_csv(os.path.join(run_dir, "metrics_val.csv"), val_report, classes)
    write_metrics_csv(os.path.join(run_dir, "metrics_test.csv"), test_report, classes)
    return test_report, val_report
