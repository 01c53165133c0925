"""Command-line entry point.

Subcommands: ingest, stats, build-vocab, gen-synthetic, train, evaluate,
predict, report.  Exit codes: 0 success, 1 validation error, 2 runtime
failure.  Diagnostics go to stderr; data goes to files or stdout.
All randomness fans out from a single --seed flag into named substreams,
so repeated invocations with identical inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import corpus_io, synthetic, textpipe, training
from .checkpoint import config_hash, load_checkpoint, restore_into
from .errors import NotecoderError, ValidationError
from .icd9 import LabelSpace, load_chapter_table, penetration_report, write_penetration_csv
from .models import VARIANTS, build_model
from .tensor import _sigmoid
from .textpipe import Vocabulary

log = logging.getLogger("notecoder")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="notecoder",
        description="Multi-label ICD-9 coding of discharge notes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and normalize a corpus file")
    p.add_argument("--input", required=True, help="JSONL corpus, or CSV with note_id,text,codes")
    p.add_argument("--output", required=True, help="normalized JSONL corpus to write")

    p = sub.add_parser("stats", help="note-length histogram and mean")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="CSV path (length_bucket,count)")
    p.add_argument("--bucket-width", type=int, default=1)

    p = sub.add_parser("build-vocab", help="build and save the vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="vocabulary JSON path")
    p.add_argument("--min-frequency", type=int, default=1)

    p = sub.add_parser("gen-synthetic", help="generate a keyword-planted synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-notes", type=int, default=1000)
    p.add_argument("--num-classes", type=int, default=8)
    p.add_argument("--keywords-per-class", type=int, default=1)
    p.add_argument("--len-range", type=int, nargs=2, default=(30, 80), metavar=("LO", "HI"))
    p.add_argument("--cardinality", type=float, nargs="+", default=(0.5, 0.3, 0.2),
                   help="probabilities of 1, 2, ... labels per note")
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="run the train/calibrate/evaluate pipeline")
    p.add_argument("--corpus", help="corpus JSONL (overrides manifest data_path)")
    p.add_argument("--out", required=True, help="experiment output directory")
    p.add_argument("--manifest", help="experiment manifest JSON")
    p.add_argument("--config", help="JSON config file with manifest defaults; flags win")
    p.add_argument("--variant", action="append", choices=list(VARIANTS),
                   help="repeatable; defaults to cnn")
    p.add_argument("--label-mode", choices=["level1", "topk"])
    p.add_argument("--top-k", type=int)
    p.add_argument("--max-records", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--dropout", type=float, dest="dropout_rate")
    p.add_argument("--l2", type=float, dest="l2_lambda")
    p.add_argument("--seed", type=int)
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--filters", type=int, dest="cnn_filters_per_window")
    p.add_argument("--hidden-dim", type=int, dest="lstm_hidden_dim")
    p.add_argument("--attention-dim", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--max-sentence-len", type=int)
    p.add_argument("--min-frequency", type=int)
    p.add_argument("--rnn-cell", choices=["lstm", "gru"])
    p.add_argument("--fixed-epochs", action="store_true",
                   help="keep final-epoch parameters instead of the best-validation epoch")

    p = sub.add_parser("evaluate", help="re-evaluate a trained checkpoint")
    p.add_argument("--experiment", required=True, help="experiment directory written by train")
    p.add_argument("--variant", required=True)
    p.add_argument("--corpus", help="corpus JSONL; defaults to the manifest data_path")
    p.add_argument("--partition", choices=["val", "test", "both"], default="both")
    p.add_argument("--out", help="output directory; defaults to the run directory")

    p = sub.add_parser("predict", help="predict code lists for new notes")
    p.add_argument("--experiment", required=True)
    p.add_argument("--variant", required=True)
    p.add_argument("--input", required=True, help="JSONL notes (codes may be empty)")
    p.add_argument("--output", required=True, help="JSONL predictions to write")
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("report", help="assemble plot-ready CSVs from finished runs")
    p.add_argument("--runs", required=True, help="experiment directory with per-variant runs")
    p.add_argument("--out", required=True, help="directory for the report CSVs")
    p.add_argument("--corpus", help="corpus for penetration and length histograms")

    return parser


def cmd_ingest(args) -> int:
    summary = corpus_io.ingest(args.input, args.output)
    print(f"notes: {summary.notes}")
    print(f"codes: {summary.total_codes}")
    print(f"distinct codes: {summary.distinct_codes}")
    return 0


def cmd_stats(args) -> int:
    corpus = [textpipe.tokenize_note(n) for n in corpus_io.read_corpus_jsonl(args.corpus)]
    stats = textpipe.corpus_length_stats(corpus, args.bucket_width)
    textpipe.write_length_histogram(stats, args.out)
    print(f"notes: {stats.total_notes}")
    print(f"mean length: {stats.mean:.2f}")
    return 0


def cmd_build_vocab(args) -> int:
    corpus = [textpipe.tokenize_note(n) for n in corpus_io.read_corpus_jsonl(args.corpus)]
    vocab = textpipe.build_vocab(corpus, args.min_frequency)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(vocab.to_dict(), fh, sort_keys=True)
        fh.write("\n")
    print(f"vocabulary size: {len(vocab)}")
    return 0


def cmd_gen_synthetic(args) -> int:
    spec = synthetic.SyntheticSpec(
        num_notes=args.num_notes, num_classes=args.num_classes,
        keywords_per_class=args.keywords_per_class,
        note_len_range=tuple(args.len_range),
        label_cardinality=tuple(args.cardinality),
        noise_fraction=args.noise, seed=args.seed)
    notes = synthetic.generate(spec)
    corpus_io.write_corpus_jsonl(notes, args.out)
    print(f"wrote {len(notes)} notes to {args.out}")
    return 0


_TRAIN_FLAG_FIELDS = (
    "label_mode", "top_k", "max_records", "epochs", "batch_size", "learning_rate",
    "dropout_rate", "l2_lambda", "seed", "embedding_dim", "cnn_filters_per_window",
    "lstm_hidden_dim", "attention_dim", "max_len", "max_sentence_len", "min_frequency",
    "rnn_cell")


def cmd_train(args) -> int:
    settings: dict = {}
    if args.manifest:
        settings.update(_read_json(args.manifest))
    if args.config:
        settings.update(_read_json(args.config))
    for name in _TRAIN_FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    if args.variant:
        settings["variants"] = list(args.variant)
    settings.setdefault("variants", ["cnn"])
    if args.corpus:
        settings["data_path"] = args.corpus
    if "data_path" not in settings:
        raise ValidationError("no corpus: pass --corpus or a manifest with data_path")
    if args.fixed_epochs:
        settings["keep_best"] = False
    manifest = training.ExperimentManifest.from_dict(settings)
    _require_file(manifest.data_path)
    rows = training.run_experiment(manifest, args.out)
    for row in rows:
        status = f"f1={row.f1:.4f}" if row.f1 is not None else f"FAILED ({row.error})"
        print(f"{row.variant}: {status}")
    print(f"results: {os.path.join(args.out, 'results.csv')}")
    return 0


def _load_run(experiment: str, variant: str):
    manifest = training.ExperimentManifest.from_dict(_read_json(os.path.join(experiment, "manifest.json")))
    vocab = Vocabulary.from_dict(_read_json(os.path.join(experiment, "vocab.json")))
    space = LabelSpace.from_dict(_read_json(os.path.join(experiment, "labels.json")),
                                 load_chapter_table())
    ckpt_path = os.path.join(experiment, variant, "checkpoint.bin")
    _require_file(ckpt_path)
    ckpt = load_checkpoint(ckpt_path)
    expected = config_hash(manifest.to_dict())
    if ckpt.config_hash != expected:
        raise ValidationError(
            f"checkpoint config hash {ckpt.config_hash[:12]} does not match the experiment "
            f"manifest hash {expected[:12]}; refusing to evaluate a mismatched configuration")
    model = build_model(manifest.model_config(variant, space.num_classes),
                        len(vocab), training.RngState(ckpt.seed).stream("init"))
    restore_into(model, ckpt)
    return manifest, vocab, space, model


def cmd_evaluate(args) -> int:
    manifest, vocab, space, model = _load_run(args.experiment, args.variant)
    corpus_path = args.corpus or manifest.data_path
    _require_file(corpus_path)
    corpus = corpus_io.read_corpus_jsonl(corpus_path)
    data = training.prepare_data(manifest, corpus, vocab=vocab, space=space)
    scores_val = training.predict_scores(model, [n for n, _ in data.val])
    truth_val = np.stack([label for _, label in data.val])
    tau = training.calibrate_threshold(scores_val, truth_val)
    out_dir = args.out or os.path.join(args.experiment, args.variant)
    os.makedirs(out_dir, exist_ok=True)
    reports = []
    if args.partition in ("val", "both"):
        reports.append(training.micro_f1(scores_val >= tau.tau, truth_val,
                                         threshold=tau.tau, partition="val"))
    if args.partition in ("test", "both"):
        reports.append(training.evaluate(model, tau, data.test, "test"))
    for report in reports:
        path = os.path.join(out_dir, f"metrics_{report.partition}.csv")
        training.write_metrics_csv(path, report, space.classes)
        print(f"{report.partition}: threshold={tau.tau:.2f} precision={report.precision:.4f} "
              f"recall={report.recall:.4f} f1={report.f1:.4f} -> {path}")
    return 0


def cmd_predict(args) -> int:
    manifest, vocab, space, model = _load_run(args.experiment, args.variant)
    if not 0.0 < args.threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {args.threshold}")
    _require_file(args.input)
    notes = corpus_io.read_corpus_jsonl(args.input)
    with open(args.output, "w", encoding="utf-8") as fh:
        for raw in notes:
            tokenized = textpipe.tokenize_note(raw, manifest.max_sentence_len)
            encoded = textpipe.encode_pad(tokenized, vocab, manifest.max_len)
            scores = _sigmoid(model.forward(encoded, training=False).data)
            predicted = [space.classes[i] for i in np.flatnonzero(scores >= args.threshold)]
            fh.write(json.dumps({"note_id": raw.note_id, "codes": predicted}, sort_keys=True) + "\n")
    print(f"wrote predictions for {len(notes)} notes to {args.output}")
    return 0


def cmd_report(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    rows = []
    if os.path.isdir(args.runs):
        for name in sorted(os.listdir(args.runs)):
            row_path = os.path.join(args.runs, name, "result_test.json")
            if os.path.isfile(row_path):
                d = _read_json(row_path)
                rows.append(training.ResultRow(
                    d["variant"], d["label_mode"], d["records"], d["epochs"],
                    d["threshold"], d["precision"], d["recall"], d["f1"],
                    d.get("error", "")))
    training.write_results_csv(os.path.join(args.out, "results.csv"), rows)
    written = ["results.csv"]
    if args.corpus:
        corpus = [textpipe.tokenize_note(n) for n in corpus_io.read_corpus_jsonl(args.corpus)]
        stats = textpipe.corpus_length_stats(corpus)
        textpipe.write_length_histogram(stats, os.path.join(args.out, "length_hist.csv"))
        written.append("length_hist.csv")
        labels_path = os.path.join(args.runs, "labels.json")
        if os.path.isfile(labels_path):
            space = LabelSpace.from_dict(_read_json(labels_path), load_chapter_table())
            rows_pen = penetration_report(corpus, space)
            write_penetration_csv(rows_pen, os.path.join(args.out, "penetration.csv"))
            written.append("penetration.csv")
    print(f"wrote {', '.join(written)} to {args.out}")
    return 0


def _read_json(path: str) -> dict:
    _require_file(path)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _require_file(path: str):
    if not os.path.isfile(path):
        raise ValidationError(f"file not found: {path}")


_COMMANDS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "build-vocab": cmd_build_vocab,
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NotecoderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
