"""The classifier zoo: embedding layer, attention pooling, and the five
architectures behind one interface (encoded note ids -> per-class logits).

Variants: constant-prediction baseline, CNN with max-over-time pooling,
CNN with per-window attention pooling, single-layer unidirectional LSTM
(last valid state), LSTM with attention over all valid states, and the
two-level hierarchical attention model (word-level RNN + attention per
sentence, then sentence-level RNN + attention).  The recurrent cell is
an LSTM by default; a GRU sits behind the same interface via
``ModelConfig.rnn_cell``.

Weight init is uniform in [-0.05, 0.05], biases zero except the LSTM
forget gate (+1).  The embedding PAD row is pinned to zero and never
receives gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, ParseError, ValidationError
from .tensor import (Tensor, add, concat_flat, concat_rows, conv1d_windows, dropout,
                     gather_rows, gru_sequence, lstm_sequence, mask_cols_from, matmul,
                     max_over_time, relu, reshape, rows, softmax_rows, tanh, transpose)
from .textpipe import PAD_ID, EncodedNote, Vocabulary

NEURAL_VARIANTS = ("cnn", "cnn_att", "lstm", "lstm_att", "han")
VARIANTS = ("baseline",) + NEURAL_VARIANTS

INIT_SCALE = 0.05


@dataclass
class ModelConfig:
    variant: str
    num_classes: int
    embedding_dim: int = 100
    cnn_window_sizes: tuple[int, ...] = (2, 3, 4, 5)
    cnn_filters_per_window: int = 100
    lstm_hidden_dim: int = 128
    attention_dim: int = 64
    dropout_rate: float = 0.5
    l2_lambda: float = 1e-4
    max_len: int = 5000
    max_sentences: int = 60
    max_sentence_len: int = 50
    rnn_cell: str = "lstm"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("num_classes", "embedding_dim", "cnn_filters_per_window",
                     "lstm_hidden_dim", "attention_dim", "max_len", "max_sentences",
                     "max_sentence_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        self.cnn_window_sizes = tuple(self.cnn_window_sizes)
        if any(k < 1 for k in self.cnn_window_sizes) or not self.cnn_window_sizes:
            raise ValidationError(f"bad cnn_window_sizes {self.cnn_window_sizes}")
        if self.variant in ("cnn", "cnn_att") and self.max_len < max(self.cnn_window_sizes):
            raise ValidationError("max_len must cover the largest convolution window")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.l2_lambda < 0:
            raise ValidationError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if self.rnn_cell not in ("lstm", "gru"):
            raise ValidationError(f"rnn_cell must be 'lstm' or 'gru', got {self.rnn_cell!r}")

    def to_dict(self) -> dict:
        return {"variant": self.variant, "num_classes": self.num_classes,
                "embedding_dim": self.embedding_dim,
                "cnn_window_sizes": list(self.cnn_window_sizes),
                "cnn_filters_per_window": self.cnn_filters_per_window,
                "lstm_hidden_dim": self.lstm_hidden_dim, "attention_dim": self.attention_dim,
                "dropout_rate": self.dropout_rate, "l2_lambda": self.l2_lambda,
                "max_len": self.max_len, "max_sentences": self.max_sentences,
                "max_sentence_len": self.max_sentence_len, "rnn_cell": self.rnn_cell}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "cnn_window_sizes" in d:
            d["cnn_window_sizes"] = tuple(d["cnn_window_sizes"])
        return cls(**d)


def _uniform(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)


class EmbeddingMatrix:
    """Trainable token embeddings [V, d]; row 0 (PAD) stays exactly zero."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, trainable: bool = True):
        data = _uniform(rng, (vocab_size, dim))
        data[PAD_ID] = 0.0
        self.tensor = Tensor(data, requires_grad=trainable)
        self.trainable = trainable

    @property
    def vocab_size(self) -> int:
        return self.tensor.shape[0]

    @property
    def dim(self) -> int:
        return self.tensor.shape[1]


def embed(ids: np.ndarray, matrix: EmbeddingMatrix) -> Tensor:
    """Row-gather [T] -> [T, d]; PAD rows contribute zeros and get no gradient."""
    return gather_rows(matrix.tensor, ids, frozen_rows=(PAD_ID,))


@dataclass
class VectorLoadReport:
    hits: int
    misses: int


def load_pretrained_vectors(path: str, vocab: Vocabulary, matrix: EmbeddingMatrix) -> VectorLoadReport:
    """Overwrite embedding rows from a text vector file (token v1 .. vd per line).

    Tokens absent from the file keep their random init; the PAD row is
    never overwritten.  hits + misses always equals the vocabulary size.
    """
    dim = matrix.dim
    hit_ids: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split(" ")
            token, values = fields[0], fields[1:]
            if len(values) != dim:
                raise DimensionError(
                    f"{path}:{lineno}: expected {dim} vector components, got {len(values)}")
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad float in vector line: {exc}") from exc
            if token in vocab:
                idx = vocab.id_of(token)
                if idx != PAD_ID:
                    matrix.tensor.data[idx] = vec
                    hit_ids.add(idx)
    hits = len(hit_ids)
    return VectorLoadReport(hits=hits, misses=len(vocab) - hits)


@dataclass
class AttentionPoolParams:
    w: Tensor  # [d_in, d_att]
    b: Tensor  # [d_att]
    v: Tensor  # [d_att]


def attention_pool(h: Tensor, params: AttentionPoolParams, valid: int) -> tuple[Tensor, Tensor]:
    """Feed-forward attention: score_t = v . tanh(W h_t + b), softmax, weighted sum.

    Positions >= ``valid`` are masked to -inf before the softmax, so their
    weights are exactly zero.  Returns (context [d_in], weights [T]).
    """
    t_len, d_in = h.shape
    if valid < 1:
        raise ValidationError("attention_pool needs at least one valid position")
    if valid > t_len:
        raise ValidationError(f"valid length {valid} exceeds sequence length {t_len}")
    scores = matmul(tanh(add(matmul(h, params.w), params.b)), reshape(params.v, (-1, 1)))
    scores_row = transpose(scores)  # [1, T]
    if valid < t_len:
        scores_row = mask_cols_from(scores_row, valid)
    weights = softmax_rows(scores_row)
    context = matmul(weights, h)  # [1, d_in]
    return reshape(context, (d_in,)), reshape(weights, (t_len,))


def linear_vec(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of a 1-D vector: x [n] @ w [n, C] + b [C] -> [C]."""
    out = add(matmul(reshape(x, (1, -1)), w), b)
    return reshape(out, (-1,))


class _NeuralClassifier:
    """Shared parameter registry, forward plumbing, and the L2 weight set."""

    variant: str

    def __init__(self, config: ModelConfig, vocab_size: int, rng: np.random.Generator):
        if config.variant != self.variant:
            raise ValidationError(f"config variant {config.variant!r} != model {self.variant!r}")
        self.config = config
        self._entries: list[tuple[str, Tensor, bool]] = []
        self.embedding = EmbeddingMatrix(vocab_size, config.embedding_dim, rng)
        self._register("embedding", self.embedding.tensor, weight=False)
        self.attention_weights: dict[str, object] = {}
        self._build(rng)

    def _register(self, name: str, tensor: Tensor, weight: bool) -> Tensor:
        self._entries.append((name, tensor, weight))
        return tensor

    def _param(self, name: str, data: np.ndarray, weight: bool) -> Tensor:
        return self._register(name, Tensor(data, requires_grad=True), weight)

    def _attention_params(self, prefix: str, d_in: int, rng: np.random.Generator) -> AttentionPoolParams:
        a = self.config.attention_dim
        return AttentionPoolParams(
            w=self._param(f"{prefix}.w", _uniform(rng, (d_in, a)), weight=True),
            b=self._param(f"{prefix}.b", np.zeros(a), weight=False),
            v=self._param(f"{prefix}.v", _uniform(rng, a), weight=True),
        )

    def _rnn_params(self, prefix: str, in_dim: int, rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
        h = self.config.lstm_hidden_dim
        gates = 4 if self.config.rnn_cell == "lstm" else 3
        b = np.zeros(gates * h)
        if self.config.rnn_cell == "lstm":
            b[h:2 * h] = 1.0  # forget-gate bias stabilizer
        return (
            self._param(f"{prefix}.wx", _uniform(rng, (in_dim, gates * h)), weight=True),
            self._param(f"{prefix}.wh", _uniform(rng, (h, gates * h)), weight=True),
            self._param(f"{prefix}.b", b, weight=False),
        )

    def _run_rnn(self, x: Tensor, params: tuple[Tensor, Tensor, Tensor]) -> Tensor:
        seq = lstm_sequence if self.config.rnn_cell == "lstm" else gru_sequence
        return seq(x, *params)

    def _output_params(self, in_dim: int, rng: np.random.Generator):
        self.out_w = self._param("out.weight", _uniform(rng, (in_dim, self.config.num_classes)), weight=True)
        self.out_b = self._param("out.bias", np.zeros(self.config.num_classes), weight=False)

    def _build(self, rng: np.random.Generator):
        raise NotImplementedError

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, t) for name, t, _ in self._entries]

    def tensors(self) -> list[Tensor]:
        return [t for _, t, _ in self._entries]

    def weight_tensors(self) -> list[Tensor]:
        """Weight matrices only: no biases, no embedding (L2 target set)."""
        return [t for _, t, w in self._entries if w]

    def num_parameters(self, include_embedding: bool = True) -> int:
        return sum(t.data.size for name, t, _ in self._entries
                   if include_embedding or name != "embedding")

    def _check_note(self, note: EncodedNote):
        if len(note.ids) != self.config.max_len:
            raise DimensionError(
                f"note {note.note_id!r} has {len(note.ids)} ids, model expects {self.config.max_len}")

    def _valid_length(self, note: EncodedNote) -> int:
        # A fully padded note is treated as one PAD token so prediction
        # yields the model's constant output instead of crashing.
        return min(max(note.true_length, 1), self.config.max_len)

    def forward(self, note: EncodedNote, training: bool = False,
                dropout_rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError


class CnnClassifier(_NeuralClassifier):
    """One convolution layer with several window sizes, max-over-time pooled."""

    variant = "cnn"

    def _build(self, rng):
        cfg = self.config
        d, f = cfg.embedding_dim, cfg.cnn_filters_per_window
        self.convs = {}
        for k in cfg.cnn_window_sizes:
            self.convs[k] = (
                self._param(f"conv{k}.weight", _uniform(rng, (k * d, f)), weight=True),
                self._param(f"conv{k}.bias", np.zeros(f), weight=False),
            )
        self._output_params(len(cfg.cnn_window_sizes) * f, rng)

    def _window_features(self, x: Tensor, k: int) -> Tensor:
        w, b = self.convs[k]
        return relu(conv1d_windows(x, w, b, k))

    def forward(self, note, training=False, dropout_rng=None):
        self._check_note(note)
        x = embed(note.ids, self.embedding)
        pooled = [max_over_time(self._window_features(x, k)) for k in self.config.cnn_window_sizes]
        feats = dropout(concat_flat(pooled), self.config.dropout_rate, dropout_rng, training)
        return linear_vec(feats, self.out_w, self.out_b)


class CnnAttentionClassifier(CnnClassifier):
    """CNN variant with max pooling replaced by per-window attention pooling."""

    variant = "cnn_att"

    def _build(self, rng):
        super()._build(rng)
        self.attn = {k: self._attention_params(f"attn{k}", self.config.cnn_filters_per_window, rng)
                     for k in self.config.cnn_window_sizes}

    def forward(self, note, training=False, dropout_rng=None):
        self._check_note(note)
        self.attention_weights = {}
        x = embed(note.ids, self.embedding)
        length = self._valid_length(note)
        pooled = []
        for k in self.config.cnn_window_sizes:
            feats = self._window_features(x, k)
            n_windows = feats.shape[0]
            # Windows fully inside the real-token prefix count as valid;
            # short notes fall back to the first window.
            valid = min(max(length - k + 1, 1), n_windows)
            ctx, weights = attention_pool(feats, self.attn[k], valid)
            self.attention_weights[f"window{k}"] = weights
            pooled.append(ctx)
        feats = dropout(concat_flat(pooled), self.config.dropout_rate, dropout_rng, training)
        return linear_vec(feats, self.out_w, self.out_b)


class LstmClassifier(_NeuralClassifier):
    """Single-layer unidirectional RNN; classifies from the last valid state."""

    variant = "lstm"

    def _build(self, rng):
        self.rnn = self._rnn_params("rnn", self.config.embedding_dim, rng)
        self._output_params(self.config.lstm_hidden_dim, rng)

    def _hidden_states(self, note) -> tuple[Tensor, int]:
        length = self._valid_length(note)
        x = embed(note.ids[:length], self.embedding)
        return self._run_rnn(x, self.rnn), length

    def forward(self, note, training=False, dropout_rng=None):
        self._check_note(note)
        states, length = self._hidden_states(note)
        last = reshape(rows(states, length - 1, length), (-1,))
        last = dropout(last, self.config.dropout_rate, dropout_rng, training)
        return linear_vec(last, self.out_w, self.out_b)


class LstmAttentionClassifier(LstmClassifier):
    """RNN variant that attention-pools all valid hidden states."""

    variant = "lstm_att"

    def _build(self, rng):
        super()._build(rng)
        self.attn = self._attention_params("attn", self.config.lstm_hidden_dim, rng)

    def forward(self, note, training=False, dropout_rng=None):
        self._check_note(note)
        states, length = self._hidden_states(note)
        context, weights = attention_pool(states, self.attn, length)
        self.attention_weights = {"sequence": weights}
        context = dropout(context, self.config.dropout_rate, dropout_rng, training)
        return linear_vec(context, self.out_w, self.out_b)


class HierAttentionClassifier(_NeuralClassifier):
    """Two-level attention: word RNN+attention per sentence, sentence RNN+attention."""

    variant = "han"

    def _build(self, rng):
        cfg = self.config
        self.word_rnn = self._rnn_params("word_rnn", cfg.embedding_dim, rng)
        self.word_attn = self._attention_params("word_attn", cfg.lstm_hidden_dim, rng)
        self.sent_rnn = self._rnn_params("sent_rnn", cfg.lstm_hidden_dim, rng)
        self.sent_attn = self._attention_params("sent_attn", cfg.lstm_hidden_dim, rng)
        self._output_params(cfg.lstm_hidden_dim, rng)

    def _model_spans(self, note) -> list[tuple[int, int]]:
        cfg = self.config
        length = min(note.true_length, cfg.max_len)
        spans = []
        for start, stop in note.sentence_spans:
            stop = min(stop, length, start + cfg.max_sentence_len)
            if start < length and stop > start:
                spans.append((start, stop))
            if len(spans) == cfg.max_sentences:
                break
        if not spans:
            if note.true_length == 0:
                return [(0, 1)]  # fully padded note -> constant prediction
            raise ValidationError(f"note {note.note_id!r} has zero sentences")
        return spans

    def forward(self, note, training=False, dropout_rng=None):
        self._check_note(note)
        spans = self._model_spans(note)
        word_weights = []
        sent_vecs = []
        h = self.config.lstm_hidden_dim
        for start, stop in spans:
            x = embed(note.ids[start:stop], self.embedding)
            states = self._run_rnn(x, self.word_rnn)
            ctx, weights = attention_pool(states, self.word_attn, stop - start)
            word_weights.append(weights)
            sent_vecs.append(reshape(ctx, (1, h)))
        sent_matrix = concat_rows(sent_vecs)
        sent_states = self._run_rnn(sent_matrix, self.sent_rnn)
        doc, sent_w = attention_pool(sent_states, self.sent_attn, len(spans))
        self.attention_weights = {"word": word_weights, "sentence": sent_w}
        doc = dropout(doc, self.config.dropout_rate, dropout_rng, training)
        return linear_vec(doc, self.out_w, self.out_b)


_MODEL_CLASSES = {cls.variant: cls for cls in
                  (CnnClassifier, CnnAttentionClassifier, LstmClassifier,
                   LstmAttentionClassifier, HierAttentionClassifier)}


def build_model(config: ModelConfig, vocab_size: int, rng: np.random.Generator) -> _NeuralClassifier:
    """Construct one of the five neural variants with freshly initialized weights."""
    try:
        cls = _MODEL_CLASSES[config.variant]
    except KeyError:
        raise ValidationError(f"build_model cannot build variant {config.variant!r}")
    return cls(config, vocab_size, rng)


@dataclass
class BaselinePredictor:
    """Constant predictor marking the most frequent training classes (at most 4)."""

    top_indices: tuple[int, ...]
    num_classes: int
    variant: str = field(default="baseline", init=False)

    @classmethod
    def fit(cls, label_matrix: np.ndarray) -> "BaselinePredictor":
        labels = np.asarray(label_matrix)
        if labels.ndim != 2 or labels.shape[0] == 0:
            raise ValidationError("baseline needs a non-empty [N, C] training label matrix")
        counts = labels.sum(axis=0)
        c = labels.shape[1]
        order = sorted(range(c), key=lambda j: (-counts[j], j))
        return cls(tuple(order[:min(4, c)]), c)

    def predict_vector(self) -> np.ndarray:
        vec = np.zeros(self.num_classes, dtype=np.float64)
        vec[list(self.top_indices)] = 1.0
        return vec

    def predict_matrix(self, n: int) -> np.ndarray:
        return np.tile(self.predict_vector(), (n, 1))
