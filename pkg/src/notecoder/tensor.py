"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` node holds a value array,
a same-shaped gradient array, references to its parent nodes, and a
backward closure that scatters the node's gradient into its parents.
``backward()`` topologically sorts the graph from a scalar root and runs
the closures in reverse order, so gradients accumulate additively across
fan-out.  Everything is float64 and deterministic; there is no GPU path,
no sparsity, and no graph rewriting.

Recurrent layers get fused sequence ops (``lstm_sequence`` /
``gru_sequence``) whose backward is hand-written truncated-free BPTT;
per-timestep graph nodes would dominate runtime at note lengths in the
thousands.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, ValidationError


class Tensor:
    """One node of the computation graph.

    ``data`` and ``grad`` always share a shape.  Leaf parameters are
    created with ``requires_grad=True``; op results require gradients
    whenever any parent does.  The ``op`` tag names the backward rule for
    debugging.
    """

    __slots__ = ("data", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents = parents
        self.op = op
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    # Operator sugar used by the model code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: tuple, op: str) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), parents=parents, op=op)
    if out.requires_grad and out.grad is None:
        out.grad = np.zeros_like(out.data)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data + b.data, (a, b), "add")

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad, b.shape)

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data - b.data, (a, b), "sub")

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(out.grad, b.shape)

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _result(a.data * b.data, (a, b), "mul")

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * a.data, b.shape)

    out._backward = backward
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(-a.data, (a,), "neg")

    def backward():
        if a.requires_grad:
            a.grad -= out.grad

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Matrix ops and shape plumbing
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = _result(a.data @ b.data, (a, b), "matmul")

    def backward():
        if a.requires_grad:
            a.grad += out.grad @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ out.grad

    out._backward = backward
    return out


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = _result(a.data.T.copy(), (a,), "transpose")

    def backward():
        if a.requires_grad:
            a.grad += out.grad.T

    out._backward = backward
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.reshape(shape).copy(), (a,), "reshape")

    def backward():
        if a.requires_grad:
            a.grad += out.grad.reshape(a.shape)

    out._backward = backward
    return out


def rows(a, start: int, stop: int) -> Tensor:
    """Slice rows [start, stop) of a 2-D tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"rows expects a 2-D tensor, got {a.shape}")
    if not (0 <= start < stop <= a.shape[0]):
        raise DimensionError(f"row slice [{start}, {stop}) out of range for shape {a.shape}")
    out = _result(a.data[start:stop].copy(), (a,), "rows")

    def backward():
        if a.requires_grad:
            a.grad[start:stop] += out.grad

    out._backward = backward
    return out


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors vertically; all must share a column count."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValidationError("concat_rows needs at least one tensor")
    cols = {t.shape[1] for t in tensors}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows column counts differ: {sorted(cols)}")
    out = _result(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), "concat_rows")

    def backward():
        offset = 0
        for t in tensors:
            n = t.shape[0]
            if t.requires_grad:
                t.grad += out.grad[offset:offset + n]
            offset += n

    out._backward = backward
    return out


def concat_flat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors end to end."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValidationError("concat_flat needs at least one tensor")
    out = _result(np.concatenate([t.data for t in tensors]), tuple(tensors), "concat_flat")

    def backward():
        offset = 0
        for t in tensors:
            n = t.data.size
            if t.requires_grad:
                t.grad += out.grad[offset:offset + n]
            offset += n

    out._backward = backward
    return out


def gather_rows(a, ids, frozen_rows: tuple = ()) -> Tensor:
    """Row lookup ``a.data[ids]`` with scatter-add backward.

    Rows listed in ``frozen_rows`` (the embedding PAD row) receive no
    gradient, which keeps them pinned under any optimizer.
    """
    a = _as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D tensor, got {a.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise IndexError(f"row id out of range [0, {a.shape[0]}): {ids.min()}..{ids.max()}")
    out = _result(a.data[ids], (a,), "gather_rows")

    def backward():
        if a.requires_grad:
            keep = np.ones(ids.shape, dtype=bool)
            for r in frozen_rows:
                keep &= ids != r
            np.add.at(a.grad, ids[keep], out.grad[keep])

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable on both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.tanh(a.data), (a,), "tanh")

    def backward():
        if a.requires_grad:
            a.grad += out.grad * (1.0 - out.data * out.data)

    out._backward = backward
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(_sigmoid(a.data), (a,), "sigmoid")

    def backward():
        if a.requires_grad:
            a.grad += out.grad * out.data * (1.0 - out.data)

    out._backward = backward
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.maximum(a.data, 0.0), (a,), "relu")

    def backward():
        if a.requires_grad:
            a.grad += out.grad * (a.data > 0)

    out._backward = backward
    return out


ACTIVATIONS = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu}


def elementwise(op_tag: str, a) -> Tensor:
    """Apply a named activation; valid tags are tanh, sigmoid, relu."""
    try:
        fn = ACTIVATIONS[op_tag]
    except KeyError:
        raise ValidationError(f"unknown elementwise op {op_tag!r}; expected one of {sorted(ACTIVATIONS)}")
    return fn(a)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor, computed with max subtraction."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D tensor, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out = _result(ex / ex.sum(axis=1, keepdims=True), (a,), "softmax_rows")

    def backward():
        if a.requires_grad:
            y, g = out.data, out.grad
            a.grad += (g - (g * y).sum(axis=1, keepdims=True)) * y

    out._backward = backward
    return out


def mask_cols_from(a, valid: int) -> Tensor:
    """Overwrite columns >= valid with -inf (pre-softmax attention mask)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"mask_cols_from expects a 2-D tensor, got {a.shape}")
    if not 1 <= valid <= a.shape[1]:
        raise ValidationError(f"valid length {valid} outside [1, {a.shape[1]}]")
    data = a.data.copy()
    data[:, valid:] = -np.inf
    out = _result(data, (a,), "mask_cols_from")

    def backward():
        if a.requires_grad:
            a.grad[:, :valid] += out.grad[:, :valid]

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Sequence ops
# ---------------------------------------------------------------------------

def conv1d_windows(x, filters, bias, k: int) -> Tensor:
    """1-D convolution over time as a windowed affine map.

    ``x`` is [T, d]; each of the T-k+1 length-k windows is flattened to
    k*d values and multiplied by ``filters`` [(k*d), F], plus ``bias``
    [F].  No padding happens here; callers pad the sequence itself.
    """
    x, filters, bias = _as_tensor(x), _as_tensor(filters), _as_tensor(bias)
    if x.data.ndim != 2:
        raise DimensionError(f"conv1d_windows expects 2-D input, got {x.shape}")
    t_len, d = x.shape
    if t_len < k:
        raise ValidationError(f"sequence too short for window: T={t_len} < k={k}")
    if filters.shape != (k * d, filters.shape[1]):
        raise DimensionError(f"filters shape {filters.shape} incompatible with k*d={k * d}")
    if bias.shape != (filters.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match filter count {filters.shape[1]}")
    n = t_len - k + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (k, d)).reshape(n, k * d)
    out = _result(windows @ filters.data + bias.data, (x, filters, bias), "conv1d_windows")

    def backward():
        g = out.grad
        if filters.requires_grad:
            filters.grad += windows.T @ g
        if bias.requires_grad:
            bias.grad += g.sum(axis=0)
        if x.requires_grad:
            dwin = g @ filters.data.T  # [n, k*d]
            for j in range(k):
                x.grad[j:j + n] += dwin[:, j * d:(j + 1) * d]

    out._backward = backward
    return out


def max_over_time(x) -> Tensor:
    """Column-wise max of [T, F] -> [F]; gradient goes to the first argmax."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ValidationError(f"max_over_time needs a non-empty 2-D input, got {x.shape}")
    idx = np.argmax(x.data, axis=0)  # first occurrence on ties
    cols = np.arange(x.shape[1])
    out = _result(x.data[idx, cols], (x,), "max_over_time")

    def backward():
        if x.requires_grad:
            np.add.at(x.grad, (idx, cols), out.grad)

    out._backward = backward
    return out


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scales survivors by 1/(1-rate) so inference is identity."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValidationError("dropout in training mode needs an rng stream")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.shape) >= rate) * scale
    out = _result(x.data * mask, (x,), "dropout")

    def backward():
        if x.requires_grad:
            x.grad += out.grad * mask

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Reductions and losses
# ---------------------------------------------------------------------------

def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = _result(x.data.sum(), (x,), "sum_all")

    def backward():
        if x.requires_grad:
            x.grad += out.grad

    out._backward = backward
    return out


def multilabel_cross_entropy(logits, targets) -> Tensor:
    """Mean sigmoid cross entropy over every (example, class) cell.

    Each class gets an independent sigmoid; classes are not mutually
    exclusive.  Computed as max(z,0) - z*y + log(1+exp(-|z|)), which is
    exact and never overflows.
    """
    logits = _as_tensor(logits)
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    z = logits.data
    if z.shape != y.shape:
        raise DimensionError(f"logits shape {z.shape} != targets shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("targets must be binary {0, 1}")
    cell = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = _result(cell.mean(), (logits,), "multilabel_cross_entropy")

    def backward():
        if logits.requires_grad:
            logits.grad += out.grad * (_sigmoid(z) - y) / z.size

    out._backward = backward
    return out


def l2_penalty(params: Sequence[Tensor], lam: float) -> Tensor:
    """lambda * sum of squared entries over the given weight tensors."""
    if lam < 0:
        raise ValidationError(f"l2 lambda must be >= 0, got {lam}")
    params = tuple(params)
    total = lam * sum(float(np.sum(p.data * p.data)) for p in params)
    out = _result(np.float64(total), params, "l2_penalty")

    def backward():
        for p in params:
            if p.requires_grad:
                p.grad += out.grad * 2.0 * lam * p.data

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Fused recurrent sequence ops
# ---------------------------------------------------------------------------

def lstm_sequence(x, wx, wh, b) -> Tensor:
    """Run a single-layer LSTM over [T, d]; returns all hidden states [T, H].

    Gate order inside the fused weights is (input, forget, candidate,
    output): ``wx`` is [d, 4H], ``wh`` [H, 4H], ``b`` [4H].  Initial h and
    c are zero.  Backward is hand-written BPTT over the cached gates.
    """
    x, wx, wh, b = _as_tensor(x), _as_tensor(wx), _as_tensor(wh), _as_tensor(b)
    t_len, d = x.shape
    hidden4 = wx.shape[1]
    if hidden4 % 4 != 0 or wx.shape[0] != d:
        raise DimensionError(f"lstm wx shape {wx.shape} incompatible with input dim {d}")
    h_dim = hidden4 // 4
    if wh.shape != (h_dim, hidden4) or b.shape != (hidden4,):
        raise DimensionError(f"lstm weight shapes disagree: wx={wx.shape} wh={wh.shape} b={b.shape}")

    xw = x.data @ wx.data + b.data  # input contribution for every step at once
    h_all = np.empty((t_len, h_dim))
    cache = []
    h = np.zeros(h_dim)
    c = np.zeros(h_dim)
    for t in range(t_len):
        z = xw[t] + h @ wh.data
        i = _sigmoid(z[:h_dim])
        f = _sigmoid(z[h_dim:2 * h_dim])
        g = np.tanh(z[2 * h_dim:3 * h_dim])
        o = _sigmoid(z[3 * h_dim:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        h_all[t] = h
        cache.append((i, f, g, o, c_prev, tc))
    out = _result(h_all, (x, wx, wh, b), "lstm_sequence")

    def backward():
        dh_carry = np.zeros(h_dim)
        dc_carry = np.zeros(h_dim)
        dz_all = np.empty((t_len, hidden4))
        for t in range(t_len - 1, -1, -1):
            i, f, g, o, c_prev, tc = cache[t]
            dh = out.grad[t] + dh_carry
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_carry
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dz = dz_all[t]
            dz[:h_dim] = di * i * (1.0 - i)
            dz[h_dim:2 * h_dim] = df * f * (1.0 - f)
            dz[2 * h_dim:3 * h_dim] = dg * (1.0 - g * g)
            dz[3 * h_dim:] = do * o * (1.0 - o)
            dh_carry = dz @ wh.data.T
            dc_carry = dc * f
        if x.requires_grad:
            x.grad += dz_all @ wx.data.T
        if wx.requires_grad:
            wx.grad += x.data.T @ dz_all
        if wh.requires_grad:
            h_prev = np.vstack([np.zeros(h_dim), out.data[:-1]])
            wh.grad += h_prev.T @ dz_all
        if b.requires_grad:
            b.grad += dz_all.sum(axis=0)

    out._backward = backward
    return out


def gru_sequence(x, wx, wh, b) -> Tensor:
    """Run a single-layer GRU over [T, d]; returns all hidden states [T, H].

    Gate order is (reset, update, candidate): ``wx`` [d, 3H], ``wh``
    [H, 3H], ``b`` [3H].  Candidate uses tanh(x Wn + (r*h) Un + bn);
    h_t = (1-z)*n + z*h_prev.
    """
    x, wx, wh, b = _as_tensor(x), _as_tensor(wx), _as_tensor(wh), _as_tensor(b)
    t_len, d = x.shape
    hidden3 = wx.shape[1]
    if hidden3 % 3 != 0 or wx.shape[0] != d:
        raise DimensionError(f"gru wx shape {wx.shape} incompatible with input dim {d}")
    h_dim = hidden3 // 3
    if wh.shape != (h_dim, hidden3) or b.shape != (hidden3,):
        raise DimensionError(f"gru weight shapes disagree: wx={wx.shape} wh={wh.shape} b={b.shape}")

    xw = x.data @ wx.data + b.data
    h_all = np.empty((t_len, h_dim))
    cache = []
    h = np.zeros(h_dim)
    for t in range(t_len):
        rz = xw[t][:2 * h_dim] + h @ wh.data[:, :2 * h_dim]
        r = _sigmoid(rz[:h_dim])
        z = _sigmoid(rz[h_dim:])
        rh = r * h
        n = np.tanh(xw[t][2 * h_dim:] + rh @ wh.data[:, 2 * h_dim:])
        h_prev = h
        h = (1.0 - z) * n + z * h_prev
        h_all[t] = h
        cache.append((r, z, n, h_prev, rh))
    out = _result(h_all, (x, wx, wh, b), "gru_sequence")

    def backward():
        dh_carry = np.zeros(h_dim)
        dz_all = np.empty((t_len, hidden3))
        drh_all = np.empty((t_len, h_dim))
        for t in range(t_len - 1, -1, -1):
            r, z, n, h_prev, rh = cache[t]
            dh = out.grad[t] + dh_carry
            dz_gate = dh * (h_prev - n)
            dn = dh * (1.0 - z)
            dh_prev = dh * z
            dn_pre = dn * (1.0 - n * n)
            drh = dn_pre @ wh.data[:, 2 * h_dim:].T
            dr = drh * h_prev
            dh_prev += drh * r
            dr_pre = dr * r * (1.0 - r)
            dzg_pre = dz_gate * z * (1.0 - z)
            dz = dz_all[t]
            dz[:h_dim] = dr_pre
            dz[h_dim:2 * h_dim] = dzg_pre
            dz[2 * h_dim:] = dn_pre
            drh_all[t] = rh
            dh_prev += np.concatenate([dr_pre, dzg_pre]) @ wh.data[:, :2 * h_dim].T
            dh_carry = dh_prev
        if x.requires_grad:
            x.grad += dz_all @ wx.data.T
        if wx.requires_grad:
            wx.grad += x.data.T @ dz_all
        if b.requires_grad:
            b.grad += dz_all.sum(axis=0)
        if wh.requires_grad:
            h_prev_all = np.vstack([np.zeros(h_dim), out.data[:-1]])
            wh.grad[:, :2 * h_dim] += h_prev_all.T @ dz_all[:, :2 * h_dim]
            wh.grad[:, 2 * h_dim:] += drh_all.T @ dz_all[:, 2 * h_dim:]

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(root: Tensor):
    """Populate grads of every node reachable from a scalar root.

    Gradients accumulate additively, so a node feeding several consumers
    receives the sum of all path gradients.
    """
    if root.data.size != 1:
        raise ValidationError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    root.grad += np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
