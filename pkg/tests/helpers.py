"""Shared test oracles.

The gradient oracle is central finite differences (h=1e-5, float64),
kept independent of the autodiff engine: it only ever calls a scalar
forward function and perturbs raw numpy arrays in place.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from notecoder.tensor import Tensor

FD_STEP = 1e-5


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. every entry of arr."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Relative L2 error between gradient vectors."""
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if den == 0:
        return 0.0
    return float(num / den)


def check_gradients(forward: Callable[[], Tensor], params: Sequence[Tensor],
                    tol: float = 1e-4, h: float = FD_STEP) -> float:
    """Backprop the scalar from forward() and compare against finite differences.

    Returns the worst relative error over all parameters; asserts < tol.
    """
    from notecoder.tensor import backward, zero_grads

    zero_grads(params)
    out = forward()
    backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        num = numerical_grad(lambda: float(forward().data), p.data, h)
        err = rel_error(ana, num)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch on shape {p.data.shape}: rel error {err:.3e}"
    return worst


def random_binary(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.random(shape) < 0.4).astype(np.float64)


def brute_force_micro_f1(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int, float]:
    """Loop-based TP/FP/FN counting plus F1; deliberately naive."""
    tp = fp = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p = bool(pred[i, j])
            t = bool(truth[i, j])
            if p and t:
                tp += 1
            elif p and not t:
                fp += 1
            elif not p and t:
                fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return tp, fp, fn, f1
