"""Dense differentiable kernel: forward ops with paired exact backward ops.

Everything is float64 and deterministic. Each forward has an explicit
``*_backward`` companion mapping the output gradient to input gradients; the
model composes them by hand (there is no tape). ``grad_check`` is the
central-difference oracle used to validate every analytic gradient.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import (
    BadSegmentId,
    CorruptCheckpoint,
    LabelOutOfRange,
    NonFiniteValue,
    ShapeMismatch,
)


def _matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _finite(a: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteValue(where)
    return a


# --- parameter store ---------------------------------------------------------


class ParameterStore:
    """Named (value, grad) matrix pairs in insertion order."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._values:
            raise ShapeMismatch(f"parameter {name!r} already registered")
        v = _matrix(value, name).copy()
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)
        return v

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def total_size(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self._values.items():
            out.add(name, value)
        return out

    def to_json_dict(self) -> dict:
        return {
            name: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for name, v in self._values.items()
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ParameterStore":
        store = cls()
        for name, entry in d.items():
            try:
                shape = tuple(entry["shape"])
                data = np.array(entry["data"], dtype=np.float64).reshape(shape)
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptCheckpoint(f"parameter {name!r}: {exc}") from None
            store.add(name, data)
        return store

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def loads(cls, text: str) -> "ParameterStore":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorruptCheckpoint(str(exc)) from None
        return cls.from_json_dict(d)


# --- ops ----------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = _matrix(a, "a")
    b = _matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    return _finite(a @ b, "matmul")


def matmul_backward(d_out: np.ndarray, a: np.ndarray, b: np.ndarray):
    """dA = dOut @ B^T, dB = A^T @ dOut."""
    return d_out @ b.T, a.T @ d_out


def add_bias(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = _matrix(x, "x")
    b = _matrix(b, "b")
    if b.shape != (1, x.shape[1]):
        raise ShapeMismatch(f"bias shape {b.shape} does not broadcast over {x.shape}")
    return _finite(x + b, "add_bias")


def add_bias_backward(d_out: np.ndarray):
    """dX = dOut, dB = column sums of dOut."""
    return d_out, d_out.sum(axis=0, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return _finite(np.maximum(_matrix(x, "x"), 0.0), "relu")


def relu_backward(d_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return d_out * (x > 0.0)


def tanh_op(x: np.ndarray) -> np.ndarray:
    return _finite(np.tanh(_matrix(x, "x")), "tanh")


def tanh_backward(d_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return d_out * (1.0 - out * out)


def segment_mean(x: np.ndarray, segments: np.ndarray, n_segments: int) -> np.ndarray:
    """Per-segment arithmetic mean of rows; an empty segment yields a zero row."""
    x = _matrix(x, "x")
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (x.shape[0],):
        raise ShapeMismatch(f"segments shape {segments.shape} != ({x.shape[0]},)")
    if segments.size and (segments.min() < 0 or segments.max() >= n_segments):
        bad = int(segments.min()) if segments.min() < 0 else int(segments.max())
        raise BadSegmentId(bad, n_segments)
    counts = np.bincount(segments, minlength=n_segments).astype(np.float64)
    acc = np.zeros((n_segments, x.shape[1]))
    np.add.at(acc, segments, x)
    return _finite(acc / np.maximum(counts, 1.0)[:, None], "segment_mean")


def segment_mean_backward(d_out: np.ndarray, segments: np.ndarray, n_segments: int) -> np.ndarray:
    """dX[i] = dOut[seg(i)] / |seg(i)|."""
    counts = np.bincount(segments, minlength=n_segments).astype(np.float64)
    return (d_out / np.maximum(counts, 1.0)[:, None])[segments]


def gather_rows(x: np.ndarray, idx) -> np.ndarray:
    x = _matrix(x, "x")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeMismatch(f"gather index out of range for {x.shape[0]} rows")
    return x[idx]


def gather_rows_backward(d_out: np.ndarray, idx, n_rows: int) -> np.ndarray:
    """Scatter-add of dOut into a zero matrix; duplicate indices accumulate."""
    d_x = np.zeros((n_rows, d_out.shape[1]))
    np.add.at(d_x, np.asarray(idx, dtype=np.int64), d_out)
    return d_x


def scale_rows(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = _matrix(x, "x")
    g = _matrix(g, "g")
    if g.shape != (x.shape[0], 1):
        raise ShapeMismatch(f"row scale shape {g.shape} != ({x.shape[0]}, 1)")
    return _finite(x * g, "scale_rows")


def scale_rows_backward(d_out: np.ndarray, x: np.ndarray, g: np.ndarray):
    """dX = dOut * g (broadcast), dG[i] = <dOut[i], x[i]>."""
    return d_out * g, (d_out * x).sum(axis=1, keepdims=True)


def softmax_xent(
    logits: np.ndarray, labels, class_weights: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy with row-max-stabilized softmax.

    Returns (loss, probs). With ``class_weights`` the mean is weighted by the
    true-class weight of each row.
    """
    logits = _matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = int(labels.min()) if labels.min() < 0 else int(labels.max())
        raise LabelOutOfRange(bad, c)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    per_row = -log_probs[np.arange(n), labels]
    if class_weights is None:
        loss = float(per_row.mean())
    else:
        w = np.asarray(class_weights, dtype=np.float64)[labels]
        loss = float((w * per_row).sum() / w.sum())
    if not np.isfinite(loss):
        raise NonFiniteValue("softmax_xent")
    return loss, probs


def softmax_xent_backward(
    probs: np.ndarray, labels, class_weights: np.ndarray | None = None
) -> np.ndarray:
    """dLogits = (probs - onehot) / B (or the weighted analogue)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    if class_weights is None:
        return d / n
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    return d * (w / w.sum())[:, None]


# --- gradient checking ---------------------------------------------------------


def grad_check(f, store: ParameterStore, eps: float = 1e-5) -> float:
    """Max relative error of the store's analytic grads vs central differences.

    ``f(store)`` must return the scalar loss and populate the store's grads as
    a side effect. The relative error denominator is
    max(1, |analytic|, |numeric|) per coordinate.
    """
    store.zero_grads()
    f(store)
    analytic = {name: store.grad(name).copy() for name in store.names()}

    worst = 0.0
    for name in store.names():
        flat = store.value(name).ravel()
        a_flat = analytic[name].ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = f(store)  # probe losses only; grads are rezeroed below
            flat[k] = orig - eps
            f_minus = f(store)
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1.0, abs(a_flat[k]), abs(numeric))
            worst = max(worst, abs(a_flat[k] - numeric) / denom)
    store.zero_grads()
    return worst
