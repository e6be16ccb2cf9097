"""A small dense-tensor engine with reverse-mode autodiff.

Every tensor is a 2-D float64 array. Operations build the tape implicitly:
each result keeps its parents and a pullback closure, and ``backward``
walks the recorded graph in reverse topological order, visiting every node
exactly once. Leaf tensors created with ``requires_grad=True`` accumulate
gradients in ``.grad``.
"""
from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

DEBUG = os.environ.get("ASBA_DEBUG", "").lower() in ("1", "true", "yes")


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class NotScalarLoss(ValueError):
    pass


class DetachedTensor(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_pullback", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _pullback=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._pullback = _pullback
        self.name = name
        if DEBUG and not np.all(np.isfinite(self.data)):
            raise NonFiniteValue(f"non-finite value in tensor {name or ''}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalarLoss(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, pullback):
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _pullback=pullback)


def _acc(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


def _check_index(index, n: int, op: str) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexOutOfRange(f"{op}: index outside [0, {n})")
    return index


# ---------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def pb(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)
    return _result(_kernels.matmul(a.data, b.data), (a, b), pb)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def pb(g):
        _acc(a, g)
        _acc(b, g)
    return _result(a.data + b.data, (a, b), pb)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def pb(g):
        _acc(a, g)
        _acc(b, -g)
    return _result(a.data - b.data, (a, b), pb)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: _acc(a, g * c))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def pb(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)
    return _result(a.data * b.data, (a, b), pb)


def add_bias_row(a: Tensor, bias: Tensor) -> Tensor:
    if bias.shape != (1, a.shape[1]):
        raise ShapeMismatch(f"add_bias_row: bias {bias.shape} for input {a.shape}")

    def pb(g):
        _acc(a, g)
        _acc(bias, g.sum(axis=0, keepdims=True))
    return _result(a.data + bias.data, (a, bias), pb)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: _acc(a, g * mask))


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _result(s, (a,), lambda g: _acc(a, g * s * (1.0 - s)))


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T.copy(), (a,), lambda g: _acc(a, g.T))


def row_mean(a: Tensor) -> Tensor:
    n = a.shape[0]
    if n == 0:
        raise ShapeMismatch("row_mean of empty tensor")
    return _result(a.data.mean(axis=0, keepdims=True), (a,),
                   lambda g: _acc(a, np.repeat(g / n, n, axis=0)))


def scale_rows(a: Tensor, factors) -> Tensor:
    """Multiply row i by the constant ``factors[i]``."""
    f = np.asarray(factors, dtype=np.float64).reshape(-1, 1)
    if f.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"scale_rows: {f.shape[0]} factors for {a.shape[0]} rows")
    return _result(a.data * f, (a,), lambda g: _acc(a, g * f))


def gather_rows(a: Tensor, index) -> Tensor:
    index = _check_index(index, a.shape[0], "gather_rows")
    n = a.shape[0]
    return _result(a.data[index], (a,),
                   lambda g: _acc(a, _kernels.segment_sum(g, index, n)))


embedding_lookup = gather_rows


def segment_sum(a: Tensor, index, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` output rows grouped by ``index``."""
    index = _check_index(index, n_segments, "segment_sum")
    if index.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"segment_sum: {index.shape[0]} indices for {a.shape[0]} rows")
    out = _kernels.segment_sum(a.data, index, n_segments)
    return _result(out, (a,), lambda g: _acc(a, g[index]))


def segment_mean(a: Tensor, index, n_segments: int) -> Tensor:
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    counts = np.bincount(index, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ShapeMismatch("segment_mean: empty segment")
    return scale_rows(segment_sum(a, index, n_segments), 1.0 / counts)


# the aggregation primitive under its descriptive name
row_max_gather_sum = segment_sum


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat_rows of nothing")
    cols = parts[0].shape[1]
    if any(p.shape[1] != cols for p in parts):
        raise ShapeMismatch("concat_rows: column counts differ")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def pb(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _acc(p, g[lo:hi])
    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), pb)


def dot(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "dot")

    def pb(g):
        _acc(a, g[0, 0] * b.data)
        _acc(b, g[0, 0] * a.data)
    return _result(np.array([[np.sum(a.data * b.data)]]), (a, b), pb)


def sum_all(a: Tensor) -> Tensor:
    return _result(np.array([[a.data.sum()]]), (a,),
                   lambda g: _acc(a, np.full(a.shape, g[0, 0])))


def softmax_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of per-row cross-entropy; default weights give the mean.

    Rows are stabilized by subtracting their max before exponentiation.
    """
    n, k = logits.shape
    targets = _check_index(targets, k, "softmax_cross_entropy")
    if targets.shape[0] != n:
        raise ShapeMismatch(f"softmax_cross_entropy: {targets.shape[0]} targets for {n} rows")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), targets]
    probs = np.exp(z - lse[:, None])

    def pb(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        _acc(logits, g[0, 0] * d * w[:, None])
    return _result(np.array([[np.dot(w, nll)]]), (logits,), pb)


def bce_with_logits(logits: Tensor, labels, weights) -> Tensor:
    """Weighted sum of elementwise binary cross-entropy with logits.

    Zero weights mask entries out (missing labels carry any finite value).
    """
    y = np.nan_to_num(np.asarray(labels, dtype=np.float64), nan=0.0)
    w = np.asarray(weights, dtype=np.float64)
    if y.shape != logits.shape or w.shape != logits.shape:
        raise ShapeMismatch(f"bce_with_logits: logits {logits.shape}, labels {y.shape}, weights {w.shape}")
    x = logits.data
    # log(1 + exp(-|x|)) + max(x, 0) - x*y
    loss = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0) - x * y
    s = _stable_sigmoid(x)
    return _result(np.array([[np.sum(w * loss)]]), (logits,),
                   lambda g: _acc(logits, g[0, 0] * w * (s - y)))


def squared_error(pred: Tensor, target, weights) -> Tensor:
    t = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    w = np.asarray(weights, dtype=np.float64).reshape(pred.shape)
    r = pred.data - t
    return _result(np.array([[np.sum(w * r * r)]]), (pred,),
                   lambda g: _acc(pred, g[0, 0] * 2.0 * w * r))


# ---------------------------------------------------------------- backward

def _topo_order(loss: Tensor) -> list[Tensor]:
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.shape != (1, 1):
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedTensor("loss does not depend on any tracked tensor")
    order = _topo_order(loss)
    interior = {id(t) for t in order if t._pullback is not None}
    for t in order:
        if id(t) in interior:
            t.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._pullback is not None and node.grad is not None:
            node._pullback(node.grad)
    for t in order:
        if id(t) in interior:
            t.grad = None


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Ordered collection of named, trainable tensors."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already defined")
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def tensors(self, names: Iterable[str] | None = None) -> list[Tensor]:
        names = self._params.keys() if names is None else names
        return [self._params[n] for n in names]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def snapshot(self) -> dict:
        return {n: t.data.copy() for n, t in self._params.items()}

    def restore(self, snap: dict):
        for n, arr in snap.items():
            self._params[n].data[...] = arr

    def load_matching(self, arrays: dict, prefixes: Sequence[str] = ("",)) -> list[str]:
        """Copy arrays whose name and shape match; returns the loaded names."""
        loaded = []
        for n, arr in arrays.items():
            if n in self._params and any(n.startswith(p) for p in prefixes):
                if self._params[n].shape == arr.shape:
                    self._params[n].data[...] = arr
                    loaded.append(n)
        return loaded


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-lim, lim, size=(rows, cols))


CHECKPOINT_MAGIC = "asba-checkpoint"


def save_checkpoint(path, arrays: dict, step: int = 0, meta: dict | None = None) -> None:
    """JSON header line (names, shapes, step, meta) then little-endian float64 payloads."""
    names = list(arrays)
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "step": int(step),
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, int, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        arrays = OrderedDict()
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated payload for {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, header["step"], header["meta"]


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    n_checked: int = 0
    n_excluded: int = 0
    failures: list = field(default_factory=list)
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return not self.failures


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      tol: float = 1e-5, floor: float = 1e-6, kink_tol: float = 1e-3,
                      max_entries: int | None = None, rng=None) -> GradCheckReport:
    """Compare tape gradients with central differences ``(f(p+h) - f(p-h)) / 2h``.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. An entry whose
    one-sided slopes disagree by more than ``kink_tol * max(1, |slope|)``
    sits on a non-differentiable point (e.g. a relu input at 0) and is
    excluded rather than failed. ``max_entries`` samples that many entries
    per tensor (with ``rng``) instead of checking all of them.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    f0 = loss.item()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    report = GradCheckReport(tol=tol)
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        idxs = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idxs = sorted(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                report.n_excluded += 1
                continue
            num = (fp - fm) / (2 * h)
            a = gflat[i]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tol:
                report.failures.append((p.name, int(i), float(a), float(num), float(rel)))
    for p in params:
        p.grad = None
    return report
