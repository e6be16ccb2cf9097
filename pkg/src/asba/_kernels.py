"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``ASBA_DISABLE_NUMBA=1`` to force the numpy implementations. Both
paths accumulate in the same sequential order and return bitwise-equal
results.
"""
from __future__ import annotations

import os

import numpy as np

_disabled = os.environ.get("ASBA_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def segment_sum_numpy(values: np.ndarray, index: np.ndarray, n_segments: int) -> np.ndarray:
    out = np.zeros((n_segments, values.shape[1]), dtype=np.float64)
    np.add.at(out, index, values)
    return out


def matmul_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-stable product: each output entry accumulates over k in order.

    Unlike BLAS, the value of a row never depends on the other rows or on
    the matrix size, which keeps per-row results reproducible bitwise.
    """
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for p in range(a.shape[1]):
        out += a[:, p:p + 1] * b[p:p + 1, :]
    return out


def noisy_errors_numpy(labels, post1, noise_f, noise_g, beta1, beta2):
    """Misclassification counts of f, g and their average.

    ``noise_*`` has shape (n, 2): additive noise on the class-1 and class-2
    scores. Scores are ``posterior + beta + noise``; ties go to class 1.
    """
    post2 = 1.0 - post1
    f1 = post1 + beta1 + noise_f[:, 0]
    f2 = post2 + beta2 + noise_f[:, 1]
    g1 = post1 + beta1 + noise_g[:, 0]
    g2 = post2 + beta2 + noise_g[:, 1]
    pred_f = np.where(f1 >= f2, 0, 1)
    pred_g = np.where(g1 >= g2, 0, 1)
    pred_e = np.where(0.5 * (f1 + g1) >= 0.5 * (f2 + g2), 0, 1)
    return (
        int(np.count_nonzero(pred_f != labels)),
        int(np.count_nonzero(pred_g != labels)),
        int(np.count_nonzero(pred_e != labels)),
    )


if HAVE_NUMBA:

    @njit(cache=True)
    def segment_sum_numba(values, index, n_segments):
        out = np.zeros((n_segments, values.shape[1]), dtype=np.float64)
        for i in range(values.shape[0]):
            s = index[i]
            for j in range(values.shape[1]):
                out[s, j] += values[i, j]
        return out

    @njit(cache=True)
    def matmul_numba(a, b):
        n, k = a.shape
        m = b.shape[1]
        out = np.zeros((n, m), dtype=np.float64)
        for i in range(n):
            for p in range(k):
                aip = a[i, p]
                for j in range(m):
                    out[i, j] += aip * b[p, j]
        return out

    @njit(cache=True)
    def _noisy_errors_numba(labels, post1, noise_f, noise_g, beta1, beta2):
        ef = 0
        eg = 0
        ee = 0
        for i in range(labels.shape[0]):
            p1 = post1[i]
            p2 = 1.0 - p1
            f1 = p1 + beta1 + noise_f[i, 0]
            f2 = p2 + beta2 + noise_f[i, 1]
            g1 = p1 + beta1 + noise_g[i, 0]
            g2 = p2 + beta2 + noise_g[i, 1]
            y = labels[i]
            if (0 if f1 >= f2 else 1) != y:
                ef += 1
            if (0 if g1 >= g2 else 1) != y:
                eg += 1
            if (0 if 0.5 * (f1 + g1) >= 0.5 * (f2 + g2) else 1) != y:
                ee += 1
        return ef, eg, ee

    def noisy_errors_numba(labels, post1, noise_f, noise_g, beta1, beta2):
        ef, eg, ee = _noisy_errors_numba(
            np.ascontiguousarray(labels, dtype=np.int64), post1, noise_f, noise_g,
            float(beta1), float(beta2),
        )
        return int(ef), int(eg), int(ee)

    segment_sum_impl = segment_sum_numba
    matmul_impl = matmul_numba
    noisy_errors_impl = noisy_errors_numba
else:
    segment_sum_numba = None
    matmul_numba = None
    noisy_errors_numba = None
    segment_sum_impl = segment_sum_numpy
    matmul_impl = matmul_numpy
    noisy_errors_impl = noisy_errors_numpy


def segment_sum(values: np.ndarray, index: np.ndarray, n_segments: int) -> np.ndarray:
    """Row ``i`` of ``values`` is added into output row ``index[i]``."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.int64)
    return segment_sum_impl(values, index, int(n_segments))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return matmul_impl(np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64))


def noisy_errors(labels, post1, noise_f, noise_g, beta1=0.0, beta2=0.0):
    return noisy_errors_impl(labels, post1, noise_f, noise_g, beta1, beta2)


def backend() -> str:
    return "numba" if segment_sum_impl is not segment_sum_numpy else "numpy"
