"""Bayes-error and expected-error bounds for two-class Gaussian tasks, plus
Monte-Carlo harnesses that check them empirically.

Noise model for classifier outputs: ``f(c|x) = p(c|x) + beta_c + eta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtri

from . import _kernels

SQRT3 = math.sqrt(3.0)
Z99 = float(ndtri(0.995))  # two-sided 99% normal quantile


class SingularCovariance(ValueError):
    pass


class DegenerateBoundary(ValueError):
    pass


class NonPositiveTau(ValueError):
    pass


def _as_matrix(c, dim: int) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0:
        return c.reshape(1, 1) if dim == 1 else c * np.eye(dim)
    return c.reshape(dim, dim)


@dataclass
class GaussianTask:
    """Two Gaussian classes. Scalars are accepted for 1-D tasks (covariances as variances).

    ``gap`` overrides the gradient gap; it is required beyond one dimension.
    """
    mu1: np.ndarray
    mu2: np.ndarray
    cov1: np.ndarray
    cov2: np.ndarray
    p1: float = 0.5
    gap: float | None = None

    def __post_init__(self):
        self.mu1 = np.atleast_1d(np.asarray(self.mu1, dtype=np.float64))
        self.mu2 = np.atleast_1d(np.asarray(self.mu2, dtype=np.float64))
        if self.mu1.shape != self.mu2.shape or self.mu1.ndim != 1:
            raise ValueError("class means must be vectors of equal length")
        self.cov1 = _as_matrix(self.cov1, self.dim)
        self.cov2 = _as_matrix(self.cov2, self.dim)
        if not 0.0 <= self.p1 <= 1.0:
            raise ValueError(f"prior must lie in [0, 1], got {self.p1}")
        for c in (self.cov1, self.cov2):
            if not np.allclose(c, c.T):
                raise SingularCovariance("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mu1.shape[0]

    @property
    def p2(self) -> float:
        return 1.0 - self.p1

    @property
    def sigma(self) -> np.ndarray:
        return self.p1 * self.cov1 + self.p2 * self.cov2

    @property
    def delta(self) -> float:
        """Mahalanobis separation of the means under the pooled covariance."""
        diff = self.mu1 - self.mu2
        s = self.sigma
        if np.linalg.matrix_rank(s) < self.dim:
            raise SingularCovariance("pooled covariance is singular")
        try:
            sol = np.linalg.solve(s, diff)
        except np.linalg.LinAlgError as e:
            raise SingularCovariance(str(e)) from e
        return float(diff @ sol)

    # 1-D helpers -------------------------------------------------------
    def _check_1d(self):
        if self.dim != 1:
            raise ValueError("closed form only available for 1-D tasks")

    def log_ratio(self, x):
        """log P1 N1(x) - log P2 N2(x) for a 1-D task."""
        self._check_1d()
        m1, m2 = self.mu1[0], self.mu2[0]
        s1, s2 = self.cov1[0, 0], self.cov2[0, 0]
        x = np.asarray(x, dtype=np.float64)
        with np.errstate(divide="ignore"):
            lp = np.log(self.p1) - np.log(self.p2)
        return (lp - 0.5 * np.log(s1 / s2)
                - (x - m1) ** 2 / (2 * s1) + (x - m2) ** 2 / (2 * s2))

    def boundary(self) -> float:
        """Equal-posterior point x*; the root nearest the midpoint of the means."""
        self._check_1d()
        if self.p1 in (0.0, 1.0):
            raise DegenerateBoundary("a class has zero prior")
        m1, m2 = self.mu1[0], self.mu2[0]
        s1, s2 = self.cov1[0, 0], self.cov2[0, 0]
        a = -1.0 / (2 * s1) + 1.0 / (2 * s2)
        b = m1 / s1 - m2 / s2
        c = -m1 ** 2 / (2 * s1) + m2 ** 2 / (2 * s2) + math.log(self.p1 / self.p2) - 0.5 * math.log(s1 / s2)
        mid = 0.5 * (m1 + m2)
        if abs(a) < 1e-12 * max(abs(b), 1.0):
            if b == 0.0:
                raise DegenerateBoundary("identical class densities have no decision boundary")
            return -c / b
        disc = b * b - 4 * a * c
        if disc < 0:
            raise DegenerateBoundary("one class dominates everywhere")
        r = math.sqrt(disc)
        roots = ((-b + r) / (2 * a), (-b - r) / (2 * a))
        return min(roots, key=lambda x: abs(x - mid))

    @property
    def gradient_gap(self) -> float:
        """|d p(c1|x)/dx - d p(c2|x)/dx| at x*.

        p(c1|x) = sigmoid(r(x)) equals 1/2 at x*, so the gap is |r'(x*)| / 2.
        """
        if self.gap is not None:
            return float(self.gap)
        self._check_1d()
        x = self.boundary()
        m1, m2 = self.mu1[0], self.mu2[0]
        s1, s2 = self.cov1[0, 0], self.cov2[0, 0]
        return 0.5 * abs(-(x - m1) / s1 + (x - m2) / s2)

    def sample(self, n: int, rng: np.random.Generator):
        """Labels (0 for class 1, 1 for class 2) and features of shape (n, dim)."""
        labels = (rng.random(n) >= self.p1).astype(np.int64)
        x = np.empty((n, self.dim))
        for cls, mu, cov in ((0, self.mu1, self.cov1), (1, self.mu2, self.cov2)):
            idx = labels == cls
            k = int(idx.sum())
            if k:
                x[idx] = rng.multivariate_normal(mu, cov, size=k, method="cholesky")
        return labels, x

    def posterior1(self, x: np.ndarray) -> np.ndarray:
        """p(c1|x) computed from the true densities."""
        return 1.0 / (1.0 + np.exp(-self._log_ratio_nd(x)))

    def _log_ratio_nd(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        out = np.zeros(x.shape[0])
        for sign, p, mu, cov in ((1, self.p1, self.mu1, self.cov1), (-1, self.p2, self.mu2, self.cov2)):
            with np.errstate(divide="ignore"):
                lp = np.log(p)
            d = x - mu
            sol = np.linalg.solve(cov, d.T).T
            _, logdet = np.linalg.slogdet(cov)
            out += sign * (lp - 0.5 * logdet - 0.5 * np.einsum("ij,ij->i", d, sol))
        return out


@dataclass
class ErrorModel:
    """Noise variances of one classifier per class, class offsets and (optional) noise bound."""
    var_c1: float
    var_c2: float
    beta: tuple = (0.0, 0.0)
    tau: float | None = None

    def __post_init__(self):
        if self.var_c1 < 0 or self.var_c2 < 0:
            raise ValueError("noise variances must be non-negative")

    @classmethod
    def uniform(cls, tau: float, beta=(0.0, 0.0)) -> "ErrorModel":
        """Noise uniform on (-tau, tau): variance tau^2 / 3."""
        if tau <= 0:
            raise NonPositiveTau(f"tau must be positive, got {tau}")
        v = tau * tau / 3.0
        return cls(v, v, beta, tau)

    @classmethod
    def gaussian(cls, var: float, beta=(0.0, 0.0)) -> "ErrorModel":
        return cls(var, var, beta)


# ---------------------------------------------------------------- bounds

def bayes_bound(t: GaussianTask) -> float:
    """Upper bound on the Bayes error: 2 P1 P2 / (1 + P1 P2 delta)."""
    pp = t.p1 * t.p2
    if pp == 0.0:
        return 0.0
    return 2.0 * pp / (1.0 + pp * t.delta)


def _gap_of(t) -> float:
    gap = t.gradient_gap if isinstance(t, GaussianTask) else float(t)
    if not gap > 0.0:
        raise DegenerateBoundary(f"gradient gap must be positive, got {gap}")
    return gap


def expected_error_single(r_t: float, em: ErrorModel, t) -> float:
    """R_T + (var_c1 + var_c2) / (2 gap). ``t`` is a task or a gap value."""
    return r_t + (em.var_c1 + em.var_c2) / (2.0 * _gap_of(t))


def expected_error_ensemble(r_t: float, em_f: ErrorModel, em_g: ErrorModel, t) -> float:
    """R_T + (sum of the four variances) / (8 gap), for averaged logits."""
    total = em_f.var_c1 + em_f.var_c2 + em_g.var_c1 + em_g.var_c2
    return r_t + total / (8.0 * _gap_of(t))


def corollary_check(tau1: float, tau2: float) -> bool:
    """Does averaging provably help? True iff tau2 < sqrt(3) tau1 (strict)."""
    if tau1 <= 0 or tau2 <= 0:
        raise NonPositiveTau(f"tau values must be positive, got {tau1}, {tau2}")
    return tau2 < SQRT3 * tau1


def bound_gain(ratio: float, tau1: float = 1.0, r_t: float = 0.0, gap: float = 1.0) -> float:
    """single - ensemble bound under uniform noise with tau2 = ratio * tau1."""
    f = ErrorModel.uniform(tau1)
    g = ErrorModel.uniform(ratio * tau1)
    return expected_error_single(r_t, f, gap) - expected_error_ensemble(r_t, f, g, gap)


def sweep(ratios, tau1: float = 1.0, r_t: float = 0.0, gap: float = 1.0) -> list[dict]:
    rows = []
    f = ErrorModel.uniform(tau1)
    for r in ratios:
        g = ErrorModel.uniform(float(r) * tau1)
        single = expected_error_single(r_t, f, gap)
        ens = expected_error_ensemble(r_t, f, g, gap)
        rows.append({"ratio": float(r), "single": single, "ensemble": ens,
                     "improves": bool(ens < single), "corollary": corollary_check(tau1, float(r) * tau1)})
    return rows


def crossing(tau1: float = 1.0, r_t: float = 0.0, gap: float = 1.0, lo: float = 0.1, hi: float = 3.0) -> float:
    """Ratio tau2/tau1 where the ensemble bound meets the single-branch bound."""
    return brentq(lambda r: bound_gain(r, tau1, r_t, gap), lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)


# ---------------------------------------------------------------- Monte-Carlo

@dataclass
class Estimate:
    rate: float
    half_width: float  # 99% normal-approximation interval
    n: int

    @classmethod
    def from_count(cls, errors: int, n: int) -> "Estimate":
        p = errors / n
        return cls(p, Z99 * math.sqrt(p * (1.0 - p) / n), n)


def monte_carlo_bayes(t: GaussianTask, n: int, rng: np.random.Generator) -> Estimate:
    """Error rate of the exact-posterior classifier on ``n`` fresh samples."""
    if n < 1000:
        raise ValueError(f"use at least 1000 samples, got {n}")
    labels, x = t.sample(n, rng)
    pred = np.where(t._log_ratio_nd(x) >= 0.0, 0, 1)
    return Estimate.from_count(int(np.count_nonzero(pred != labels)), n)


@dataclass
class NoisyResult:
    f: Estimate
    g: Estimate
    ensemble: Estimate
    extra: dict = field(default_factory=dict)


def _noise(em: ErrorModel, kind: str, n: int, rng) -> np.ndarray:
    out = np.empty((n, 2))
    for c, var in enumerate((em.var_c1, em.var_c2)):
        if var == 0.0:
            out[:, c] = 0.0
        elif kind == "uniform":
            tau = math.sqrt(3.0 * var)
            out[:, c] = rng.uniform(-tau, tau, size=n)
        elif kind == "gaussian":
            out[:, c] = rng.normal(0.0, math.sqrt(var), size=n)
        else:
            raise ValueError(f"unknown noise kind {kind!r}")
    return out


def monte_carlo_noisy_classifiers(t: GaussianTask, em_f: ErrorModel, em_g: ErrorModel, n: int,
                                  rng: np.random.Generator, noise: str = "uniform") -> NoisyResult:
    """Errors of noisy f, noisy g and their average on one shared sample (common random numbers)."""
    labels, x = t.sample(n, rng)
    post1 = np.ascontiguousarray(t.posterior1(x))
    nf = _noise(em_f, noise, n, rng)
    ng = _noise(em_g, noise, n, rng)
    # the kernel adds a shared (beta1, beta2); per-branch offsets fold into the noise
    nf[:, 0] += em_f.beta[0]
    nf[:, 1] += em_f.beta[1]
    ng[:, 0] += em_g.beta[0]
    ng[:, 1] += em_g.beta[1]
    ef, eg, ee = _kernels.noisy_errors(labels, post1, nf, ng)
    return NoisyResult(Estimate.from_count(ef, n), Estimate.from_count(eg, n), Estimate.from_count(ee, n))


def random_task_1d(rng: np.random.Generator) -> GaussianTask:
    """A random two-class 1-D task used by the validation sweeps."""
    gap = rng.uniform(0.2, 4.0)
    return GaussianTask(0.0, gap, rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0), p1=float(rng.uniform(0.2, 0.8)))
