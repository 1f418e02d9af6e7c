"""Exact Gaussian-process regression with Matern kernels and a constant mean.

Inputs are standardized with training statistics before the kernel is
applied; lengthscales therefore live in standardized units. Hyperparameters
are chosen by minimizing the negative log marginal likelihood (NLML) with a
derivative-free multi-start coordinate search.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar

NU_GRID = (0.5, 1.5, 2.5, math.inf)

JITTER_START = 1e-10
JITTER_MAX = 1e-4

GP_MAGIC = "RACEGP-GP"
GP_FORMAT_VERSION = 1


class GpFitError(np.linalg.LinAlgError):
    """Kernel matrix could not be factorized even after jitter escalation."""


class GpFormatError(ValueError):
    pass


def _check_nu(nu):
    if nu not in NU_GRID:
        raise ValueError(f"nu must be one of {NU_GRID}, got {nu!r}")


@dataclass(frozen=True, eq=False)
class Kernel:
    """Anisotropic Matern kernel; ``nu = inf`` is the squared-exponential kernel."""

    nu: float
    lengthscales: np.ndarray
    signal_variance: float

    def __post_init__(self):
        _check_nu(self.nu)
        ls = np.array(self.lengthscales, dtype=float).reshape(-1)
        if np.any(~(ls > 0)) or not np.all(np.isfinite(ls)):
            raise ValueError("lengthscales must be positive and finite")
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be > 0")
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)

    def correlation_from_sqdist(self, r2):
        """Kernel correlation as a function of the squared scaled distance."""
        if self.nu == math.inf:
            return np.exp(-0.5 * r2)
        r = np.sqrt(np.maximum(r2, 0.0))
        if self.nu == 0.5:
            return np.exp(-r)
        if self.nu == 1.5:
            a = math.sqrt(3.0) * r
            return (1.0 + a) * np.exp(-a)
        a = math.sqrt(5.0) * r
        return (1.0 + a + a * a / 3.0) * np.exp(-a)

    def _grad_factor(self, r2):
        """``(1/r) dk/dr / signal_variance``; zero at r = 0 for nu = 1/2."""
        if self.nu == math.inf:
            return -np.exp(-0.5 * r2)
        r = np.sqrt(np.maximum(r2, 0.0))
        if self.nu == 0.5:
            with np.errstate(divide="ignore", invalid="ignore"):
                g = -np.exp(-r) / r
            return np.where(r > 0, g, 0.0)
        if self.nu == 1.5:
            return -3.0 * np.exp(-math.sqrt(3.0) * r)
        return -(5.0 / 3.0) * (1.0 + math.sqrt(5.0) * r) * np.exp(-math.sqrt(5.0) * r)

    def sqdist(self, A, B):
        A = np.atleast_2d(A) / self.lengthscales
        B = np.atleast_2d(B) / self.lengthscales
        diff = A[:, None, :] - B[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)

    def __call__(self, A, B):
        return self.signal_variance * self.correlation_from_sqdist(self.sqdist(A, B))


def kernel_eval(k: Kernel, a, b) -> float:
    return float(k(np.asarray(a, dtype=float)[None], np.asarray(b, dtype=float)[None])[0, 0])


@dataclass(frozen=True, eq=False)
class GpHyperparams:
    kernel: Kernel
    noise_variance: float
    mean_constant: float = 0.0

    def __post_init__(self):
        floor = JITTER_START * self.kernel.signal_variance
        if not self.noise_variance >= floor:
            raise ValueError(f"noise_variance must be >= {floor:g}")

    def to_dict(self) -> dict:
        return {
            "nu": "inf" if self.kernel.nu == math.inf else self.kernel.nu,
            "lengthscales": [float(v) for v in self.kernel.lengthscales],
            "signal_variance": float(self.kernel.signal_variance),
            "noise_variance": float(self.noise_variance),
            "mean_constant": float(self.mean_constant),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GpHyperparams":
        nu = math.inf if data["nu"] == "inf" else float(data["nu"])
        kernel = Kernel(nu, np.asarray(data["lengthscales"], dtype=float), float(data["signal_variance"]))
        return cls(kernel, float(data["noise_variance"]), float(data["mean_constant"]))


def _factorize(K, signal_variance):
    """Cholesky of ``K`` with escalating diagonal jitter; returns ``(L, jitter)``."""
    jitter = JITTER_START * signal_variance
    n = len(K)
    while jitter <= JITTER_MAX * signal_variance * (1 + 1e-9):
        try:
            L = linalg.cholesky(K + jitter * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                return L, jitter
        except linalg.LinAlgError:
            pass
        jitter *= 10.0
    raise GpFitError("kernel matrix is not positive definite after jitter escalation")


@dataclass(frozen=True, eq=False)
class GpModel:
    """A fitted GP: hyperparameters, standardization, data, and cached factorization."""

    hyperparams: GpHyperparams
    X: np.ndarray
    y: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def noise_total(self) -> float:
        return self.hyperparams.noise_variance + self.jitter

    @property
    def prior_variance(self) -> float:
        return self.hyperparams.kernel.signal_variance + self.noise_total

    def _z(self, Xq):
        return (np.atleast_2d(np.asarray(Xq, dtype=float)) - self.x_mean) / self.x_scale

    def _train_z(self):
        return (self.X - self.x_mean) / self.x_scale

    def mean(self, Xq) -> np.ndarray:
        Kq = self.hyperparams.kernel(self._z(Xq), self._train_z())
        return self.hyperparams.mean_constant + Kq @ self.alpha

    def predict_batch(self, Xq):
        """Posterior mean and standard deviation (observation noise included)."""
        kern = self.hyperparams.kernel
        Kq = kern(self._z(Xq), self._train_z())
        mu = self.hyperparams.mean_constant + Kq @ self.alpha
        v = linalg.solve_triangular(self.chol, Kq.T, lower=True, check_finite=False)
        var = kern.signal_variance - np.einsum("ij,ij->j", v, v) + self.noise_total
        return mu, np.sqrt(np.maximum(var, 0.0))

    def predict(self, x):
        mu, sigma = self.predict_batch(np.asarray(x, dtype=float)[None])
        return float(mu[0]), float(sigma[0])

    def mean_and_gradient(self, Xq):
        """Posterior mean and its gradient w.r.t. the raw (unstandardized) inputs."""
        kern = self.hyperparams.kernel
        Zq = self._z(Xq)
        Zt = self._train_z()
        r2 = kern.sqdist(Zq, Zt)
        Kq = kern.signal_variance * kern.correlation_from_sqdist(r2)
        mu = self.hyperparams.mean_constant + Kq @ self.alpha
        w = kern.signal_variance * kern._grad_factor(r2) * self.alpha[None, :]
        ls2 = kern.lengthscales**2
        # sum_i w_qi (z_q - z_i) / l^2
        grad_z = (Zq * w.sum(axis=1)[:, None] - w @ Zt) / ls2
        return mu, grad_z / self.x_scale

    def log_marginal_likelihood(self) -> float:
        r = self.y - self.hyperparams.mean_constant
        return -(0.5 * r @ self.alpha + np.sum(np.log(np.diag(self.chol)))
                 + 0.5 * self.n * math.log(2.0 * math.pi))

    # -- persistence ---------------------------------------------------

    def to_text(self) -> str:
        payload = {
            "version": GP_FORMAT_VERSION,
            "hyperparams": self.hyperparams.to_dict(),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "X": self.X.tolist(),
            "y": self.y.tolist(),
        }
        return f"{GP_MAGIC} {GP_FORMAT_VERSION}\n" + json.dumps(payload, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GpModel":
        head, _, body = text.partition("\n")
        parts = head.split()
        if len(parts) != 2 or parts[0] != GP_MAGIC:
            raise GpFormatError("missing GP file magic header")
        if int(parts[1]) != GP_FORMAT_VERSION:
            raise GpFormatError(f"unsupported GP format version {parts[1]}")
        data = json.loads(body)
        hp = GpHyperparams.from_dict(data["hyperparams"])
        return _fit_standardized(hp, np.asarray(data["X"], dtype=float), np.asarray(data["y"], dtype=float),
                                 np.asarray(data["x_mean"], dtype=float), np.asarray(data["x_scale"], dtype=float))

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "GpModel":
        return cls.from_text(Path(path).read_text())


def standardization(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


def _fit_standardized(hp, X, y, x_mean, x_scale):
    Z = (X - x_mean) / x_scale
    K = hp.kernel(Z, Z) + hp.noise_variance * np.eye(len(y))
    L, jitter = _factorize(K, hp.kernel.signal_variance)
    alpha = linalg.cho_solve((L, True), y - hp.mean_constant, check_finite=False)
    for arr in (X, y, x_mean, x_scale, L, alpha):
        arr.setflags(write=False)
    return GpModel(hp, X, y, x_mean, x_scale, L, alpha, jitter)


def fit(hp: GpHyperparams, X, y, *, standardize: bool = True) -> GpModel:
    X = np.array(np.atleast_2d(X), dtype=float)
    y = np.array(y, dtype=float).reshape(-1)
    if len(X) != len(y) or len(y) < 1:
        raise ValueError("X and y must have the same nonzero number of rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    if standardize:
        x_mean, x_scale = standardization(X)
    else:
        x_mean, x_scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    return _fit_standardized(hp, X, y, x_mean, x_scale)


def nlml(hp: GpHyperparams, X, y) -> float:
    """Negative log marginal likelihood of ``y`` under ``hp`` (no standardization)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    K = hp.kernel(X, X) + hp.noise_variance * np.eye(len(y))
    L, _ = _factorize(K, hp.kernel.signal_variance)
    r = y - hp.mean_constant
    a = linalg.cho_solve((L, True), r, check_finite=False)
    return float(0.5 * r @ a + np.sum(np.log(np.diag(L))) + 0.5 * len(y) * math.log(2.0 * math.pi))


# ---------------------------------------------------------------------------
# hyperparameter search


@dataclass(frozen=True)
class GpSearchConfig:
    n_restarts: int = 8
    n_sweeps: int = 2
    nu_grid: tuple = NU_GRID
    lengthscale_bounds: tuple = (0.05, 50.0)
    # relative to the target variance
    signal_bounds: tuple = (1e-3, 1e3)
    noise_bounds: tuple = (1e-6, 1.0)
    xatol: float = 0.05
    maxiter: int = 20
    standardize: bool = True

    def __post_init__(self):
        if self.n_restarts < 0 or self.n_sweeps < 1:
            raise ValueError("n_restarts must be >= 0 and n_sweeps >= 1")
        for nu in self.nu_grid:
            _check_nu(nu)


@dataclass
class SearchReport:
    nlml: float
    initial_nlml: list
    default_nlml: float
    n_evals: int


class _Objective:
    """NLML over log-parameters ``[log l_1..l_d, log sf2, log sn2]`` with cached distances."""

    def __init__(self, X, y, mean_constant):
        self.X = X
        self.r = y - mean_constant
        self.n, self.dim = X.shape
        diff = X[:, None, :] - X[None, :, :]
        self.sq = np.ascontiguousarray(np.moveaxis(diff * diff, 2, 0))
        self.evals = 0
        self._eye = np.eye(self.n)

    def __call__(self, nu, p):
        self.evals += 1
        ls2 = np.exp(2.0 * p[: self.dim])
        sf2 = math.exp(p[self.dim])
        sn2 = math.exp(p[self.dim + 1])
        r2 = np.tensordot(1.0 / ls2, self.sq, axes=1)
        kern = Kernel(nu, np.sqrt(ls2), sf2)
        K = sf2 * kern.correlation_from_sqdist(r2) + sn2 * self._eye
        try:
            L, _ = _factorize(K, sf2)
        except GpFitError:
            return math.inf
        a = linalg.cho_solve((L, True), self.r, check_finite=False)
        val = 0.5 * self.r @ a + np.sum(np.log(np.diag(L))) + 0.5 * self.n * math.log(2.0 * math.pi)
        return float(val) if np.isfinite(val) else math.inf


def optimize_hyperparams(X, y, cfg: GpSearchConfig | None = None, seed: int = 0,
                         *, return_report: bool = False):
    """Minimize the NLML over lengthscales, signal/noise variance and the smoothness grid.

    ``X`` is used as given (standardize beforehand if desired). The mean
    constant is fixed to the target mean. The default initialization is
    always one of the starting points, so the returned NLML never exceeds it.
    """
    cfg = cfg or GpSearchConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) < 10:
        raise ValueError("optimize_hyperparams needs at least 10 samples")
    n, dim = X.shape
    mean_constant = float(y.mean())
    yvar = max(float(y.var()), 1e-12)
    xstd = X.std(axis=0)
    xstd = np.where(xstd > 1e-12, xstd, 1.0)
    obj = _Objective(X, y, mean_constant)

    lo = np.concatenate([np.log(cfg.lengthscale_bounds[0] * xstd),
                         [math.log(cfg.signal_bounds[0] * yvar), math.log(cfg.noise_bounds[0] * yvar)]])
    hi = np.concatenate([np.log(cfg.lengthscale_bounds[1] * xstd),
                         [math.log(cfg.signal_bounds[1] * yvar), math.log(cfg.noise_bounds[1] * yvar)]])
    default = np.concatenate([np.log(xstd), [math.log(yvar), math.log(1e-2 * yvar)]])
    default_nu = math.inf if math.inf in cfg.nu_grid else cfg.nu_grid[-1]

    rng = np.random.default_rng(seed)
    starts = [(default_nu, default)]
    for _ in range(cfg.n_restarts):
        starts.append((cfg.nu_grid[rng.integers(len(cfg.nu_grid))], rng.uniform(lo, hi)))

    best = (math.inf, None, None)
    initial = []
    for nu, p in starts:
        p = p.copy()
        f = obj(nu, p)
        initial.append(f)
        for _ in range(cfg.n_sweeps):
            for nu_c in cfg.nu_grid:
                if nu_c != nu:
                    fc = obj(nu_c, p)
                    if fc < f:
                        nu, f = nu_c, fc
            for c in range(dim + 2):
                def line(v, c=c):
                    q = p.copy()
                    q[c] = v
                    return obj(nu, q)

                res = minimize_scalar(line, bounds=(lo[c], hi[c]), method="bounded",
                                      options={"xatol": cfg.xatol, "maxiter": cfg.maxiter})
                if res.fun < f:
                    p[c], f = res.x, float(res.fun)
        if f < best[0]:
            best = (f, nu, p.copy())

    if not np.isfinite(best[0]):
        raise GpFitError("hyperparameter search failed: every candidate hit a factorization failure")
    f, nu, p = best
    sf2 = math.exp(p[dim])
    sn2 = max(math.exp(p[dim + 1]), JITTER_START * sf2)
    hp = GpHyperparams(Kernel(nu, np.exp(p[:dim]), sf2), sn2, mean_constant)
    if return_report:
        return hp, SearchReport(f, initial, initial[0], obj.evals)
    return hp


def train_gp(X, y, cfg: GpSearchConfig | None = None, seed: int = 0):
    """Standardize, optimize hyperparameters and fit; returns ``(model, report)``."""
    cfg = cfg or GpSearchConfig()
    X = np.array(np.atleast_2d(X), dtype=float)
    y = np.array(y, dtype=float).reshape(-1)
    if cfg.standardize:
        x_mean, x_scale = standardization(X)
    else:
        x_mean, x_scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    hp, report = optimize_hyperparams((X - x_mean) / x_scale, y, cfg, seed, return_report=True)
    return _fit_standardized(hp, X, y, x_mean, x_scale), report
