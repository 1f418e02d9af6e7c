"""Model-mismatch datasets, residual GPs and the GP-corrected vehicle model."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import gp
from .models import (DDELTA, DELTA, NX, OMEGA, PSI, VX, VY, X, Y, D, ModelKind, NominalModel,
                     Vehicle)

SPARSITY_TOL = 1e-4
N_MAX = 400
MIN_TRAIN_SAMPLES = 50
TS_TOL = 1e-12

FEATURE_NAMES = ("vx", "vy", "omega", "delta", "d", "ddelta")
ERROR_NAMES = ("vx", "vy", "omega")
ERROR_STATE_INDEX = (VX, VY, OMEGA)
_FEATURE_STATE = (VX, VY, OMEGA, DELTA)
_SPARSE_COMPONENTS = (X, Y, PSI, DELTA)


class SparsityError(ValueError):
    """Mismatch error is nonzero on a component the models share exactly."""


class Transition(NamedTuple):
    s: np.ndarray
    u: np.ndarray
    s_next: np.ndarray
    Ts: float


class MismatchSample(NamedTuple):
    features: np.ndarray
    errors: np.ndarray


def transitions_from_arrays(states, inputs, Ts: float) -> list[Transition]:
    """Pair ``states[k], inputs[k], states[k+1]``; ``states`` has one more row than ``inputs``."""
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if len(states) != len(inputs) + 1:
        raise ValueError("need exactly one more state than inputs")
    return [Transition(states[k], inputs[k], states[k + 1], Ts) for k in range(len(inputs))]


def features_of(s, u) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    return np.concatenate([s[..., _FEATURE_STATE], u[..., :2]], axis=-1)


@dataclass(frozen=True, eq=False)
class MismatchDataset:
    """Column-stacked mismatch samples: ``features`` (n, 6) and ``errors`` (n, 3)."""

    features: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        f = np.array(self.features, dtype=float).reshape(-1, 6)
        e = np.array(self.errors, dtype=float).reshape(-1, 3)
        if len(f) != len(e):
            raise ValueError("features and errors must have the same number of rows")
        f.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "errors", e)

    def __len__(self):
        return len(self.features)

    def samples(self) -> list[MismatchSample]:
        return [MismatchSample(f, e) for f, e in zip(self.features, self.errors)]

    @classmethod
    def from_samples(cls, samples: Iterable[MismatchSample]) -> "MismatchDataset":
        samples = list(samples)
        if not samples:
            return cls(np.empty((0, 6)), np.empty((0, 3)))
        return cls(np.stack([s.features for s in samples]), np.stack([s.errors for s in samples]))

    def union(self, other: "MismatchDataset") -> "MismatchDataset":
        return MismatchDataset(np.vstack([self.features, other.features]),
                               np.vstack([self.errors, other.errors]))

    def canonical(self, n_max: int = N_MAX) -> "MismatchDataset":
        """Drop exact duplicates, sort rows, and farthest-point subsample to ``n_max``."""
        rows = np.hstack([self.features, self.errors])
        rows = np.unique(rows, axis=0)
        # identical features with different errors: keep the first (lexicographic) row
        _, first = np.unique(rows[:, :6], axis=0, return_index=True)
        rows = rows[np.sort(first)]
        if len(rows) > n_max:
            rows = rows[np.sort(farthest_point_subsample(rows[:, :6], n_max))]
        return MismatchDataset(rows[:, :6], rows[:, 6:])


def farthest_point_subsample(points, k: int) -> np.ndarray:
    """Greedy farthest-point indices in standardized coordinates (deterministic)."""
    mean, scale = gp.standardization(points)
    Z = (np.asarray(points, dtype=float) - mean) / scale
    n = len(Z)
    if k >= n:
        return np.arange(n)
    first = int(np.argmax(np.einsum("ij,ij->i", Z, Z)))
    chosen = [first]
    dist = np.einsum("ij,ij->i", Z - Z[first], Z - Z[first])
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        diff = Z - Z[nxt]
        dist = np.minimum(dist, np.einsum("ij,ij->i", diff, diff))
    return np.asarray(chosen)


def _ekin(vehicle: Vehicle, Ts: float) -> NominalModel:
    return NominalModel(ModelKind.EXTENDED_KINEMATIC, vehicle, Ts)


def build_mismatch_dataset(log: Sequence[Transition], vehicle: Vehicle) -> MismatchDataset:
    """Single-step errors of the extended-kinematic model against logged transitions."""
    if len(log) == 0:
        raise ValueError("transition log is empty")
    Ts = log[0].Ts
    if any(abs(t.Ts - Ts) > TS_TOL for t in log):
        raise ValueError("all transitions must share the same Ts")
    S = np.stack([np.asarray(t.s, dtype=float) for t in log])
    U = np.stack([np.asarray(t.u, dtype=float) for t in log])
    S1 = np.stack([np.asarray(t.s_next, dtype=float) for t in log])
    pred = _ekin(vehicle, Ts).step(S, U)
    err = S1 - pred
    sparse = np.abs(err[:, _SPARSE_COMPONENTS])
    if sparse.size and sparse.max() > SPARSITY_TOL:
        k = int(np.argmax(sparse.max(axis=1)))
        raise SparsityError(
            f"mismatch error {sparse[k].max():.3g} on a pose/steering component at transition {k}; "
            "check Ts and log integrity")
    return MismatchDataset(features_of(S, U), err[:, ERROR_STATE_INDEX])


@dataclass(frozen=True, eq=False)
class CorrectedModel:
    """Extended-kinematic step plus GP mean corrections on ``(vx, vy, omega)``."""

    vehicle: Vehicle
    gps: tuple
    Ts: float

    def __post_init__(self):
        if len(self.gps) != 3:
            raise ValueError("CorrectedModel needs exactly three GPs")
        object.__setattr__(self, "gps", tuple(self.gps))
        object.__setattr__(self, "_nominal", _ekin(self.vehicle, self.Ts))

    @property
    def nominal(self) -> NominalModel:
        return self._nominal

    def check_Ts(self, Ts: float):
        if abs(Ts - self.Ts) > TS_TOL:
            raise ValueError(f"corrected model was trained at Ts={self.Ts}, used at Ts={Ts}")

    def step(self, s, u) -> np.ndarray:
        out = self._nominal.step(s, u)
        feats = features_of(s, u)
        flat = feats.reshape(-1, 6)
        for j, g in zip(ERROR_STATE_INDEX, self.gps):
            out[..., j] += g.mean(flat).reshape(feats.shape[:-1])
        return out

    def step_with_uncertainty(self, s, u):
        out = self._nominal.step(s, u)
        feats = features_of(s, u)
        flat = feats.reshape(-1, 6)
        sig = np.empty(feats.shape[:-1] + (3,))
        for c, (j, g) in enumerate(zip(ERROR_STATE_INDEX, self.gps)):
            mu, sd = g.predict_batch(flat)
            out[..., j] += mu.reshape(feats.shape[:-1])
            sig[..., c] = sd.reshape(feats.shape[:-1])
        return out, sig

    def linearize(self, s, u):
        """``(s_next, d s_next/d s, d s_next/d u)`` including analytic GP-mean gradients."""
        s_next, Sx, Su = self._nominal.linearize(s, u)
        feats = features_of(s, u)
        flat = feats.reshape(-1, 6)
        batch = feats.shape[:-1]
        for j, g in zip(ERROR_STATE_INDEX, self.gps):
            mu, grad = g.mean_and_gradient(flat)
            s_next[..., j] += mu.reshape(batch)
            grad = grad.reshape(batch + (6,))
            for f, col in enumerate(_FEATURE_STATE):
                Sx[..., j, col] += grad[..., f]
            Su[..., j, D] += grad[..., 4]
            Su[..., j, DDELTA] += grad[..., 5]
        return s_next, Sx, Su

    def rollout(self, s0, inputs) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=float)
        states = np.empty((len(inputs) + 1, NX))
        states[0] = s0
        for k, u in enumerate(inputs):
            states[k + 1] = self.step(states[k], u)
        return states

    def save(self, directory, extra: dict | None = None) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, g in zip(ERROR_NAMES, self.gps):
            p = directory / f"gp_{name}.gp"
            g.save(p)
            paths.append(p)
        meta = {"Ts": self.Ts, "vehicle": self.vehicle.name, **(extra or {})}
        p = directory / "corrected_model.json"
        p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        paths.append(p)
        return paths

    @classmethod
    def load(cls, directory, vehicle: Vehicle) -> "CorrectedModel":
        directory = Path(directory)
        meta = json.loads((directory / "corrected_model.json").read_text())
        if meta.get("vehicle") != vehicle.name:
            raise ValueError(f"model was trained for vehicle {meta.get('vehicle')!r}, not {vehicle.name!r}")
        gps = tuple(gp.GpModel.load(directory / f"gp_{n}.gp") for n in ERROR_NAMES)
        return cls(vehicle, gps, float(meta["Ts"]))


def corrected_step(m: CorrectedModel, s, u) -> np.ndarray:
    return m.step(s, u)


def corrected_step_with_uncertainty(m: CorrectedModel, s, u):
    return m.step_with_uncertainty(s, u)


@dataclass(frozen=True)
class TrainingReport:
    n_samples: int
    nlml: tuple
    nu: tuple
    lengthscales: tuple
    signal_variance: tuple
    noise_variance: tuple

    def to_dict(self) -> dict:
        gps = []
        for c, name in enumerate(ERROR_NAMES):
            gps.append({
                "target": name,
                "nlml": self.nlml[c],
                "nu": "inf" if self.nu[c] == math.inf else self.nu[c],
                "lengthscales": list(self.lengthscales[c]),
                "signal_variance": self.signal_variance[c],
                "noise_variance": self.noise_variance[c],
            })
        return {"n_samples": self.n_samples, "gps": gps}


def train_corrected_model(data: MismatchDataset, vehicle: Vehicle, Ts: float,
                          search: gp.GpSearchConfig | None = None, seed=0, *,
                          n_max: int = N_MAX):
    """Fit one GP per error component; returns ``(model, dataset_used, report)``."""
    used = data.canonical(n_max)
    if len(used) < MIN_TRAIN_SAMPLES:
        raise ValueError(f"need at least {MIN_TRAIN_SAMPLES} distinct samples, got {len(used)}")
    seeds = np.random.SeedSequence(seed).spawn(3)
    gps, reports = [], []
    for c in range(3):
        model, rep = gp.train_gp(used.features, used.errors[:, c], search, seeds[c])
        gps.append(model)
        reports.append(rep)
    report = TrainingReport(
        n_samples=len(used),
        nlml=tuple(float(r.nlml) for r in reports),
        nu=tuple(g.hyperparams.kernel.nu for g in gps),
        lengthscales=tuple(tuple(float(v) for v in g.hyperparams.kernel.lengthscales) for g in gps),
        signal_variance=tuple(float(g.hyperparams.kernel.signal_variance) for g in gps),
        noise_variance=tuple(float(g.hyperparams.noise_variance) for g in gps),
    )
    return CorrectedModel(vehicle, tuple(gps), Ts), used, report


def update_model(m: CorrectedModel, old: MismatchDataset, new_log: Sequence[Transition],
                 search: gp.GpSearchConfig | None = None, seed=0, *, n_max: int = N_MAX):
    """Re-train all three GPs from scratch on the old samples united with a new log."""
    if len(new_log) == 0:
        raise ValueError("new log is empty")
    m.check_Ts(new_log[0].Ts)
    fresh = build_mismatch_dataset(new_log, m.vehicle)
    return train_corrected_model(old.union(fresh), m.vehicle, m.Ts, search, seed, n_max=n_max)


def one_step_errors(model, log: Sequence[Transition]) -> np.ndarray:
    """Prediction error ``s_next - model.step(s, u)`` on ``(vx, vy, omega)`` for each transition."""
    S = np.stack([t.s for t in log])
    U = np.stack([t.u for t in log])
    S1 = np.stack([t.s_next for t in log])
    return (S1 - model.step(S, U))[:, ERROR_STATE_INDEX]
