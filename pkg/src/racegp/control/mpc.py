"""Nonlinear reference-tracking MPC solved by sequential quadratic programming.

Single shooting: the predicted states are always an exact rollout of the
model at the current input iterate, so the model constraint holds to machine
precision. Each iteration linearizes the rollout, solves a dense convex QP in
the input step and the boundary slacks (Goldfarb-Idnani active set), and
accepts the step through a Levenberg-Marquardt trust-region test on the true
nonlinear cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import quadprog

from ..models import DELTA, NU, NX, X, Y, IntegrationError, Limits
from ..track import Track
from .reference import Reference

STATUSES = ("converged", "max_iter", "infeasible-relaxed")
SLACK_TOL = 1e-6


def _pd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
        raise ValueError(f"{name} must be a symmetric square matrix")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return M


@dataclass(frozen=True, eq=False)
class MpcConfig:
    limits: Limits
    N: int = 20
    Ts: float = 0.02
    Q: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0]))
    R: np.ndarray = field(default_factory=lambda: np.diag([0.01, 1e-4]))
    S: float = 100.0
    max_iter: int = 8
    tol: float = 1e-4
    boundary_margin: float = 0.0
    lm_init: float = 1e-3

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if not self.Ts > 0:
            raise ValueError("Ts must be > 0")
        object.__setattr__(self, "Q", _pd(self.Q, "Q"))
        object.__setattr__(self, "R", _pd(self.R, "R"))
        if not self.S > 0:
            raise ValueError("S must be > 0")
        if self.max_iter < 1 or not self.tol > 0:
            raise ValueError("max_iter must be >= 1 and tol > 0")
        if self.boundary_margin < 0:
            raise ValueError("boundary_margin must be >= 0")

    def with_slack(self, S: float) -> "MpcConfig":
        return replace(self, S=S)


@dataclass(frozen=True, eq=False)
class MpcSolution:
    inputs: np.ndarray
    predicted_states: np.ndarray
    slacks: np.ndarray
    cost: float
    solve_status: str
    iterations: int
    lm: float = 0.0


class _QpFailure(Exception):
    pass


def project_inputs(U, delta0: float, lim: Limits, Ts: float) -> np.ndarray:
    """Clip to the box bounds, then limit steering rates so the angle stays in bounds."""
    U = np.clip(U, lim.u_min, lim.u_max)
    delta = delta0
    for k in range(len(U)):
        lo = max(lim.ddelta_min, (lim.delta_min - delta) / Ts)
        hi = min(lim.ddelta_max, (lim.delta_max - delta) / Ts)
        U[k, 1] = min(max(U[k, 1], lo), max(lo, hi))
        delta = delta + Ts * U[k, 1]
    return U


class TrackingMpc:
    """Stateful receding-horizon solver holding the warm start between calls."""

    def __init__(self, model, cfg: MpcConfig):
        if abs(model.Ts - cfg.Ts) > 1e-12:
            raise ValueError(f"model Ts {model.Ts} differs from controller Ts {cfg.Ts}")
        self.model = model
        self.cfg = cfg
        lim = cfg.limits
        self._scale = np.tile(lim.u_max - lim.u_min, cfg.N)
        self._build_static()
        self.reset()

    def reset(self):
        self.warm: MpcSolution | None = None

    def _build_static(self):
        cfg, N = self.cfg, self.cfg.N
        n = NU * N
        # w = D u + c0 stacks (d_k - d_{k-1}, ddelta_k)
        Dm = np.eye(n)
        for k in range(1, N):
            Dm[2 * k, 2 * (k - 1)] = -1.0
        self._D = Dm
        self._Rb = np.kron(np.eye(N), cfg.R)
        self._Qb = np.kron(np.eye(N), cfg.Q)
        # cumulative steering: delta_{k+1} = delta_0 + Ts * sum_{j<=k} ddelta_j
        Lc = np.zeros((N, n))
        for k in range(N):
            Lc[k, 1:2 * k + 2:2] = cfg.Ts
        self._Lc = Lc

    # -- cost ------------------------------------------------------------

    def _input_cost(self, U, d_prev):
        w = self._D @ U.reshape(-1)
        w[0] -= d_prev
        return float(w @ self._Rb @ w)

    def _evaluate(self, x0, U, ref: Reference, slabs, d_prev):
        """Rollout, true cost and minimal slacks for an input sequence."""
        states = self.model.rollout(x0, U)
        if not np.all(np.isfinite(states)):
            raise IntegrationError("model rollout returned non-finite states")
        P = states[1:, [X, Y]]
        e = (P - ref.points).reshape(-1)
        slack = np.maximum(0.0, np.einsum("kij,kj->ki", slabs[0], P) - slabs[1])
        cost = float(e @ self._Qb @ e) + self._input_cost(U, d_prev) + self.cfg.S * float(np.sum(slack**2))
        return states, cost, slack

    def _slabs(self, track: Track, ref: Reference):
        A = np.empty((self.cfg.N, 2, 2))
        b = np.empty((self.cfg.N, 2))
        for k, th in enumerate(ref.theta):
            slab = track.boundary_slab(th)
            A[k] = slab.A
            b[k] = slab.b - self.cfg.boundary_margin
        return A, b

    # -- QP ----------------------------------------------------------------

    def _position_sensitivity(self, Sx, Su):
        N = self.cfg.N
        G = np.zeros((N, 2, NU * N))
        Pk = np.zeros((NX, NU * N))
        for k in range(N):
            Pk = Sx[k] @ Pk
            Pk[:, NU * k:NU * k + NU] += Su[k]
            G[k] = Pk[[X, Y]]
        return G

    def _qp(self, x0, U, states, slack, ref, slabs, d_prev, lm):
        cfg, N = self.cfg, self.cfg.N
        lim = cfg.limits
        n = NU * N
        _, Sx, Su = self.model.linearize(states[:-1], U)
        G = self._position_sensitivity(Sx, Su)
        Gf = G.reshape(2 * N, n)
        e0 = (states[1:, [X, Y]] - ref.points).reshape(-1)
        u0 = U.reshape(-1)
        w0 = self._D @ u0
        w0[0] -= d_prev

        Hu = 2.0 * (Gf.T @ self._Qb @ Gf + self._D.T @ self._Rb @ self._D)
        gu = 2.0 * (Gf.T @ self._Qb @ e0 + self._D.T @ self._Rb @ w0)
        Hu_lm = Hu + 2.0 * lm * np.diag(np.diag(Hu) + 1e-8 / self._scale**2)
        H = np.zeros((2 * n, 2 * n))
        H[:n, :n] = Hu_lm
        H[n:, n:] = 2.0 * cfg.S * np.eye(n)
        g = np.concatenate([gu, np.zeros(n)])

        A, b = slabs
        P0 = states[1:, [X, Y]]
        cons, rhs = [], []
        umin = np.tile(lim.u_min, N) - u0
        umax = np.tile(lim.u_max, N) - u0
        Iu = np.hstack([np.eye(n), np.zeros((n, n))])
        cons += [Iu, -Iu]
        rhs += [umin, -umax]
        delta_now = x0[DELTA] + self._Lc @ u0
        Ld = np.hstack([self._Lc, np.zeros((N, n))])
        cons += [Ld, -Ld]
        rhs += [np.minimum(lim.delta_min - delta_now, 0.0), -np.maximum(lim.delta_max - delta_now, 0.0)]
        # -A_k G_k du + eps_k >= A_k p_k - b_k
        AG = np.einsum("kij,kjn->kin", A, G).reshape(n, n)
        cons.append(np.hstack([-AG, np.eye(n)]))
        rhs.append((np.einsum("kij,kj->ki", A, P0) - b).reshape(-1))
        cons.append(np.hstack([np.zeros((n, n)), np.eye(n)]))
        rhs.append(np.zeros(n))
        C = np.vstack(cons)
        bq = np.concatenate(rhs)
        # quadprog: min 1/2 z'Hz - a'z  s.t.  C'z >= b
        try:
            z = quadprog.solve_qp(0.5 * (H + H.T), -g, C.T, bq, 0)[0]
        except ValueError as exc:
            raise _QpFailure(str(exc)) from exc
        du = z[:n]
        eps = z[n:]
        # model change relative to the current iterate (negative = predicted decrease)
        pred = 0.5 * du @ Hu @ du + gu @ du + cfg.S * float(eps @ eps - np.sum(slack**2))
        return du.reshape(N, NU), pred

    # -- solve -------------------------------------------------------------

    def initial_guess(self, x0, d_prev):
        N = self.cfg.N
        if self.warm is not None:
            U = np.vstack([self.warm.inputs[1:], self.warm.inputs[-1:]])
        else:
            U = np.zeros((N, NU))
            U[:, 0] = d_prev
        return project_inputs(U, float(x0[DELTA]), self.cfg.limits, self.cfg.Ts)

    def solve(self, x0, ref: Reference, track: Track, d_prev: float = 0.0, *, warm: bool = True) -> MpcSolution:
        cfg = self.cfg
        x0 = np.asarray(x0, dtype=float)
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 must be finite")
        if ref.N != cfg.N:
            raise ValueError(f"reference has {ref.N} points, horizon is {cfg.N}")
        slabs = self._slabs(track, ref)
        if warm and self.warm is not None:
            U = self.initial_guess(x0, d_prev)
            lm = max(self.warm.lm, cfg.lm_init)
        else:
            saved, self.warm = self.warm, None
            U = self.initial_guess(x0, d_prev)
            self.warm = saved
            lm = cfg.lm_init
        states, J, slack = self._evaluate(x0, U, ref, slabs, d_prev)
        status = "max_iter"
        it = 0
        while it < cfg.max_iter:
            it += 1
            try:
                du, pred = self._qp(x0, U, states, slack, ref, slabs, d_prev, lm)
            except _QpFailure:
                # inconsistent or ill-posed QP: increase damping and retry
                lm *= 10.0
                continue
            step_norm = float(np.max(np.abs(du.reshape(-1)) / self._scale))
            if step_norm < cfg.tol or -pred <= cfg.tol * 1e-2 * (1.0 + J):
                status = "converged"
                break
            U_new = project_inputs(U + du, float(x0[DELTA]), cfg.limits, cfg.Ts)
            states_new, J_new, slack_new = self._evaluate(x0, U_new, ref, slabs, d_prev)
            rho = (J - J_new) / max(-pred, 1e-300)
            if rho > 0.1:
                U, states, J, slack = U_new, states_new, J_new, slack_new
                lm = max(lm / 3.0, 1e-9) if rho > 0.5 else lm
            else:
                lm = min(lm * 4.0, 1e8)
        if status == "converged" and np.max(slack, initial=0.0) > SLACK_TOL:
            status = "infeasible-relaxed"
        sol = MpcSolution(U, states, slack, J, status, it, lm)
        self.warm = sol
        return sol


def solve_mpc(model, cfg: MpcConfig, x0, ref: Reference, track: Track, d_prev: float = 0.0,
              warm_start: MpcSolution | None = None) -> MpcSolution:
    """Stateless convenience wrapper around :class:`TrackingMpc`."""
    solver = TrackingMpc(model, cfg)
    solver.warm = warm_start
    return solver.solve(x0, ref, track, d_prev, warm=warm_start is not None)


def brute_force_cost(model, cfg: MpcConfig, x0, ref: Reference, track: Track, d_prev, grid):
    """Exhaustive minimum of the MPC cost over a grid of input sequences (testing aid)."""
    solver = TrackingMpc(model, cfg)
    slabs = solver._slabs(track, ref)
    best = (math.inf, None)
    for U in grid:
        _, J, _ = solver._evaluate(np.asarray(x0, dtype=float), np.asarray(U, dtype=float), ref, slabs, d_prev)
        if J < best[0]:
            best = (J, U)
    return best
