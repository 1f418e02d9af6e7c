"""Single-track vehicle models and their discretization.

Three continuous-time models share one 7-dimensional state
``[x, y, psi, vx, vy, omega, delta]`` and one input ``[d, ddelta]``:

* ``KINEMATIC`` -- classic kinematic bicycle. The state slot ``vx`` carries the
  speed ``v``; ``vy`` and ``omega`` are not modelled and stay constant.
* ``EXTENDED_KINEMATIC`` -- kinematic bicycle that also propagates body-frame
  ``vy`` and ``omega`` so that it is directly comparable with the dynamic model.
* ``DYNAMIC`` -- dynamic bicycle with Pacejka lateral tire forces.

All functions are vectorized over leading batch dimensions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

# state indices
X, Y, PSI, VX, VY, OMEGA, DELTA = range(7)
# input indices
D, DDELTA = range(2)

NX = 7
NU = 2
STATE_NAMES = ("x", "y", "psi", "vx", "vy", "omega", "delta")
INPUT_NAMES = ("d", "ddelta")

# below this |vx| the Pacejka slip angles are not evaluated
VX_EPS = 0.1

_VEL = slice(3, 7)


class LowSpeedError(ValueError):
    """Raised when tire slip angles are requested at |vx| < VX_EPS."""


class IntegrationError(FloatingPointError):
    """Raised when a discrete step produces non-finite values."""


class ModelKind(enum.Enum):
    KINEMATIC = "kinematic"
    EXTENDED_KINEMATIC = "extended_kinematic"
    DYNAMIC = "dynamic"


class State(NamedTuple):
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0
    delta: float = 0.0

    def array(self) -> np.ndarray:
        return np.array(self, dtype=float)


class Input(NamedTuple):
    d: float = 0.0
    ddelta: float = 0.0

    def array(self) -> np.ndarray:
        return np.array(self, dtype=float)


def _require_positive(obj, names):
    for name in names:
        value = getattr(obj, name)
        if not (np.isfinite(value) and value > 0):
            raise ValueError(f"{type(obj).__name__}.{name} must be > 0, got {value!r}")


@dataclass(frozen=True)
class VehicleParams:
    m: float
    Iz: float
    lf: float
    lr: float

    def __post_init__(self):
        _require_positive(self, ("m", "Iz", "lf", "lr"))

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr


@dataclass(frozen=True)
class TireParams:
    Bf: float
    Cf: float
    Df: float
    Br: float
    Cr_tire: float
    Dr: float

    def __post_init__(self):
        _require_positive(self, ("Bf", "Cf", "Df", "Br", "Cr_tire", "Dr"))


@dataclass(frozen=True)
class DriveParams:
    Cm1: float
    Cm2: float
    Croll: float
    Cd: float

    def __post_init__(self):
        if not self.Cm1 > 0:
            raise ValueError(f"DriveParams.Cm1 must be > 0, got {self.Cm1!r}")
        for name in ("Cm2", "Croll", "Cd"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"DriveParams.{name} must be >= 0")


@dataclass(frozen=True)
class Limits:
    """Actuator limits plus the physical width used for off-track margins."""

    d_min: float
    d_max: float
    delta_min: float
    delta_max: float
    ddelta_min: float
    ddelta_max: float
    width: float = 0.0

    def __post_init__(self):
        for lo, hi in (("d_min", "d_max"), ("delta_min", "delta_max"),
                       ("ddelta_min", "ddelta_max")):
            if not getattr(self, lo) < getattr(self, hi):
                raise ValueError(f"Limits.{lo} must be < Limits.{hi}")

    @property
    def u_min(self) -> np.ndarray:
        return np.array([self.d_min, self.ddelta_min])

    @property
    def u_max(self) -> np.ndarray:
        return np.array([self.d_max, self.ddelta_max])


@dataclass(frozen=True)
class Vehicle:
    """Complete parameter set of one vehicle configuration."""

    name: str
    params: VehicleParams
    tires: TireParams
    drive: DriveParams
    limits: Limits


# ---------------------------------------------------------------------------
# forces


def longitudinal_force_full(dp: DriveParams, vx, d):
    """Drivetrain force with rolling resistance and aerodynamic drag."""
    return (dp.Cm1 - dp.Cm2 * vx) * d - dp.Croll - dp.Cd * vx**2


def longitudinal_force_simplified(dp: DriveParams, vx, d):
    """Drivetrain force without resistance terms."""
    return (dp.Cm1 - dp.Cm2 * vx) * d


def slip_angles(vp: VehicleParams, s):
    s = np.asarray(s, dtype=float)
    vx, vy, omega, delta = s[..., VX], s[..., VY], s[..., OMEGA], s[..., DELTA]
    if np.any(np.abs(vx) < VX_EPS):
        raise LowSpeedError(f"slip angles undefined for |vx| < {VX_EPS}")
    alpha_f = delta - np.arctan((omega * vp.lf + vy) / vx)
    alpha_r = np.arctan((omega * vp.lr - vy) / vx)
    return alpha_f, alpha_r


def magic_formula(B, C, D, alpha):
    return D * np.sin(C * np.arctan(B * alpha))


def _magic_formula_slope(B, C, D, alpha):
    return D * np.cos(C * np.arctan(B * alpha)) * C * B / (1.0 + (B * alpha) ** 2)


def pacejka_lateral_forces(tp: TireParams, vp: VehicleParams, s):
    """Front and rear lateral tire forces ``(Ffy, Fry)`` in N."""
    alpha_f, alpha_r = slip_angles(vp, s)
    return (magic_formula(tp.Bf, tp.Cf, tp.Df, alpha_f),
            magic_formula(tp.Br, tp.Cr_tire, tp.Dr, alpha_r))


# ---------------------------------------------------------------------------
# continuous-time right-hand sides with Jacobians


def _pose_rates(s, f, A):
    """Shared body-to-world kinematics for the ext. kinematic / dynamic models."""
    psi, vx, vy, omega = s[..., PSI], s[..., VX], s[..., VY], s[..., OMEGA]
    c, sn = np.cos(psi), np.sin(psi)
    f[..., X] = vx * c - vy * sn
    f[..., Y] = vx * sn + vy * c
    f[..., PSI] = omega
    if A is not None:
        A[..., X, PSI] = -vx * sn - vy * c
        A[..., X, VX] = c
        A[..., X, VY] = -sn
        A[..., Y, PSI] = vx * c - vy * sn
        A[..., Y, VX] = sn
        A[..., Y, VY] = c
        A[..., PSI, OMEGA] = 1.0


def _rhs_kinematic(vp, dp, s, u, jac):
    psi, v, delta = s[..., PSI], s[..., VX], s[..., DELTA]
    d, ddelta = u[..., D], u[..., DDELTA]
    L = vp.wheelbase
    ratio = vp.lr / L
    tan_d = np.tan(delta)
    beta = np.arctan(ratio * tan_d)
    heading = psi + beta
    ch, sh = np.cos(heading), np.sin(heading)
    sb = np.sin(beta)
    force = longitudinal_force_simplified(dp, v, d)

    f = np.zeros(np.broadcast_shapes(s.shape, u.shape[:-1] + (NX,)))
    f[..., X] = v * ch
    f[..., Y] = v * sh
    f[..., PSI] = v / vp.lr * sb
    f[..., VX] = force / vp.m
    f[..., DELTA] = ddelta
    if not jac:
        return f, None, None

    A = np.zeros(f.shape + (NX,))
    B = np.zeros(f.shape + (NU,))
    dbeta = ratio / np.cos(delta) ** 2 / (1.0 + (ratio * tan_d) ** 2)
    A[..., X, PSI] = -v * sh
    A[..., X, VX] = ch
    A[..., X, DELTA] = -v * sh * dbeta
    A[..., Y, PSI] = v * ch
    A[..., Y, VX] = sh
    A[..., Y, DELTA] = v * ch * dbeta
    A[..., PSI, VX] = sb / vp.lr
    A[..., PSI, DELTA] = v / vp.lr * np.cos(beta) * dbeta
    A[..., VX, VX] = -dp.Cm2 * d / vp.m
    B[..., VX, D] = (dp.Cm1 - dp.Cm2 * v) / vp.m
    B[..., DELTA, DDELTA] = 1.0
    return f, A, B


def _rhs_extended_kinematic(vp, dp, s, u, jac):
    vx, delta = s[..., VX], s[..., DELTA]
    d, ddelta = u[..., D], u[..., DDELTA]
    L = vp.wheelbase
    force = longitudinal_force_simplified(dp, vx, d)
    vx_dot = force / vp.m
    coupling = ddelta * vx + delta * vx_dot

    f = np.zeros(np.broadcast_shapes(s.shape, u.shape[:-1] + (NX,)))
    A = np.zeros(f.shape + (NX,)) if jac else None
    _pose_rates(s, f, A)
    f[..., VX] = vx_dot
    f[..., VY] = vp.lr / L * coupling
    f[..., OMEGA] = coupling / L
    f[..., DELTA] = ddelta
    if not jac:
        return f, None, None

    B = np.zeros(f.shape + (NU,))
    dvxdot_dvx = -dp.Cm2 * d / vp.m
    dvxdot_dd = (dp.Cm1 - dp.Cm2 * vx) / vp.m
    dc_dvx = ddelta + delta * dvxdot_dvx
    dc_ddelta_state = vx_dot
    dc_dd = delta * dvxdot_dd
    dc_dddelta = vx
    A[..., VX, VX] = dvxdot_dvx
    for row, scale in ((VY, vp.lr / L), (OMEGA, 1.0 / L)):
        A[..., row, VX] = scale * dc_dvx
        A[..., row, DELTA] = scale * dc_ddelta_state
        B[..., row, D] = scale * dc_dd
        B[..., row, DDELTA] = scale * dc_dddelta
    B[..., VX, D] = dvxdot_dd
    B[..., DELTA, DDELTA] = 1.0
    return f, A, B


def _rhs_dynamic(vp, tp, dp, s, u, jac):
    vx, vy, omega, delta = s[..., VX], s[..., VY], s[..., OMEGA], s[..., DELTA]
    d, ddelta = u[..., D], u[..., DDELTA]
    m, Iz, lf, lr = vp.m, vp.Iz, vp.lf, vp.lr

    alpha_f, alpha_r = slip_angles(vp, s)
    Ffy = magic_formula(tp.Bf, tp.Cf, tp.Df, alpha_f)
    Fry = magic_formula(tp.Br, tp.Cr_tire, tp.Dr, alpha_r)
    Frx = longitudinal_force_full(dp, vx, d)
    cd, sd = np.cos(delta), np.sin(delta)

    f = np.zeros(np.broadcast_shapes(s.shape, u.shape[:-1] + (NX,)))
    A = np.zeros(f.shape + (NX,)) if jac else None
    _pose_rates(s, f, A)
    f[..., VX] = (Frx - Ffy * sd + m * vy * omega) / m
    f[..., VY] = (Fry + Ffy * cd - m * vx * omega) / m
    f[..., OMEGA] = (Ffy * lf * cd - Fry * lr) / Iz
    f[..., DELTA] = ddelta
    if not jac:
        return f, None, None

    B = np.zeros(f.shape + (NU,))
    kf = _magic_formula_slope(tp.Bf, tp.Cf, tp.Df, alpha_f)
    kr = _magic_formula_slope(tp.Br, tp.Cr_tire, tp.Dr, alpha_r)
    qf = (omega * lf + vy) / vx
    qr = (omega * lr - vy) / vx
    gf = 1.0 / (1.0 + qf**2)
    gr = 1.0 / (1.0 + qr**2)
    # gradients of the slip angles w.r.t. (vx, vy, omega, delta)
    daf = (gf * qf / vx, -gf / vx, -gf * lf / vx, np.ones_like(vx))
    dar = (-gr * qr / vx, -gr / vx, gr * lr / vx, np.zeros_like(vx))
    dFf = [kf * g for g in daf]
    dFr = [kr * g for g in dar]
    dFrx_dvx = -dp.Cm2 * d - 2.0 * dp.Cd * vx

    cols = (VX, VY, OMEGA, DELTA)
    for i, col in enumerate(cols):
        A[..., VX, col] = -dFf[i] * sd / m
        A[..., VY, col] = (dFr[i] + dFf[i] * cd) / m
        A[..., OMEGA, col] = (dFf[i] * lf * cd - dFr[i] * lr) / Iz
    A[..., VX, VX] += dFrx_dvx / m
    A[..., VX, VY] += omega
    A[..., VX, OMEGA] += vy
    A[..., VX, DELTA] += -Ffy * cd / m
    A[..., VY, VX] += -omega
    A[..., VY, OMEGA] += -vx
    A[..., VY, DELTA] += -Ffy * sd / m
    A[..., OMEGA, DELTA] += -Ffy * lf * sd / Iz
    B[..., VX, D] = (dp.Cm1 - dp.Cm2 * vx) / m
    B[..., DELTA, DDELTA] = 1.0
    return f, A, B


def _rhs(kind, vehicle, s, u, jac, low_speed_fallback):
    vp, tp, dp = vehicle.params, vehicle.tires, vehicle.drive
    if kind is ModelKind.KINEMATIC:
        return _rhs_kinematic(vp, dp, s, u, jac)
    if kind is ModelKind.EXTENDED_KINEMATIC:
        return _rhs_extended_kinematic(vp, dp, s, u, jac)
    if kind is not ModelKind.DYNAMIC:
        raise ValueError(f"unknown model kind {kind!r}")

    slow = np.abs(s[..., VX]) < VX_EPS
    if not np.any(slow):
        return _rhs_dynamic(vp, tp, dp, s, u, jac)
    if not low_speed_fallback:
        raise LowSpeedError(f"dynamic model undefined for |vx| < {VX_EPS}")
    if np.all(slow):
        return _rhs_extended_kinematic(vp, dp, s, u, jac)
    batch = np.broadcast_shapes(s.shape[:-1], u.shape[:-1])
    s_b = np.broadcast_to(s, batch + (NX,))
    u_b = np.broadcast_to(u, batch + (NU,))
    slow = np.broadcast_to(slow, batch)
    fast = ~slow
    out = [np.zeros(s_b.shape), np.zeros(s_b.shape + (NX,)), np.zeros(s_b.shape + (NU,))]
    for mask, res in ((fast, _rhs_dynamic(vp, tp, dp, s_b[fast], u_b[fast], jac)),
                      (slow, _rhs_extended_kinematic(vp, dp, s_b[slow], u_b[slow], jac))):
        for buf, val in zip(out, res):
            if val is not None:
                buf[mask] = val
    return out[0], (out[1] if jac else None), (out[2] if jac else None)


def derivative(kind: ModelKind, vehicle: Vehicle, s, u, *, low_speed_fallback=False):
    """Continuous-time state derivative of the selected model.

    The dynamic model raises :class:`LowSpeedError` when ``|vx| < VX_EPS``
    unless ``low_speed_fallback`` is set, in which case those states are
    propagated with the extended kinematic model instead.
    """
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    return _rhs(kind, vehicle, s, u, False, low_speed_fallback)[0]


def derivative_jacobian(kind: ModelKind, vehicle: Vehicle, s, u, *, low_speed_fallback=False):
    """Return ``(f, df/ds, df/du)``."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    return _rhs(kind, vehicle, s, u, True, low_speed_fallback)


# ---------------------------------------------------------------------------
# discretization


def _rk4(rhs, s, u, h, n, jac):
    """Classic RK4 over ``n`` sub-steps of length ``h``; optionally with sensitivities."""
    batch = s.shape[:-1]
    if jac:
        Sx = np.broadcast_to(np.eye(NX), batch + (NX, NX)).copy()
        Su = np.zeros(batch + (NX, NU))
    for _ in range(n):
        if not jac:
            k1 = rhs(s, u)[0]
            k2 = rhs(s + 0.5 * h * k1, u)[0]
            k3 = rhs(s + 0.5 * h * k2, u)[0]
            k4 = rhs(s + h * k3, u)[0]
            s = s + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            continue
        k1, A1, B1 = rhs(s, u)
        k2, A2, B2 = rhs(s + 0.5 * h * k1, u)
        k3, A3, B3 = rhs(s + 0.5 * h * k2, u)
        k4, A4, B4 = rhs(s + h * k3, u)
        # stage sensitivities w.r.t. the sub-step start state and the input
        K1x, K1u = A1, B1
        K2x = A2 + 0.5 * h * A2 @ K1x
        K2u = B2 + 0.5 * h * A2 @ K1u
        K3x = A3 + 0.5 * h * A3 @ K2x
        K3u = B3 + 0.5 * h * A3 @ K2u
        K4x = A4 + h * A4 @ K3x
        K4u = B4 + h * A4 @ K3u
        Phi = np.eye(NX) + h / 6.0 * (K1x + 2.0 * K2x + 2.0 * K3x + K4x)
        Gam = h / 6.0 * (K1u + 2.0 * K2u + 2.0 * K3u + K4u)
        s = s + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        Sx = Phi @ Sx
        Su = Phi @ Su + Gam
    if jac:
        return s, Sx, Su
    return s, None, None


def _split_step(rhs, s, u, Ts, substeps, jac):
    """Velocity block by RK4, pose by a midpoint-heading update from the start twist.

    The pose update only reads ``(psi, vx, vy, omega)`` (and ``delta`` for the
    kinematic model) at the start of the step, so two models that share the
    pose kinematics produce bitwise-identical ``x, y, psi, delta``.
    """
    f0, A0, B0 = rhs(s, u)
    s_mid = s.copy()
    s_mid[..., PSI] = s[..., PSI] + 0.5 * Ts * f0[..., PSI]
    fm, Am, Bm = rhs(s_mid, u)

    vel, Vx, Vu = _rk4(rhs, s, u, Ts / substeps, substeps, jac)
    out = vel.copy()
    out[..., X] = s[..., X] + Ts * fm[..., X]
    out[..., Y] = s[..., Y] + Ts * fm[..., Y]
    out[..., PSI] = s[..., PSI] + Ts * f0[..., PSI]
    if not jac:
        return out, None, None

    batch = s.shape[:-1]
    Sx = np.zeros(batch + (NX, NX))
    Su = np.zeros(batch + (NX, NU))
    Sx[..., _VEL, :] = Vx[..., _VEL, :]
    Su[..., _VEL, :] = Vu[..., _VEL, :]
    # d s_mid / d s = I + 0.5 Ts e_psi grad(psi_dot)
    dmid_x = 0.5 * Ts * A0[..., PSI:PSI + 1, :]
    dmid_u = 0.5 * Ts * B0[..., PSI:PSI + 1, :]
    for row in (X, Y):
        Sx[..., row, :] = Ts * (Am[..., row, :] + Am[..., row, PSI:PSI + 1] * dmid_x[..., 0, :])
        Sx[..., row, row] += 1.0
        Su[..., row, :] = Ts * (Bm[..., row, :] + Am[..., row, PSI:PSI + 1] * dmid_u[..., 0, :])
    Sx[..., PSI, :] = Ts * A0[..., PSI, :]
    Sx[..., PSI, PSI] += 1.0
    Su[..., PSI, :] = Ts * B0[..., PSI, :]
    return out, Sx, Su


INTEGRATORS = ("split", "rk4")


def _discrete(kind, vehicle, s, u, Ts, substeps, integrator, low_speed_fallback, jac):
    if not Ts > 0:
        raise ValueError(f"Ts must be > 0, got {Ts!r}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    s = np.array(s, dtype=float)
    u = np.asarray(u, dtype=float)

    def rhs(state, inp):
        return _rhs(kind, vehicle, state, inp, jac, low_speed_fallback)

    if integrator == "split":
        out, Sx, Su = _split_step(rhs, s, u, Ts, substeps, jac)
    elif integrator == "rk4":
        out, Sx, Su = _rk4(rhs, s, u, Ts / substeps, substeps, jac)
    else:
        raise ValueError(f"integrator must be one of {INTEGRATORS}")
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite state after integration step")
    return out, Sx, Su


def step(kind: ModelKind, vehicle: Vehicle, s, u, Ts: float, *, substeps: int = 1,
         integrator: str = "split", low_speed_fallback: bool = True) -> np.ndarray:
    """Advance the state by one control period ``Ts`` with a zero-order-hold input.

    ``integrator="split"`` (used throughout the pipeline) integrates
    ``(vx, vy, omega, delta)`` with RK4 and advances the pose from the twist at
    the start of the period. ``integrator="rk4"`` integrates all seven states
    with RK4.
    """
    return _discrete(kind, vehicle, s, u, Ts, substeps, integrator, low_speed_fallback, False)[0]


def step_jacobian(kind: ModelKind, vehicle: Vehicle, s, u, Ts: float, *, substeps: int = 1,
                  integrator: str = "split", low_speed_fallback: bool = True):
    """Return ``(s_next, d s_next / d s, d s_next / d u)``."""
    return _discrete(kind, vehicle, s, u, Ts, substeps, integrator, low_speed_fallback, True)


@dataclass(frozen=True)
class NominalModel:
    """A discrete-time model bound to its parameters; usable inside the MPC."""

    kind: ModelKind
    vehicle: Vehicle
    Ts: float
    substeps: int = 1
    integrator: str = "split"

    def step(self, s, u) -> np.ndarray:
        return step(self.kind, self.vehicle, s, u, self.Ts,
                    substeps=self.substeps, integrator=self.integrator)

    def linearize(self, s, u):
        return step_jacobian(self.kind, self.vehicle, s, u, self.Ts,
                             substeps=self.substeps, integrator=self.integrator)

    def rollout(self, s0, inputs) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=float)
        states = np.empty((len(inputs) + 1, NX))
        states[0] = s0
        for k, u in enumerate(inputs):
            states[k + 1] = self.step(states[k], u)
        return states


def with_drive(vehicle: Vehicle, **changes) -> Vehicle:
    return replace(vehicle, drive=replace(vehicle.drive, **changes))
