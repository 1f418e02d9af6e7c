"""Closed-loop simulation of a controller driving the plant around a track."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..mismatch import Transition, transitions_from_arrays
from ..models import NX, NU, D, ModelKind, NominalModel, Vehicle, X, Y
from ..track import RacingLine, Track
from .mpc import MpcConfig, MpcSolution, TrackingMpc
from .pure_pursuit import PurePursuitGains, pure_pursuit
from .reference import generate_reference

PLANT_SUBSTEPS = 4
LAP_FRACTION = 0.9


class OffTrackError(RuntimeError):
    """The vehicle left the track; ``result`` holds the log up to that point."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


class LapTimeoutError(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


def make_plant(vehicle: Vehicle, Ts: float, kind: ModelKind = ModelKind.DYNAMIC) -> NominalModel:
    return NominalModel(kind, vehicle, Ts, substeps=PLANT_SUBSTEPS)


class PurePursuitController:
    def __init__(self, line: RacingLine, gains: PurePursuitGains, vehicle: Vehicle, Ts: float):
        self.line, self.gains, self.vehicle, self.Ts = line, gains, vehicle, Ts

    def reset(self):
        pass

    def __call__(self, s, theta, d_prev):
        return pure_pursuit(self.line, s, self.gains, self.vehicle, self.Ts, theta), {}


class MpcController:
    def __init__(self, model, cfg: MpcConfig, line: RacingLine, track: Track):
        self.solver = TrackingMpc(model, cfg)
        self.cfg, self.line, self.track = cfg, line, track

    def reset(self):
        self.solver.reset()

    def __call__(self, s, theta, d_prev):
        ref = generate_reference(self.line, s, self.cfg.N, self.cfg.Ts, theta)
        t0 = time.perf_counter()
        sol: MpcSolution = self.solver.solve(s, ref, self.track, d_prev)
        info = {
            "solution": sol,
            "solve_time": time.perf_counter() - t0,
            "slack": float(np.max(sol.slacks, initial=0.0)),
        }
        return sol.inputs[0].copy(), info


@dataclass
class ClosedLoopResult:
    Ts: float
    states: np.ndarray
    inputs: np.ndarray
    lap_times: list = field(default_factory=list)
    lap_mean_slack: list = field(default_factory=list)
    lap_max_violation: list = field(default_factory=list)
    solutions: list = field(default_factory=list)
    solve_times: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return self.Ts * np.arange(len(self.states))

    def transitions(self) -> list[Transition]:
        return transitions_from_arrays(self.states, self.inputs, self.Ts)


def boundary_violation(track: Track, p) -> float:
    _, offset = track.frenet(p)
    return abs(offset) - 0.5 * track.width


def start_state(track: Track, v0: float) -> np.ndarray:
    s = np.zeros(NX)
    s[[X, Y]] = track.point(0.0)
    t = track.tangent(0.0)
    s[2] = math.atan2(t[1], t[0])
    s[3] = v0
    return s


def run_closed_loop(plant: NominalModel, controller, track: Track, line: RacingLine, laps: int, *,
                    v0: float = 0.0, max_lap_time: float = 60.0, keep_solutions: bool = False,
                    s0=None) -> ClosedLoopResult:
    """Drive ``laps`` laps from the start line, logging every transition.

    A lap ends at the first wrap of the arc-length position after at least
    90% of the track length has been covered since the previous lap ended.
    """
    if laps < 1:
        raise ValueError("laps must be >= 1")
    Ts = plant.Ts
    margin = plant.vehicle.limits.width
    s = start_state(track, v0) if s0 is None else np.array(s0, dtype=float)
    controller.reset()
    states = [s.copy()]
    inputs = []
    result = ClosedLoopResult(Ts, np.empty((0, NX)), np.empty((0, NU)))
    theta_prev = track.project(s[[X, Y]])
    progress = 0.0
    lap_start = 0
    lap_slacks, lap_viol = [], []
    d_prev = 0.0
    max_steps = int(math.ceil(laps * max_lap_time / Ts))

    def finish():
        result.states = np.asarray(states)
        result.inputs = np.asarray(inputs).reshape(-1, NU)
        return result

    for k in range(max_steps):
        u, info = controller(s, theta_prev, d_prev)
        s = plant.step(s, u)
        inputs.append(u)
        states.append(s.copy())
        d_prev = float(u[D])
        if "solution" in info:
            lap_slacks.append(info["slack"])
            result.solve_times.append(info["solve_time"])
            if keep_solutions:
                result.solutions.append(info["solution"])
        theta, offset = track.frenet(s[[X, Y]])
        viol = abs(offset) - 0.5 * track.width
        lap_viol.append(max(viol, 0.0))
        if viol > margin:
            raise OffTrackError(f"vehicle left the track at t={(k + 1) * Ts:.2f}s "
                                f"(violation {viol:.3f} m)", finish())
        dtheta = theta - theta_prev
        wrapped = dtheta < -0.5 * track.length
        if wrapped:
            dtheta += track.length
        elif dtheta > 0.5 * track.length:
            dtheta -= track.length
        progress += dtheta
        theta_prev = theta
        if wrapped and progress >= LAP_FRACTION * track.length:
            steps = k + 1 - lap_start
            result.lap_times.append(round(steps * Ts, 10))
            result.lap_mean_slack.append(float(np.mean(lap_slacks)) if lap_slacks else 0.0)
            result.lap_max_violation.append(float(np.max(lap_viol)))
            lap_start, progress = k + 1, 0.0
            lap_slacks, lap_viol = [], []
            if len(result.lap_times) == laps:
                return finish()
    raise LapTimeoutError(f"only {len(result.lap_times)} of {laps} laps completed", finish())
