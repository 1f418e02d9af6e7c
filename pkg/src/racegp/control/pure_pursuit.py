"""Geometric pure-pursuit tracker used to collect training data."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..models import DELTA, PSI, VX, X, Y, Vehicle
from ..track import RacingLine


@dataclass(frozen=True)
class PurePursuitGains:
    lookahead: float
    speed_gain: float
    # fraction of the racing-line speed used as the speed target
    speed_scale: float = 1.0

    def __post_init__(self):
        if not self.lookahead > 0:
            raise ValueError("lookahead must be > 0")
        if not self.speed_gain >= 0:
            raise ValueError("speed_gain must be >= 0")
        if not self.speed_scale > 0:
            raise ValueError("speed_scale must be > 0")


def lookahead_curvature(rel_body, lookahead: float) -> float:
    """Curvature of the arc through a body-frame target point: 2 sin(alpha) / L."""
    alpha = math.atan2(rel_body[1], rel_body[0])
    return 2.0 * math.sin(alpha) / lookahead


def pure_pursuit(line: RacingLine, s, gains: PurePursuitGains, vehicle: Vehicle, Ts: float,
                 theta: float | None = None) -> np.ndarray:
    """One pure-pursuit command ``[d, ddelta]`` clamped to the vehicle limits."""
    s = np.asarray(s, dtype=float)
    lim = vehicle.limits
    pos = s[[X, Y]]
    if theta is None:
        theta = line.project(pos)
    target = line.position(theta + gains.lookahead)
    c, sn = math.cos(s[PSI]), math.sin(s[PSI])
    rel = target - pos
    rel_body = (c * rel[0] + sn * rel[1], -sn * rel[0] + c * rel[1])
    kappa = lookahead_curvature(rel_body, gains.lookahead)
    delta_t = math.atan(vehicle.params.wheelbase * kappa)
    delta_t = min(max(delta_t, lim.delta_min), lim.delta_max)
    ddelta = (delta_t - s[DELTA]) / Ts
    ddelta = min(max(ddelta, lim.ddelta_min), lim.ddelta_max)
    # keep the integrated steering angle inside its bounds
    ddelta = min(max(ddelta, (lim.delta_min - s[DELTA]) / Ts), (lim.delta_max - s[DELTA]) / Ts)
    v_ref = gains.speed_scale * float(line.speed(theta))
    d = gains.speed_gain * (v_ref - s[VX])
    d = min(max(d, lim.d_min), lim.d_max)
    return np.array([d, ddelta])
