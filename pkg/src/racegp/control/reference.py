"""Time-parameterized reference along the racing line."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..models import X, Y
from ..track import RacingLine


@dataclass(frozen=True, eq=False)
class Reference:
    theta0: float
    theta: np.ndarray
    points: np.ndarray

    @property
    def N(self) -> int:
        return len(self.theta)


def generate_reference(line: RacingLine, s, N: int, Ts: float, theta0: float | None = None) -> Reference:
    """Advance ``theta_k = theta_{k-1} + Ts * v_r(theta_{k-1})`` from the projection of ``s``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    s = np.asarray(s, dtype=float)
    if theta0 is None:
        theta0 = line.project(s[[X, Y]])
    L = line.length
    theta = np.empty(N)
    th = float(theta0)
    for k in range(N):
        th = (th + Ts * float(line.speed(th))) % L
        theta[k] = th
    return Reference(float(theta0), theta, line.position(theta))
