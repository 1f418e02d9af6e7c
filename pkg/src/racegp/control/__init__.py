from .closed_loop import (ClosedLoopResult, LapTimeoutError, MpcController, OffTrackError,
                          PurePursuitController, make_plant, run_closed_loop, start_state)
from .mpc import MpcConfig, MpcSolution, TrackingMpc, project_inputs, solve_mpc
from .pure_pursuit import PurePursuitGains, pure_pursuit
from .reference import Reference, generate_reference

__all__ = [
    "ClosedLoopResult", "LapTimeoutError", "MpcConfig", "MpcController", "MpcSolution",
    "OffTrackError", "PurePursuitController", "PurePursuitGains", "Reference", "TrackingMpc",
    "generate_reference", "make_plant", "project_inputs", "pure_pursuit", "run_closed_loop",
    "solve_mpc", "start_state",
]
